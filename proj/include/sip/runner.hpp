#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "sip/config.hpp"
#include "sip/data.hpp"
#include "sip/hmc.hpp"
#include "sip/metrics.hpp"
#include "sip/posterior.hpp"
#include "sip/priors.hpp"
#include "sip/trainer.hpp"

namespace sip {

enum class ExperimentKind {
  kSyntheticBimodal,
  kSyntheticHeteroscedastic,
  kSyntheticPiecewise,
  kInducingPoints,
  kTabular,
  kHmcCompare,
  kGradientDiagnostic,
};

ExperimentKind experiment_kind_from_string(const std::string& s);  // throws
const char* to_string(ExperimentKind kind);

enum class PriorKind { kBnn, kNeuralSampler };

PriorKind prior_kind_from_string(const std::string& s);  // throws
const char* to_string(PriorKind kind);

/// Environment variable naming the default output root for relative paths.
inline constexpr const char* kOutputRootEnv = "SIP_OUTPUT_ROOT";

/// Everything one experiment needs, parseable from a sectioned key-value file
/// and re-emittable as an identical snapshot.
struct RunConfig {
  ExperimentKind experiment = ExperimentKind::kSyntheticBimodal;
  std::string method_tag = "sip";
  std::string dataset_tag;  // defaults per experiment / file stem
  std::string output_dir;   // resolved against the output root when relative
  bool emit_predictive = true;
  bool emit_prior_samples = false;
  bool emit_trajectory = false;
  int grid_points = 200;  // predictive-dump grid for 1-D inputs

  // data
  std::string data_source = "generator";  // "generator" | "csv"
  std::string data_path;
  bool data_header = false;
  int target_column = -1;
  int data_n = 1000;
  double train_fraction = 0.8;
  int split_index = 0;
  std::uint64_t data_seed = 0;
  bool standardize_data = false;

  // prior
  PriorKind prior_kind = PriorKind::kBnn;
  std::vector<int> prior_hidden = {50, 50};
  int prior_noise_dim = 10;   // neural-sampler only
  double prior_dropout = 0.0; // neural-sampler only

  // posterior
  int m = 50;
  int post_noise_dim = 100;
  std::vector<int> post_hidden = {50, 50};
  InducingInit inducing_init = InducingInit::kSubset;
  std::uint64_t init_seed = 1;  // parameter-initialization stream

  TrainingConfig train;

  // hamiltonian baseline
  HmcConfig hmc;
  int hmc_thinning = 20;
  std::string checkpoint_path;

  // gradient diagnostic
  int diag_select = 500;
  double diag_h = 1e-4;
  int diag_kl_samples = 2000;

  static RunConfig from_config(const ConfigMap& map);  // throws on bad values
  ConfigMap to_config() const;
  void validate() const;  // cross-field consistency; throws std::invalid_argument

  /// output_dir resolved against $SIP_OUTPUT_ROOT (or ".") when relative.
  std::string resolved_output_dir() const;
};

struct MetricsRecord {
  std::string method;
  std::string dataset;
  int split = 0;
  std::uint64_t seed = 0;
  double rmse = 0.0;
  double log_likelihood = 0.0;
  double crps = 0.0;
  double train_seconds = 0.0;
};

void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& records);
std::vector<MetricsRecord> read_metrics_csv(const std::string& path);

/// Columns x_star,component,mean,variance; x_star is the first input
/// coordinate for 1-D inputs and the point index otherwise.
void write_predictive_csv(const std::string& path, const Tensor& Xstar,
                          const PredictiveMixture& mix);

/// Columns x,sample,value for S function draws at a 1-D grid.
void write_prior_samples_csv(const std::string& path, const Tensor& xgrid,
                             const Tensor& samples);

/// One row per epoch: epoch followed by the M first-coordinate locations.
void write_trajectory_csv(const std::string& path,
                          const std::vector<std::pair<int, Tensor>>& rows);

/// Checkpoint: architecture header plus flat parameter vectors for the main,
/// disc_q and disc_p stores, as JSON.
void save_checkpoint(const std::string& path, const RunConfig& cfg, const SipModel& model);

/// A checkpointed model plus the sampler objects it borrows from.
struct LoadedModel {
  std::unique_ptr<ImplicitPrior> prior;
  std::unique_ptr<PosteriorSampler> posterior;
  SipModel model;
};

LoadedModel load_checkpoint(const std::string& path);

/// Per-metric average ranks with standard errors across (dataset, split) cells.
struct RankSummary {
  std::string method;
  double rmse_rank = 0.0, rmse_se = 0.0;
  double ll_rank = 0.0, ll_se = 0.0;
  double crps_rank = 0.0, crps_se = 0.0;
};

/// Midpoint ties; RMSE/CRPS rank ascending, log likelihood descending. Throws
/// listing every missing (method, dataset, split) cell.
std::vector<RankSummary> rank_records(const std::vector<MetricsRecord>& records);

void write_rank_csv(const std::string& path, const std::vector<RankSummary>& table);

/// One scatter point of the objective-gradient comparison: tape gradient of
/// the data term against a finite-difference gradient of the divergence with
/// the classifier retrained to a loss plateau after each perturbation.
struct GradDiagRow {
  std::string name;
  std::int64_t coord = 0;
  double data_grad = 0.0;
  double kl_grad = 0.0;
  bool flagged = false;  // classifier retraining aborted for this coordinate
};

std::vector<GradDiagRow> gradient_diagnostic(SipModel& model, const Dataset& data,
                                             const RunConfig& cfg);

void write_graddiag_csv(const std::string& path, const std::vector<GradDiagRow>& rows);

struct RunOutcome {
  int exit_code = 0;  // 0 success, 2 config error, 3 numerical abort
  std::string message;
  std::vector<std::string> artifacts;  // paths written, relative to output dir
};

/// Execute the configured experiment end to end and write its artifacts.
RunOutcome run_experiment(const RunConfig& cfg);

/// Evaluate a checkpoint on the configured dataset without training.
RunOutcome run_eval(const RunConfig& cfg);

}  // namespace sip
