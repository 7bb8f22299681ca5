#include "sip/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "json.hpp"
#include "sip/adversarial.hpp"
#include "sip/optim.hpp"
#include "sip/rng.hpp"
#include "sip/tape.hpp"

namespace sip {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  return out;
}

double now_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

}  // namespace

// ---------------------------------------------------------------------------
// Enum conversions

ExperimentKind experiment_kind_from_string(const std::string& s) {
  if (s == "synthetic-bimodal") return ExperimentKind::kSyntheticBimodal;
  if (s == "synthetic-heteroscedastic") return ExperimentKind::kSyntheticHeteroscedastic;
  if (s == "synthetic-piecewise") return ExperimentKind::kSyntheticPiecewise;
  if (s == "inducing-points") return ExperimentKind::kInducingPoints;
  if (s == "tabular") return ExperimentKind::kTabular;
  if (s == "hmc-compare") return ExperimentKind::kHmcCompare;
  if (s == "gradient-diagnostic") return ExperimentKind::kGradientDiagnostic;
  throw std::invalid_argument("unknown experiment kind: '" + s + "'");
}

const char* to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::kSyntheticBimodal: return "synthetic-bimodal";
    case ExperimentKind::kSyntheticHeteroscedastic: return "synthetic-heteroscedastic";
    case ExperimentKind::kSyntheticPiecewise: return "synthetic-piecewise";
    case ExperimentKind::kInducingPoints: return "inducing-points";
    case ExperimentKind::kTabular: return "tabular";
    case ExperimentKind::kHmcCompare: return "hmc-compare";
    case ExperimentKind::kGradientDiagnostic: return "gradient-diagnostic";
  }
  throw std::invalid_argument("unknown experiment kind enum value");
}

PriorKind prior_kind_from_string(const std::string& s) {
  if (s == "bnn") return PriorKind::kBnn;
  if (s == "neural-sampler" || s == "ns") return PriorKind::kNeuralSampler;
  throw std::invalid_argument("unknown prior kind: '" + s + "'");
}

const char* to_string(PriorKind kind) {
  switch (kind) {
    case PriorKind::kBnn: return "bnn";
    case PriorKind::kNeuralSampler: return "neural-sampler";
  }
  throw std::invalid_argument("unknown prior kind enum value");
}

// ---------------------------------------------------------------------------
// RunConfig

RunConfig RunConfig::from_config(const ConfigMap& map) {
  RunConfig cfg;
  cfg.experiment =
      experiment_kind_from_string(map.get_string("run.experiment", to_string(cfg.experiment)));
  const char* default_method =
      cfg.experiment == ExperimentKind::kHmcCompare ? "hmc" : "sip";
  cfg.method_tag = map.get_string("run.method", default_method);
  cfg.dataset_tag = map.get_string("run.dataset", cfg.dataset_tag);
  cfg.output_dir = map.get_string("run.output_dir", cfg.output_dir);
  cfg.emit_predictive = map.get_bool("run.emit_predictive", cfg.emit_predictive);
  cfg.emit_prior_samples = map.get_bool("run.emit_prior_samples", cfg.emit_prior_samples);
  cfg.emit_trajectory = map.get_bool("run.emit_trajectory", cfg.emit_trajectory);
  cfg.grid_points = map.get_int("run.grid_points", cfg.grid_points);

  cfg.data_source = map.get_string("data.source", cfg.data_source);
  cfg.data_path = map.get_string("data.path", cfg.data_path);
  cfg.data_header = map.get_bool("data.header", cfg.data_header);
  cfg.target_column = map.get_int("data.target_column", cfg.target_column);
  cfg.data_n = map.get_int("data.n", cfg.data_n);
  cfg.train_fraction = map.get_double("data.train_fraction", cfg.train_fraction);
  cfg.split_index = map.get_int("data.split_index", cfg.split_index);
  cfg.data_seed = map.get_uint64("data.seed", cfg.data_seed);
  cfg.standardize_data = map.get_bool("data.standardize", cfg.standardize_data);

  cfg.prior_kind = prior_kind_from_string(map.get_string("prior.kind", to_string(cfg.prior_kind)));
  cfg.prior_hidden = map.get_int_list("prior.hidden", cfg.prior_hidden);
  cfg.prior_noise_dim = map.get_int("prior.noise_dim", cfg.prior_noise_dim);
  cfg.prior_dropout = map.get_double("prior.dropout", cfg.prior_dropout);

  cfg.m = map.get_int("posterior.m", cfg.m);
  cfg.post_noise_dim = map.get_int("posterior.noise_dim", cfg.post_noise_dim);
  cfg.post_hidden = map.get_int_list("posterior.hidden", cfg.post_hidden);
  cfg.inducing_init =
      inducing_init_from_string(map.get_string("posterior.inducing_init", to_string(cfg.inducing_init)));
  cfg.init_seed = map.get_uint64("posterior.init_seed", cfg.init_seed);

  cfg.train.alpha = map.get_double("train.alpha", cfg.train.alpha);
  cfg.train.s_train = map.get_int("train.s_train", cfg.train.s_train);
  cfg.train.s_test = map.get_int("train.s_test", cfg.train.s_test);
  cfg.train.batch_size = map.get_int("train.batch_size", cfg.train.batch_size);
  cfg.train.epochs = map.get_int("train.epochs", cfg.train.epochs);
  cfg.train.warmup_fraction = map.get_double("train.warmup_fraction", cfg.train.warmup_fraction);
  cfg.train.lr_main = map.get_double("train.lr_main", cfg.train.lr_main);
  cfg.train.lr_disc = map.get_double("train.lr_disc", cfg.train.lr_disc);
  cfg.train.disc_steps = map.get_int("train.disc_steps", cfg.train.disc_steps);
  cfg.train.seed = map.get_uint64("train.seed", cfg.train.seed);
  cfg.train.adaptive_contrast = map.get_bool("train.adaptive_contrast", cfg.train.adaptive_contrast);
  cfg.train.freeze_posterior = map.get_bool("train.freeze_posterior", cfg.train.freeze_posterior);
  cfg.train.forward_kl_only = map.get_bool("train.forward_kl_only", cfg.train.forward_kl_only);
  cfg.train.jitter = map.get_double("train.jitter", cfg.train.jitter);
  cfg.train.init_sigma2 = map.get_double("train.init_sigma2", cfg.train.init_sigma2);

  cfg.hmc.leapfrog_steps = map.get_int("hmc.leapfrog_steps", cfg.hmc.leapfrog_steps);
  cfg.hmc.step_size = map.get_double("hmc.step_size", cfg.hmc.step_size);
  cfg.hmc.chain_length = map.get_int("hmc.chain_length", cfg.hmc.chain_length);
  cfg.hmc.burn_in = map.get_int("hmc.burn_in", cfg.hmc.burn_in);
  cfg.hmc.seed = map.get_uint64("hmc.seed", cfg.hmc.seed);
  cfg.hmc_thinning = map.get_int("hmc.thinning", cfg.hmc_thinning);
  cfg.checkpoint_path = map.get_string("hmc.checkpoint", cfg.checkpoint_path);

  cfg.diag_select = map.get_int("graddiag.select", cfg.diag_select);
  cfg.diag_h = map.get_double("graddiag.h", cfg.diag_h);
  cfg.diag_kl_samples = map.get_int("graddiag.kl_samples", cfg.diag_kl_samples);
  return cfg;
}

ConfigMap RunConfig::to_config() const {
  ConfigMap map;
  map.set("run.experiment", to_string(experiment));
  map.set("run.method", method_tag);
  map.set("run.dataset", dataset_tag);
  map.set("run.output_dir", output_dir);
  map.set_bool("run.emit_predictive", emit_predictive);
  map.set_bool("run.emit_prior_samples", emit_prior_samples);
  map.set_bool("run.emit_trajectory", emit_trajectory);
  map.set_int("run.grid_points", grid_points);

  map.set("data.source", data_source);
  map.set("data.path", data_path);
  map.set_bool("data.header", data_header);
  map.set_int("data.target_column", target_column);
  map.set_int("data.n", data_n);
  map.set_double("data.train_fraction", train_fraction);
  map.set_int("data.split_index", split_index);
  map.set_uint64("data.seed", data_seed);
  map.set_bool("data.standardize", standardize_data);

  map.set("prior.kind", to_string(prior_kind));
  map.set_int_list("prior.hidden", prior_hidden);
  map.set_int("prior.noise_dim", prior_noise_dim);
  map.set_double("prior.dropout", prior_dropout);

  map.set_int("posterior.m", m);
  map.set_int("posterior.noise_dim", post_noise_dim);
  map.set_int_list("posterior.hidden", post_hidden);
  map.set("posterior.inducing_init", to_string(inducing_init));
  map.set_uint64("posterior.init_seed", init_seed);

  map.set_double("train.alpha", train.alpha);
  map.set_int("train.s_train", train.s_train);
  map.set_int("train.s_test", train.s_test);
  map.set_int("train.batch_size", train.batch_size);
  map.set_int("train.epochs", train.epochs);
  map.set_double("train.warmup_fraction", train.warmup_fraction);
  map.set_double("train.lr_main", train.lr_main);
  map.set_double("train.lr_disc", train.lr_disc);
  map.set_int("train.disc_steps", train.disc_steps);
  map.set_uint64("train.seed", train.seed);
  map.set_bool("train.adaptive_contrast", train.adaptive_contrast);
  map.set_bool("train.freeze_posterior", train.freeze_posterior);
  map.set_bool("train.forward_kl_only", train.forward_kl_only);
  map.set_double("train.jitter", train.jitter);
  map.set_double("train.init_sigma2", train.init_sigma2);

  map.set_int("hmc.leapfrog_steps", hmc.leapfrog_steps);
  map.set_double("hmc.step_size", hmc.step_size);
  map.set_int("hmc.chain_length", hmc.chain_length);
  map.set_int("hmc.burn_in", hmc.burn_in);
  map.set_uint64("hmc.seed", hmc.seed);
  map.set_int("hmc.thinning", hmc_thinning);
  map.set("hmc.checkpoint", checkpoint_path);

  map.set_int("graddiag.select", diag_select);
  map.set_double("graddiag.h", diag_h);
  map.set_int("graddiag.kl_samples", diag_kl_samples);
  return map;
}

void RunConfig::validate() const {
  if (method_tag.empty()) throw std::invalid_argument("RunConfig: method tag must not be empty");
  if (grid_points < 2) throw std::invalid_argument("RunConfig: grid_points must be >= 2");
  if (data_source != "generator" && data_source != "csv")
    throw std::invalid_argument("RunConfig: data source must be 'generator' or 'csv', got '" +
                                data_source + "'");
  if (data_source == "csv" && data_path.empty())
    throw std::invalid_argument("RunConfig: csv data source requires data.path");
  if (data_source == "generator" && data_n < 2)
    throw std::invalid_argument("RunConfig: generator needs n >= 2");
  if (!(train_fraction > 0.0) || !(train_fraction < 1.0))
    throw std::invalid_argument("RunConfig: train_fraction must lie in (0, 1)");
  if (split_index < 0) throw std::invalid_argument("RunConfig: split_index must be >= 0");
  if (m < 1) throw std::invalid_argument("RunConfig: at least one inducing point is required");
  if (post_noise_dim < 1 || (prior_kind == PriorKind::kNeuralSampler && prior_noise_dim < 1))
    throw std::invalid_argument("RunConfig: noise dimensions must be positive");
  if (prior_hidden.empty() || post_hidden.empty())
    throw std::invalid_argument("RunConfig: hidden layer lists must not be empty");
  for (int w : prior_hidden)
    if (w < 1) throw std::invalid_argument("RunConfig: prior hidden widths must be positive");
  for (int w : post_hidden)
    if (w < 1) throw std::invalid_argument("RunConfig: posterior hidden widths must be positive");
  if (!(prior_dropout >= 0.0) || prior_dropout >= 1.0)
    throw std::invalid_argument("RunConfig: dropout rate must lie in [0, 1)");

  const bool synthetic = experiment == ExperimentKind::kSyntheticBimodal ||
                         experiment == ExperimentKind::kSyntheticHeteroscedastic ||
                         experiment == ExperimentKind::kSyntheticPiecewise;
  if (synthetic && data_source != "generator")
    throw std::invalid_argument("RunConfig: synthetic experiments use the generator data source");
  if ((experiment == ExperimentKind::kInducingPoints || experiment == ExperimentKind::kTabular) &&
      data_source != "csv")
    throw std::invalid_argument("RunConfig: this experiment reads its dataset from a csv file");
  if (experiment == ExperimentKind::kHmcCompare) {
    if (checkpoint_path.empty())
      throw std::invalid_argument("RunConfig: hmc-compare requires hmc.checkpoint");
    if (hmc_thinning < 1) throw std::invalid_argument("RunConfig: hmc thinning must be >= 1");
    hmc.validate();
  }
  if (experiment == ExperimentKind::kGradientDiagnostic) {
    if (diag_select < 1)
      throw std::invalid_argument("RunConfig: graddiag.select must be positive");
    if (!(diag_h > 0.0)) throw std::invalid_argument("RunConfig: graddiag.h must be positive");
    if (diag_kl_samples < 2)
      throw std::invalid_argument("RunConfig: graddiag.kl_samples must be >= 2");
  }
  train.validate(-1);
}

std::string RunConfig::resolved_output_dir() const {
  fs::path p = output_dir.empty() ? fs::path("run") : fs::path(output_dir);
  if (p.is_absolute()) return p.string();
  const char* root = std::getenv(kOutputRootEnv);
  if (root != nullptr && *root != '\0') return (fs::path(root) / p).string();
  return p.string();
}

// ---------------------------------------------------------------------------
// CSV artifacts

void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& records) {
  std::ofstream out = open_out(path);
  out << "method,dataset,split,seed,rmse,log_likelihood,crps,train_seconds\n";
  for (const MetricsRecord& r : records) {
    for (double v : {r.rmse, r.log_likelihood, r.crps, r.train_seconds})
      if (!std::isfinite(v))
        throw std::invalid_argument("write_metrics_csv: non-finite metric for method '" +
                                    r.method + "'");
    out << r.method << ',' << r.dataset << ',' << r.split << ',' << r.seed << ','
        << fmt(r.rmse) << ',' << fmt(r.log_likelihood) << ',' << fmt(r.crps) << ','
        << fmt(r.train_seconds) << '\n';
  }
}

std::vector<MetricsRecord> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open metrics file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty metrics file: " + path);
  if (line != "method,dataset,split,seed,rmse,log_likelihood,crps,train_seconds")
    throw std::runtime_error("unexpected metrics header in " + path + ": " + line);
  std::vector<MetricsRecord> records;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 8)
      throw std::runtime_error("metrics row " + std::to_string(lineno) + " in " + path +
                               " has " + std::to_string(fields.size()) + " fields, expected 8");
    try {
      MetricsRecord r;
      r.method = fields[0];
      r.dataset = fields[1];
      r.split = std::stoi(fields[2]);
      r.seed = std::stoull(fields[3]);
      r.rmse = std::stod(fields[4]);
      r.log_likelihood = std::stod(fields[5]);
      r.crps = std::stod(fields[6]);
      r.train_seconds = std::stod(fields[7]);
      records.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw std::runtime_error("metrics row " + std::to_string(lineno) + " in " + path +
                               " is malformed: " + e.what());
    }
  }
  return records;
}

void write_predictive_csv(const std::string& path, const Tensor& Xstar,
                          const PredictiveMixture& mix) {
  if (Xstar.rank() != 2 || Xstar.rows() != mix.points())
    throw std::invalid_argument("write_predictive_csv: Xstar rows must match mixture points");
  std::ofstream out = open_out(path);
  out << "x_star,component,mean,variance\n";
  const int s = mix.components();
  const int n = mix.points();
  const bool one_d = Xstar.cols() == 1;
  for (int i = 0; i < n; ++i) {
    const double x = one_d ? Xstar[i] : static_cast<double>(i);
    for (int k = 0; k < s; ++k)
      out << fmt(x) << ',' << k << ',' << fmt(mix.means[k * n + i]) << ','
          << fmt(mix.vars[k * n + i]) << '\n';
  }
}

void write_prior_samples_csv(const std::string& path, const Tensor& xgrid,
                             const Tensor& samples) {
  if (samples.rank() != 2)
    throw std::invalid_argument("write_prior_samples_csv: samples must be [S, N]");
  if (xgrid.numel() != samples.cols())
    throw std::invalid_argument("write_prior_samples_csv: grid size must match sample columns");
  std::ofstream out = open_out(path);
  out << "x,sample,value\n";
  const int s = samples.rows();
  const int n = samples.cols();
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < s; ++k)
      out << fmt(xgrid[i]) << ',' << k << ',' << fmt(samples[k * n + i]) << '\n';
}

void write_trajectory_csv(const std::string& path,
                          const std::vector<std::pair<int, Tensor>>& rows) {
  if (rows.empty()) throw std::invalid_argument("write_trajectory_csv: no rows");
  const std::int64_t m = rows.front().second.numel();
  std::ofstream out = open_out(path);
  out << "epoch";
  for (std::int64_t j = 0; j < m; ++j) out << ",m" << j;
  out << '\n';
  for (const auto& [epoch, locs] : rows) {
    if (locs.numel() != m)
      throw std::invalid_argument("write_trajectory_csv: inconsistent row width");
    out << epoch;
    for (std::int64_t j = 0; j < m; ++j) out << ',' << fmt(locs[j]);
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

json store_to_json(const ParamStore& store) {
  json names = json::array();
  json shapes = json::array();
  for (const auto& [name, tensor] : store.items()) {
    names.push_back(name);
    shapes.push_back(tensor.shape());
  }
  json block;
  block["names"] = names;
  block["shapes"] = shapes;
  block["flat"] = store.flatten();
  return block;
}

void store_from_json(ParamStore& store, const json& block) {
  const auto& names = block.at("names");
  const auto& shapes = block.at("shapes");
  if (names.size() != shapes.size())
    throw std::runtime_error("checkpoint: names/shapes length mismatch");
  for (std::size_t i = 0; i < names.size(); ++i) {
    Shape shape = shapes[i].get<Shape>();
    store.add(names[i].get<std::string>(), Tensor::zeros(std::move(shape)));
  }
  store.unflatten(block.at("flat").get<std::vector<double>>());
}

constexpr const char* kCheckpointFormat = "sip-checkpoint-v1";

}  // namespace

void save_checkpoint(const std::string& path, const RunConfig& cfg, const SipModel& model) {
  json j;
  j["format"] = kCheckpointFormat;
  j["prior"] = {{"kind", to_string(cfg.prior_kind)},
                {"input_dim", model.prior->input_dim()},
                {"hidden", cfg.prior_hidden},
                {"noise_dim", cfg.prior_noise_dim},
                {"dropout", cfg.prior_dropout}};
  j["posterior"] = {{"m", cfg.m},
                    {"noise_dim", cfg.post_noise_dim},
                    {"hidden", cfg.post_hidden}};
  j["sigma2"] = model.sigma2();
  j["params"] = store_to_json(model.params);
  j["disc_q"] = store_to_json(model.disc_q_params);
  j["disc_p"] = store_to_json(model.disc_p_params);
  std::ofstream out = open_out(path);
  out << j.dump(2) << '\n';
}

LoadedModel load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("checkpoint " + path + " is not valid JSON: " + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != kCheckpointFormat)
      throw std::runtime_error("unsupported checkpoint format '" +
                               j.at("format").get<std::string>() + "'");
    const json& pj = j.at("prior");
    const PriorKind kind = prior_kind_from_string(pj.at("kind").get<std::string>());
    const int input_dim = pj.at("input_dim").get<int>();
    const std::vector<int> prior_hidden = pj.at("hidden").get<std::vector<int>>();

    std::unique_ptr<ImplicitPrior> prior;
    if (kind == PriorKind::kBnn) {
      prior = std::make_unique<BnnPrior>(input_dim, prior_hidden);
    } else {
      prior = std::make_unique<NeuralSamplerPrior>(input_dim, pj.at("noise_dim").get<int>(),
                                                   prior_hidden, Activation::kTanh,
                                                   pj.at("dropout").get<double>());
    }
    const json& qj = j.at("posterior");
    const int m = qj.at("m").get<int>();
    auto posterior = std::make_unique<PosteriorSampler>(m, qj.at("noise_dim").get<int>(),
                                                        qj.at("hidden").get<std::vector<int>>());
    SipModel model{prior.get(),
                   posterior.get(),
                   ParamStore{},
                   Discriminator(m, {50, 50}, Activation::kLeakyRelu, "disc_q"),
                   ParamStore{},
                   Discriminator(m, {50, 50}, Activation::kLeakyRelu, "disc_p"),
                   ParamStore{}};
    store_from_json(model.params, j.at("params"));
    store_from_json(model.disc_q_params, j.at("disc_q"));
    store_from_json(model.disc_p_params, j.at("disc_p"));
    if (!model.params.contains("xbar") || !model.params.contains("noise.log_sigma2"))
      throw std::runtime_error("checkpoint is missing core parameters");
    return LoadedModel{std::move(prior), std::move(posterior), std::move(model)};
  } catch (const json::exception& e) {
    throw std::runtime_error("checkpoint " + path + " has an invalid layout: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Rank aggregation

namespace {

// Ranks in ascending order of `values` with midpoint ties: best value gets 1.
std::vector<double> midpoint_ranks(const std::vector<double>& values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double shared = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = shared;
    i = j + 1;
  }
  return ranks;
}

struct RankAccumulator {
  std::vector<double> rmse, ll, crps;
};

std::pair<double, double> mean_and_se(const std::vector<double>& xs) {
  const double n = static_cast<double>(xs.size());
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= n;
  if (xs.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / (n - 1.0)) / std::sqrt(n)};
}

}  // namespace

std::vector<RankSummary> rank_records(const std::vector<MetricsRecord>& records) {
  if (records.empty()) throw std::invalid_argument("rank_records: no records");
  std::set<std::string> methods;
  std::set<std::pair<std::string, int>> cells;
  for (const MetricsRecord& r : records) {
    methods.insert(r.method);
    cells.insert({r.dataset, r.split});
  }
  std::map<std::pair<std::string, int>, std::map<std::string, const MetricsRecord*>> grid;
  for (const MetricsRecord& r : records) {
    auto& cell = grid[{r.dataset, r.split}];
    if (!cell.emplace(r.method, &r).second)
      throw std::invalid_argument("rank_records: duplicate record for method '" + r.method +
                                  "' on dataset '" + r.dataset + "' split " +
                                  std::to_string(r.split));
  }
  std::string missing;
  for (const auto& cell : cells)
    for (const std::string& method : methods)
      if (grid[cell].find(method) == grid[cell].end())
        missing += "\n  method '" + method + "' dataset '" + cell.first + "' split " +
                   std::to_string(cell.second);
  if (!missing.empty())
    throw std::invalid_argument("rank_records: missing cells:" + missing);

  std::map<std::string, RankAccumulator> acc;
  for (const auto& cell : cells) {
    std::vector<std::string> cell_methods(methods.begin(), methods.end());
    std::vector<double> rmse_v, ll_v, crps_v;
    for (const std::string& method : cell_methods) {
      const MetricsRecord* r = grid[cell][method];
      rmse_v.push_back(r->rmse);
      ll_v.push_back(-r->log_likelihood);  // higher likelihood ranks first
      crps_v.push_back(r->crps);
    }
    const std::vector<double> rr = midpoint_ranks(rmse_v);
    const std::vector<double> lr = midpoint_ranks(ll_v);
    const std::vector<double> cr = midpoint_ranks(crps_v);
    for (std::size_t i = 0; i < cell_methods.size(); ++i) {
      RankAccumulator& a = acc[cell_methods[i]];
      a.rmse.push_back(rr[i]);
      a.ll.push_back(lr[i]);
      a.crps.push_back(cr[i]);
    }
  }
  std::vector<RankSummary> table;
  for (const auto& [method, a] : acc) {
    RankSummary s;
    s.method = method;
    std::tie(s.rmse_rank, s.rmse_se) = mean_and_se(a.rmse);
    std::tie(s.ll_rank, s.ll_se) = mean_and_se(a.ll);
    std::tie(s.crps_rank, s.crps_se) = mean_and_se(a.crps);
    table.push_back(std::move(s));
  }
  return table;
}

void write_rank_csv(const std::string& path, const std::vector<RankSummary>& table) {
  std::ofstream out = open_out(path);
  out << "method,rmse_rank,rmse_se,ll_rank,ll_se,crps_rank,crps_se\n";
  for (const RankSummary& s : table)
    out << s.method << ',' << fmt(s.rmse_rank) << ',' << fmt(s.rmse_se) << ','
        << fmt(s.ll_rank) << ',' << fmt(s.ll_se) << ',' << fmt(s.crps_rank) << ','
        << fmt(s.crps_se) << '\n';
}

// ---------------------------------------------------------------------------
// Gradient diagnostic

namespace {

/// Symmetrized-divergence value at an arbitrary parameter state: retrain a
/// warm copy of the classifier to a loss plateau, then evaluate the logit gap
/// on a large fixed-seed sample batch. Identical seeds across calls give
/// common random numbers, so finite differences see only the parameter change.
double plateau_kl_value(const SipModel& model, const ParamStore& params,
                        const RunConfig& cfg) {
  ParamStore disc = model.disc_q_params;
  Adam opt(AdamConfig{cfg.train.lr_disc});
  // Separate streams for retraining and for the final estimate: the plateau
  // may take a different number of chunks at each perturbed state, and the
  // estimate batch must not shift with it or the common random numbers break.
  Rng train_rng(Rng::mix(cfg.train.seed, 0x9d1a6ULL));
  Rng eval_rng(Rng::mix(cfg.train.seed, 0xe5717ULL));
  const auto sample_q = [&]() {
    Tape t;
    VarMap v = bind_constants(t, params);
    return model.posterior->sample_u(t, v, cfg.train.s_train, train_rng).value();
  };
  const auto sample_p = [&]() {
    Tape t;
    VarMap v = bind_constants(t, params);
    return model.prior
        ->sample_functions(t, v, v.at("xbar"), cfg.train.s_train, train_rng, /*train_mode=*/true)
        .value();
  };
  constexpr int kChunk = 50;
  constexpr int kMaxSteps = 5000;
  constexpr double kRelTol = 1e-4;
  double prev = std::numeric_limits<double>::infinity();
  int steps = 0;
  while (steps < kMaxSteps) {
    const DiscTrainResult r = train_discriminator(model.disc_q, disc, sample_q, sample_p,
                                                  kChunk, opt);
    steps += r.steps;
    const double improvement = (prev - r.final_loss) / std::max(std::abs(prev), 1e-12);
    if (improvement < kRelTol) break;
    prev = r.final_loss;
  }
  Tape t;
  VarMap v = bind_constants(t, params);
  Var q = model.posterior->sample_u(t, v, cfg.diag_kl_samples, eval_rng);
  Var p = model.prior->sample_functions(t, v, v.at("xbar"), cfg.diag_kl_samples, eval_rng,
                                        /*train_mode=*/true);
  return estimate_sym_kl(model.disc_q, disc, t, q, p).value()[0];
}

}  // namespace

std::vector<GradDiagRow> gradient_diagnostic(SipModel& model, const Dataset& data,
                                             const RunConfig& cfg) {
  if (data.n() < 1) throw std::invalid_argument("gradient_diagnostic: empty dataset");
  // Data-term tape gradients on a fixed evaluation batch.
  const int n_eval = std::min(data.n(), 200);
  Tensor xb = Tensor::zeros({n_eval, data.d()});
  Tensor yb = Tensor::zeros({n_eval});
  for (std::int64_t i = 0; i < xb.numel(); ++i) xb[i] = data.X[i];
  for (int i = 0; i < n_eval; ++i) yb[i] = data.y[i];

  Tape t;
  VarMap v = bind_model(t, model, /*freeze_posterior=*/false);
  Rng obj_rng(Rng::mix(cfg.train.seed, 0x0b7ec7ULL));
  TrainingConfig tc = cfg.train;
  tc.batch_size = n_eval;
  const ObjectiveParts parts =
      objective(t, v, model, xb, yb, data.n(), tc, /*epoch=*/tc.epochs, obj_rng);
  t.backward(parts.data_term);
  const std::map<std::string, Tensor> grads = t.grad_map();

  // Every inducing-input coordinate, plus the largest-gradient weight
  // coordinates of the prior group.
  struct Candidate {
    std::string name;
    std::int64_t coord;
    double grad;
  };
  // Missing entries in the gradient map mean the data term never touched the
  // parameter; those coordinates still enter the comparison with gradient 0.
  const auto grad_at = [&grads](const std::string& name, std::int64_t c) {
    const auto it = grads.find(name);
    return it == grads.end() ? 0.0 : it->second[c];
  };
  std::vector<Candidate> selected;
  const Tensor& xbar = model.params.at("xbar");
  for (std::int64_t c = 0; c < xbar.numel(); ++c)
    selected.push_back({"xbar", c, grad_at("xbar", c)});
  std::vector<Candidate> prior_coords;
  for (const auto& [name, tensor] : model.params.items())
    if (name.rfind("prior.", 0) == 0)
      for (std::int64_t c = 0; c < tensor.numel(); ++c)
        prior_coords.push_back({name, c, grad_at(name, c)});
  std::sort(prior_coords.begin(), prior_coords.end(), [](const Candidate& a, const Candidate& b) {
    if (std::abs(a.grad) != std::abs(b.grad)) return std::abs(a.grad) > std::abs(b.grad);
    return std::tie(a.name, a.coord) < std::tie(b.name, b.coord);
  });
  const std::size_t keep = std::min<std::size_t>(prior_coords.size(),
                                                 static_cast<std::size_t>(cfg.diag_select));
  selected.insert(selected.end(), prior_coords.begin(), prior_coords.begin() + keep);

  std::vector<GradDiagRow> rows;
  rows.reserve(selected.size());
  for (const Candidate& c : selected) {
    GradDiagRow row;
    row.name = c.name;
    row.coord = c.coord;
    row.data_grad = c.grad;
    ParamStore plus = model.params;
    ParamStore minus = model.params;
    plus.at(c.name)[c.coord] += cfg.diag_h;
    minus.at(c.name)[c.coord] -= cfg.diag_h;
    try {
      const double up = plateau_kl_value(model, plus, cfg);
      const double down = plateau_kl_value(model, minus, cfg);
      row.kl_grad = (up - down) / (2.0 * cfg.diag_h);
    } catch (const std::runtime_error&) {
      row.kl_grad = 0.0;
      row.flagged = true;  // classifier retraining tripped its loss guard
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_graddiag_csv(const std::string& path, const std::vector<GradDiagRow>& rows) {
  std::ofstream out = open_out(path);
  out << "name,coord,data_grad,kl_grad,flagged\n";
  for (const GradDiagRow& r : rows)
    out << r.name << ',' << r.coord << ',' << fmt(r.data_grad) << ',' << fmt(r.kl_grad) << ','
        << (r.flagged ? 1 : 0) << '\n';
}

// ---------------------------------------------------------------------------
// Experiment execution

namespace {

struct PreparedData {
  Dataset train;
  Dataset test;
  std::string tag;
};

PreparedData prepare_data(const RunConfig& cfg) {
  PreparedData out;
  if (cfg.data_source == "csv") {
    const CsvLoadResult loaded = load_csv(cfg.data_path, cfg.target_column, cfg.data_header);
    out.tag = cfg.dataset_tag.empty() ? fs::path(cfg.data_path).stem().string() : cfg.dataset_tag;
    if (cfg.experiment == ExperimentKind::kInducingPoints) {
      // Qualitative relocation study: train and report in-sample.
      out.train = loaded.dataset;
      out.test = loaded.dataset;
    } else {
      SplitSpec spec;
      spec.train_fraction = cfg.train_fraction;
      spec.repetitions = std::max(20, cfg.split_index + 1);
      spec.base_seed = cfg.data_seed;
      std::tie(out.train, out.test) = split(loaded.dataset, spec, cfg.split_index);
    }
  } else {
    Rng train_rng(cfg.data_seed);
    Rng test_rng(Rng::mix(cfg.data_seed, 0x7e57ULL));
    const int n_test = std::max(50, cfg.data_n / 5);
    switch (cfg.experiment) {
      case ExperimentKind::kSyntheticHeteroscedastic:
        out.train = gen_heteroscedastic(cfg.data_n, train_rng);
        out.test = gen_heteroscedastic(n_test, test_rng);
        out.tag = "heteroscedastic";
        break;
      case ExperimentKind::kSyntheticPiecewise:
        out.train = gen_piecewise(cfg.data_n, train_rng);
        out.test = gen_piecewise(n_test, test_rng);
        out.tag = "piecewise";
        break;
      default:
        out.train = gen_bimodal(cfg.data_n, train_rng);
        out.test = gen_bimodal(n_test, test_rng);
        out.tag = "bimodal";
        break;
    }
    if (!cfg.dataset_tag.empty()) out.tag = cfg.dataset_tag;
  }
  if (cfg.standardize_data) std::tie(out.train, out.test) = standardize(out.train, out.test);
  return out;
}

std::unique_ptr<ImplicitPrior> build_prior(const RunConfig& cfg, int input_dim) {
  if (cfg.prior_kind == PriorKind::kBnn)
    return std::make_unique<BnnPrior>(input_dim, cfg.prior_hidden);
  return std::make_unique<NeuralSamplerPrior>(input_dim, cfg.prior_noise_dim, cfg.prior_hidden,
                                              Activation::kTanh, cfg.prior_dropout);
}

/// Average CRPS over test points against samples from the mixture: one
/// Gaussian draw per component, seeded for reproducibility.
double crps_from_mixture(const PredictiveMixture& mix, const Tensor& y, Rng& rng) {
  const int s = mix.components();
  const int n = mix.points();
  double total = 0.0;
  std::vector<double> draws(static_cast<std::size_t>(s));
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < s; ++k) {
      const std::int64_t idx = static_cast<std::int64_t>(k) * n + i;
      draws[static_cast<std::size_t>(k)] =
          mix.means[idx] + std::sqrt(mix.vars[idx]) * rng.normal();
    }
    total += crps_empirical(draws, y[i]);
  }
  return total / static_cast<double>(n);
}

MetricsRecord metrics_from_mixture(const PredictiveMixture& mix, const Dataset& test,
                                   const RunConfig& cfg, const std::string& tag,
                                   double train_seconds) {
  const double y_std = test.standardization ? test.standardization->y_std : 1.0;
  MetricsRecord rec;
  rec.method = cfg.method_tag;
  rec.dataset = tag;
  rec.split = cfg.split_index;
  rec.seed = cfg.train.seed;
  rec.rmse = rmse(mixture_mean(mix), test.y) * y_std;
  rec.log_likelihood = test_ll(mix, test.y, y_std);
  Rng crps_rng(Rng::mix(cfg.train.seed, 0xc29cULL));
  rec.crps = crps_from_mixture(mix, test.y, crps_rng) * y_std;
  rec.train_seconds = train_seconds;
  return rec;
}

/// Dump grid: an even 1-D grid spanning the training inputs, or the test
/// inputs themselves for multivariate data.
Tensor dump_inputs(const Dataset& train, const Dataset& test, int grid_points) {
  if (train.d() != 1) return test.X;
  double lo = train.X[0];
  double hi = train.X[0];
  for (std::int64_t i = 0; i < train.X.numel(); ++i) {
    lo = std::min(lo, train.X[i]);
    hi = std::max(hi, train.X[i]);
  }
  Tensor grid = Tensor::zeros({grid_points, 1});
  const double step = (hi - lo) / static_cast<double>(grid_points - 1);
  for (int i = 0; i < grid_points; ++i) grid[i] = lo + step * i;
  return grid;
}

Tensor first_coordinates(const Tensor& xbar) {
  const int m = xbar.rows();
  Tensor out = Tensor::zeros({m});
  for (int i = 0; i < m; ++i) out[i] = xbar[static_cast<std::int64_t>(i) * xbar.cols()];
  return out;
}

struct ArtifactSink {
  fs::path dir;
  std::vector<std::string> names;

  std::string path(const std::string& name) {
    names.push_back(name);
    return (dir / name).string();
  }
};

RunOutcome run_training_experiment(const RunConfig& cfg) {
  ArtifactSink sink{fs::path(cfg.resolved_output_dir()), {}};
  fs::create_directories(sink.dir);
  {
    std::ofstream out = open_out(sink.path("config_snapshot.txt"));
    out << cfg.to_config().to_text();
  }
  const PreparedData data = prepare_data(cfg);
  cfg.train.validate(data.train.n());

  std::unique_ptr<ImplicitPrior> prior = build_prior(cfg, data.train.d());
  PosteriorSampler posterior(cfg.m, cfg.post_noise_dim, cfg.post_hidden);
  Rng init_rng(cfg.init_seed);
  const Tensor xbar0 = init_inducing(cfg.inducing_init, data.train.X, cfg.m, init_rng);
  SipModel model = make_sip_model(*prior, posterior, xbar0, cfg.train, init_rng);

  std::vector<std::pair<int, Tensor>> trajectory;
  EpochObserver observer;
  if (cfg.emit_trajectory) {
    trajectory.emplace_back(-1, first_coordinates(model.inducing()));
    observer = [&trajectory](int epoch, const SipModel& m) {
      trajectory.emplace_back(epoch, first_coordinates(m.inducing()));
    };
  }

  const double t0 = now_seconds();
  TrainResult result;
  try {
    result = train(data.train, model, cfg.train, observer);
  } catch (const std::runtime_error& e) {
    if (!trajectory.empty())
      write_trajectory_csv(sink.path("inducing_trajectory.csv"), trajectory);
    save_checkpoint(sink.path("checkpoint.json"), cfg, model);
    return {3, std::string("training failed: ") + e.what(), sink.names};
  }
  const double train_seconds = now_seconds() - t0;

  write_history_csv(sink.path("history.csv"), result.history);
  if (!trajectory.empty())
    write_trajectory_csv(sink.path("inducing_trajectory.csv"), trajectory);
  save_checkpoint(sink.path("checkpoint.json"), cfg, model);
  if (result.aborted)
    return {3,
            "training aborted at epoch " + std::to_string(result.abort_epoch) +
                ": non-finite loss; parameters restored to the last finite state",
            sink.names};

  Rng eval_rng(Rng::mix(cfg.train.seed, 0xe7a1ULL));
  const PredictiveMixture test_mix =
      predict(model, data.test.X, cfg.train.s_test, eval_rng, cfg.train.jitter);
  const MetricsRecord rec = metrics_from_mixture(test_mix, data.test, cfg, data.tag, train_seconds);
  write_metrics_csv(sink.path("metrics.csv"), {rec});

  if (cfg.emit_predictive) {
    const Tensor xdump = dump_inputs(data.train, data.test, cfg.grid_points);
    Rng dump_rng(Rng::mix(cfg.train.seed, 0xd0a9ULL));
    const PredictiveMixture dump =
        predict(model, xdump, cfg.train.s_test, dump_rng, cfg.train.jitter);
    write_predictive_csv(sink.path("predictive.csv"), xdump, dump);
  }
  if (cfg.emit_prior_samples && data.train.d() == 1) {
    const Tensor xdump = dump_inputs(data.train, data.test, cfg.grid_points);
    Tape t;
    VarMap v = bind_constants(t, model.params);
    Rng prior_rng(Rng::mix(cfg.train.seed, 0x9510ULL));
    const Tensor samples =
        model.prior->sample_functions(t, v, t.constant(xdump), 100, prior_rng, false).value();
    Tensor grid1d = Tensor::zeros({xdump.rows()});
    for (int i = 0; i < xdump.rows(); ++i) grid1d[i] = xdump[i];
    write_prior_samples_csv(sink.path("prior_samples.csv"), grid1d, samples);
  }
  return {0, "ok", sink.names};
}

RunOutcome run_hmc_compare(const RunConfig& cfg) {
  ArtifactSink sink{fs::path(cfg.resolved_output_dir()), {}};
  fs::create_directories(sink.dir);
  {
    std::ofstream out = open_out(sink.path("config_snapshot.txt"));
    out << cfg.to_config().to_text();
  }
  LoadedModel lm = load_checkpoint(cfg.checkpoint_path);
  const auto* bnn = dynamic_cast<const BnnPrior*>(lm.prior.get());
  if (bnn == nullptr)
    throw std::invalid_argument(
        "hmc-compare requires a checkpoint with a bnn prior; got kind '" +
        lm.prior->kind() + "'");
  const PreparedData data = prepare_data(cfg);
  if (data.train.d() != bnn->input_dim())
    throw std::invalid_argument("checkpoint expects input dimension " +
                                std::to_string(bnn->input_dim()) + " but the dataset has " +
                                std::to_string(data.train.d()));

  const double sigma2 = lm.model.sigma2();
  const LogDensityTarget target =
      bnn_posterior_target(*bnn, lm.model.params, data.train.X, data.train.y, sigma2);
  const Tensor w0 = bnn->flat_means(lm.model.params);
  std::vector<double> start(w0.data(), w0.data() + w0.numel());

  const double t0 = now_seconds();
  const HmcResult result = hmc_sample(target, cfg.hmc, start);
  const double sample_seconds = now_seconds() - t0;

  write_trace_csv(sink.path("hmc_trace.csv"), result.trace);
  std::string note = "acceptance rate " + fmt(result.acceptance_rate);
  if (result.low_acceptance_warning)
    note += "; warning: acceptance below 1% over the opening steps";
  if (result.chain.empty())
    return {0, note + "; empty chain after burn-in, no predictive emitted", sink.names};

  const PredictiveMixture mix =
      hmc_predictive(*bnn, result.chain, data.test.X, sigma2, cfg.hmc_thinning);
  const MetricsRecord rec = metrics_from_mixture(mix, data.test, cfg, data.tag, sample_seconds);
  write_metrics_csv(sink.path("metrics.csv"), {rec});
  if (cfg.emit_predictive) {
    const Tensor xdump = dump_inputs(data.train, data.test, cfg.grid_points);
    const PredictiveMixture dump =
        hmc_predictive(*bnn, result.chain, xdump, sigma2, cfg.hmc_thinning);
    write_predictive_csv(sink.path("hmc_predictive.csv"), xdump, dump);
  }
  return {0, note, sink.names};
}

RunOutcome run_gradient_diagnostic(const RunConfig& cfg) {
  ArtifactSink sink{fs::path(cfg.resolved_output_dir()), {}};
  fs::create_directories(sink.dir);
  {
    std::ofstream out = open_out(sink.path("config_snapshot.txt"));
    out << cfg.to_config().to_text();
  }
  const PreparedData data = prepare_data(cfg);
  cfg.train.validate(data.train.n());

  std::unique_ptr<ImplicitPrior> prior = build_prior(cfg, data.train.d());
  PosteriorSampler posterior(cfg.m, cfg.post_noise_dim, cfg.post_hidden);
  Rng init_rng(cfg.init_seed);
  const Tensor xbar0 = init_inducing(cfg.inducing_init, data.train.X, cfg.m, init_rng);
  SipModel model = make_sip_model(*prior, posterior, xbar0, cfg.train, init_rng);

  TrainResult result;
  try {
    result = train(data.train, model, cfg.train);
  } catch (const std::runtime_error& e) {
    return {3, std::string("training failed: ") + e.what(), sink.names};
  }
  write_history_csv(sink.path("history.csv"), result.history);
  save_checkpoint(sink.path("checkpoint.json"), cfg, model);
  if (result.aborted)
    return {3, "training aborted at epoch " + std::to_string(result.abort_epoch), sink.names};

  const std::vector<GradDiagRow> rows = gradient_diagnostic(model, data.train, cfg);
  write_graddiag_csv(sink.path("graddiag.csv"), rows);
  int flagged = 0;
  for (const GradDiagRow& r : rows) flagged += r.flagged ? 1 : 0;
  std::string note = std::to_string(rows.size()) + " coordinates compared";
  if (flagged > 0) note += ", " + std::to_string(flagged) + " flagged";
  return {0, note, sink.names};
}

}  // namespace

RunOutcome run_experiment(const RunConfig& cfg) {
  try {
    cfg.validate();
    switch (cfg.experiment) {
      case ExperimentKind::kHmcCompare: return run_hmc_compare(cfg);
      case ExperimentKind::kGradientDiagnostic: return run_gradient_diagnostic(cfg);
      default: return run_training_experiment(cfg);
    }
  } catch (const std::invalid_argument& e) {
    return {2, std::string("config error: ") + e.what(), {}};
  } catch (const std::exception& e) {
    return {3, std::string("run failed: ") + e.what(), {}};
  }
}

RunOutcome run_eval(const RunConfig& cfg) {
  try {
    cfg.validate();
    if (cfg.checkpoint_path.empty())
      throw std::invalid_argument("eval requires hmc.checkpoint to name a model checkpoint");
    ArtifactSink sink{fs::path(cfg.resolved_output_dir()), {}};
    fs::create_directories(sink.dir);
    {
      std::ofstream out = open_out(sink.path("config_snapshot.txt"));
      out << cfg.to_config().to_text();
    }
    LoadedModel lm = load_checkpoint(cfg.checkpoint_path);
    const PreparedData data = prepare_data(cfg);
    if (data.test.d() != lm.prior->input_dim())
      throw std::invalid_argument("checkpoint expects input dimension " +
                                  std::to_string(lm.prior->input_dim()) +
                                  " but the dataset has " + std::to_string(data.test.d()));
    Rng eval_rng(Rng::mix(cfg.train.seed, 0xe7a1ULL));
    const PredictiveMixture mix =
        predict(lm.model, data.test.X, cfg.train.s_test, eval_rng, cfg.train.jitter);
    const MetricsRecord rec = metrics_from_mixture(mix, data.test, cfg, data.tag, 0.0);
    write_metrics_csv(sink.path("metrics.csv"), {rec});
    if (cfg.emit_predictive) {
      const Tensor xdump = dump_inputs(data.train, data.test, cfg.grid_points);
      Rng dump_rng(Rng::mix(cfg.train.seed, 0xd0a9ULL));
      const PredictiveMixture dump =
          predict(lm.model, xdump, cfg.train.s_test, dump_rng, cfg.train.jitter);
      write_predictive_csv(sink.path("predictive.csv"), xdump, dump);
    }
    return {0, "ok", sink.names};
  } catch (const std::invalid_argument& e) {
    return {2, std::string("config error: ") + e.what(), {}};
  } catch (const std::exception& e) {
    return {3, std::string("eval failed: ") + e.what(), {}};
  }
}

}  // namespace sip
