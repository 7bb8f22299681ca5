#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sip/adversarial.hpp"
#include "sip/data.hpp"
#include "sip/gp_bridge.hpp"
#include "sip/optim.hpp"
#include "sip/posterior.hpp"
#include "sip/priors.hpp"
#include "sip/rng.hpp"
#include "sip/tape.hpp"

namespace sip {

struct TrainingConfig {
  double alpha = 1.0;            // likelihood-term sharpness, in (0, 1]
  int s_train = 100;             // function samples per training step
  int s_test = 500;              // mixture components at evaluation time
  int batch_size = 10;
  int epochs = 2000;
  double warmup_fraction = 0.2;  // share of epochs ramping the divergence weight
  double lr_main = 1e-3;
  double lr_disc = 1e-3;
  int disc_steps = 5;            // classifier updates per outer step
  std::uint64_t seed = 0;
  bool adaptive_contrast = false;
  bool freeze_posterior = false;
  bool forward_kl_only = false;  // ablation: drop the reverse half of the divergence
  double jitter = 1e-5;
  double init_sigma2 = 0.1;      // starting observation-noise variance

  void validate(int n_data) const;  // throws std::invalid_argument
};

/// Linear ramp 0 -> 1 over the first `fraction` share of epochs; a zero
/// fraction disables the ramp entirely (weight 1 from the start).
double warmup_beta(int epoch, int total_epochs, double fraction);

/// Per-point Gaussian log density of y under mean f and variance sigma2;
/// broadcasts y across sample rows of f.
Var gaussian_loglik(Var y, Var f, Var sigma2);

/// Mini-batch data term from per-sample log likelihoods l [S, B]:
/// (N/B) * sum_i (1/alpha) [logsumexp_s(alpha * l_is) - log S].
Var alpha_energy_from_loglik(Var ell, double alpha, int n_total);

/// Same data term computed from targets, function samples [S, B] and noise
/// variance under the Gaussian likelihood.
Var alpha_energy_term(Var y, Var f_samples, Var sigma2, double alpha, int n_total);

/// Everything the training loop updates, plus the sampler components it uses.
/// `prior` and `posterior` are borrowed and must outlive the model.
struct SipModel {
  const ImplicitPrior* prior = nullptr;
  const PosteriorSampler* posterior = nullptr;
  ParamStore params;  // prior.*, post.*, xbar, noise.log_sigma2
  Discriminator disc_q;
  ParamStore disc_q_params;
  Discriminator disc_p;  // second classifier, used by the adaptive variant
  ParamStore disc_p_params;

  int m() const { return posterior->m(); }
  double sigma2() const;
  Tensor inducing() const { return params.at("xbar"); }
};

SipModel make_sip_model(const ImplicitPrior& prior, const PosteriorSampler& posterior,
                        const Tensor& xbar_init, const TrainingConfig& cfg, Rng& rng);

/// Bind the trainable state onto a tape; a frozen posterior group is bound as
/// constants so its gradients vanish identically.
VarMap bind_model(Tape& t, const SipModel& model, bool freeze_posterior);

struct ObjectiveParts {
  Var loss;       // minimized: beta * divergence - data term
  Var data_term;
  Var divergence;
  double beta = 0.0;
};

/// One evaluation of the training objective on a mini-batch. Draws fresh prior
/// and posterior samples from rng; the classifier weights stay fixed.
ObjectiveParts objective(Tape& t, const VarMap& v, const SipModel& model,
                         const Tensor& x_batch, const Tensor& y_batch, int n_total,
                         const TrainingConfig& cfg, int epoch, Rng& rng);

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double data_term = 0.0;
  double divergence = 0.0;
  double beta = 0.0;
  double sigma2 = 0.0;
  double disc_loss = 0.0;
  double seconds = 0.0;  // wall-clock for this epoch
};

struct TrainResult {
  std::vector<EpochRecord> history;
  bool aborted = false;   // non-finite loss; parameters restored to last finite state
  int abort_epoch = -1;
};

/// Called after each completed optimizer step with the epoch index and the
/// updated model; used for trajectory logging.
using EpochObserver = std::function<void(int, const SipModel&)>;

/// Alternating loop: per epoch, k classifier steps on fresh samples, then one
/// optimizer step on the main parameters over a fresh mini-batch.
/// Deterministic given cfg.seed.
TrainResult train(const Dataset& data, SipModel& model, const TrainingConfig& cfg,
                  const EpochObserver& on_epoch = {});

/// Posterior predictive mixture at Xstar using the model's current state.
PredictiveMixture predict(const SipModel& model, const Tensor& Xstar, int s, Rng& rng,
                          double jitter = 1e-5);

/// History CSV: epoch,loss,data_term,divergence,beta,sigma2,disc_loss,seconds.
void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history);

}  // namespace sip
