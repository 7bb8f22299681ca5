#include "sip/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <utility>

namespace sip {

void TrainingConfig::validate(int n_data) const {
  if (!(alpha > 0.0) || alpha > 1.0)
    throw std::invalid_argument("TrainingConfig: alpha must be in (0, 1]");
  if (s_train < 1 || s_test < 1)
    throw std::invalid_argument("TrainingConfig: sample counts must be positive");
  if (batch_size < 1) throw std::invalid_argument("TrainingConfig: batch_size must be positive");
  if (n_data >= 0 && batch_size > n_data)
    throw std::invalid_argument("TrainingConfig: batch_size exceeds the dataset size");
  if (epochs < 0) throw std::invalid_argument("TrainingConfig: epochs must be non-negative");
  if (!(warmup_fraction >= 0.0) || warmup_fraction > 1.0)
    throw std::invalid_argument("TrainingConfig: warmup_fraction must be in [0, 1]");
  if (!(lr_main > 0.0) || !(lr_disc > 0.0))
    throw std::invalid_argument("TrainingConfig: learning rates must be positive");
  if (disc_steps < 1)
    throw std::invalid_argument("TrainingConfig: disc_steps must be positive");
  if (!(jitter >= 0.0)) throw std::invalid_argument("TrainingConfig: jitter must be >= 0");
  if (!(init_sigma2 > 0.0))
    throw std::invalid_argument("TrainingConfig: init_sigma2 must be positive");
  if (adaptive_contrast && forward_kl_only)
    throw std::invalid_argument(
        "TrainingConfig: adaptive_contrast and forward_kl_only are mutually exclusive");
}

double warmup_beta(int epoch, int total_epochs, double fraction) {
  if (total_epochs < 1) throw std::invalid_argument("warmup_beta: total_epochs must be >= 1");
  if (epoch < 0) throw std::invalid_argument("warmup_beta: epoch must be >= 0");
  if (fraction <= 0.0) return 1.0;
  const double ramp = fraction * static_cast<double>(total_epochs);
  return std::min(1.0, static_cast<double>(epoch) / ramp);
}

Var gaussian_loglik(Var y, Var f, Var sigma2) {
  {
    const Tensor& s = sigma2.value();
    for (std::int64_t i = 0; i < s.numel(); ++i)
      if (!(s[i] > 0.0))
        throw std::invalid_argument("gaussian_loglik: variance must be positive");
  }
  Var log_norm = log(sigma2 * (2.0 * std::numbers::pi)) * (-0.5);
  Var quad = square(f - y) / (sigma2 * 2.0);
  return log_norm - quad;
}

Var alpha_energy_from_loglik(Var ell, double alpha, int n_total) {
  if (!(alpha > 0.0) || alpha > 1.0)
    throw std::invalid_argument("alpha_energy: alpha must be in (0, 1]");
  if (ell.value().rank() != 2)
    throw std::invalid_argument("alpha_energy: expected [S, B] log likelihoods");
  const int s = ell.value().dim(0);
  const int b = ell.value().dim(1);
  if (s < 1 || b < 1) throw std::invalid_argument("alpha_energy: empty sample block");
  if (n_total < b)
    throw std::invalid_argument("alpha_energy: n_total smaller than the batch");
  Var lse = logsumexp(ell * alpha, 0);  // [B]
  Var per_point = (lse - std::log(static_cast<double>(s))) * (1.0 / alpha);
  return sum(per_point) * (static_cast<double>(n_total) / static_cast<double>(b));
}

Var alpha_energy_term(Var y, Var f_samples, Var sigma2, double alpha, int n_total) {
  if (f_samples.value().rank() != 2)
    throw std::invalid_argument("alpha_energy: expected [S, B] function samples");
  if (y.value().rank() != 1 || y.value().dim(0) != f_samples.value().dim(1))
    throw std::invalid_argument("alpha_energy: targets must be [B] matching the samples");
  return alpha_energy_from_loglik(gaussian_loglik(y, f_samples, sigma2), alpha, n_total);
}

double SipModel::sigma2() const { return std::exp(params.at("noise.log_sigma2")[0]); }

SipModel make_sip_model(const ImplicitPrior& prior, const PosteriorSampler& posterior,
                        const Tensor& xbar_init, const TrainingConfig& cfg, Rng& rng) {
  if (xbar_init.rank() != 2 || xbar_init.rows() != posterior.m() ||
      xbar_init.cols() != prior.input_dim())
    throw std::invalid_argument("make_sip_model: inducing inputs must be [M, D]");
  if (!(cfg.init_sigma2 > 0.0))
    throw std::invalid_argument("make_sip_model: init_sigma2 must be positive");
  const int m = posterior.m();
  SipModel model{&prior,
                 &posterior,
                 ParamStore{},
                 Discriminator(m, {50, 50}, Activation::kLeakyRelu, "disc_q"),
                 ParamStore{},
                 Discriminator(m, {50, 50}, Activation::kLeakyRelu, "disc_p"),
                 ParamStore{}};
  prior.init_params(model.params, rng);
  posterior.init_params(model.params, rng);
  model.params.add("xbar", xbar_init);
  model.params.add("noise.log_sigma2", Tensor::scalar(std::log(cfg.init_sigma2)));
  model.disc_q.init_params(model.disc_q_params, rng);
  model.disc_p.init_params(model.disc_p_params, rng);
  return model;
}

VarMap bind_model(Tape& t, const SipModel& model, bool freeze_posterior) {
  if (!model.posterior) throw std::invalid_argument("bind_model: missing posterior sampler");
  const std::string frozen_prefix = model.posterior->prefix() + ".";
  VarMap v;
  for (const auto& [name, tensor] : model.params.items()) {
    const bool in_frozen_group = name.rfind(frozen_prefix, 0) == 0;
    if (freeze_posterior && in_frozen_group)
      v.emplace(name, t.constant(tensor));
    else
      v.emplace(name, t.leaf(name, tensor));
  }
  return v;
}

ObjectiveParts objective(Tape& t, const VarMap& v, const SipModel& model,
                         const Tensor& x_batch, const Tensor& y_batch, int n_total,
                         const TrainingConfig& cfg, int epoch, Rng& rng) {
  if (!model.prior || !model.posterior)
    throw std::invalid_argument("objective: model is missing its samplers");
  if (x_batch.rank() != 2 || y_batch.rank() != 1 || y_batch.dim(0) != x_batch.rows())
    throw std::invalid_argument("objective: batch must be X [B, D] with targets [B]");
  const int b = x_batch.rows();
  const int m = model.m();

  Var xb = t.constant(x_batch);
  Var yv = t.constant(y_batch);
  // One coherent set of prior draws covers both the conditional moments and the
  // divergence's prior stream.
  Var joint = joint_prior_samples(*model.prior, t, v, xb, v.at("xbar"), cfg.s_train, rng,
                                  /*train_mode=*/true);
  EmpiricalMoments mom = empirical_moments(joint, b, m);
  Var u = model.posterior->sample_u(t, v, cfg.s_train, rng);
  BatchConditional cond = conditional_batch(mom, u, cfg.jitter);
  Var f = sample_f_given_u(t, cond, rng);
  Var sigma2 = exp(v.at("noise.log_sigma2"));
  Var data = alpha_energy_term(yv, f, sigma2, cfg.alpha, n_total);

  Var p_u = slice_last(joint, b, m);  // [S, M] prior values at the inducing inputs
  Var div;
  if (cfg.adaptive_contrast) {
    div = estimate_sym_kl_adaptive(model.disc_q, model.disc_q_params, model.disc_p,
                                   model.disc_p_params, t, u, p_u);
  } else if (cfg.forward_kl_only) {
    VarMap dv = bind_constants(t, model.disc_q_params);
    div = mean(model.disc_q.logits(t, dv, u));  // E_q of the log ratio only
  } else {
    div = estimate_sym_kl(model.disc_q, model.disc_q_params, t, u, p_u);
  }

  const double beta = warmup_beta(epoch, cfg.epochs, cfg.warmup_fraction);
  Var loss = div * beta - data;
  return ObjectiveParts{loss, data, div, beta};
}

namespace {

Tensor posterior_batch(const SipModel& model, int s, Rng& rng) {
  Tape t;
  VarMap v = bind_constants(t, model.params);
  return model.posterior->sample_u(t, v, s, rng).value();
}

Tensor prior_batch(const SipModel& model, int s, Rng& rng) {
  Tape t;
  VarMap v = bind_constants(t, model.params);
  Var xbar = v.at("xbar");
  return model.prior->sample_functions(t, v, xbar, s, rng, /*train_mode=*/true).value();
}

}  // namespace

TrainResult train(const Dataset& data, SipModel& model, const TrainingConfig& cfg,
                  const EpochObserver& on_epoch) {
  if (!model.prior || !model.posterior)
    throw std::invalid_argument("train: model is missing its samplers");
  if (data.X.rank() != 2 || data.n() < 1)
    throw std::invalid_argument("train: dataset must hold X [N, D] with N >= 1");
  if (data.y.rank() != 1 || data.y.dim(0) != data.n())
    throw std::invalid_argument("train: targets must be [N]");
  if (data.d() != model.prior->input_dim())
    throw std::invalid_argument("train: input width does not match the prior");
  cfg.validate(data.n());

  Rng rng(cfg.seed);
  Adam opt_main(AdamConfig{cfg.lr_main});
  Adam opt_disc_q(AdamConfig{cfg.lr_disc});
  Adam opt_disc_p(AdamConfig{cfg.lr_disc});

  const int n = data.n();
  const int d = data.d();
  const int bsz = cfg.batch_size;
  const int m = model.m();

  TrainResult result;
  result.history.reserve(static_cast<std::size_t>(cfg.epochs));
  std::vector<double> last_good = model.params.flatten();

  std::vector<int> pool(static_cast<std::size_t>(n));
  std::iota(pool.begin(), pool.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();

    // Mini-batch of distinct rows; the pool stays a permutation, so each epoch
    // draws uniformly without replacement.
    Tensor xb = Tensor::zeros({bsz, d});
    Tensor yb = Tensor::zeros({bsz});
    for (int i = 0; i < bsz; ++i) {
      const int j = i + static_cast<int>(rng.integer(static_cast<std::uint64_t>(n - i)));
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
      const int row = pool[static_cast<std::size_t>(i)];
      for (int c = 0; c < d; ++c)
        xb[static_cast<std::int64_t>(i) * d + c] = data.X[static_cast<std::int64_t>(row) * d + c];
      yb[i] = data.y[row];
    }

    // Classifier phase: fresh samples from the current model every inner step.
    DiscTrainResult disc_result{};
    if (cfg.adaptive_contrast) {
      auto q_std = [&]() {
        Tensor u = posterior_batch(model, cfg.s_train, rng);
        return standardize_with(moment_match(u), u);
      };
      auto p_std = [&]() {
        Tensor u = prior_batch(model, cfg.s_train, rng);
        return standardize_with(moment_match(u), u);
      };
      auto unit_noise = [&]() { return rng.normal_tensor({cfg.s_train, m}); };
      disc_result = train_discriminator(model.disc_q, model.disc_q_params, q_std, unit_noise,
                                        cfg.disc_steps, opt_disc_q);
      train_discriminator(model.disc_p, model.disc_p_params, p_std, unit_noise,
                          cfg.disc_steps, opt_disc_p);
    } else {
      auto q_raw = [&]() { return posterior_batch(model, cfg.s_train, rng); };
      auto p_raw = [&]() { return prior_batch(model, cfg.s_train, rng); };
      disc_result = train_discriminator(model.disc_q, model.disc_q_params, q_raw, p_raw,
                                        cfg.disc_steps, opt_disc_q);
    }

    // Main phase: one optimizer step on the full objective.
    Tape t;
    VarMap v = bind_model(t, model, cfg.freeze_posterior);
    ObjectiveParts parts = objective(t, v, model, xb, yb, n, cfg, epoch, rng);
    const double loss_val = parts.loss.value()[0];
    if (!std::isfinite(loss_val)) {
      model.params.unflatten(last_good);
      result.aborted = true;
      result.abort_epoch = epoch;
      break;
    }
    const double data_val = parts.data_term.value()[0];
    const double div_val = parts.divergence.value()[0];
    last_good = model.params.flatten();  // state that produced this finite loss
    t.backward(parts.loss);
    opt_main.step(model.params, t.grad_map());

    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(EpochRecord{epoch, loss_val, data_val, div_val, parts.beta,
                                         model.sigma2(), disc_result.final_loss, seconds});
    if (on_epoch) on_epoch(epoch, model);
  }
  return result;
}

PredictiveMixture predict(const SipModel& model, const Tensor& Xstar, int s, Rng& rng,
                          double jitter) {
  if (!model.prior || !model.posterior)
    throw std::invalid_argument("predict: model is missing its samplers");
  return predictive_mixture(*model.prior, model.params, *model.posterior, model.params,
                            model.inducing(), Xstar, s, model.sigma2(), rng, jitter);
}

void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_history_csv: cannot open " + path);
  out << "epoch,loss,data_term,divergence,beta,sigma2,disc_loss,seconds\n";
  char buf[256];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.epoch,
                  r.loss, r.data_term, r.divergence, r.beta, r.sigma2, r.disc_loss, r.seconds);
    out << buf;
  }
  if (!out) throw std::runtime_error("write_history_csv: write failed for " + path);
}

}  // namespace sip
