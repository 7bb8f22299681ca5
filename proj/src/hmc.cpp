#include "sip/hmc.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <numbers>
#include <stdexcept>

#include "sip/optim.hpp"
#include "sip/rng.hpp"
#include "sip/tape.hpp"

namespace sip {

namespace {

bool all_finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

double squared_norm(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return acc;
}

}  // namespace

void HmcConfig::validate() const {
  if (leapfrog_steps < 1)
    throw std::invalid_argument("HmcConfig: leapfrog_steps must be >= 1");
  if (!(step_size > 0.0)) throw std::invalid_argument("HmcConfig: step_size must be positive");
  if (chain_length < 1) throw std::invalid_argument("HmcConfig: chain_length must be >= 1");
  if (burn_in < 0) throw std::invalid_argument("HmcConfig: burn_in must be >= 0");
  if (burn_in > chain_length)
    throw std::invalid_argument("HmcConfig: burn_in cannot exceed chain_length");
}

LeapfrogResult leapfrog(const LogDensityTarget& target, std::vector<double> w,
                        std::vector<double> p, int L, double eps) {
  if (L < 1) throw std::invalid_argument("leapfrog: L must be >= 1");
  if (!(eps > 0.0)) throw std::invalid_argument("leapfrog: eps must be positive");
  if (static_cast<int>(w.size()) != target.dim || w.size() != p.size())
    throw std::invalid_argument("leapfrog: dimension mismatch");
  if (!all_finite(w) || !all_finite(p))
    throw std::invalid_argument("leapfrog: start must be finite");

  const std::size_t d = w.size();
  std::vector<double> g = target.gradient(w);
  if (g.size() != d || !all_finite(g)) return {std::move(w), std::move(p), false};
  for (std::size_t i = 0; i < d; ++i) p[i] += 0.5 * eps * g[i];
  for (int l = 0; l < L; ++l) {
    for (std::size_t i = 0; i < d; ++i) w[i] += eps * p[i];
    if (!all_finite(w)) return {std::move(w), std::move(p), false};
    g = target.gradient(w);
    if (g.size() != d || !all_finite(g)) return {std::move(w), std::move(p), false};
    const double kick = (l + 1 < L) ? eps : 0.5 * eps;
    for (std::size_t i = 0; i < d; ++i) p[i] += kick * g[i];
    if (!all_finite(p)) return {std::move(w), std::move(p), false};
  }
  return {std::move(w), std::move(p), true};
}

HmcResult hmc_sample(const LogDensityTarget& target, const HmcConfig& cfg,
                     const std::vector<double>& w0) {
  cfg.validate();
  if (static_cast<int>(w0.size()) != target.dim)
    throw std::invalid_argument("hmc_sample: start dimension mismatch");
  if (!all_finite(w0)) throw std::invalid_argument("hmc_sample: start must be finite");
  if (!target.log_density || !target.gradient)
    throw std::invalid_argument("hmc_sample: target callables are empty");

  Rng rng(cfg.seed);
  std::vector<double> w = w0;
  double logp = target.log_density(w);
  if (!std::isfinite(logp))
    throw std::invalid_argument("hmc_sample: start has non-finite log density");

  HmcResult result;
  result.trace.reserve(static_cast<std::size_t>(cfg.chain_length));
  result.chain.reserve(static_cast<std::size_t>(cfg.chain_length - cfg.burn_in));
  int accepted_total = 0;
  int accepted_early = 0;
  const double inf = std::numeric_limits<double>::infinity();

  for (int step = 0; step < cfg.chain_length; ++step) {
    std::vector<double> p(w.size());
    for (double& pi : p) pi = rng.normal();
    const double kinetic0 = 0.5 * squared_norm(p);

    LeapfrogResult prop =
        leapfrog(target, w, p, cfg.leapfrog_steps, cfg.step_size);
    const double log_u = std::log(rng.uniform());

    double delta_h = inf;
    double logp_new = -inf;
    if (prop.finite) {
      logp_new = target.log_density(prop.w);
      const double dh = (-logp_new + 0.5 * squared_norm(prop.p)) - (-logp + kinetic0);
      delta_h = std::isnan(dh) ? inf : dh;
    }
    const bool accept = prop.finite && std::isfinite(logp_new) && log_u <= -delta_h;
    if (accept) {
      w = std::move(prop.w);
      logp = logp_new;
      ++accepted_total;
      if (step < 500) ++accepted_early;
    }
    result.trace.push_back(HmcTraceRow{step, logp, accept, log_u, delta_h});
    if (step >= cfg.burn_in) result.chain.push_back(w);
  }

  result.acceptance_rate =
      static_cast<double>(accepted_total) / static_cast<double>(cfg.chain_length);
  const int early_window = std::min(500, cfg.chain_length);
  result.low_acceptance_warning =
      static_cast<double>(accepted_early) < 0.01 * static_cast<double>(early_window);
  return result;
}

LogDensityTarget bnn_posterior_target(const BnnPrior& prior, const ParamStore& params,
                                      const Tensor& X, const Tensor& y,
                                      double sigma2_noise) {
  if (X.rank() != 2 || X.cols() != prior.input_dim())
    throw std::invalid_argument("bnn_posterior_target: X must be [N, D] matching the prior");
  if (y.rank() != 1 || y.dim(0) != X.rows())
    throw std::invalid_argument("bnn_posterior_target: targets must be [N]");
  if (!(sigma2_noise > 0.0))
    throw std::invalid_argument("bnn_posterior_target: noise variance must be positive");

  struct Context {
    const BnnPrior* prior;
    Tensor mu, sd, X, y;
    double sigma2;
    double log_norm;  // additive constant of the full log density
    int dim;
  };
  auto ctx = std::make_shared<Context>();
  ctx->prior = &prior;
  ctx->mu = prior.flat_means(params);
  ctx->sd = prior.flat_stds(params);
  ctx->X = X;
  ctx->y = y;
  ctx->sigma2 = sigma2_noise;
  ctx->dim = prior.weight_count();
  double log_det = 0.0;
  for (std::int64_t j = 0; j < ctx->sd.numel(); ++j) {
    if (!(ctx->sd[j] > 0.0))
      throw std::invalid_argument("bnn_posterior_target: prior stds must be positive");
    log_det += std::log(ctx->sd[j]);
  }
  const double n = static_cast<double>(X.rows());
  ctx->log_norm = -0.5 * ctx->dim * std::log(2.0 * std::numbers::pi) - log_det -
                  0.5 * n * std::log(2.0 * std::numbers::pi * sigma2_noise);

  // Quadratic part of the log density on a fresh tape; the additive constant
  // is folded in after evaluation.
  auto evaluate = [ctx](const std::vector<double>& w, std::vector<double>* grad_out) {
    if (static_cast<int>(w.size()) != ctx->dim)
      throw std::invalid_argument("bnn_posterior_target: weight vector has wrong length");
    Tensor wt = Tensor::zeros({ctx->dim});
    for (int i = 0; i < ctx->dim; ++i) wt[i] = w[static_cast<std::size_t>(i)];
    Tape t;
    Var wv = t.leaf("w", wt);
    Var z = (wv - t.constant(ctx->mu)) / t.constant(ctx->sd);
    Var log_prior_quad = sum(square(z)) * (-0.5);
    Var out = ctx->prior->eval_flat_weights(t, wv, ctx->X);
    Var resid = out - t.constant(ctx->y);
    Var log_lik_quad = sum(square(resid)) * (-0.5 / ctx->sigma2);
    Var total = log_prior_quad + log_lik_quad;
    if (grad_out != nullptr) {
      t.backward(total);
      const Tensor g = t.grad_map().at("w");
      grad_out->assign(g.data(), g.data() + g.numel());
    }
    return total.value()[0] + ctx->log_norm;
  };

  LogDensityTarget target;
  target.dim = ctx->dim;
  target.log_density = [evaluate](const std::vector<double>& w) {
    return evaluate(w, nullptr);
  };
  target.gradient = [evaluate](const std::vector<double>& w) {
    std::vector<double> g;
    evaluate(w, &g);
    return g;
  };
  return target;
}

PredictiveMixture hmc_predictive(const BnnPrior& prior,
                                 const std::vector<std::vector<double>>& chain,
                                 const Tensor& Xstar, double sigma2_noise, int thinning) {
  if (chain.empty()) throw std::invalid_argument("hmc_predictive: chain is empty");
  if (thinning < 1) throw std::invalid_argument("hmc_predictive: thinning must be >= 1");
  if (!(sigma2_noise > 0.0))
    throw std::invalid_argument("hmc_predictive: noise variance must be positive");
  if (Xstar.rank() != 2 || Xstar.cols() != prior.input_dim())
    throw std::invalid_argument("hmc_predictive: Xstar must be [N, D] matching the prior");
  const int p_dim = prior.weight_count();
  const int n = Xstar.rows();

  std::vector<std::size_t> retained;
  for (std::size_t i = 0; i < chain.size(); i += static_cast<std::size_t>(thinning))
    retained.push_back(i);
  const int c = static_cast<int>(retained.size());

  PredictiveMixture mix;
  mix.means = Tensor::zeros({c, n});
  mix.vars = Tensor::full({c, n}, sigma2_noise);
  for (int k = 0; k < c; ++k) {
    const std::vector<double>& w = chain[retained[static_cast<std::size_t>(k)]];
    if (static_cast<int>(w.size()) != p_dim)
      throw std::invalid_argument("hmc_predictive: chain entry has wrong length");
    Tensor wt = Tensor::zeros({p_dim});
    for (int i = 0; i < p_dim; ++i) wt[i] = w[static_cast<std::size_t>(i)];
    Tape t;
    Var out = prior.eval_flat_weights(t, t.constant(wt), Xstar);
    const Tensor& row = out.value();
    for (int j = 0; j < n; ++j) mix.means[static_cast<std::int64_t>(k) * n + j] = row[j];
  }
  return mix;
}

void write_trace_csv(const std::string& path, const std::vector<HmcTraceRow>& trace) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_trace_csv: cannot open " + path);
  out << "step,log_density,accepted,log_u,delta_h\n";
  char buf[192];
  for (const HmcTraceRow& r : trace) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%d,%.17g,%.17g\n", r.step, r.log_density,
                  r.accepted ? 1 : 0, r.log_u, r.delta_h);
    out << buf;
  }
  if (!out) throw std::runtime_error("write_trace_csv: write failed for " + path);
}

}  // namespace sip
