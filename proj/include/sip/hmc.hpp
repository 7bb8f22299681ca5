#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sip/gp_bridge.hpp"
#include "sip/priors.hpp"
#include "sip/tensor.hpp"

namespace sip {

struct HmcConfig {
  int leapfrog_steps = 25;
  double step_size = 5e-5;
  int chain_length = 10000;
  int burn_in = 2000;  // fifth of the default chain
  std::uint64_t seed = 0;

  void validate() const;  // throws std::invalid_argument
};

/// Differentiable log density over a flat weight vector. Both callables must
/// accept vectors of length `dim`; `gradient` returns a vector of that length.
struct LogDensityTarget {
  int dim = 0;
  std::function<double(const std::vector<double>&)> log_density;
  std::function<std::vector<double>(const std::vector<double>&)> gradient;
};

struct LeapfrogResult {
  std::vector<double> w;
  std::vector<double> p;
  bool finite = true;  // false if the trajectory left the floating-point range
};

/// Half-kick, L interleaved drift/kick steps, half-kick under
/// H(w, p) = -log_density(w) + |p|^2 / 2. Volume-preserving and reversible:
/// rerunning from (w', -p') returns to the start.
LeapfrogResult leapfrog(const LogDensityTarget& target, std::vector<double> w,
                        std::vector<double> p, int L, double eps);

struct HmcTraceRow {
  int step = 0;
  double log_density = 0.0;  // of the retained state after the decision
  bool accepted = false;
  double log_u = 0.0;   // the log-uniform draw, re-checkable against delta_h
  double delta_h = 0.0;  // proposal H minus current H; infinite when unstable
};

struct HmcResult {
  std::vector<std::vector<double>> chain;  // post burn-in states, duplicates kept
  double acceptance_rate = 0.0;            // over the full run
  bool low_acceptance_warning = false;     // under 1% over the first 500 steps
  std::vector<HmcTraceRow> trace;          // one row per step of the full run
};

/// Metropolis-adjusted Hamiltonian chain with standard Gaussian momenta.
/// Deterministic given cfg.seed; a rejected or non-finite proposal repeats the
/// current state.
HmcResult hmc_sample(const LogDensityTarget& target, const HmcConfig& cfg,
                     const std::vector<double>& w0);

/// Gaussian prior taken from the checkpointed per-weight means/stds plus a
/// Gaussian likelihood on (X, y) with fixed noise variance, over the network's
/// flat weight vector.
LogDensityTarget bnn_posterior_target(const BnnPrior& prior, const ParamStore& params,
                                      const Tensor& X, const Tensor& y,
                                      double sigma2_noise);

/// Equal-weight mixture with one component per retained chain state (indices
/// 0, thinning, 2*thinning, ...): mean NN_w(x*), variance sigma2_noise.
PredictiveMixture hmc_predictive(const BnnPrior& prior,
                                 const std::vector<std::vector<double>>& chain,
                                 const Tensor& Xstar, double sigma2_noise, int thinning);

/// Trace CSV: step,log_density,accepted,log_u,delta_h.
void write_trace_csv(const std::string& path, const std::vector<HmcTraceRow>& trace);

}  // namespace sip
