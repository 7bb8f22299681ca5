#pragma once

#include "sip/metrics.hpp"
#include "sip/optim.hpp"
#include "sip/posterior.hpp"
#include "sip/priors.hpp"
#include "sip/rng.hpp"
#include "sip/tape.hpp"

namespace sip {

/// Monte-Carlo estimates of the function-space Gaussian moments, computed from
/// S joint samples over [data rows; inducing rows]. Deviations use the sample
/// count S as divisor. Gradients flow back into the samples.
struct EmpiricalMoments {
  Var m_f;        // [N]  mean at the data locations
  Var m_u;        // [M]  mean at the inducing locations
  Var k_ff_diag;  // [N]  marginal prior variance at the data locations
  Var k_fu;       // [N, M]
  Var k_uu;       // [M, M]
  int s_used = 0;
};

EmpiricalMoments empirical_moments(Var joint_samples, int n, int m);

/// Full [N, N] covariance block over the data locations, for callers that need
/// more than the marginals (not used by the training objective).
Var empirical_kff_full(Var joint_samples, int n);

/// Gaussian conditional over function values given one inducing draw:
/// mean = m_f + K_fu (K_uu + jitter I)^-1 (u - m_u), variance clamped at 0.
struct ConditionalGaussian {
  Var mean;      // [N]
  Var variance;  // [N]
};

/// Batched version over S inducing draws: the means differ per draw while the
/// conditional variance is the same for every draw.
struct BatchConditional {
  Var means;     // [S, N]
  Var variance;  // [N]
};

ConditionalGaussian conditional(const EmpiricalMoments& mom, Var u,
                                double jitter = 1e-5);
BatchConditional conditional_batch(const EmpiricalMoments& mom, Var u_batch,
                                   double jitter = 1e-5);

/// Reparameterized draw f = mean + sqrt(variance) * eps; a zero-variance entry
/// returns the mean exactly and contributes no variance gradient.
Var sample_f_given_u(Tape& t, const ConditionalGaussian& cond, Rng& rng);
Var sample_f_given_u(Tape& t, const BatchConditional& cond, Rng& rng);

/// Equal-weight Gaussian mixture over S posterior draws at the test inputs.
/// One set of fresh prior joint samples fixes the empirical moments; each
/// component conditions those moments on one inducing draw. Component
/// variances include the observation noise sigma2_noise.
PredictiveMixture predictive_mixture(const ImplicitPrior& prior,
                                     const ParamStore& prior_params,
                                     const PosteriorSampler& q,
                                     const ParamStore& q_params, const Tensor& Xbar,
                                     const Tensor& Xstar, int S, double sigma2_noise,
                                     Rng& rng, double jitter = 1e-5);

}  // namespace sip
