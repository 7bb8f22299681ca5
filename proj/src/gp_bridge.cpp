#include "sip/gp_bridge.hpp"

#include <stdexcept>
#include <string>

namespace sip {

EmpiricalMoments empirical_moments(Var joint_samples, int n, int m) {
  const Tensor& val = joint_samples.value();
  if (val.rank() != 2)
    throw std::invalid_argument("empirical_moments: samples must be [S, N+M]");
  const int s = val.dim(0);
  if (s < 1) throw std::invalid_argument("empirical_moments: need S >= 1");
  if (n < 1 || m < 1)
    throw std::invalid_argument("empirical_moments: need N >= 1 and M >= 1");
  if (val.dim(1) != n + m)
    throw std::invalid_argument("empirical_moments: samples have " +
                                std::to_string(val.dim(1)) + " columns, expected N+M = " +
                                std::to_string(n + m));

  Var mbar = mean(joint_samples, 0);            // [N+M]
  Var delta = joint_samples - mbar;             // [S, N+M]
  Var df = slice_last(delta, 0, n);             // [S, N]
  Var du = slice_last(delta, n, m);             // [S, M]
  const double inv_s = 1.0 / static_cast<double>(s);

  EmpiricalMoments mom;
  mom.m_f = slice_last(mbar, 0, n);
  mom.m_u = slice_last(mbar, n, m);
  mom.k_ff_diag = mean(df * df, 0);                       // [N]
  mom.k_fu = matmul(transpose(df), du) * inv_s;           // [N, M]
  mom.k_uu = matmul(transpose(du), du) * inv_s;           // [M, M]
  mom.s_used = s;
  return mom;
}

Var empirical_kff_full(Var joint_samples, int n) {
  const Tensor& val = joint_samples.value();
  if (val.rank() != 2 || val.dim(1) < n || n < 1)
    throw std::invalid_argument("empirical_kff_full: bad sample block");
  const int s = val.dim(0);
  Var mbar = mean(joint_samples, 0);
  Var df = slice_last(joint_samples - mbar, 0, n);
  return matmul(transpose(df), df) * (1.0 / static_cast<double>(s));
}

BatchConditional conditional_batch(const EmpiricalMoments& mom, Var u_batch,
                                   double jitter) {
  const Tensor& uv = u_batch.value();
  const int m = mom.m_u.value().dim(0);
  if (uv.rank() != 2 || uv.dim(1) != m)
    throw std::invalid_argument("conditional_batch: u must be [S, M] with M = " +
                                std::to_string(m));
  // One factorization serves every draw: solve (K_uu + jitter I) B = K_uf.
  Var b = psd_solve(mom.k_uu, transpose(mom.k_fu), jitter);  // [M, N]
  Var centered = u_batch - mom.m_u;                          // [S, M]
  BatchConditional out;
  out.means = matmul(centered, b) + mom.m_f;                 // [S, N]
  Var explained = sum(mom.k_fu * transpose(b), 1);           // [N]
  out.variance = clamp_min(mom.k_ff_diag - explained, 0.0);
  return out;
}

ConditionalGaussian conditional(const EmpiricalMoments& mom, Var u,
                                double jitter) {
  const Tensor& uv = u.value();
  const int m = mom.m_u.value().dim(0);
  if (uv.rank() != 1 || uv.dim(0) != m)
    throw std::invalid_argument("conditional: u must be length-M with M = " +
                                std::to_string(m));
  BatchConditional batch = conditional_batch(mom, reshape(u, {1, m}), jitter);
  const int n = mom.m_f.value().dim(0);
  return {reshape(batch.means, {n}), batch.variance};
}

Var sample_f_given_u(Tape& t, const ConditionalGaussian& cond, Rng& rng) {
  Var eps = t.constant(rng.normal_tensor(cond.mean.shape()));
  return cond.mean + sqrt_clamped(cond.variance) * eps;
}

Var sample_f_given_u(Tape& t, const BatchConditional& cond, Rng& rng) {
  Var eps = t.constant(rng.normal_tensor(cond.means.shape()));
  return cond.means + sqrt_clamped(cond.variance) * eps;
}

PredictiveMixture predictive_mixture(const ImplicitPrior& prior,
                                     const ParamStore& prior_params,
                                     const PosteriorSampler& q,
                                     const ParamStore& q_params, const Tensor& Xbar,
                                     const Tensor& Xstar, int S, double sigma2_noise,
                                     Rng& rng, double jitter) {
  if (S < 1) throw std::invalid_argument("predictive_mixture: need S >= 1");
  if (!(sigma2_noise > 0.0))
    throw std::invalid_argument("predictive_mixture: observation noise must be > 0");
  if (Xbar.rank() != 2 || Xstar.rank() != 2)
    throw std::invalid_argument("predictive_mixture: inputs must be rank-2");
  const int n = Xstar.rows();
  const int m = Xbar.rows();

  Tape t;
  VarMap vp = bind_constants(t, prior_params);
  VarMap vq = bind_constants(t, q_params);
  Var joint = joint_prior_samples(prior, t, vp, t.constant(Xstar), t.constant(Xbar), S,
                                  rng, /*train_mode=*/false);
  EmpiricalMoments mom = empirical_moments(joint, n, m);
  Var u = q.sample_u(t, vq, S, rng);
  BatchConditional cond = conditional_batch(mom, u, jitter);

  PredictiveMixture mix;
  mix.means = cond.means.value();
  mix.vars = Tensor({S, n});
  const Tensor& v = cond.variance.value();
  for (int s = 0; s < S; ++s)
    for (int i = 0; i < n; ++i) mix.vars.at(s, i) = v[i] + sigma2_noise;
  return mix;
}

}  // namespace sip
