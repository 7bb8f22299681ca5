#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sip/nets.hpp"
#include "sip/optim.hpp"
#include "sip/rng.hpp"
#include "sip/tape.hpp"
#include "sip/tensor.hpp"

namespace sip {

/// Scalar-logit classifier T(u) over inducing-value vectors. When trained to
/// separate two sample streams its logit approaches the log density ratio
/// between them.
class Discriminator {
 public:
  explicit Discriminator(int input_dim, std::vector<int> hidden = {50, 50},
                         Activation act = Activation::kLeakyRelu,
                         std::string prefix = "disc");

  void init_params(ParamStore& store, Rng& rng) const;

  /// Logits for a batch [B, M] -> [B].
  Var logits(Tape& t, const VarMap& v, Var u) const;

  int input_dim() const { return widths_.front(); }
  const std::string& prefix() const { return prefix_; }

 private:
  std::vector<int> widths_;  // [M, hidden..., 1]
  Activation act_;
  std::string prefix_;
};

/// Binary cross-entropy for logit batches from the two streams, stabilized as
/// mean softplus(-T_q) + mean softplus(T_p). Zero logits give 2 ln 2.
Var discriminator_loss(Var t_q, Var t_p);

/// Symmetrized divergence from logits: (mean_q T - mean_p T) / 2.
Var sym_kl_from_logits(Var t_q, Var t_p);

/// Symmetrized divergence estimate with the classifier weights held constant:
/// gradients flow only through the sample paths of q_samples and p_samples.
Var estimate_sym_kl(const Discriminator& disc, const ParamStore& disc_params, Tape& t,
                    Var q_samples, Var p_samples);

/// Fresh [B, M] batch on every call.
using BatchSampler = std::function<Tensor()>;

struct DiscTrainResult {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  int steps = 0;
};

/// k inner optimizer steps on discriminator_loss, drawing fresh batches from
/// both samplers each step. Throws if the loss blows past 10x the larger of
/// its first-step value and the chance-level loss of a silent classifier
/// (2 ln 2) -- the floor keeps batch noise around a near-zero warm start from
/// tripping the guard. Only disc_params change.
DiscTrainResult train_discriminator(const Discriminator& disc, ParamStore& disc_params,
                                    const BatchSampler& sample_q,
                                    const BatchSampler& sample_p, int k_steps,
                                    Adam& opt);

/// Diagonal Gaussian summary of a sample batch; standard deviations floored at
/// 1e-6 so degenerate batches stay usable.
struct MomentGaussian {
  Tensor mean;  // [M]
  Tensor std;   // [M]
};

MomentGaussian moment_match(const Tensor& samples);  // [B, M]

/// log N(u|a) - log N(u|b), diagonal closed form. The scalar overload takes one
/// length-M point; the Var overload maps a [B, M] batch to per-row values [B]
/// with gradients flowing into u.
double gaussian_log_ratio(const MomentGaussian& a, const MomentGaussian& b,
                          const Tensor& u);
Var gaussian_log_ratio(Tape& t, const MomentGaussian& a, const MomentGaussian& b,
                       Var u_batch);

/// (u - mean) / std, componentwise.
Tensor standardize_with(const MomentGaussian& g, const Tensor& samples);
Var standardize_with(Tape& t, const MomentGaussian& g, Var samples);

/// Two-classifier variant: each classifier separates one stream from its own
/// moment-matched Gaussian (inputs standardized by those moments), and the
/// tractable Gaussian log-ratio carries the bulk of the divergence in closed
/// form. Moment matches are recomputed from the incoming batches and treated
/// as constants.
Var estimate_sym_kl_adaptive(const Discriminator& disc_q,
                             const ParamStore& disc_q_params,
                             const Discriminator& disc_p,
                             const ParamStore& disc_p_params, Tape& t, Var q_samples,
                             Var p_samples);

}  // namespace sip
