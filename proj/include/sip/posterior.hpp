#pragma once

#include <string>
#include <vector>

#include "sip/nets.hpp"
#include "sip/optim.hpp"
#include "sip/rng.hpp"
#include "sip/tape.hpp"

namespace sip {

/// Implicit sampler over inducing values u: u_s = net(eps_s), eps_s standard
/// normal. The freeze flag tells the trainer to exclude these weights from
/// updates while sampling keeps working.
class PosteriorSampler {
 public:
  PosteriorSampler(int m, int noise_dim = 100, std::vector<int> hidden = {50, 50},
                   Activation act = Activation::kTanh, std::string prefix = "post");

  void init_params(ParamStore& store, Rng& rng) const;

  /// S draws of inducing values -> [S, M]; gradients flow to the weights.
  Var sample_u(Tape& t, const VarMap& v, int S, Rng& rng) const;

  int m() const { return widths_.back(); }
  int noise_dim() const { return widths_.front(); }
  const std::string& prefix() const { return prefix_; }

  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

 private:
  std::vector<int> widths_;  // [noise_dim, hidden..., M]
  Activation act_;
  std::string prefix_;
  bool frozen_ = false;
};

enum class InducingInit { kSubset, kUniform, kConcentrated };

InducingInit inducing_init_from_string(const std::string& s);
const char* to_string(InducingInit s);

/// Initial inducing locations [M, D].
/// - subset: M distinct training inputs;
/// - uniform: per-dimension uniform over the data range;
/// - concentrated: every row at `center` plus N(0, 1e-3) jitter.
Tensor init_inducing(InducingInit strategy, const Tensor& X, int m, Rng& rng,
                     const std::vector<double>& center = {});

}  // namespace sip
