#pragma once

#include <memory>
#include <string>
#include <vector>

#include "sip/nets.hpp"
#include "sip/optim.hpp"
#include "sip/rng.hpp"
#include "sip/tape.hpp"

namespace sip {

/// A prior over functions that can only be sampled: each sample s is one
/// coherent function evaluated at all rows of X, so repeated input locations
/// within a sample always yield identical values.
class ImplicitPrior {
 public:
  virtual ~ImplicitPrior() = default;

  virtual void init_params(ParamStore& store, Rng& rng) const = 0;

  /// Draw S function samples at the rows of X (rank-2 [N, D] node) -> [S, N].
  /// Gradients flow to the prior parameters and to X itself.
  virtual Var sample_functions(Tape& t, const VarMap& v, Var X, int S, Rng& rng,
                               bool train_mode) const = 0;

  virtual int input_dim() const = 0;
  virtual std::string kind() const = 0;
  virtual const std::string& prefix() const = 0;
};

/// Bayesian network with factorized Gaussian weights: w = mu + softplus(rho) * eps
/// per sample, reparameterized so gradients reach mu and rho.
class BnnPrior : public ImplicitPrior {
 public:
  BnnPrior(int input_dim, std::vector<int> hidden = {50, 50},
           Activation act = Activation::kTanh, std::string prefix = "prior");

  void init_params(ParamStore& store, Rng& rng) const override;
  Var sample_functions(Tape& t, const VarMap& v, Var X, int S, Rng& rng,
                       bool train_mode) const override;
  int input_dim() const override { return widths_.front(); }
  std::string kind() const override { return "bnn"; }
  const std::string& prefix() const override { return prefix_; }

  const std::vector<int>& widths() const { return widths_; }

  // Flat-weight interface used by the Hamiltonian baseline: one weight vector
  // holds [w0, b0, w1, b1, ...] in layer order.
  int weight_count() const;
  Tensor flat_means(const ParamStore& store) const;
  Tensor flat_stds(const ParamStore& store) const;
  /// Evaluate the network at X under an explicit flat weight vector -> [N].
  Var eval_flat_weights(Tape& t, Var w, const Tensor& X) const;

 private:
  std::vector<int> widths_;
  Activation act_;
  std::string prefix_;
};

/// Neural sampler: f(x) = g([x; z]) with z ~ N(0, I) drawn once per function
/// sample. Optional dropout on hidden layers fires only in train mode.
class NeuralSamplerPrior : public ImplicitPrior {
 public:
  NeuralSamplerPrior(int input_dim, int noise_dim = 10,
                     std::vector<int> hidden = {50, 50},
                     Activation act = Activation::kTanh, double dropout_rate = 0.0,
                     std::string prefix = "prior");

  void init_params(ParamStore& store, Rng& rng) const override;
  Var sample_functions(Tape& t, const VarMap& v, Var X, int S, Rng& rng,
                       bool train_mode) const override;
  int input_dim() const override { return input_dim_; }
  std::string kind() const override { return "ns"; }
  const std::string& prefix() const override { return prefix_; }

  int noise_dim() const { return noise_dim_; }
  double dropout_rate() const { return dropout_rate_; }

 private:
  int input_dim_;
  int noise_dim_;
  std::vector<int> widths_;  // [input_dim + noise_dim, hidden..., 1]
  Activation act_;
  double dropout_rate_;
  std::string prefix_;
};

/// One coherent set of S function samples over the stacked locations
/// [X rows; Xbar rows] -> [S, N + M]; an empty Xbar degenerates to
/// sample_functions at X.
Var joint_prior_samples(const ImplicitPrior& prior, Tape& t, const VarMap& v, Var X,
                        Var Xbar, int S, Rng& rng, bool train_mode);

}  // namespace sip
