#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "sip/tape.hpp"
#include "sip/tensor.hpp"

namespace sip {

/// Named collection of trainable tensors. Iteration follows sorted name order,
/// which also fixes the layout of the flat serialized vector.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor init);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::size_t count() const { return params_.size(); }
  std::int64_t numel_total() const;

  std::map<std::string, Tensor>& items() { return params_; }
  const std::map<std::string, Tensor>& items() const { return params_; }

  std::vector<double> flatten() const;
  void unflatten(const std::vector<double>& flat);

 private:
  std::map<std::string, Tensor> params_;
};

/// Leaf handles created when a ParamStore is bound onto a tape.
using VarMap = std::map<std::string, Var>;

/// Bind every parameter as a registered trainable leaf.
VarMap bind_leaves(Tape& tape, const ParamStore& params);
/// Bind every parameter as a constant -- for frozen parameter groups.
VarMap bind_constants(Tape& tape, const ParamStore& params);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers are keyed by parameter name; the
/// step counter is shared, so a given instance should see the same key set on
/// every step.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  /// One update over exactly the keys in `grads`; every key must name a
  /// parameter of matching shape.
  void step(ParamStore& params, const std::map<std::string, Tensor>& grads);

  std::int64_t step_count() const { return t_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  std::int64_t t_ = 0;
  std::map<std::string, Tensor> m_;
  std::map<std::string, Tensor> v_;
};

struct GradcheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::int64_t worst_coord = -1;
  double tape_grad = 0.0;  // at the worst coordinate
  double fd_grad = 0.0;
  std::int64_t coords_checked = 0;
};

/// Scalar objective built on a tape from bound parameter leaves. Must be
/// deterministic across calls (fix any randomness outside).
using TapeFn = std::function<Var(Tape&, const VarMap&)>;

/// Compare tape gradients of f against central finite differences. The step
/// for a coordinate with value x is h * max(1, |x|). Relative error uses
/// max(|fd|, |tape|, 1e-2) as denominator so near-zero gradients compare on
/// an absolute scale. With max_coords_per_param >= 0 only an evenly spaced
/// subset of coordinates is checked per parameter.
GradcheckReport gradcheck(const TapeFn& f, const ParamStore& params, double h,
                          std::int64_t max_coords_per_param = -1);

}  // namespace sip
