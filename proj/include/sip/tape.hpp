#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sip/tensor.hpp"

namespace sip {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid for the tape's lifetime.
struct Var {
  Tape* tape = nullptr;
  int idx = -1;

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const;
  std::int64_t numel() const;
};

struct TapeOptions {
  bool check_finite = false;  ///< validate every op output for NaN/Inf
};

/// Reverse-mode gradient tape over Tensor values. Ops append nodes in
/// topological order; backward() sweeps them once in reverse, so every node is
/// visited exactly once and repeated uses of a value sum their contributions.
/// A tape is single-threaded and must stay at a fixed address (op closures
/// capture `this`).
class Tape {
 public:
  explicit Tape(TapeOptions options = {}) : options_(options) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // ---- node creation ----
  Var leaf(const Tensor& value);                           // trainable, anonymous
  Var leaf(const std::string& name, const Tensor& value);  // trainable, registered
  Var constant(Tensor value);
  Var constant(double value);

  // ---- access ----
  const Tensor& value(Var v) const;
  const Tensor& grad(Var v) const;  // valid after backward()
  std::size_t node_count() const { return nodes_.size(); }

  /// Accumulate d(loss)/d(node) for every node that needs gradients.
  /// Trainable leaves the loss does not reach end with zero gradients.
  void backward(Var loss);

  /// Gradients of all registered leaves, keyed by name (after backward()).
  std::map<std::string, Tensor> grad_map() const;

  // ---- elementwise; binary ops broadcast trailing-aligned dimensions ----
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var neg(Var a);

  Var tanh(Var a);
  Var exp(Var a);
  Var log(Var a);       // domain error on x <= 0
  Var softplus(Var a);  // log(1 + e^x) without overflow
  Var sigmoid(Var a);
  Var square(Var a);
  Var sqrt(Var a);  // domain error on x < 0
  // sqrt(max(x, 0)) as one op; the gradient is 0 wherever x <= 0, which is the
  // total derivative of the fused expression and avoids 0 * inf at the boundary.
  Var sqrt_clamped(Var a);
  Var leaky_relu(Var a, double negative_slope);
  Var clamp_min(Var a, double lo);

  // ---- shape ----
  Var reshape(Var a, Shape shape);
  Var broadcast_to(Var a, Shape shape);
  Var transpose(Var a);                       // rank-2
  Var concat_rows(Var a, Var b);              // rank-2: stack along the first axis
  Var concat_last(Var a, Var b);              // join along the last axis
  Var slice_last(Var a, int start, int len);  // window along the last axis

  // ---- reductions ----
  Var sum(Var a);
  Var sum(Var a, int axis);
  Var mean(Var a);
  Var mean(Var a, int axis);
  Var logsumexp(Var a, int axis);  // max-shifted; stable for inputs up to +-1e6

  // ---- linear algebra ----
  Var matmul(Var a, Var b);  // rank-2 x rank-2
  /// Batched matmul over the leading axis; a rank-2 operand is shared across
  /// the batch.
  Var bmm(Var a, Var b);
  /// Solve (sym(A) + jitter*I) X = B with A positive definite, via a Cholesky
  /// factorization that is computed once and reused in the backward pass.
  /// Gradients flow to A, B, and jitter. Failure reports the first
  /// non-positive-definite leading minor.
  Var psd_solve(Var a, Var b, Var jitter);
  Var psd_solve(Var a, Var b, double jitter);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::function<void()> backward;
  };

  int push(Tensor value, bool requires_grad);
  void accumulate_reduced(int idx, const Tensor& g);  // reduce g to node shape
  bool rg(Var v) const { return nodes_[v.idx].requires_grad; }
  void check_tape(Var v) const;
  void check_output(const Tensor& t, const char* op) const;
  Node& node(int idx) { return nodes_[idx]; }

  TapeOptions options_;
  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, int>> named_leaves_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape->value(*this); }
inline const Tensor& Var::grad() const { return tape->grad(*this); }
inline const Shape& Var::shape() const { return value().shape(); }
inline std::int64_t Var::numel() const { return value().numel(); }

// Operator and free-function forms so numeric code reads like formulas.
inline Var operator+(Var a, Var b) { return a.tape->add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape->mul(a, b); }
inline Var operator/(Var a, Var b) { return a.tape->div(a, b); }
inline Var operator-(Var a) { return a.tape->neg(a); }
inline Var operator+(Var a, double b) { return a.tape->add(a, a.tape->constant(b)); }
inline Var operator+(double a, Var b) { return b.tape->add(b.tape->constant(a), b); }
inline Var operator-(Var a, double b) { return a.tape->sub(a, a.tape->constant(b)); }
inline Var operator-(double a, Var b) { return b.tape->sub(b.tape->constant(a), b); }
inline Var operator*(Var a, double b) { return a.tape->mul(a, a.tape->constant(b)); }
inline Var operator*(double a, Var b) { return b.tape->mul(b.tape->constant(a), b); }
inline Var operator/(Var a, double b) { return a.tape->div(a, a.tape->constant(b)); }
inline Var operator/(double a, Var b) { return b.tape->div(b.tape->constant(a), b); }

inline Var tanh(Var a) { return a.tape->tanh(a); }
inline Var exp(Var a) { return a.tape->exp(a); }
inline Var log(Var a) { return a.tape->log(a); }
inline Var softplus(Var a) { return a.tape->softplus(a); }
inline Var sigmoid(Var a) { return a.tape->sigmoid(a); }
inline Var square(Var a) { return a.tape->square(a); }
inline Var sqrt(Var a) { return a.tape->sqrt(a); }
inline Var sqrt_clamped(Var a) { return a.tape->sqrt_clamped(a); }
inline Var leaky_relu(Var a, double negative_slope) {
  return a.tape->leaky_relu(a, negative_slope);
}
inline Var clamp_min(Var a, double lo) { return a.tape->clamp_min(a, lo); }
inline Var reshape(Var a, Shape shape) { return a.tape->reshape(a, std::move(shape)); }
inline Var broadcast_to(Var a, Shape shape) {
  return a.tape->broadcast_to(a, std::move(shape));
}
inline Var transpose(Var a) { return a.tape->transpose(a); }
inline Var concat_rows(Var a, Var b) { return a.tape->concat_rows(a, b); }
inline Var concat_last(Var a, Var b) { return a.tape->concat_last(a, b); }
inline Var slice_last(Var a, int start, int len) {
  return a.tape->slice_last(a, start, len);
}
inline Var sum(Var a) { return a.tape->sum(a); }
inline Var sum(Var a, int axis) { return a.tape->sum(a, axis); }
inline Var mean(Var a) { return a.tape->mean(a); }
inline Var mean(Var a, int axis) { return a.tape->mean(a, axis); }
inline Var logsumexp(Var a, int axis) { return a.tape->logsumexp(a, axis); }
inline Var matmul(Var a, Var b) { return a.tape->matmul(a, b); }
inline Var bmm(Var a, Var b) { return a.tape->bmm(a, b); }
inline Var psd_solve(Var a, Var b, Var jitter) { return a.tape->psd_solve(a, b, jitter); }
inline Var psd_solve(Var a, Var b, double jitter) {
  return a.tape->psd_solve(a, b, jitter);
}

}  // namespace sip
