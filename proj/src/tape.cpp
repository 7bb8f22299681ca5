#include "sip/tape.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace sip {

namespace {

using std::int64_t;

// Strides of `shape` aligned to the trailing dimensions of an output of rank
// `out_rank`; broadcast (size-1 or missing) dimensions get stride 0.
std::vector<int64_t> aligned_strides(const Shape& shape, const Shape& out) {
  const int r = static_cast<int>(out.size());
  const int pad = r - static_cast<int>(shape.size());
  std::vector<int64_t> strides(static_cast<size_t>(r), 0);
  int64_t s = 1;
  for (int d = r - 1; d >= 0; --d) {
    const int dim = d < pad ? 1 : shape[static_cast<size_t>(d - pad)];
    strides[static_cast<size_t>(d)] = dim == 1 ? 0 : s;
    s *= dim;
  }
  return strides;
}

// Elementwise binary map with trailing-aligned broadcasting.
template <class F>
Tensor ew_binary(const Tensor& a, const Tensor& b, F f) {
  if (a.same_shape(b)) {
    Tensor out(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (int64_t i = 0, n = out.numel(); i < n; ++i) po[i] = f(pa[i], pb[i]);
    return out;
  }
  if (b.numel() == 1 && b.rank() <= a.rank()) {
    Tensor out(a.shape());
    const double* pa = a.data();
    const double y = b[0];
    double* po = out.data();
    for (int64_t i = 0, n = out.numel(); i < n; ++i) po[i] = f(pa[i], y);
    return out;
  }
  if (a.numel() == 1 && a.rank() <= b.rank()) {
    Tensor out(b.shape());
    const double x = a[0];
    const double* pb = b.data();
    double* po = out.data();
    for (int64_t i = 0, n = out.numel(); i < n; ++i) po[i] = f(x, pb[i]);
    return out;
  }
  const Shape os = broadcast_shape(a.shape(), b.shape());
  Tensor out(os);
  const int r = static_cast<int>(os.size());
  const std::vector<int64_t> sa = aligned_strides(a.shape(), os);
  const std::vector<int64_t> sb = aligned_strides(b.shape(), os);
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0, n = out.numel(); i < n; ++i) {
    po[i] = f(pa[oa], pb[ob]);
    for (int d = r - 1; d >= 0; --d) {
      const size_t du = static_cast<size_t>(d);
      ++idx[du];
      oa += sa[du];
      ob += sb[du];
      if (idx[du] < os[du]) break;
      idx[du] = 0;
      oa -= sa[du] * os[du];
      ob -= sb[du] * os[du];
    }
  }
  return out;
}

// Sum `g` down to `target` (the inverse of broadcasting g's shape from it).
Tensor reduce_to(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  Tensor out(target);
  const Shape& gs = g.shape();
  const int r = g.rank();
  const int pad = r - static_cast<int>(target.size());
  if (pad < 0) throw std::logic_error("reduce_to: target rank exceeds source rank");
  std::vector<int64_t> st(static_cast<size_t>(r), 0);
  int64_t s = 1;
  for (int d = r - 1; d >= 0; --d) {
    const int tdim = d < pad ? 1 : target[static_cast<size_t>(d - pad)];
    if (tdim != 1 && tdim != gs[static_cast<size_t>(d)])
      throw std::logic_error("reduce_to: incompatible shapes " + shape_str(gs) + " -> " +
                             shape_str(target));
    st[static_cast<size_t>(d)] = tdim == 1 ? 0 : s;
    s *= tdim;
  }
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  const double* pg = g.data();
  double* po = out.data();
  int64_t off = 0;
  for (int64_t i = 0, n = g.numel(); i < n; ++i) {
    po[off] += pg[i];
    for (int d = r - 1; d >= 0; --d) {
      const size_t du = static_cast<size_t>(d);
      ++idx[du];
      off += st[du];
      if (idx[du] < gs[du]) break;
      idx[du] = 0;
      off -= st[du] * gs[du];
    }
  }
  return out;
}

Tensor negated(const Tensor& t) {
  Tensor out(t.shape());
  const double* p = t.data();
  double* po = out.data();
  for (int64_t i = 0, n = t.numel(); i < n; ++i) po[i] = -p[i];
  return out;
}

int normalize_axis(int axis, int rank) {
  const int ax = axis < 0 ? axis + rank : axis;
  if (ax < 0 || ax >= rank)
    throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for rank " +
                                std::to_string(rank));
  return ax;
}

// Split a shape at `axis` into outer x n x inner extents.
void axis_split(const Shape& s, int axis, int64_t* outer, int64_t* n, int64_t* inner) {
  *outer = 1;
  *inner = 1;
  for (int d = 0; d < axis; ++d) *outer *= s[static_cast<size_t>(d)];
  *n = s[static_cast<size_t>(axis)];
  for (int d = axis + 1; d < static_cast<int>(s.size()); ++d)
    *inner *= s[static_cast<size_t>(d)];
}

Shape drop_axis(const Shape& s, int axis) {
  Shape out;
  out.reserve(s.size() - 1);
  for (int d = 0; d < static_cast<int>(s.size()); ++d)
    if (d != axis) out.push_back(s[static_cast<size_t>(d)]);
  return out;
}

double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// node management
// ---------------------------------------------------------------------------

int Tape::push(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::check_tape(Var v) const {
  if (v.tape != this || v.idx < 0 || v.idx >= static_cast<int>(nodes_.size()))
    throw std::logic_error("Var does not belong to this tape");
}

void Tape::check_output(const Tensor& t, const char* op) const {
  if (options_.check_finite && !t.all_finite())
    throw std::runtime_error(std::string(op) + ": non-finite values in result");
}

Var Tape::leaf(const Tensor& value) { return {this, push(value, true)}; }

Var Tape::leaf(const std::string& name, const Tensor& value) {
  if (name.empty()) throw std::invalid_argument("leaf: empty name");
  for (const auto& [n, idx] : named_leaves_)
    if (n == name) throw std::invalid_argument("leaf: duplicate name '" + name + "'");
  const int i = push(value, true);
  named_leaves_.emplace_back(name, i);
  return {this, i};
}

Var Tape::constant(Tensor value) { return {this, push(std::move(value), false)}; }

Var Tape::constant(double value) { return constant(Tensor::scalar(value)); }

const Tensor& Tape::value(Var v) const {
  check_tape(v);
  return nodes_[static_cast<size_t>(v.idx)].value;
}

const Tensor& Tape::grad(Var v) const {
  check_tape(v);
  const Node& n = nodes_[static_cast<size_t>(v.idx)];
  if (n.grad.empty() && n.value.numel() > 0)
    throw std::logic_error("gradient not available; call backward() first");
  return n.grad;
}

void Tape::accumulate_reduced(int idx, const Tensor& g) {
  Node& n = nodes_[static_cast<size_t>(idx)];
  if (g.same_shape(n.value)) {
    n.grad.vec() += g.vec();
    return;
  }
  const Tensor r = reduce_to(g, n.value.shape());
  n.grad.vec() += r.vec();
}

void Tape::backward(Var loss) {
  check_tape(loss);
  Node& ln = nodes_[static_cast<size_t>(loss.idx)];
  if (ln.value.numel() != 1)
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                shape_str(ln.value.shape()));
  for (Node& n : nodes_)
    if (n.requires_grad) n.grad = Tensor(n.value.shape());
  backward_done_ = true;
  if (!ln.requires_grad) return;  // loss does not depend on any leaf
  ln.grad[0] = 1.0;
  for (int i = loss.idx; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.requires_grad && n.backward) n.backward();
  }
}

std::map<std::string, Tensor> Tape::grad_map() const {
  if (!backward_done_) throw std::logic_error("grad_map: call backward() first");
  std::map<std::string, Tensor> out;
  for (const auto& [name, idx] : named_leaves_)
    out.emplace(name, nodes_[static_cast<size_t>(idx)].grad);
  return out;
}

// ---------------------------------------------------------------------------
// elementwise binary
// ---------------------------------------------------------------------------

Var Tape::add(Var a, Var b) {
  check_tape(a);
  check_tape(b);
  Tensor out = ew_binary(nodes_[static_cast<size_t>(a.idx)].value,
                         nodes_[static_cast<size_t>(b.idx)].value,
                         [](double x, double y) { return x + y; });
  check_output(out, "add");
  const bool needs = rg(a) || rg(b);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx, bi = b.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, bi, oi] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      if (nodes_[static_cast<size_t>(ai)].requires_grad) accumulate_reduced(ai, g);
      if (nodes_[static_cast<size_t>(bi)].requires_grad) accumulate_reduced(bi, g);
    };
  }
  return {this, oi};
}

Var Tape::sub(Var a, Var b) {
  check_tape(a);
  check_tape(b);
  Tensor out = ew_binary(nodes_[static_cast<size_t>(a.idx)].value,
                         nodes_[static_cast<size_t>(b.idx)].value,
                         [](double x, double y) { return x - y; });
  check_output(out, "sub");
  const bool needs = rg(a) || rg(b);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx, bi = b.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, bi, oi] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      if (nodes_[static_cast<size_t>(ai)].requires_grad) accumulate_reduced(ai, g);
      if (nodes_[static_cast<size_t>(bi)].requires_grad) accumulate_reduced(bi, negated(g));
    };
  }
  return {this, oi};
}

Var Tape::mul(Var a, Var b) {
  check_tape(a);
  check_tape(b);
  Tensor out = ew_binary(nodes_[static_cast<size_t>(a.idx)].value,
                         nodes_[static_cast<size_t>(b.idx)].value,
                         [](double x, double y) { return x * y; });
  check_output(out, "mul");
  const bool needs = rg(a) || rg(b);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx, bi = b.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, bi, oi] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      const Tensor& av = nodes_[static_cast<size_t>(ai)].value;
      const Tensor& bv = nodes_[static_cast<size_t>(bi)].value;
      if (nodes_[static_cast<size_t>(ai)].requires_grad)
        accumulate_reduced(ai, ew_binary(g, bv, [](double x, double y) { return x * y; }));
      if (nodes_[static_cast<size_t>(bi)].requires_grad)
        accumulate_reduced(bi, ew_binary(g, av, [](double x, double y) { return x * y; }));
    };
  }
  return {this, oi};
}

Var Tape::div(Var a, Var b) {
  check_tape(a);
  check_tape(b);
  Tensor out = ew_binary(nodes_[static_cast<size_t>(a.idx)].value,
                         nodes_[static_cast<size_t>(b.idx)].value, [](double x, double y) {
                           if (y == 0.0) throw std::domain_error("div: zero denominator");
                           return x / y;
                         });
  check_output(out, "div");
  const bool needs = rg(a) || rg(b);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx, bi = b.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, bi, oi] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      const Tensor& ov = nodes_[static_cast<size_t>(oi)].value;
      const Tensor& bv = nodes_[static_cast<size_t>(bi)].value;
      if (nodes_[static_cast<size_t>(ai)].requires_grad)
        accumulate_reduced(ai, ew_binary(g, bv, [](double x, double y) { return x / y; }));
      if (nodes_[static_cast<size_t>(bi)].requires_grad) {
        const Tensor go = ew_binary(g, ov, [](double x, double y) { return x * y; });
        accumulate_reduced(bi, ew_binary(go, bv, [](double x, double y) { return -x / y; }));
      }
    };
  }
  return {this, oi};
}

Var Tape::neg(Var a) {
  check_tape(a);
  Tensor out = negated(nodes_[static_cast<size_t>(a.idx)].value);
  const bool needs = rg(a);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, oi] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      Tensor& ag = nodes_[static_cast<size_t>(ai)].grad;
      ag.vec() -= g.vec();
    };
  }
  return {this, oi};
}

// ---------------------------------------------------------------------------
// elementwise unary
// ---------------------------------------------------------------------------

Var Tape::tanh(Var a) {
  check_tape(a);
  const Tensor& av = nodes_[static_cast<size_t>(a.idx)].value;
  Tensor out(av.shape());
  for (int64_t i = 0, n = av.numel(); i < n; ++i) out[i] = std::tanh(av[i]);
  const bool needs = rg(a);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, oi] {
      const double* g = nodes_[static_cast<size_t>(oi)].grad.data();
      const double* y = nodes_[static_cast<size_t>(oi)].value.data();
      Tensor& ag = nodes_[static_cast<size_t>(ai)].grad;
      double* pg = ag.data();
      for (int64_t i = 0, n = ag.numel(); i < n; ++i) pg[i] += g[i] * (1.0 - y[i] * y[i]);
    };
  }
  return {this, oi};
}

Var Tape::exp(Var a) {
  check_tape(a);
  const Tensor& av = nodes_[static_cast<size_t>(a.idx)].value;
  Tensor out(av.shape());
  for (int64_t i = 0, n = av.numel(); i < n; ++i) out[i] = std::exp(av[i]);
  check_output(out, "exp");
  const bool needs = rg(a);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, oi] {
      const double* g = nodes_[static_cast<size_t>(oi)].grad.data();
      const double* y = nodes_[static_cast<size_t>(oi)].value.data();
      Tensor& ag = nodes_[static_cast<size_t>(ai)].grad;
      double* pg = ag.data();
      for (int64_t i = 0, n = ag.numel(); i < n; ++i) pg[i] += g[i] * y[i];
    };
  }
  return {this, oi};
}

Var Tape::log(Var a) {
  check_tape(a);
  const Tensor& av = nodes_[static_cast<size_t>(a.idx)].value;
  Tensor out(av.shape());
  for (int64_t i = 0, n = av.numel(); i < n; ++i) {
    if (av[i] <= 0.0)
      throw std::domain_error("log: non-positive input " + std::to_string(av[i]));
    out[i] = std::log(av[i]);
  }
  const bool needs = rg(a);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, oi] {
      const double* g = nodes_[static_cast<size_t>(oi)].grad.data();
      const double* x = nodes_[static_cast<size_t>(ai)].value.data();
      Tensor& ag = nodes_[static_cast<size_t>(ai)].grad;
      double* pg = ag.data();
      for (int64_t i = 0, n = ag.numel(); i < n; ++i) pg[i] += g[i] / x[i];
    };
  }
  return {this, oi};
}

Var Tape::softplus(Var a) {
  check_tape(a);
  const Tensor& av = nodes_[static_cast<size_t>(a.idx)].value;
  Tensor out(av.shape());
  for (int64_t i = 0, n = av.numel(); i < n; ++i) out[i] = stable_softplus(av[i]);
  const bool needs = rg(a);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, oi] {
      const double* g = nodes_[static_cast<size_t>(oi)].grad.data();
      const double* x = nodes_[static_cast<size_t>(ai)].value.data();
      Tensor& ag = nodes_[static_cast<size_t>(ai)].grad;
      double* pg = ag.data();
      for (int64_t i = 0, n = ag.numel(); i < n; ++i) pg[i] += g[i] * stable_sigmoid(x[i]);
    };
  }
  return {this, oi};
}

Var Tape::sigmoid(Var a) {
  check_tape(a);
  const Tensor& av = nodes_[static_cast<size_t>(a.idx)].value;
  Tensor out(av.shape());
  for (int64_t i = 0, n = av.numel(); i < n; ++i) out[i] = stable_sigmoid(av[i]);
  const bool needs = rg(a);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, oi] {
      const double* g = nodes_[static_cast<size_t>(oi)].grad.data();
      const double* y = nodes_[static_cast<size_t>(oi)].value.data();
      Tensor& ag = nodes_[static_cast<size_t>(ai)].grad;
      double* pg = ag.data();
      for (int64_t i = 0, n = ag.numel(); i < n; ++i) pg[i] += g[i] * y[i] * (1.0 - y[i]);
    };
  }
  return {this, oi};
}

Var Tape::square(Var a) {
  check_tape(a);
  const Tensor& av = nodes_[static_cast<size_t>(a.idx)].value;
  Tensor out(av.shape());
  for (int64_t i = 0, n = av.numel(); i < n; ++i) out[i] = av[i] * av[i];
  const bool needs = rg(a);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, oi] {
      const double* g = nodes_[static_cast<size_t>(oi)].grad.data();
      const double* x = nodes_[static_cast<size_t>(ai)].value.data();
      Tensor& ag = nodes_[static_cast<size_t>(ai)].grad;
      double* pg = ag.data();
      for (int64_t i = 0, n = ag.numel(); i < n; ++i) pg[i] += g[i] * 2.0 * x[i];
    };
  }
  return {this, oi};
}

Var Tape::sqrt(Var a) {
  check_tape(a);
  const Tensor& av = nodes_[static_cast<size_t>(a.idx)].value;
  Tensor out(av.shape());
  for (int64_t i = 0, n = av.numel(); i < n; ++i) {
    if (av[i] < 0.0)
      throw std::domain_error("sqrt: negative input " + std::to_string(av[i]));
    out[i] = std::sqrt(av[i]);
  }
  const bool needs = rg(a);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, oi] {
      const double* g = nodes_[static_cast<size_t>(oi)].grad.data();
      const double* y = nodes_[static_cast<size_t>(oi)].value.data();
      Tensor& ag = nodes_[static_cast<size_t>(ai)].grad;
      double* pg = ag.data();
      for (int64_t i = 0, n = ag.numel(); i < n; ++i) pg[i] += g[i] * 0.5 / y[i];
    };
  }
  return {this, oi};
}

Var Tape::sqrt_clamped(Var a) {
  check_tape(a);
  const Tensor& av = nodes_[static_cast<size_t>(a.idx)].value;
  Tensor out(av.shape());
  for (int64_t i = 0, n = av.numel(); i < n; ++i)
    out[i] = av[i] > 0.0 ? std::sqrt(av[i]) : 0.0;
  const bool needs = rg(a);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, oi] {
      const double* g = nodes_[static_cast<size_t>(oi)].grad.data();
      const double* x = nodes_[static_cast<size_t>(ai)].value.data();
      const double* y = nodes_[static_cast<size_t>(oi)].value.data();
      Tensor& ag = nodes_[static_cast<size_t>(ai)].grad;
      double* pg = ag.data();
      for (int64_t i = 0, n = ag.numel(); i < n; ++i)
        if (x[i] > 0.0) pg[i] += g[i] * 0.5 / y[i];
    };
  }
  return {this, oi};
}

Var Tape::leaky_relu(Var a, double negative_slope) {
  check_tape(a);
  const Tensor& av = nodes_[static_cast<size_t>(a.idx)].value;
  Tensor out(av.shape());
  for (int64_t i = 0, n = av.numel(); i < n; ++i)
    out[i] = av[i] >= 0.0 ? av[i] : negative_slope * av[i];
  const bool needs = rg(a);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, oi, negative_slope] {
      const double* g = nodes_[static_cast<size_t>(oi)].grad.data();
      const double* x = nodes_[static_cast<size_t>(ai)].value.data();
      Tensor& ag = nodes_[static_cast<size_t>(ai)].grad;
      double* pg = ag.data();
      for (int64_t i = 0, n = ag.numel(); i < n; ++i)
        pg[i] += g[i] * (x[i] >= 0.0 ? 1.0 : negative_slope);
    };
  }
  return {this, oi};
}

Var Tape::clamp_min(Var a, double lo) {
  check_tape(a);
  const Tensor& av = nodes_[static_cast<size_t>(a.idx)].value;
  Tensor out(av.shape());
  for (int64_t i = 0, n = av.numel(); i < n; ++i) out[i] = std::max(av[i], lo);
  const bool needs = rg(a);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx;
    // Subgradient convention: pass-through strictly above the floor.
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, oi, lo] {
      const double* g = nodes_[static_cast<size_t>(oi)].grad.data();
      const double* x = nodes_[static_cast<size_t>(ai)].value.data();
      Tensor& ag = nodes_[static_cast<size_t>(ai)].grad;
      double* pg = ag.data();
      for (int64_t i = 0, n = ag.numel(); i < n; ++i)
        if (x[i] > lo) pg[i] += g[i];
    };
  }
  return {this, oi};
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

Var Tape::reshape(Var a, Shape shape) {
  check_tape(a);
  const Tensor& av = nodes_[static_cast<size_t>(a.idx)].value;
  Tensor out = av.reshaped(std::move(shape));
  const bool needs = rg(a);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, oi] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      Tensor& ag = nodes_[static_cast<size_t>(ai)].grad;
      ag.vec() += g.vec();  // same element order either way
    };
  }
  return {this, oi};
}

Var Tape::broadcast_to(Var a, Shape shape) {
  check_tape(a);
  const Tensor& av = nodes_[static_cast<size_t>(a.idx)].value;
  if (broadcast_shape(av.shape(), shape) != shape)
    throw std::invalid_argument("broadcast_to: cannot broadcast " + shape_str(av.shape()) +
                                " to " + shape_str(shape));
  Tensor out(shape);
  const int r = static_cast<int>(shape.size());
  const std::vector<int64_t> sa = aligned_strides(av.shape(), shape);
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  const double* pa = av.data();
  double* po = out.data();
  int64_t oa = 0;
  for (int64_t i = 0, n = out.numel(); i < n; ++i) {
    po[i] = pa[oa];
    for (int d = r - 1; d >= 0; --d) {
      const size_t du = static_cast<size_t>(d);
      ++idx[du];
      oa += sa[du];
      if (idx[du] < shape[du]) break;
      idx[du] = 0;
      oa -= sa[du] * shape[du];
    }
  }
  const bool needs = rg(a);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, oi] {
      accumulate_reduced(ai, nodes_[static_cast<size_t>(oi)].grad);
    };
  }
  return {this, oi};
}

Var Tape::transpose(Var a) {
  check_tape(a);
  const Tensor& av = nodes_[static_cast<size_t>(a.idx)].value;
  if (av.rank() != 2)
    throw std::invalid_argument("transpose: expected rank-2, got " + shape_str(av.shape()));
  Tensor out({av.cols(), av.rows()});
  out.mat().noalias() = av.mat().transpose();
  const bool needs = rg(a);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, oi] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      nodes_[static_cast<size_t>(ai)].grad.mat().noalias() += g.mat().transpose();
    };
  }
  return {this, oi};
}

Var Tape::concat_rows(Var a, Var b) {
  check_tape(a);
  check_tape(b);
  const Tensor& av = nodes_[static_cast<size_t>(a.idx)].value;
  const Tensor& bv = nodes_[static_cast<size_t>(b.idx)].value;
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.cols())
    throw std::invalid_argument("concat_rows: need rank-2 with equal widths, got " +
                                shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  Tensor out({av.rows() + bv.rows(), av.cols()});
  std::memcpy(out.data(), av.data(), static_cast<size_t>(av.numel()) * sizeof(double));
  std::memcpy(out.data() + av.numel(), bv.data(),
              static_cast<size_t>(bv.numel()) * sizeof(double));
  const bool needs = rg(a) || rg(b);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx, bi = b.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, bi, oi] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      Node& an = nodes_[static_cast<size_t>(ai)];
      Node& bn = nodes_[static_cast<size_t>(bi)];
      if (an.requires_grad)
        for (std::int64_t i = 0, n = an.value.numel(); i < n; ++i) an.grad[i] += g[i];
      if (bn.requires_grad) {
        const std::int64_t off = an.value.numel();
        for (std::int64_t i = 0, n = bn.value.numel(); i < n; ++i)
          bn.grad[i] += g[off + i];
      }
    };
  }
  return {this, oi};
}

Var Tape::concat_last(Var a, Var b) {
  check_tape(a);
  check_tape(b);
  const Tensor& av = nodes_[static_cast<size_t>(a.idx)].value;
  const Tensor& bv = nodes_[static_cast<size_t>(b.idx)].value;
  if (av.rank() != bv.rank() || av.rank() == 0)
    throw std::invalid_argument("concat_last: mismatched ranks " + shape_str(av.shape()) +
                                " vs " + shape_str(bv.shape()));
  const int r = av.rank();
  for (int d = 0; d + 1 < r; ++d)
    if (av.dim(d) != bv.dim(d))
      throw std::invalid_argument("concat_last: leading dims differ, " +
                                  shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  const int64_t na = av.dim(r - 1), nb = bv.dim(r - 1);
  Shape os = av.shape();
  os[static_cast<size_t>(r - 1)] = static_cast<int>(na + nb);
  Tensor out(os);
  const int64_t outer = av.numel() / na;
  for (int64_t o = 0; o < outer; ++o) {
    std::memcpy(out.data() + o * (na + nb), av.data() + o * na,
                static_cast<size_t>(na) * sizeof(double));
    std::memcpy(out.data() + o * (na + nb) + na, bv.data() + o * nb,
                static_cast<size_t>(nb) * sizeof(double));
  }
  const bool needs = rg(a) || rg(b);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx, bi = b.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, bi, oi, outer, na, nb] {
      const double* g = nodes_[static_cast<size_t>(oi)].grad.data();
      if (nodes_[static_cast<size_t>(ai)].requires_grad) {
        double* pg = nodes_[static_cast<size_t>(ai)].grad.data();
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t j = 0; j < na; ++j) pg[o * na + j] += g[o * (na + nb) + j];
      }
      if (nodes_[static_cast<size_t>(bi)].requires_grad) {
        double* pg = nodes_[static_cast<size_t>(bi)].grad.data();
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t j = 0; j < nb; ++j) pg[o * nb + j] += g[o * (na + nb) + na + j];
      }
    };
  }
  return {this, oi};
}

Var Tape::slice_last(Var a, int start, int len) {
  check_tape(a);
  const Tensor& av = nodes_[static_cast<size_t>(a.idx)].value;
  if (av.rank() == 0) throw std::invalid_argument("slice_last: rank-0 input");
  const int r = av.rank();
  const int64_t L = av.dim(r - 1);
  if (start < 0 || len <= 0 || start + len > L)
    throw std::invalid_argument("slice_last: window [" + std::to_string(start) + ", " +
                                std::to_string(start + len) + ") out of range for dim " +
                                std::to_string(L));
  Shape os = av.shape();
  os[static_cast<size_t>(r - 1)] = len;
  Tensor out(os);
  const int64_t outer = av.numel() / L;
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * len, av.data() + o * L + start,
                static_cast<size_t>(len) * sizeof(double));
  const bool needs = rg(a);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx;
    const int64_t len64 = len;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, oi, outer, L, start, len64] {
      const double* g = nodes_[static_cast<size_t>(oi)].grad.data();
      double* pg = nodes_[static_cast<size_t>(ai)].grad.data();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < len64; ++j) pg[o * L + start + j] += g[o * len64 + j];
    };
  }
  return {this, oi};
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Var Tape::sum(Var a) {
  check_tape(a);
  const Tensor& av = nodes_[static_cast<size_t>(a.idx)].value;
  double s = 0.0;
  for (int64_t i = 0, n = av.numel(); i < n; ++i) s += av[i];
  const bool needs = rg(a);
  const int oi = push(Tensor::scalar(s), needs);
  if (needs) {
    const int ai = a.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, oi] {
      const double g = nodes_[static_cast<size_t>(oi)].grad[0];
      Tensor& ag = nodes_[static_cast<size_t>(ai)].grad;
      double* pg = ag.data();
      for (int64_t i = 0, n = ag.numel(); i < n; ++i) pg[i] += g;
    };
  }
  return {this, oi};
}

Var Tape::mean(Var a) {
  check_tape(a);
  const Tensor& av = nodes_[static_cast<size_t>(a.idx)].value;
  if (av.numel() == 0) throw std::invalid_argument("mean: empty tensor");
  const double inv = 1.0 / static_cast<double>(av.numel());
  double s = 0.0;
  for (int64_t i = 0, n = av.numel(); i < n; ++i) s += av[i];
  const bool needs = rg(a);
  const int oi = push(Tensor::scalar(s * inv), needs);
  if (needs) {
    const int ai = a.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, oi, inv] {
      const double g = nodes_[static_cast<size_t>(oi)].grad[0] * inv;
      Tensor& ag = nodes_[static_cast<size_t>(ai)].grad;
      double* pg = ag.data();
      for (int64_t i = 0, n = ag.numel(); i < n; ++i) pg[i] += g;
    };
  }
  return {this, oi};
}

Var Tape::sum(Var a, int axis) {
  check_tape(a);
  const Tensor& av = nodes_[static_cast<size_t>(a.idx)].value;
  const int ax = normalize_axis(axis, av.rank());
  int64_t outer, n, inner;
  axis_split(av.shape(), ax, &outer, &n, &inner);
  Tensor out(drop_axis(av.shape(), ax));
  const double* px = av.data();
  double* po = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < n; ++j)
      for (int64_t i = 0; i < inner; ++i) po[o * inner + i] += px[(o * n + j) * inner + i];
  const bool needs = rg(a);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, oi, outer, n, inner] {
      const double* g = nodes_[static_cast<size_t>(oi)].grad.data();
      double* pg = nodes_[static_cast<size_t>(ai)].grad.data();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < n; ++j)
          for (int64_t i = 0; i < inner; ++i)
            pg[(o * n + j) * inner + i] += g[o * inner + i];
    };
  }
  return {this, oi};
}

Var Tape::mean(Var a, int axis) {
  check_tape(a);
  const Tensor& av = nodes_[static_cast<size_t>(a.idx)].value;
  const int ax = normalize_axis(axis, av.rank());
  int64_t outer, n, inner;
  axis_split(av.shape(), ax, &outer, &n, &inner);
  if (n == 0) throw std::invalid_argument("mean: empty axis");
  const double inv = 1.0 / static_cast<double>(n);
  Tensor out(drop_axis(av.shape(), ax));
  const double* px = av.data();
  double* po = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < n; ++j)
      for (int64_t i = 0; i < inner; ++i)
        po[o * inner + i] += px[(o * n + j) * inner + i] * inv;
  const bool needs = rg(a);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, oi, outer, n, inner, inv] {
      const double* g = nodes_[static_cast<size_t>(oi)].grad.data();
      double* pg = nodes_[static_cast<size_t>(ai)].grad.data();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < n; ++j)
          for (int64_t i = 0; i < inner; ++i)
            pg[(o * n + j) * inner + i] += g[o * inner + i] * inv;
    };
  }
  return {this, oi};
}

Var Tape::logsumexp(Var a, int axis) {
  check_tape(a);
  const Tensor& av = nodes_[static_cast<size_t>(a.idx)].value;
  const int ax = normalize_axis(axis, av.rank());
  int64_t outer, n, inner;
  axis_split(av.shape(), ax, &outer, &n, &inner);
  if (n == 0) throw std::invalid_argument("logsumexp: empty axis");
  Tensor out(drop_axis(av.shape(), ax));
  const double* px = av.data();
  double* po = out.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t i = 0; i < inner; ++i) {
      double m = px[(o * n) * inner + i];
      for (int64_t j = 1; j < n; ++j) m = std::max(m, px[(o * n + j) * inner + i]);
      double s = 0.0;
      for (int64_t j = 0; j < n; ++j) s += std::exp(px[(o * n + j) * inner + i] - m);
      po[o * inner + i] = m + std::log(s);
    }
  }
  const bool needs = rg(a);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, oi, outer, n, inner] {
      const double* g = nodes_[static_cast<size_t>(oi)].grad.data();
      const double* y = nodes_[static_cast<size_t>(oi)].value.data();
      const double* x = nodes_[static_cast<size_t>(ai)].value.data();
      double* pg = nodes_[static_cast<size_t>(ai)].grad.data();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < n; ++j)
          for (int64_t i = 0; i < inner; ++i) {
            const int64_t xi = (o * n + j) * inner + i;
            pg[xi] += g[o * inner + i] * std::exp(x[xi] - y[o * inner + i]);
          }
    };
  }
  return {this, oi};
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Var Tape::matmul(Var a, Var b) {
  check_tape(a);
  check_tape(b);
  const Tensor& av = nodes_[static_cast<size_t>(a.idx)].value;
  const Tensor& bv = nodes_[static_cast<size_t>(b.idx)].value;
  if (av.rank() != 2 || bv.rank() != 2)
    throw std::invalid_argument("matmul: expected rank-2 operands, got " +
                                shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  if (av.cols() != bv.rows())
    throw std::invalid_argument("matmul: inner dims differ, " + shape_str(av.shape()) +
                                " x " + shape_str(bv.shape()));
  Tensor out({av.rows(), bv.cols()});
  out.mat().noalias() = av.mat() * bv.mat();
  check_output(out, "matmul");
  const bool needs = rg(a) || rg(b);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx, bi = b.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, bi, oi] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      const Tensor& av2 = nodes_[static_cast<size_t>(ai)].value;
      const Tensor& bv2 = nodes_[static_cast<size_t>(bi)].value;
      if (nodes_[static_cast<size_t>(ai)].requires_grad)
        nodes_[static_cast<size_t>(ai)].grad.mat().noalias() += g.mat() * bv2.mat().transpose();
      if (nodes_[static_cast<size_t>(bi)].requires_grad)
        nodes_[static_cast<size_t>(bi)].grad.mat().noalias() += av2.mat().transpose() * g.mat();
    };
  }
  return {this, oi};
}

Var Tape::bmm(Var a, Var b) {
  check_tape(a);
  check_tape(b);
  const Tensor& av = nodes_[static_cast<size_t>(a.idx)].value;
  const Tensor& bv = nodes_[static_cast<size_t>(b.idx)].value;
  const bool a3 = av.rank() == 3, b3 = bv.rank() == 3;
  if ((av.rank() != 2 && !a3) || (bv.rank() != 2 && !b3) || (!a3 && !b3))
    throw std::invalid_argument("bmm: expected a rank-3 operand, got " +
                                shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  const int S = a3 ? av.dim(0) : bv.dim(0);
  if (a3 && b3 && av.dim(0) != bv.dim(0))
    throw std::invalid_argument("bmm: batch dims differ, " + shape_str(av.shape()) + " x " +
                                shape_str(bv.shape()));
  const int m = a3 ? av.dim(1) : av.dim(0);
  const int ka = a3 ? av.dim(2) : av.dim(1);
  const int kb = b3 ? bv.dim(1) : bv.dim(0);
  const int n = b3 ? bv.dim(2) : bv.dim(1);
  if (ka != kb)
    throw std::invalid_argument("bmm: inner dims differ, " + shape_str(av.shape()) + " x " +
                                shape_str(bv.shape()));
  Tensor out({S, m, n});
  for (int s = 0; s < S; ++s) {
    ConstMatMap as = a3 ? av.mat_slice(s) : av.mat();
    ConstMatMap bs = b3 ? bv.mat_slice(s) : bv.mat();
    out.mat_slice(s).noalias() = as * bs;
  }
  check_output(out, "bmm");
  const bool needs = rg(a) || rg(b);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx, bi = b.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, bi, oi, S, a3, b3] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      const Tensor& av2 = nodes_[static_cast<size_t>(ai)].value;
      const Tensor& bv2 = nodes_[static_cast<size_t>(bi)].value;
      if (nodes_[static_cast<size_t>(ai)].requires_grad) {
        Tensor& ga = nodes_[static_cast<size_t>(ai)].grad;
        for (int s = 0; s < S; ++s) {
          ConstMatMap gs = g.mat_slice(s);
          ConstMatMap bs = b3 ? bv2.mat_slice(s) : bv2.mat();
          if (a3)
            ga.mat_slice(s).noalias() += gs * bs.transpose();
          else
            ga.mat().noalias() += gs * bs.transpose();
        }
      }
      if (nodes_[static_cast<size_t>(bi)].requires_grad) {
        Tensor& gb = nodes_[static_cast<size_t>(bi)].grad;
        for (int s = 0; s < S; ++s) {
          ConstMatMap gs = g.mat_slice(s);
          ConstMatMap as = a3 ? av2.mat_slice(s) : av2.mat();
          if (b3)
            gb.mat_slice(s).noalias() += as.transpose() * gs;
          else
            gb.mat().noalias() += as.transpose() * gs;
        }
      }
    };
  }
  return {this, oi};
}

Var Tape::psd_solve(Var a, Var b, Var jitter) {
  check_tape(a);
  check_tape(b);
  check_tape(jitter);
  const Tensor& av = nodes_[static_cast<size_t>(a.idx)].value;
  const Tensor& bv = nodes_[static_cast<size_t>(b.idx)].value;
  const Tensor& jv = nodes_[static_cast<size_t>(jitter.idx)].value;
  if (av.rank() != 2 || av.rows() != av.cols())
    throw std::invalid_argument("psd_solve: A must be square, got " + shape_str(av.shape()));
  if (jv.numel() != 1)
    throw std::invalid_argument("psd_solve: jitter must be scalar, got " +
                                shape_str(jv.shape()));
  const double jit = jv[0];
  if (jit < 0.0)
    throw std::invalid_argument("psd_solve: negative jitter " + std::to_string(jit));
  const int n = av.rows();
  const bool b_vec = bv.rank() == 1;
  if (!(b_vec || bv.rank() == 2) || (b_vec ? bv.numel() : bv.rows()) != n)
    throw std::invalid_argument("psd_solve: B shape " + shape_str(bv.shape()) +
                                " incompatible with A " + shape_str(av.shape()));
  const int k = b_vec ? 1 : bv.cols();

  Eigen::MatrixXd M = 0.5 * (Eigen::MatrixXd(av.mat()) + Eigen::MatrixXd(av.mat()).transpose());
  M.diagonal().array() += jit;
  Eigen::LLT<Eigen::MatrixXd> llt(M);
  if (llt.info() != Eigen::Success) {
    int minor = n;
    for (int j = 1; j <= n; ++j) {
      Eigen::LLT<Eigen::MatrixXd> sub(M.topLeftCorner(j, j));
      if (sub.info() != Eigen::Success) {
        minor = j;
        break;
      }
    }
    throw std::runtime_error(
        "psd_solve: matrix is not positive definite (leading minor of order " +
        std::to_string(minor) + " failed; jitter = " + std::to_string(jit) + ")");
  }

  ConstMatMap bm(bv.data(), n, k);
  Tensor out(bv.shape());
  MatMap(out.data(), n, k).noalias() = llt.solve(bm);
  check_output(out, "psd_solve");

  const bool needs = rg(a) || rg(b) || rg(jitter);
  const int oi = push(std::move(out), needs);
  if (needs) {
    const int ai = a.idx, bi = b.idx, ji = jitter.idx;
    nodes_[static_cast<size_t>(oi)].backward = [this, ai, bi, ji, oi, n, k,
                                                llt = std::move(llt)] {
      const Tensor& g = nodes_[static_cast<size_t>(oi)].grad;
      const Tensor& xv = nodes_[static_cast<size_t>(oi)].value;
      ConstMatMap gm(g.data(), n, k);
      ConstMatMap xm(xv.data(), n, k);
      const Eigen::MatrixXd db = llt.solve(Eigen::MatrixXd(gm));
      const bool need_a = nodes_[static_cast<size_t>(ai)].requires_grad;
      const bool need_j = nodes_[static_cast<size_t>(ji)].requires_grad;
      if (need_a || need_j) {
        const Eigen::MatrixXd z = -(db * xm.transpose());
        if (need_a)
          nodes_[static_cast<size_t>(ai)].grad.mat().noalias() +=
              0.5 * (z + z.transpose());
        if (need_j) nodes_[static_cast<size_t>(ji)].grad[0] += z.trace();
      }
      if (nodes_[static_cast<size_t>(bi)].requires_grad) {
        Tensor& gb = nodes_[static_cast<size_t>(bi)].grad;
        MatMap(gb.data(), n, k).noalias() += db;
      }
    };
  }
  return {this, oi};
}

Var Tape::psd_solve(Var a, Var b, double jitter) {
  return psd_solve(a, b, constant(jitter));
}

}  // namespace sip
