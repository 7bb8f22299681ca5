#include "sip/nets.hpp"

#include <cmath>
#include <stdexcept>

namespace sip {

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::kTanh;
  if (s == "relu") return Activation::kRelu;
  if (s == "leaky_relu") return Activation::kLeakyRelu;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

const char* to_string(Activation a) {
  switch (a) {
    case Activation::kTanh: return "tanh";
    case Activation::kRelu: return "relu";
    case Activation::kLeakyRelu: return "leaky_relu";
  }
  return "?";
}

Var apply_activation(Tape& t, Var h, Activation a) {
  switch (a) {
    case Activation::kTanh: return t.tanh(h);
    case Activation::kRelu: return t.leaky_relu(h, 0.0);
    case Activation::kLeakyRelu: return t.leaky_relu(h, 0.2);
  }
  throw std::logic_error("unreachable activation");
}

void init_mlp_params(ParamStore& store, const std::string& prefix,
                     const std::vector<int>& widths, Rng& rng) {
  if (widths.size() < 2)
    throw std::invalid_argument("init_mlp_params: need at least input and output widths");
  for (size_t l = 0; l + 1 < widths.size(); ++l) {
    const int fan_in = widths[l];
    const int fan_out = widths[l + 1];
    const double std = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor w = rng.normal_tensor({fan_in, fan_out});
    for (std::int64_t i = 0; i < w.numel(); ++i) w[i] *= std;
    store.add(prefix + ".w" + std::to_string(l), std::move(w));
    store.add(prefix + ".b" + std::to_string(l), Tensor::zeros({fan_out}));
  }
}

Var mlp_forward(Tape& t, const VarMap& v, const std::string& prefix,
                const std::vector<int>& widths, Var x, Activation act) {
  Var h = x;
  for (size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::string id = std::to_string(l);
    h = matmul(h, v.at(prefix + ".w" + id)) + v.at(prefix + ".b" + id);
    if (l + 2 < widths.size()) h = apply_activation(t, h, act);
  }
  return h;
}

double softplus_inverse(double y) {
  if (y <= 0.0) throw std::invalid_argument("softplus_inverse: need y > 0");
  // log(e^y - 1), stable for small and large y
  return y > 30.0 ? y : std::log(std::expm1(y));
}

}  // namespace sip
