#include "sip/priors.hpp"

#include <cmath>
#include <stdexcept>

namespace sip {

namespace {

// Scale initialization: sigma_w starts at 0.1 / sqrt(fan_in).
double init_rho(int fan_in) {
  return softplus_inverse(0.1 / std::sqrt(static_cast<double>(fan_in)));
}

}  // namespace

// ---------------------------------------------------------------------------
// BnnPrior
// ---------------------------------------------------------------------------

BnnPrior::BnnPrior(int input_dim, std::vector<int> hidden, Activation act,
                   std::string prefix)
    : act_(act), prefix_(std::move(prefix)) {
  if (input_dim < 1) throw std::invalid_argument("BnnPrior: input_dim must be >= 1");
  widths_.push_back(input_dim);
  for (int h : hidden) widths_.push_back(h);
  widths_.push_back(1);
}

void BnnPrior::init_params(ParamStore& store, Rng& rng) const {
  for (size_t l = 0; l + 1 < widths_.size(); ++l) {
    const int fan_in = widths_[l];
    const int fan_out = widths_[l + 1];
    const double std = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor mu_w = rng.normal_tensor({fan_in, fan_out});
    for (std::int64_t i = 0; i < mu_w.numel(); ++i) mu_w[i] *= std;
    const std::string id = std::to_string(l);
    store.add(prefix_ + ".w" + id + ".mu", std::move(mu_w));
    store.add(prefix_ + ".w" + id + ".rho",
              Tensor::full({fan_in, fan_out}, init_rho(fan_in)));
    store.add(prefix_ + ".b" + id + ".mu", Tensor::zeros({fan_out}));
    store.add(prefix_ + ".b" + id + ".rho", Tensor::full({fan_out}, init_rho(fan_in)));
  }
}

Var BnnPrior::sample_functions(Tape& t, const VarMap& v, Var X, int S, Rng& rng,
                               bool /*train_mode*/) const {
  if (S < 1) throw std::invalid_argument("sample_functions: S must be >= 1");
  const int n = X.value().rows();
  Var h = X;  // rank-2 [N, D]; promoted to [S, N, *] by the first bmm
  for (size_t l = 0; l + 1 < widths_.size(); ++l) {
    const int fan_in = widths_[l];
    const int fan_out = widths_[l + 1];
    const std::string id = std::to_string(l);
    Var eps_w = t.constant(rng.normal_tensor({S, fan_in, fan_out}));
    Var eps_b = t.constant(rng.normal_tensor({S, 1, fan_out}));
    Var w = v.at(prefix_ + ".w" + id + ".mu") +
            softplus(v.at(prefix_ + ".w" + id + ".rho")) * eps_w;
    Var b = v.at(prefix_ + ".b" + id + ".mu") +
            softplus(v.at(prefix_ + ".b" + id + ".rho")) * eps_b;
    h = bmm(h, w) + b;
    if (l + 2 < widths_.size()) h = apply_activation(t, h, act_);
  }
  return reshape(h, {S, n});
}

int BnnPrior::weight_count() const {
  int count = 0;
  for (size_t l = 0; l + 1 < widths_.size(); ++l)
    count += widths_[l] * widths_[l + 1] + widths_[l + 1];
  return count;
}

Tensor BnnPrior::flat_means(const ParamStore& store) const {
  Tensor out({weight_count()});
  std::int64_t off = 0;
  for (size_t l = 0; l + 1 < widths_.size(); ++l) {
    const std::string id = std::to_string(l);
    for (const char* part : {".w", ".b"}) {
      const Tensor& mu = store.at(prefix_ + part + id + ".mu");
      for (std::int64_t i = 0; i < mu.numel(); ++i) out[off++] = mu[i];
    }
  }
  return out;
}

Tensor BnnPrior::flat_stds(const ParamStore& store) const {
  Tensor out({weight_count()});
  std::int64_t off = 0;
  for (size_t l = 0; l + 1 < widths_.size(); ++l) {
    const std::string id = std::to_string(l);
    for (const char* part : {".w", ".b"}) {
      const Tensor& rho = store.at(prefix_ + part + id + ".rho");
      for (std::int64_t i = 0; i < rho.numel(); ++i)
        out[off++] = std::max(rho[i], 0.0) + std::log1p(std::exp(-std::abs(rho[i])));
    }
  }
  return out;
}

Var BnnPrior::eval_flat_weights(Tape& t, Var w, const Tensor& X) const {
  if (w.value().numel() != weight_count())
    throw std::invalid_argument("eval_flat_weights: expected " +
                                std::to_string(weight_count()) + " weights, got " +
                                std::to_string(w.value().numel()));
  const int n = X.rows();
  Var h = t.constant(X);
  int off = 0;
  for (size_t l = 0; l + 1 < widths_.size(); ++l) {
    const int fan_in = widths_[l];
    const int fan_out = widths_[l + 1];
    Var wl = reshape(slice_last(w, off, fan_in * fan_out), {fan_in, fan_out});
    off += fan_in * fan_out;
    Var bl = slice_last(w, off, fan_out);
    off += fan_out;
    h = matmul(h, wl) + bl;
    if (l + 2 < widths_.size()) h = apply_activation(t, h, act_);
  }
  return reshape(h, {n});
}

// ---------------------------------------------------------------------------
// NeuralSamplerPrior
// ---------------------------------------------------------------------------

NeuralSamplerPrior::NeuralSamplerPrior(int input_dim, int noise_dim,
                                       std::vector<int> hidden, Activation act,
                                       double dropout_rate, std::string prefix)
    : input_dim_(input_dim),
      noise_dim_(noise_dim),
      act_(act),
      dropout_rate_(dropout_rate),
      prefix_(std::move(prefix)) {
  if (input_dim < 1 || noise_dim < 1)
    throw std::invalid_argument("NeuralSamplerPrior: dims must be >= 1");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0)
    throw std::invalid_argument("NeuralSamplerPrior: dropout rate outside [0, 1)");
  widths_.push_back(input_dim + noise_dim);
  for (int h : hidden) widths_.push_back(h);
  widths_.push_back(1);
}

void NeuralSamplerPrior::init_params(ParamStore& store, Rng& rng) const {
  init_mlp_params(store, prefix_, widths_, rng);
}

Var NeuralSamplerPrior::sample_functions(Tape& t, const VarMap& v, Var X, int S,
                                         Rng& rng, bool train_mode) const {
  if (S < 1) throw std::invalid_argument("sample_functions: S must be >= 1");
  const int n = X.value().rows();
  // one z per function sample, shared across every evaluation point
  Var z = t.constant(rng.normal_tensor({S, 1, noise_dim_}));
  Var zb = broadcast_to(z, {S, n, noise_dim_});
  Var xb = broadcast_to(X, {S, n, input_dim_});
  Var h = concat_last(xb, zb);
  for (size_t l = 0; l + 1 < widths_.size(); ++l) {
    const std::string id = std::to_string(l);
    h = bmm(h, v.at(prefix_ + ".w" + id)) + v.at(prefix_ + ".b" + id);
    if (l + 2 < widths_.size()) {
      h = apply_activation(t, h, act_);
      if (train_mode && dropout_rate_ > 0.0) {
        const double keep = 1.0 - dropout_rate_;
        Tensor mask({S, n, widths_[l + 1]});
        for (std::int64_t i = 0; i < mask.numel(); ++i)
          mask[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
        h = h * t.constant(std::move(mask));
      }
    }
  }
  return reshape(h, {S, n});
}

// ---------------------------------------------------------------------------

Var joint_prior_samples(const ImplicitPrior& prior, Tape& t, const VarMap& v, Var X,
                        Var Xbar, int S, Rng& rng, bool train_mode) {
  const bool empty = Xbar.value().numel() == 0;
  Var joint = empty ? X : concat_rows(X, Xbar);
  return prior.sample_functions(t, v, joint, S, rng, train_mode);
}

}  // namespace sip
