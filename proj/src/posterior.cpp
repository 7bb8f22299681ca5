#include "sip/posterior.hpp"

#include <algorithm>
#include <stdexcept>

namespace sip {

PosteriorSampler::PosteriorSampler(int m, int noise_dim, std::vector<int> hidden,
                                   Activation act, std::string prefix)
    : act_(act), prefix_(std::move(prefix)) {
  if (m < 1) throw std::invalid_argument("PosteriorSampler: need M >= 1");
  if (noise_dim < 1) throw std::invalid_argument("PosteriorSampler: need noise_dim >= 1");
  widths_.push_back(noise_dim);
  for (int h : hidden) widths_.push_back(h);
  widths_.push_back(m);
}

void PosteriorSampler::init_params(ParamStore& store, Rng& rng) const {
  init_mlp_params(store, prefix_, widths_, rng);
}

Var PosteriorSampler::sample_u(Tape& t, const VarMap& v, int S, Rng& rng) const {
  if (S < 1) throw std::invalid_argument("sample_u: S must be >= 1");
  Var eps = t.constant(rng.normal_tensor({S, widths_.front()}));
  return mlp_forward(t, v, prefix_, widths_, eps, act_);
}

InducingInit inducing_init_from_string(const std::string& s) {
  if (s == "subset") return InducingInit::kSubset;
  if (s == "uniform") return InducingInit::kUniform;
  if (s == "concentrated") return InducingInit::kConcentrated;
  throw std::invalid_argument("unknown inducing init strategy '" + s + "'");
}

const char* to_string(InducingInit s) {
  switch (s) {
    case InducingInit::kSubset: return "subset";
    case InducingInit::kUniform: return "uniform";
    case InducingInit::kConcentrated: return "concentrated";
  }
  return "?";
}

Tensor init_inducing(InducingInit strategy, const Tensor& X, int m, Rng& rng,
                     const std::vector<double>& center) {
  if (m < 1) throw std::invalid_argument("init_inducing: need M >= 1");
  if (X.rank() != 2) throw std::invalid_argument("init_inducing: X must be rank-2");
  const int n = X.rows();
  const int d = X.cols();
  Tensor out({m, d});

  switch (strategy) {
    case InducingInit::kSubset: {
      if (m > n)
        throw std::invalid_argument("init_inducing: subset needs M <= N, got M = " +
                                    std::to_string(m) + ", N = " + std::to_string(n));
      std::vector<int> idx(static_cast<size_t>(n));
      for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
      for (int i = 0; i < m; ++i) {
        const int j =
            i + static_cast<int>(rng.integer(static_cast<std::uint64_t>(n - i)));
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
        for (int k = 0; k < d; ++k) out.at(i, k) = X.at(idx[static_cast<size_t>(i)], k);
      }
      break;
    }
    case InducingInit::kUniform: {
      std::vector<double> lo(static_cast<size_t>(d)), hi(static_cast<size_t>(d));
      for (int k = 0; k < d; ++k) {
        double a = X.at(0, k), b = X.at(0, k);
        for (int i = 1; i < n; ++i) {
          a = std::min(a, X.at(i, k));
          b = std::max(b, X.at(i, k));
        }
        lo[static_cast<size_t>(k)] = a;
        hi[static_cast<size_t>(k)] = b;
      }
      for (int i = 0; i < m; ++i)
        for (int k = 0; k < d; ++k)
          out.at(i, k) = rng.uniform(lo[static_cast<size_t>(k)], hi[static_cast<size_t>(k)]);
      break;
    }
    case InducingInit::kConcentrated: {
      if (!center.empty() && static_cast<int>(center.size()) != d)
        throw std::invalid_argument("init_inducing: center has " +
                                    std::to_string(center.size()) + " entries for D = " +
                                    std::to_string(d));
      for (int i = 0; i < m; ++i)
        for (int k = 0; k < d; ++k) {
          const double c = center.empty() ? 0.0 : center[static_cast<size_t>(k)];
          out.at(i, k) = c + 1e-3 * rng.normal();
        }
      break;
    }
  }
  return out;
}

}  // namespace sip
