#include "sip/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace sip {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

double norm_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

double norm_pdf(double z) {
  return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
}

}  // namespace

double rmse(const Tensor& pred_mean, const Tensor& y) {
  if (pred_mean.numel() != y.numel())
    throw std::invalid_argument("rmse: length mismatch, " +
                                std::to_string(pred_mean.numel()) + " vs " +
                                std::to_string(y.numel()));
  double ss = 0.0;
  for (std::int64_t i = 0, n = y.numel(); i < n; ++i) {
    const double d = pred_mean[i] - y[i];
    ss += d * d;
  }
  return std::sqrt(ss / static_cast<double>(y.numel()));
}

Tensor mixture_mean(const PredictiveMixture& mix) {
  const int s = mix.components();
  const int n = mix.points();
  Tensor out({n});
  for (int i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int k = 0; k < s; ++k) acc += mix.means.at(k, i);
    out[i] = acc / s;
  }
  return out;
}

double test_ll(const PredictiveMixture& mix, const Tensor& y, double y_scale) {
  const int s = mix.components();
  const int n = mix.points();
  if (s < 1 || n < 1) throw std::invalid_argument("test_ll: empty mixture");
  if (y.numel() != n)
    throw std::invalid_argument("test_ll: " + std::to_string(y.numel()) +
                                " targets for " + std::to_string(n) + " points");
  if (y_scale <= 0.0) throw std::invalid_argument("test_ll: y_scale must be positive");

  std::vector<double> lps(static_cast<size_t>(s));
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < s; ++k) {
      const double v = mix.vars.at(k, i);
      if (v <= 0.0) throw std::invalid_argument("test_ll: non-positive variance");
      const double d = y[i] - mix.means.at(k, i);
      const double lp = -0.5 * (kLog2Pi + std::log(v) + d * d / v);
      lps[static_cast<size_t>(k)] = lp;
      mx = std::max(mx, lp);
    }
    double acc = 0.0;
    for (int k = 0; k < s; ++k) acc += std::exp(lps[static_cast<size_t>(k)] - mx);
    total += mx + std::log(acc) - std::log(static_cast<double>(s));
  }
  return total / n - std::log(y_scale);
}

double crps_empirical(std::span<const double> samples, double y) {
  const std::int64_t s = static_cast<std::int64_t>(samples.size());
  if (s < 1) throw std::invalid_argument("crps_empirical: need at least one sample");
  double term1 = 0.0;
  for (const double x : samples) term1 += std::abs(x - y);
  term1 /= static_cast<double>(s);

  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  // sum_{s,t} |x_s - x_t| = 2 * sum_k (2k - S + 1) x_(k) over the sorted order
  double pair_sum = 0.0;
  for (std::int64_t k = 0; k < s; ++k)
    pair_sum += static_cast<double>(2 * k - s + 1) * sorted[static_cast<size_t>(k)];
  const double term2 = pair_sum / static_cast<double>(s * s);
  return term1 - term2;
}

double crps_gaussian(double mu, double sigma, double y) {
  if (sigma <= 0.0) throw std::invalid_argument("crps_gaussian: sigma must be positive");
  const double z = (y - mu) / sigma;
  return sigma * (z * (2.0 * norm_cdf(z) - 1.0) + 2.0 * norm_pdf(z) -
                  1.0 / std::sqrt(std::numbers::pi));
}

}  // namespace sip
