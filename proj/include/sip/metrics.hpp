#pragma once

#include <span>

#include "sip/tensor.hpp"

namespace sip {

/// Equal-weight Gaussian mixture over test points: component s at point i has
/// mean means(s,i) and total variance vars(s,i) (observation noise included).
struct PredictiveMixture {
  Tensor means;  // [S, N]
  Tensor vars;   // [S, N]

  int components() const { return means.rank() == 2 ? means.rows() : 0; }
  int points() const { return means.rank() == 2 ? means.cols() : 0; }
};

/// Root mean squared error between a point prediction and the targets.
double rmse(const Tensor& pred_mean, const Tensor& y);

/// Per-point mixture means averaged over components -- the point prediction
/// used for RMSE.
Tensor mixture_mean(const PredictiveMixture& mix);

/// Mean over points of log[(1/S) sum_s N(y | mean_si, var_si)], computed with
/// a log-sum-exp over components. If the mixture lives in standardized target
/// units, pass the y scale to report in original units (subtracts log scale).
double test_ll(const PredictiveMixture& mix, const Tensor& y, double y_scale = 1.0);

/// Sample-based CRPS: mean_s |x_s - y| - (1/(2 S^2)) sum_{s,t} |x_s - x_t|.
/// The pairwise term uses the sorted-prefix identity, so the cost is S log S.
double crps_empirical(std::span<const double> samples, double y);

/// Closed-form CRPS of a single Gaussian: sigma [z(2 Phi(z) - 1) + 2 phi(z)
/// - 1/sqrt(pi)] with z = (y - mu)/sigma.
double crps_gaussian(double mu, double sigma, double y);

}  // namespace sip
