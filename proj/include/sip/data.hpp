#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sip/rng.hpp"
#include "sip/tensor.hpp"

namespace sip {

/// Per-column z-score statistics taken from a training split.
struct StandardizationRecord {
  std::vector<double> x_mean;
  std::vector<double> x_std;
  double y_mean = 0.0;
  double y_std = 1.0;
};

struct Dataset {
  Tensor X;  // [N, D]
  Tensor y;  // [N]
  std::optional<StandardizationRecord> standardization;

  int n() const { return X.rank() == 2 ? X.rows() : 0; }
  int d() const { return X.rank() == 2 ? X.cols() : 0; }
};

struct SplitSpec {
  double train_fraction = 0.8;
  int repetitions = 20;
  std::uint64_t base_seed = 0;
};

/// Two noisy branches chosen by a fair coin:
/// y = 10 cos(x - 0.5) + e  or  y = 10 sin(x - 0.5) + e, e ~ N(0,1), x ~ U(-4,4).
Dataset gen_bimodal(int n, Rng& rng);

/// y = 7 sin(x) + e sin(x) + 10 with e ~ N(0, 2), x ~ U(-4,4); the conditional
/// noise std is 2|sin x|.
Dataset gen_heteroscedastic(int n, Rng& rng);

/// Continuous with a kink at 0: y = 10 + e for x < 0, 10(1 + sin x) + e for
/// x >= 0, e ~ N(0, 2), x ~ U(-4,5).
Dataset gen_piecewise(int n, Rng& rng);

struct CsvLoadResult {
  Dataset dataset;
  std::int64_t rows_skipped = 0;
  std::vector<std::string> warnings;  // one per rejected row, with row/column
};

/// Parse a numeric CSV. `target_column` picks the y column (negative counts
/// from the end, so -1 is the last column). Rows with missing or unparseable
/// fields are dropped and reported; a file with no usable rows is an error.
CsvLoadResult load_csv(const std::string& path, int target_column = -1,
                       bool header = false);

/// Deterministic train/test partition for one repetition; disjoint and
/// exhaustive, derived from (base seed, repetition index).
std::pair<Dataset, Dataset> split(const Dataset& ds, const SplitSpec& spec,
                                  int repetition);

/// Z-score both splits with statistics from the training split only; constant
/// columns get std 1. The record is attached to both outputs.
std::pair<Dataset, Dataset> standardize(const Dataset& train, const Dataset& test);

/// Map standardized target-space values back to original units.
inline double unstandardize_y(double y, const StandardizationRecord& r) {
  return y * r.y_std + r.y_mean;
}

}  // namespace sip
