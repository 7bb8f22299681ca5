#include "sip/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace sip {

namespace {

void check_n(int n) {
  if (n < 1) throw std::invalid_argument("generator: need n >= 1");
}

Dataset make_xy(std::vector<double> x, std::vector<double> y) {
  const int n = static_cast<int>(x.size());
  Dataset ds;
  ds.X = Tensor({n, 1}, std::move(x));
  ds.y = Tensor({n}, std::move(y));
  return ds;
}

}  // namespace

Dataset gen_bimodal(int n, Rng& rng) {
  check_n(n);
  std::vector<double> xs(static_cast<size_t>(n)), ys(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double x = rng.uniform(-4.0, 4.0);
    const bool first = rng.uniform() < 0.5;
    const double eps = rng.normal();
    xs[static_cast<size_t>(i)] = x;
    ys[static_cast<size_t>(i)] =
        (first ? 10.0 * std::cos(x - 0.5) : 10.0 * std::sin(x - 0.5)) + eps;
  }
  return make_xy(std::move(xs), std::move(ys));
}

Dataset gen_heteroscedastic(int n, Rng& rng) {
  check_n(n);
  std::vector<double> xs(static_cast<size_t>(n)), ys(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double x = rng.uniform(-4.0, 4.0);
    const double eps = 2.0 * rng.normal();
    xs[static_cast<size_t>(i)] = x;
    ys[static_cast<size_t>(i)] = 7.0 * std::sin(x) + eps * std::sin(x) + 10.0;
  }
  return make_xy(std::move(xs), std::move(ys));
}

Dataset gen_piecewise(int n, Rng& rng) {
  check_n(n);
  std::vector<double> xs(static_cast<size_t>(n)), ys(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double x = rng.uniform(-4.0, 5.0);
    const double eps = 2.0 * rng.normal();
    xs[static_cast<size_t>(i)] = x;
    ys[static_cast<size_t>(i)] = x < 0.0 ? 10.0 + eps : 10.0 * (1.0 + std::sin(x)) + eps;
  }
  return make_xy(std::move(xs), std::move(ys));
}

CsvLoadResult load_csv(const std::string& path, int target_column, bool header) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_csv: cannot open '" + path + "'");

  CsvLoadResult result;
  std::vector<std::vector<double>> rows;
  std::string line;
  int line_no = 0;
  int ncols = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (header && line_no == 1) continue;
    // strip trailing CR from CRLF files
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;

    std::vector<double> fields;
    std::stringstream ss(line);
    std::string cell;
    bool bad = false;
    int col = 0;
    while (std::getline(ss, cell, ',')) {
      ++col;
      const auto first = cell.find_first_not_of(" \t");
      if (first == std::string::npos) {
        result.warnings.push_back("row " + std::to_string(line_no) + ", column " +
                                  std::to_string(col) + ": missing value");
        bad = true;
        break;
      }
      const auto last = cell.find_last_not_of(" \t");
      const std::string token = cell.substr(first, last - first + 1);
      try {
        std::size_t used = 0;
        const double v = std::stod(token, &used);
        if (used != token.size()) throw std::invalid_argument(token);
        fields.push_back(v);
      } catch (const std::exception&) {
        result.warnings.push_back("row " + std::to_string(line_no) + ", column " +
                                  std::to_string(col) + ": unparseable field '" + token +
                                  "'");
        bad = true;
        break;
      }
    }
    if (!bad && ncols >= 0 && static_cast<int>(fields.size()) != ncols) {
      result.warnings.push_back("row " + std::to_string(line_no) + ": expected " +
                                std::to_string(ncols) + " fields, got " +
                                std::to_string(fields.size()));
      bad = true;
    }
    if (bad) {
      ++result.rows_skipped;
      continue;
    }
    if (ncols < 0) ncols = static_cast<int>(fields.size());
    rows.push_back(std::move(fields));
  }

  const int n = static_cast<int>(rows.size());
  if (n == 0) throw std::runtime_error("load_csv: no usable rows in '" + path + "'");
  if (ncols < 2)
    throw std::runtime_error("load_csv: need at least two columns in '" + path + "'");

  int tc = target_column < 0 ? ncols + target_column : target_column;
  if (tc < 0 || tc >= ncols)
    throw std::runtime_error("load_csv: target column " + std::to_string(target_column) +
                             " out of range for " + std::to_string(ncols) + " columns");

  Dataset ds;
  ds.X = Tensor({n, ncols - 1});
  ds.y = Tensor({n});
  for (int i = 0; i < n; ++i) {
    int k = 0;
    for (int j = 0; j < ncols; ++j) {
      if (j == tc)
        ds.y[i] = rows[static_cast<size_t>(i)][static_cast<size_t>(j)];
      else
        ds.X.at(i, k++) = rows[static_cast<size_t>(i)][static_cast<size_t>(j)];
    }
  }
  result.dataset = std::move(ds);
  return result;
}

std::pair<Dataset, Dataset> split(const Dataset& ds, const SplitSpec& spec,
                                  int repetition) {
  if (repetition < 0 || repetition >= spec.repetitions)
    throw std::invalid_argument("split: repetition " + std::to_string(repetition) +
                                " outside [0, " + std::to_string(spec.repetitions) + ")");
  if (spec.train_fraction <= 0.0 || spec.train_fraction >= 1.0)
    throw std::invalid_argument("split: train fraction must lie in (0,1)");
  const int n = ds.n();
  if (n < 2) throw std::invalid_argument("split: need at least two rows");

  std::vector<int> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(Rng::mix(spec.base_seed, 0x5eedULL + static_cast<std::uint64_t>(repetition)));
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.integer(static_cast<std::uint64_t>(i + 1)));
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }

  const int n_train = static_cast<int>(std::floor(spec.train_fraction * n));
  auto take = [&](int begin, int count) {
    Dataset out;
    out.X = Tensor({count, ds.d()});
    out.y = Tensor({count});
    for (int i = 0; i < count; ++i) {
      const int src = idx[static_cast<size_t>(begin + i)];
      for (int j = 0; j < ds.d(); ++j) out.X.at(i, j) = ds.X.at(src, j);
      out.y[i] = ds.y[src];
    }
    return out;
  };
  return {take(0, n_train), take(n_train, n - n_train)};
}

std::pair<Dataset, Dataset> standardize(const Dataset& train, const Dataset& test) {
  const int d = train.d();
  StandardizationRecord rec;
  rec.x_mean.assign(static_cast<size_t>(d), 0.0);
  rec.x_std.assign(static_cast<size_t>(d), 1.0);
  const int n = train.n();
  for (int j = 0; j < d; ++j) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += train.X.at(i, j);
    const double mean = s / n;
    double ss = 0.0;
    for (int i = 0; i < n; ++i) {
      const double dlt = train.X.at(i, j) - mean;
      ss += dlt * dlt;
    }
    const double sd = std::sqrt(ss / n);
    rec.x_mean[static_cast<size_t>(j)] = mean;
    rec.x_std[static_cast<size_t>(j)] = sd > 0.0 ? sd : 1.0;
  }
  {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += train.y[i];
    rec.y_mean = s / n;
    double ss = 0.0;
    for (int i = 0; i < n; ++i) {
      const double dlt = train.y[i] - rec.y_mean;
      ss += dlt * dlt;
    }
    const double sd = std::sqrt(ss / n);
    rec.y_std = sd > 0.0 ? sd : 1.0;
  }

  auto apply = [&rec, d](const Dataset& src) {
    Dataset out;
    out.X = Tensor({src.n(), d});
    out.y = Tensor({src.n()});
    for (int i = 0; i < src.n(); ++i) {
      for (int j = 0; j < d; ++j)
        out.X.at(i, j) = (src.X.at(i, j) - rec.x_mean[static_cast<size_t>(j)]) /
                         rec.x_std[static_cast<size_t>(j)];
      out.y[i] = (src.y[i] - rec.y_mean) / rec.y_std;
    }
    out.standardization = rec;
    return out;
  };
  return {apply(train), apply(test)};
}

}  // namespace sip
