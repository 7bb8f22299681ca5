#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <stdexcept>

#include "sip/data.hpp"
#include "sip/metrics.hpp"
#include "sip/rng.hpp"

using namespace sip;
using doctest::Approx;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name, const std::string& content)
      : path("/tmp/sip_test_" + name) {
    std::ofstream out(path);
    out << content;
  }
  ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("generators are deterministic and emit exactly n rows") {
  Rng a(17), b(17);
  Dataset d1 = gen_bimodal(64, a);
  Dataset d2 = gen_bimodal(64, b);
  CHECK(d1.n() == 64);
  CHECK(d1.d() == 1);
  for (int i = 0; i < 64; ++i) {
    CHECK(d1.X.at(i, 0) == d2.X.at(i, 0));
    CHECK(d1.y[i] == d2.y[i]);
  }
  CHECK_THROWS_AS(gen_bimodal(0, a), std::invalid_argument);
}

TEST_CASE("bimodal generator places both branches and balances them") {
  Rng rng(101);
  const int n = 100000;
  Dataset ds = gen_bimodal(n, rng);
  int first_branch = 0;
  for (int i = 0; i < n; ++i) {
    const double x = ds.X.at(i, 0);
    CHECK(x >= -4.0);
    CHECK(x < 4.0);
    const double m1 = 10.0 * std::cos(x - 0.5);
    const double m2 = 10.0 * std::sin(x - 0.5);
    if (std::abs(ds.y[i] - m1) < std::abs(ds.y[i] - m2)) ++first_branch;
  }
  const double freq = static_cast<double>(first_branch) / n;
  CHECK(freq == Approx(0.5).epsilon(0.04));

  // near x = 0.5 the two noiseless branch centers are 10 and 0
  int hi = 0, lo = 0;
  for (int i = 0; i < n; ++i) {
    const double x = ds.X.at(i, 0);
    if (std::abs(x - 0.5) < 0.1) {
      if (std::abs(ds.y[i] - 10.0) < 4.5) ++hi;
      if (std::abs(ds.y[i]) < 4.5) ++lo;
    }
  }
  CHECK(hi > 0);
  CHECK(lo > 0);
}

TEST_CASE("heteroscedastic generator has noise that tracks |sin x|") {
  Rng rng(7);
  const int n = 100000;
  Dataset ds = gen_heteroscedastic(n, rng);
  auto binned_std = [&](double center, double width) {
    double s = 0.0, ss = 0.0;
    int cnt = 0;
    for (int i = 0; i < n; ++i) {
      if (std::abs(ds.X.at(i, 0) - center) < width) {
        s += ds.y[i];
        ss += ds.y[i] * ds.y[i];
        ++cnt;
      }
    }
    const double mean = s / cnt;
    return std::sqrt(ss / cnt - mean * mean);
  };
  const double near_peak = binned_std(std::numbers::pi / 2, 0.2);
  const double near_zero = binned_std(0.0, 0.1);
  CHECK(near_peak > near_zero);
  CHECK(near_peak == Approx(2.0).epsilon(0.15));  // std = 2|sin x| ~ 2 at the peak
}

TEST_CASE("piecewise generator is flat left of zero and continuous at zero") {
  Rng rng(3);
  const int n = 100000;
  Dataset ds = gen_piecewise(n, rng);
  auto binned_mean = [&](double lo, double hi) {
    double s = 0.0;
    int cnt = 0;
    for (int i = 0; i < n; ++i) {
      const double x = ds.X.at(i, 0);
      if (x >= lo && x < hi) {
        s += ds.y[i];
        ++cnt;
      }
    }
    return s / cnt;
  };
  CHECK(binned_mean(-1.2, -0.8) == Approx(10.0).epsilon(0.02));
  CHECK(binned_mean(std::numbers::pi / 2 - 0.1, std::numbers::pi / 2 + 0.1) ==
        Approx(20.0).epsilon(0.02));
  // continuity at the kink: left bin sits at 10; right bin matches the exact
  // bin average of 10(1 + sin x), which tends to 10 as the bin shrinks
  const double w = 0.15;
  CHECK(binned_mean(-w, 0.0) == Approx(10.0).epsilon(0.02));
  CHECK(binned_mean(0.0, w) == Approx(10.0 * (1.0 + (1.0 - std::cos(w)) / w)).epsilon(0.02));
  for (int i = 0; i < n; ++i) {
    CHECK(ds.X.at(i, 0) >= -4.0);
    CHECK(ds.X.at(i, 0) < 5.0);
  }
}

TEST_CASE("csv loading parses shapes and honors the target column") {
  std::string content;
  for (int i = 0; i < 200; ++i)
    content += std::to_string(i * 0.5) + "," + std::to_string(i * 2.0) + "\n";
  TempFile f("two_col.csv", content);

  CsvLoadResult last = load_csv(f.path, -1, false);
  CHECK(last.dataset.n() == 200);
  CHECK(last.dataset.d() == 1);
  CHECK(last.rows_skipped == 0);
  CHECK(last.dataset.X.at(3, 0) == Approx(1.5));
  CHECK(last.dataset.y[3] == Approx(6.0));

  CsvLoadResult first = load_csv(f.path, 0, false);
  CHECK(first.dataset.X.at(3, 0) == Approx(6.0));
  CHECK(first.dataset.y[3] == Approx(1.5));
}

TEST_CASE("csv loading drops bad rows with a report and rejects empty files") {
  TempFile f("bad_row.csv", "1,2\n3,oops\n5,6\n7,\n9,10\n");
  CsvLoadResult r = load_csv(f.path, -1, false);
  CHECK(r.dataset.n() == 3);
  CHECK(r.rows_skipped == 2);
  REQUIRE(r.warnings.size() == 2);
  CHECK(r.warnings[0].find("row 2") != std::string::npos);
  CHECK(r.warnings[0].find("column 2") != std::string::npos);

  TempFile empty("empty.csv", "");
  CHECK_THROWS_AS(load_csv(empty.path, -1, false), std::runtime_error);
  CHECK_THROWS_AS(load_csv("/nonexistent/nope.csv", -1, false), std::runtime_error);

  TempFile hdr("hdr.csv", "x,y\n1,2\n3,4\n");
  CsvLoadResult withhdr = load_csv(hdr.path, -1, true);
  CHECK(withhdr.dataset.n() == 2);
}

TEST_CASE("splits are disjoint, exhaustive, determinstic, and seed-distinct") {
  Rng rng(9);
  Dataset ds = gen_bimodal(100, rng);
  SplitSpec spec{.train_fraction = 0.8, .repetitions = 20, .base_seed = 42};

  auto [tr, te] = split(ds, spec, 0);
  CHECK(tr.n() == 80);
  CHECK(te.n() == 20);

  // disjoint + exhaustive via multiset of x values (all distinct w.p. 1)
  std::multiset<double> seen;
  for (int i = 0; i < tr.n(); ++i) seen.insert(tr.X.at(i, 0));
  for (int i = 0; i < te.n(); ++i) seen.insert(te.X.at(i, 0));
  std::multiset<double> all;
  for (int i = 0; i < ds.n(); ++i) all.insert(ds.X.at(i, 0));
  CHECK(seen == all);

  auto [tr2, te2] = split(ds, spec, 0);
  CHECK(tr2.X.at(0, 0) == tr.X.at(0, 0));

  auto [tr3, te3] = split(ds, spec, 1);
  bool differs = false;
  for (int i = 0; i < tr.n() && !differs; ++i)
    differs = tr3.X.at(i, 0) != tr.X.at(i, 0);
  CHECK(differs);

  CHECK_THROWS_AS(split(ds, spec, 20), std::invalid_argument);
  CHECK_THROWS_AS(split(ds, spec, -1), std::invalid_argument);
}

TEST_CASE("standardization uses train statistics only and round-trips") {
  Rng rng(21);
  Dataset ds = gen_heteroscedastic(500, rng);
  SplitSpec spec{.train_fraction = 0.8, .repetitions = 5, .base_seed = 3};
  auto [tr, te] = split(ds, spec, 0);
  auto [str, ste] = standardize(tr, te);

  double mean = 0.0, var = 0.0;
  for (int i = 0; i < str.n(); ++i) mean += str.X.at(i, 0);
  mean /= str.n();
  for (int i = 0; i < str.n(); ++i) {
    const double d = str.X.at(i, 0) - mean;
    var += d * d;
  }
  var /= str.n();
  CHECK(mean == Approx(0.0).epsilon(1e-10));
  CHECK(var == Approx(1.0).epsilon(1e-10));

  REQUIRE(str.standardization.has_value());
  const StandardizationRecord& rec = *str.standardization;
  for (int i = 0; i < str.n(); ++i)
    CHECK(unstandardize_y(str.y[i], rec) == Approx(tr.y[i]).epsilon(1e-12));

  // test-set mean is generally nonzero under train-only statistics
  double te_mean = 0.0;
  for (int i = 0; i < ste.n(); ++i) te_mean += ste.X.at(i, 0);
  te_mean /= ste.n();
  CHECK(te_mean != 0.0);
}

TEST_CASE("rmse matches hand values and scales with the targets") {
  Tensor y = Tensor::row({1, 2, 3});
  CHECK(rmse(y, y) == 0.0);
  Tensor pred = Tensor::row({2, 1, 3});
  CHECK(rmse(pred, y) == Approx(std::sqrt(2.0 / 3.0)));
  Tensor errs = Tensor::row({1, -1});
  CHECK(rmse(errs, Tensor::row({0, 0})) == Approx(1.0));

  Tensor y10 = Tensor::row({10, 20, 30});
  Tensor p10 = Tensor::row({20, 10, 30});
  CHECK(rmse(p10, y10) == Approx(10.0 * rmse(pred, y)).epsilon(1e-12));
  CHECK_THROWS_AS(rmse(pred, Tensor::row({1, 2})), std::invalid_argument);
}

TEST_CASE("test log-likelihood evaluates mixtures through log-sum-exp") {
  // a single unit-normalizer component scores exactly zero
  PredictiveMixture one{Tensor({1, 1}, {0.0}),
                        Tensor({1, 1}, {1.0 / (2.0 * std::numbers::pi)})};
  CHECK(test_ll(one, Tensor::row({0.0})) == Approx(0.0).epsilon(1e-12));

  PredictiveMixture two{Tensor({2, 1}, {-1.0, 1.0}), Tensor({2, 1}, {1.0, 1.0})};
  CHECK(test_ll(two, Tensor::row({0.0})) == Approx(-1.4189385332).epsilon(1e-9));

  // duplicating a component leaves the equal-weight mixture unchanged
  PredictiveMixture four{Tensor({4, 1}, {-1.0, 1.0, -1.0, 1.0}),
                         Tensor({4, 1}, {1.0, 1.0, 1.0, 1.0})};
  CHECK(test_ll(four, Tensor::row({0.0})) ==
        Approx(test_ll(two, Tensor::row({0.0}))).epsilon(1e-12));
}

TEST_CASE("empirical crps matches hand values and stays nonnegative") {
  std::vector<double> exact = {1.0, 1.0, 1.0};
  CHECK(crps_empirical(exact, 1.0) == Approx(0.0));

  std::vector<double> pair = {0.0, 2.0};
  CHECK(crps_empirical(pair, 1.0) == Approx(0.5));

  Rng rng(13);
  for (int trial = 0; trial < 10000; ++trial) {
    const int s = 2 + static_cast<int>(rng.integer(6));
    std::vector<double> xs(static_cast<size_t>(s));
    for (double& x : xs) x = rng.normal() * 3.0;
    CHECK(crps_empirical(xs, rng.normal()) >= -1e-12);
  }
  CHECK_THROWS_AS(crps_empirical(std::span<const double>{}, 0.0), std::invalid_argument);
}

TEST_CASE("gaussian crps closed form matches known values and scales in sigma") {
  const double at_center = 2.0 / std::sqrt(2.0 * std::numbers::pi) -
                           1.0 / std::sqrt(std::numbers::pi);
  CHECK(crps_gaussian(0.0, 1.0, 0.0) == Approx(at_center).epsilon(1e-12));
  CHECK(crps_gaussian(0.0, 1.0, 0.0) == Approx(0.23369497725).epsilon(1e-9));

  // fixed z, varying sigma: the value is linear in sigma
  const double c1 = crps_gaussian(0.0, 1.0, 0.7);
  const double c3 = crps_gaussian(0.0, 3.0, 2.1);
  CHECK(c3 == Approx(3.0 * c1).epsilon(1e-12));
  CHECK_THROWS_AS(crps_gaussian(0.0, 0.0, 1.0), std::invalid_argument);
}

TEST_CASE("empirical crps converges to the gaussian closed form") {
  Rng rng(2025);
  const double mu = 0.3, sigma = 1.7, y = 1.1;
  const double truth = crps_gaussian(mu, sigma, y);

  CHECK(std::abs(truth) > 0.1);
  // large-sample agreement within 1%
  {
    std::vector<double> xs(100000);
    for (double& x : xs) x = mu + sigma * rng.normal();
    CHECK(crps_empirical(xs, y) == Approx(truth).epsilon(0.01));
  }

  // Monte-Carlo rate: quadrupling S should roughly halve the mean error
  auto mean_err = [&](int s) {
    double acc = 0.0;
    const int reps = 300;
    for (int r = 0; r < reps; ++r) {
      std::vector<double> xs(static_cast<size_t>(s));
      for (double& x : xs) x = mu + sigma * rng.normal();
      acc += std::abs(crps_empirical(xs, y) - truth);
    }
    return acc / reps;
  };
  const double e100 = mean_err(100);
  const double e400 = mean_err(400);
  const double e1600 = mean_err(1600);
  CHECK(e400 < e100 * 0.75);
  CHECK(e1600 < e400 * 0.75);
}

TEST_CASE("metrics agree between standardized and original units") {
  Rng rng(31);
  const int n = 40, s = 8;
  const double y_mean = 5.0, y_scale = 3.0;

  PredictiveMixture std_mix{rng.normal_tensor({s, n}),
                            rng.uniform_tensor({s, n}, 0.5, 2.0)};
  Tensor std_y = rng.normal_tensor({n});

  PredictiveMixture orig_mix{Tensor({s, n}), Tensor({s, n})};
  for (int k = 0; k < s; ++k)
    for (int i = 0; i < n; ++i) {
      orig_mix.means.at(k, i) = std_mix.means.at(k, i) * y_scale + y_mean;
      orig_mix.vars.at(k, i) = std_mix.vars.at(k, i) * y_scale * y_scale;
    }
  Tensor orig_y({n});
  for (int i = 0; i < n; ++i) orig_y[i] = std_y[i] * y_scale + y_mean;

  CHECK(test_ll(std_mix, std_y, y_scale) ==
        Approx(test_ll(orig_mix, orig_y)).epsilon(1e-10));

  Tensor std_pm = mixture_mean(std_mix);
  Tensor orig_pm = mixture_mean(orig_mix);
  CHECK(rmse(std_pm, std_y) * y_scale == Approx(rmse(orig_pm, orig_y)).epsilon(1e-12));

  // CRPS in standardized units scales by exactly the y scale
  std::vector<double> std_samples(16), orig_samples(16);
  for (int k = 0; k < 16; ++k) {
    std_samples[static_cast<size_t>(k)] = rng.normal();
    orig_samples[static_cast<size_t>(k)] =
        std_samples[static_cast<size_t>(k)] * y_scale + y_mean;
  }
  CHECK(crps_empirical(std_samples, std_y[0]) * y_scale ==
        Approx(crps_empirical(orig_samples, orig_y[0])).epsilon(1e-12));
}
