#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "sip/nets.hpp"
#include "sip/optim.hpp"
#include "sip/posterior.hpp"
#include "sip/priors.hpp"

using namespace sip;

namespace {

// Overwrite every parameter whose name ends with `suffix` with a constant.
void fill_matching(ParamStore& store, const std::string& suffix, double value) {
  for (auto& [name, tensor] : store.items()) {
    if (name.size() >= suffix.size() &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
      for (std::int64_t i = 0; i < tensor.numel(); ++i) tensor[i] = value;
    }
  }
}

Tensor sample_tensor(const ImplicitPrior& prior, const ParamStore& store,
                     const Tensor& X, int S, std::uint64_t seed, bool train_mode) {
  Tape t;
  VarMap v = bind_constants(t, store);
  Rng rng(seed);
  return prior.sample_functions(t, v, t.constant(X), S, rng, train_mode).value();
}

}  // namespace

TEST_CASE("weight-uncertain network registers mean and scale for every weight") {
  BnnPrior prior(3);
  ParamStore store;
  Rng rng(1);
  prior.init_params(store, rng);

  CHECK(prior.weight_count() == 3 * 50 + 50 + 50 * 50 + 50 + 50 * 1 + 1);
  CHECK(store.numel_total() == 2 * prior.weight_count());
  CHECK(store.contains("prior.w0.mu"));
  CHECK(store.contains("prior.w0.rho"));
  CHECK(store.contains("prior.b2.mu"));
  CHECK(store.contains("prior.b2.rho"));

  Tensor means = prior.flat_means(store);
  Tensor stds = prior.flat_stds(store);
  CHECK(means.numel() == prior.weight_count());
  CHECK(stds.numel() == prior.weight_count());
  for (std::int64_t i = 0; i < stds.numel(); ++i) CHECK(stds[i] > 0.0);
  // first-layer scales start at 0.1 / sqrt(fan_in)
  CHECK(stds[0] == doctest::Approx(0.1 / std::sqrt(3.0)).epsilon(1e-10));

  // scales stay positive even for a very negative unconstrained value
  fill_matching(store, ".rho", -40.0);
  Tensor tiny = prior.flat_stds(store);
  for (std::int64_t i = 0; i < tiny.numel(); ++i) CHECK(tiny[i] > 0.0);
}

TEST_CASE("weight samples collapse to the mean network as the scales vanish") {
  BnnPrior prior(1, {5});
  ParamStore store;
  Rng rng(7);
  prior.init_params(store, rng);
  fill_matching(store, ".rho", softplus_inverse(1e-14));

  // mirror the means into a plain feed-forward stack
  ParamStore mean_store;
  for (size_t l = 0; l + 1 < prior.widths().size(); ++l) {
    const std::string id = std::to_string(l);
    mean_store.add("mean.w" + id, store.at("prior.w" + id + ".mu"));
    mean_store.add("mean.b" + id, store.at("prior.b" + id + ".mu"));
  }

  Tensor X = Tensor::matrix(3, 1, {-2.0, 0.3, 1.7});
  const int S = 4;
  Tensor samples = sample_tensor(prior, store, X, S, 42, false);

  Tape t;
  VarMap vm = bind_constants(t, mean_store);
  Tensor mean_out =
      mlp_forward(t, vm, "mean", prior.widths(), t.constant(X), Activation::kTanh)
          .value();

  REQUIRE(samples.shape() == Shape{S, 3});
  for (int s = 0; s < S; ++s)
    for (int i = 0; i < 3; ++i)
      CHECK(samples.at(s, i) == doctest::Approx(mean_out.at(i, 0)).epsilon(1e-8));
}

TEST_CASE("function sampling is reproducible bit for bit under a fixed seed") {
  BnnPrior bnn(2, {6});
  NeuralSamplerPrior ns(2, 10, {6});
  Tensor X = Tensor::matrix(4, 2, {0.1, -0.2, 1.0, 2.0, -1.5, 0.4, 3.0, -3.0});

  for (const ImplicitPrior* prior : {static_cast<const ImplicitPrior*>(&bnn),
                                     static_cast<const ImplicitPrior*>(&ns)}) {
    CAPTURE(prior->kind());
    ParamStore store;
    Rng rng(11);
    prior->init_params(store, rng);
    Tensor a = sample_tensor(*prior, store, X, 2, 99, false);
    Tensor b = sample_tensor(*prior, store, X, 2, 99, false);
    Tensor c = sample_tensor(*prior, store, X, 2, 100, false);
    REQUIRE(a.shape() == Shape{2, 4});
    bool identical = true, all_same_as_c = true;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
      identical = identical && a[i] == b[i];
      all_same_as_c = all_same_as_c && a[i] == c[i];
    }
    CHECK(identical);
    CHECK_FALSE(all_same_as_c);
  }
}

TEST_CASE("linear weight sampling matches the analytic spread at x = 2") {
  // f(x) = w * x with w ~ N(0, 1): variance at x = 2 is 4
  BnnPrior prior(1, {});
  ParamStore store;
  Rng rng(3);
  prior.init_params(store, rng);
  store.at("prior.w0.mu")[0] = 0.0;
  store.at("prior.w0.rho")[0] = softplus_inverse(1.0);
  store.at("prior.b0.mu")[0] = 0.0;
  store.at("prior.b0.rho")[0] = softplus_inverse(1e-12);

  const int S = 10000;
  Tensor X = Tensor::matrix(1, 1, {2.0});
  Tensor samples = sample_tensor(prior, store, X, S, 2024, false);
  REQUIRE(samples.shape() == Shape{S, 1});

  double mean = 0.0;
  for (int s = 0; s < S; ++s) mean += samples.at(s, 0);
  mean /= S;
  double var = 0.0;
  for (int s = 0; s < S; ++s) {
    const double d = samples.at(s, 0) - mean;
    var += d * d;
  }
  var /= S;
  CHECK(std::abs(mean) < 0.1);
  CHECK(var == doctest::Approx(4.0).epsilon(0.03));  // 4 +/- 0.12
}

TEST_CASE("noise-fed sampler keeps randomness per function, not per point") {
  NeuralSamplerPrior prior(1);
  ParamStore store;
  Rng rng(17);
  prior.init_params(store, rng);

  // rows 0 and 2 are the same input location; results agree to rounding
  // (matrix kernels may round tail rows differently by one unit in the last place)
  Tensor X = Tensor::matrix(3, 1, {0.7, -1.3, 0.7});
  Tensor samples = sample_tensor(prior, store, X, 5, 31, false);
  for (int s = 0; s < 5; ++s)
    CHECK(std::abs(samples.at(s, 0) - samples.at(s, 2)) <=
          1e-12 * (1.0 + std::abs(samples.at(s, 0))));

  // distinct samples draw distinct function noise
  bool any_diff = false;
  for (int s = 1; s < 5; ++s) any_diff = any_diff || samples.at(s, 0) != samples.at(0, 0);
  CHECK(any_diff);
}

TEST_CASE("zero network weights produce a constant function equal to the final bias") {
  NeuralSamplerPrior prior(2);
  ParamStore store;
  Rng rng(5);
  prior.init_params(store, rng);
  fill_matching(store, ".w0", 0.0);
  fill_matching(store, ".w1", 0.0);
  fill_matching(store, ".w2", 0.0);
  fill_matching(store, ".b0", 0.0);
  fill_matching(store, ".b1", 0.0);
  fill_matching(store, ".b2", 3.5);

  Tensor X = Tensor::matrix(3, 2, {0.0, 1.0, -2.0, 5.0, 4.0, 4.0});
  Tensor samples = sample_tensor(prior, store, X, 4, 8, false);
  for (std::int64_t i = 0; i < samples.numel(); ++i) CHECK(samples[i] == 3.5);
}

TEST_CASE("joint sampling stacks data and inducing locations coherently") {
  BnnPrior prior(1, {4});
  ParamStore store;
  Rng rng(23);
  prior.init_params(store, rng);

  Tensor X = Tensor::matrix(2, 1, {-1.0, 2.0});
  Tensor Xbar = Tensor::matrix(1, 1, {0.5});

  Tape t;
  VarMap v = bind_constants(t, store);
  Rng r1(77);
  Var joint = joint_prior_samples(prior, t, v, t.constant(X), t.constant(Xbar), 3, r1,
                                  false);
  REQUIRE(joint.value().shape() == Shape{3, 3});

  // the first N columns are the plain data-location samples, same seed
  Tensor plain = sample_tensor(prior, store, X, 3, 77, false);
  for (int s = 0; s < 3; ++s)
    for (int i = 0; i < 2; ++i) CHECK(joint.value().at(s, i) == plain.at(s, i));

  // an empty inducing set degenerates to sampling at the data alone
  Tape t2;
  VarMap v2 = bind_constants(t2, store);
  Rng r2(77);
  Var no_inducing = joint_prior_samples(prior, t2, v2, t2.constant(X),
                                        t2.constant(Tensor::zeros({0, 1})), 3, r2, false);
  REQUIRE(no_inducing.value().shape() == Shape{3, 2});
  for (std::int64_t i = 0; i < plain.numel(); ++i)
    CHECK(no_inducing.value()[i] == plain[i]);
}

TEST_CASE("pathwise gradients of weight sampling match finite differences") {
  BnnPrior prior(1, {4});
  ParamStore store;
  Rng rng(13);
  prior.init_params(store, rng);

  Tensor X = Tensor::matrix(3, 1, {-1.5, 0.2, 2.1});
  TapeFn f = [&](Tape& t, const VarMap& v) {
    Rng frozen(777);  // identical noise on every call
    Var s = prior.sample_functions(t, v, t.constant(X), 6, frozen, false);
    return mean(square(s));
  };
  GradcheckReport report = gradcheck(f, store, 1e-5);
  CAPTURE(report.worst_param);
  CAPTURE(report.worst_coord);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("gradients reach the inducing locations through the sample path") {
  BnnPrior prior(1, {4});
  ParamStore prior_store;
  Rng rng(29);
  prior.init_params(prior_store, rng);

  ParamStore loc;
  Rng loc_rng(30);
  loc.add("xbar", loc_rng.normal_tensor({2, 1}));

  Tensor X = Tensor::matrix(3, 1, {-2.0, 0.0, 1.0});
  TapeFn f = [&](Tape& t, const VarMap& v) {
    VarMap all = bind_constants(t, prior_store);
    all.insert(v.begin(), v.end());
    Rng frozen(5);
    Var joint = joint_prior_samples(prior, t, all, t.constant(X), v.at("xbar"), 4,
                                    frozen, false);
    return mean(square(joint));
  };
  GradcheckReport report = gradcheck(f, loc, 1e-5);
  CHECK(report.coords_checked == 2);
  CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("dropout masks fire only in train mode") {
  CHECK_THROWS_AS(NeuralSamplerPrior(1, 10, {50, 50}, Activation::kTanh, 1.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(NeuralSamplerPrior(1, 10, {50, 50}, Activation::kTanh, -0.1),
                  std::invalid_argument);

  NeuralSamplerPrior dropped(1, 10, {8, 8}, Activation::kTanh, 0.5);
  ParamStore store;
  Rng rng(41);
  dropped.init_params(store, rng);
  CHECK(dropped.dropout_rate() == 0.5);

  Tensor X = Tensor::matrix(4, 1, {-2.0, -1.0, 1.0, 2.0});
  Tensor eval_a = sample_tensor(dropped, store, X, 3, 55, false);
  Tensor eval_b = sample_tensor(dropped, store, X, 3, 55, false);
  Tensor train = sample_tensor(dropped, store, X, 3, 55, true);
  bool eval_match = true, train_match = true;
  for (std::int64_t i = 0; i < eval_a.numel(); ++i) {
    eval_match = eval_match && eval_a[i] == eval_b[i];
    train_match = train_match && eval_a[i] == train[i];
  }
  CHECK(eval_match);        // no stochastic masks outside training
  CHECK_FALSE(train_match); // masks change the outputs in train mode

  // a zero rate leaves train mode indistinguishable from evaluation
  NeuralSamplerPrior plain(1, 10, {8, 8}, Activation::kTanh, 0.0);
  ParamStore store2;
  Rng rng2(41);
  plain.init_params(store2, rng2);
  Tensor p_eval = sample_tensor(plain, store2, X, 3, 55, false);
  Tensor p_train = sample_tensor(plain, store2, X, 3, 55, true);
  for (std::int64_t i = 0; i < p_eval.numel(); ++i) CHECK(p_eval[i] == p_train[i]);
}

TEST_CASE("inducing initialization strategies obey their contracts") {
  Tensor X({10, 2});
  for (int i = 0; i < 10; ++i) {
    X.at(i, 0) = static_cast<double>(i);
    X.at(i, 1) = 100.0 + i;
  }

  SUBCASE("subset draws distinct training rows") {
    Rng rng(61);
    Tensor Z = init_inducing(InducingInit::kSubset, X, 6, rng);
    REQUIRE(Z.shape() == Shape{6, 2});
    std::set<double> seen;
    for (int i = 0; i < 6; ++i) {
      const double a = Z.at(i, 0);
      CHECK(a == std::floor(a));
      CHECK(a >= 0.0);
      CHECK(a <= 9.0);
      CHECK(Z.at(i, 1) == 100.0 + a);  // whole rows move together
      seen.insert(a);
    }
    CHECK(seen.size() == 6);  // without replacement
    Rng rng2(62);
    CHECK_THROWS_AS(init_inducing(InducingInit::kSubset, X, 11, rng2),
                    std::invalid_argument);
  }

  SUBCASE("uniform stays inside the per-dimension data range") {
    Rng rng(63);
    Tensor Z = init_inducing(InducingInit::kUniform, X, 40, rng);
    for (int i = 0; i < 40; ++i) {
      CHECK(Z.at(i, 0) >= 0.0);
      CHECK(Z.at(i, 0) <= 9.0);
      CHECK(Z.at(i, 1) >= 100.0);
      CHECK(Z.at(i, 1) <= 109.0);
    }
  }

  SUBCASE("concentrated clusters tightly around the requested center") {
    Rng rng(64);
    Tensor one_d = Tensor::matrix(5, 1, {-4.0, -2.0, 0.0, 2.0, 4.0});
    Tensor Z = init_inducing(InducingInit::kConcentrated, one_d, 15, rng, {0.0});
    REQUIRE(Z.shape() == Shape{15, 1});
    for (int i = 0; i < 15; ++i) CHECK(std::abs(Z.at(i, 0)) < 1e-2);

    // default center is the origin; a mismatched center length is rejected
    Rng rng2(65);
    Tensor Z2 = init_inducing(InducingInit::kConcentrated, X, 3, rng2);
    for (std::int64_t i = 0; i < Z2.numel(); ++i) CHECK(std::abs(Z2[i]) < 1e-2);
    Rng rng3(66);
    CHECK_THROWS_AS(init_inducing(InducingInit::kConcentrated, X, 3, rng3, {1.0}),
                    std::invalid_argument);
  }

  SUBCASE("strategy names round-trip") {
    for (const char* name : {"subset", "uniform", "concentrated"})
      CHECK(std::string(to_string(inducing_init_from_string(name))) == name);
    CHECK_THROWS_AS(inducing_init_from_string("grid"), std::invalid_argument);
  }
}

TEST_CASE("inducing-value sampler has the contracted shape and determinism") {
  PosteriorSampler q(3);
  CHECK(q.m() == 3);
  CHECK(q.noise_dim() == 100);
  ParamStore store;
  Rng rng(71);
  q.init_params(store, rng);

  auto draw = [&](std::uint64_t seed) {
    Tape t;
    VarMap v = bind_constants(t, store);
    Rng r(seed);
    return q.sample_u(t, v, 500, r).value();
  };
  Tensor a = draw(9);
  Tensor b = draw(9);
  Tensor c = draw(10);
  REQUIRE(a.shape() == Shape{500, 3});
  CHECK(a.all_finite());
  bool same = true, differs = false;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    same = same && a[i] == b[i];
    differs = differs || a[i] != c[i];
  }
  CHECK(same);
  CHECK(differs);

  CHECK_THROWS_AS(PosteriorSampler(0), std::invalid_argument);
  Tape t;
  VarMap v = bind_constants(t, store);
  Rng r(1);
  CHECK_THROWS_AS(q.sample_u(t, v, 0, r), std::invalid_argument);
}

TEST_CASE("zero-weight inducing sampler returns the output bias vector") {
  PosteriorSampler q(3, 10, {5});
  ParamStore store;
  Rng rng(81);
  q.init_params(store, rng);
  fill_matching(store, ".w0", 0.0);
  fill_matching(store, ".w1", 0.0);
  fill_matching(store, ".b0", 0.0);
  Tensor& bias = store.at("post.b1");
  bias[0] = 1.5;
  bias[1] = -2.0;
  bias[2] = 0.5;

  Tape t;
  VarMap v = bind_constants(t, store);
  Rng r(3);
  Tensor u = q.sample_u(t, v, 4, r).value();
  REQUIRE(u.shape() == Shape{4, 3});
  for (int s = 0; s < 4; ++s) {
    CHECK(u.at(s, 0) == 1.5);
    CHECK(u.at(s, 1) == -2.0);
    CHECK(u.at(s, 2) == 0.5);
  }
}

TEST_CASE("freezing the inducing-value sampler keeps its weights fixed") {
  PosteriorSampler q(2, 4, {5});
  ParamStore store;
  Rng rng(91);
  q.init_params(store, rng);
  CHECK_FALSE(q.frozen());

  auto run_steps = [&](bool frozen, int steps) {
    std::vector<double> before = store.flatten();
    Adam opt;
    for (int k = 0; k < steps; ++k) {
      Tape t;
      VarMap v = frozen ? bind_constants(t, store) : bind_leaves(t, store);
      Rng r(1000 + static_cast<std::uint64_t>(k));
      Var loss = mean(square(q.sample_u(t, v, 8, r)));
      t.backward(loss);
      auto grads = t.grad_map();
      if (!grads.empty()) opt.step(store, grads);
    }
    std::vector<double> after = store.flatten();
    double delta = 0.0;
    for (size_t i = 0; i < before.size(); ++i) delta += std::abs(after[i] - before[i]);
    return delta;
  };

  CHECK(run_steps(/*frozen=*/false, 5) > 0.0);

  q.freeze();
  CHECK(q.frozen());
  CHECK(run_steps(/*frozen=*/true, 5) == 0.0);
}

TEST_CASE("activation helpers cover the supported names") {
  for (const char* name : {"tanh", "relu", "leaky_relu"})
    CHECK(std::string(to_string(activation_from_string(name))) == name);
  CHECK_THROWS_AS(activation_from_string("gelu"), std::invalid_argument);

  Tape t;
  Var x = t.constant(Tensor::row({-1.0, 2.0}));
  Tensor relu = apply_activation(t, x, Activation::kRelu).value();
  CHECK(relu[0] == 0.0);
  CHECK(relu[1] == 2.0);
  Tensor leaky = apply_activation(t, x, Activation::kLeakyRelu).value();
  CHECK(leaky[0] == doctest::Approx(-0.2));
  CHECK(leaky[1] == doctest::Approx(2.0));

  for (double y : {1e-6, 0.1, 1.0, 30.0, 50.0}) {
    const double r = softplus_inverse(y);
    const double sp = std::max(r, 0.0) + std::log1p(std::exp(-std::abs(r)));
    CHECK(sp == doctest::Approx(y).epsilon(1e-9));
  }
}
