#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "sip/config.hpp"
#include "sip/data.hpp"
#include "sip/runner.hpp"
#include "sip/trainer.hpp"

using namespace sip;
using doctest::Approx;

namespace {

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path("/tmp/sip_runner_" + name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) lines.push_back(line);
  return lines;
}

// File content with the trailing (wall-clock) column removed from every line.
std::string drop_last_column(const std::string& text) {
  std::string out;
  for (const std::string& line : lines_of(text)) {
    const std::size_t pos = line.rfind(',');
    out += line.substr(0, pos) + "\n";
  }
  return out;
}

RunConfig tiny_bimodal_config(const std::string& out_dir) {
  RunConfig cfg;
  cfg.experiment = ExperimentKind::kSyntheticBimodal;
  cfg.output_dir = out_dir;
  cfg.emit_prior_samples = true;
  cfg.emit_trajectory = true;
  cfg.grid_points = 20;
  cfg.data_n = 40;
  cfg.m = 6;
  cfg.train.s_train = 10;
  cfg.train.s_test = 9;
  cfg.train.batch_size = 8;
  cfg.train.epochs = 5;
  cfg.train.disc_steps = 2;
  cfg.train.seed = 7;
  return cfg;
}

MetricsRecord record(const std::string& method, const std::string& dataset, int split,
                     double rmse, double ll, double crps) {
  MetricsRecord r;
  r.method = method;
  r.dataset = dataset;
  r.split = split;
  r.seed = 1;
  r.rmse = rmse;
  r.log_likelihood = ll;
  r.crps = crps;
  r.train_seconds = 1.0;
  return r;
}

const RankSummary& row_for(const std::vector<RankSummary>& table, const std::string& method) {
  for (const RankSummary& s : table)
    if (s.method == method) return s;
  REQUIRE(false);
  return table.front();
}

}  // namespace

TEST_CASE("config text parses sections, comments and typed values") {
  const ConfigMap map = ConfigMap::parse_text(
      "top = 3\n"
      "# a comment line\n"
      "[train]\n"
      "  lr_main = 2.5e-3   # trailing comment\n"
      "  adaptive = yes\n"
      "  frozen = off\n"
      "  seed = 18446744073709551615\n"
      "[posterior]\n"
      "hidden = 50, 30,20\n"
      "name = widths only\n");
  CHECK(map.get_int("top", -1) == 3);
  CHECK(map.get_double("train.lr_main", 0.0) == 2.5e-3);
  CHECK(map.get_bool("train.adaptive", false));
  CHECK_FALSE(map.get_bool("train.frozen", true));
  CHECK(map.get_uint64("train.seed", 0) == 18446744073709551615ULL);
  CHECK(map.get_int_list("posterior.hidden", {}) == std::vector<int>{50, 30, 20});
  CHECK(map.get_string("posterior.name", "") == "widths only");
  CHECK(map.get_string("absent.key", "fallback") == "fallback");
  CHECK(map.has("train.adaptive"));
  CHECK_FALSE(map.has("train.absent"));

  SUBCASE("typed getters reject values of the wrong shape") {
    CHECK_THROWS_AS(map.get_int("posterior.name", 0), std::invalid_argument);
    CHECK_THROWS_AS(map.get_double("posterior.name", 0.0), std::invalid_argument);
    CHECK_THROWS_AS(map.get_bool("top", false), std::invalid_argument);
    CHECK_THROWS_AS(map.get_int_list("posterior.name", {}), std::invalid_argument);
  }
  SUBCASE("malformed lines are rejected with their line number") {
    CHECK_THROWS_WITH_AS(ConfigMap::parse_text("a = 1\nnot a pair\n"),
                         doctest::Contains("line 2"), std::invalid_argument);
    CHECK_THROWS_AS(ConfigMap::parse_text("[unterminated\nx = 1\n"), std::invalid_argument);
    CHECK_THROWS_AS(ConfigMap::parse_text("[]\nx = 1\n"), std::invalid_argument);
  }
}

TEST_CASE("config snapshots round-trip through text") {
  ConfigMap map;
  map.set("zeta.last", "z value");
  map.set_double("alpha.rate", 0.1);
  map.set_int("rootkey", -4);
  map.set_bool("alpha.flag", true);
  map.set_int_list("beta.widths", {5, 6});
  map.set_uint64("beta.seed", 123456789012345ULL);
  const std::string text = map.to_text();
  const ConfigMap reparsed = ConfigMap::parse_text(text);
  CHECK(reparsed.items() == map.items());
  CHECK(reparsed.to_text() == text);
  // Sectionless keys must precede the first section header or they would be
  // swallowed by it on re-parse.
  CHECK(text.find("rootkey") < text.find('['));
}

TEST_CASE("run configs parse with defaults and emit exact snapshots") {
  SUBCASE("an empty file yields the default configuration") {
    const RunConfig cfg = RunConfig::from_config(ConfigMap::parse_text(""));
    CHECK(cfg.experiment == ExperimentKind::kSyntheticBimodal);
    CHECK(cfg.method_tag == "sip");
    CHECK(cfg.m == 50);
    CHECK(cfg.train.s_test == 500);
    CHECK(cfg.train.lr_main == 1e-3);
    CHECK(cfg.hmc.leapfrog_steps == 25);
    CHECK(cfg.hmc_thinning == 20);
    CHECK(cfg.diag_select == 500);
  }
  SUBCASE("the baseline experiment defaults its method tag to hmc") {
    const RunConfig cfg = RunConfig::from_config(
        ConfigMap::parse_text("[run]\nexperiment = hmc-compare\n"));
    CHECK(cfg.method_tag == "hmc");
  }
  SUBCASE("parsing the emitted snapshot reproduces the effective config") {
    RunConfig cfg;
    cfg.experiment = ExperimentKind::kTabular;
    cfg.method_tag = "sip-tab";
    cfg.dataset_tag = "boston-like";
    cfg.data_source = "csv";
    cfg.data_path = "/data/t.csv";
    cfg.data_header = true;
    cfg.target_column = 2;
    cfg.train_fraction = 0.9;
    cfg.split_index = 4;
    cfg.data_seed = 11;
    cfg.standardize_data = true;
    cfg.prior_kind = PriorKind::kNeuralSampler;
    cfg.prior_hidden = {17, 9};
    cfg.prior_dropout = 0.25;
    cfg.m = 23;
    cfg.post_hidden = {8};
    cfg.inducing_init = InducingInit::kConcentrated;
    cfg.init_seed = 99;
    cfg.train.alpha = 0.5;
    cfg.train.epochs = 321;
    cfg.train.warmup_fraction = 0.0;
    cfg.train.lr_main = 3.7e-4;
    cfg.train.adaptive_contrast = true;
    cfg.hmc.step_size = 1.25e-5;
    cfg.checkpoint_path = "/ck.json";
    cfg.diag_h = 5e-5;
    const RunConfig back = RunConfig::from_config(
        ConfigMap::parse_text(cfg.to_config().to_text()));
    CHECK(back.to_config().items() == cfg.to_config().items());
    CHECK(back.prior_kind == PriorKind::kNeuralSampler);
    CHECK(back.train.lr_main == 3.7e-4);
    CHECK(back.hmc.step_size == 1.25e-5);
  }
  SUBCASE("unknown enum spellings are rejected") {
    CHECK_THROWS_AS(RunConfig::from_config(
                        ConfigMap::parse_text("[run]\nexperiment = frequentist\n")),
                    std::invalid_argument);
    CHECK_THROWS_AS(
        RunConfig::from_config(ConfigMap::parse_text("[prior]\nkind = gp\n")),
        std::invalid_argument);
    CHECK_THROWS_AS(RunConfig::from_config(
                        ConfigMap::parse_text("[posterior]\ninducing_init = random\n")),
                    std::invalid_argument);
  }
}

TEST_CASE("run config validation rejects inconsistent setups") {
  RunConfig cfg;
  cfg.validate();  // generator defaults are fine

  SUBCASE("synthetic experiments insist on the generator source") {
    cfg.data_source = "csv";
    cfg.data_path = "/d.csv";
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  }
  SUBCASE("tabular and inducing-point experiments need a csv file") {
    cfg.experiment = ExperimentKind::kTabular;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.experiment = ExperimentKind::kInducingPoints;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.data_source = "csv";
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);  // path still missing
    cfg.data_path = "/d.csv";
    cfg.validate();
  }
  SUBCASE("the baseline comparison requires a checkpoint") {
    cfg.experiment = ExperimentKind::kHmcCompare;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.checkpoint_path = "/ck.json";
    cfg.validate();
    cfg.hmc_thinning = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  }
  SUBCASE("field-level checks") {
    RunConfig bad = cfg;
    bad.train_fraction = 1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.grid_points = 1;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.m = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.prior_dropout = 1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.data_source = "sql";
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.experiment = ExperimentKind::kGradientDiagnostic;
    bad.diag_select = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad.diag_select = 10;
    bad.diag_h = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.train.alpha = 1.5;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  }
}

TEST_CASE("relative output directories resolve against the environment root") {
  RunConfig cfg;
  cfg.output_dir = "exp/a";
  ::setenv(kOutputRootEnv, "/tmp/sip_root", 1);
  CHECK(cfg.resolved_output_dir() == "/tmp/sip_root/exp/a");
  cfg.output_dir = "/abs/path";
  CHECK(cfg.resolved_output_dir() == "/abs/path");
  cfg.output_dir.clear();
  CHECK(cfg.resolved_output_dir() == "/tmp/sip_root/run");
  ::unsetenv(kOutputRootEnv);
  cfg.output_dir = "exp/a";
  CHECK(cfg.resolved_output_dir() == "exp/a");
}

TEST_CASE("metrics files round-trip and reject damage") {
  TempDir dir("metrics");
  const std::string path = dir.file("metrics.csv");
  std::vector<MetricsRecord> records;
  records.push_back(record("sip", "boston", 3, 2.875, -2.5625, 1.423));
  records.back().seed = 18446744073709551615ULL;
  records.push_back(record("vip", "energy", 0, 0.517, 1.25, 0.333));
  write_metrics_csv(path, records);

  const std::vector<MetricsRecord> back = read_metrics_csv(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].method == "sip");
  CHECK(back[0].dataset == "boston");
  CHECK(back[0].split == 3);
  CHECK(back[0].seed == 18446744073709551615ULL);
  CHECK(back[0].rmse == 2.875);
  CHECK(back[0].log_likelihood == -2.5625);
  CHECK(back[0].crps == 1.423);
  CHECK(back[1].train_seconds == 1.0);

  SUBCASE("non-finite metrics refuse to serialize") {
    records[0].rmse = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(write_metrics_csv(path, records), std::invalid_argument);
  }
  SUBCASE("damaged files are reported") {
    std::ofstream(path) << "wrong,header\n";
    CHECK_THROWS_AS(read_metrics_csv(path), std::runtime_error);
    std::ofstream(path) << "method,dataset,split,seed,rmse,log_likelihood,crps,train_seconds\n"
                        << "sip,d,0,1,2.0,3.0\n";
    CHECK_THROWS_AS(read_metrics_csv(path), std::runtime_error);
    std::ofstream(path) << "method,dataset,split,seed,rmse,log_likelihood,crps,train_seconds\n"
                        << "sip,d,zero,1,2.0,3.0,4.0,5.0\n";
    CHECK_THROWS_AS(read_metrics_csv(path), std::runtime_error);
    CHECK_THROWS_AS(read_metrics_csv(dir.file("absent.csv")), std::runtime_error);
  }
}

TEST_CASE("ranking follows the dominance, midpoint and hand-computed oracles") {
  SUBCASE("total dominance gives ranks 1 and 2 with zero spread") {
    std::vector<MetricsRecord> records;
    for (int split = 0; split < 3; ++split) {
      records.push_back(record("a", "d", split, 1.0, 5.0, 0.5));   // better everywhere
      records.push_back(record("b", "d", split, 2.0, 3.0, 0.9));
    }
    const std::vector<RankSummary> table = rank_records(records);
    REQUIRE(table.size() == 2);
    CHECK(row_for(table, "a").rmse_rank == 1.0);
    CHECK(row_for(table, "a").ll_rank == 1.0);  // larger likelihood ranks first
    CHECK(row_for(table, "a").crps_rank == 1.0);
    CHECK(row_for(table, "b").rmse_rank == 2.0);
    CHECK(row_for(table, "b").ll_rank == 2.0);
    CHECK(row_for(table, "a").rmse_se == 0.0);
    CHECK(row_for(table, "b").crps_se == 0.0);
  }
  SUBCASE("exact ties share the midpoint rank") {
    std::vector<MetricsRecord> records;
    records.push_back(record("a", "d", 0, 1.5, 2.0, 0.5));
    records.push_back(record("b", "d", 0, 1.5, 2.0, 0.5));
    const std::vector<RankSummary> table = rank_records(records);
    CHECK(row_for(table, "a").rmse_rank == 1.5);
    CHECK(row_for(table, "b").rmse_rank == 1.5);
    CHECK(row_for(table, "a").ll_rank == 1.5);
    CHECK(row_for(table, "b").crps_rank == 1.5);
  }
  SUBCASE("three methods over two cells match hand-computed averages") {
    // RMSE ranks: cell 1 -> a=1, b=2, c=3; cell 2 -> a=3, b=1, c=2.
    std::vector<MetricsRecord> records;
    records.push_back(record("a", "d", 0, 1.0, 0.0, 1.0));
    records.push_back(record("b", "d", 0, 2.0, 0.0, 2.0));
    records.push_back(record("c", "d", 0, 3.0, 0.0, 3.0));
    records.push_back(record("a", "e", 0, 3.0, 0.0, 3.0));
    records.push_back(record("b", "e", 0, 1.0, 0.0, 1.0));
    records.push_back(record("c", "e", 0, 2.0, 0.0, 2.0));
    const std::vector<RankSummary> table = rank_records(records);
    CHECK(row_for(table, "a").rmse_rank == 2.0);
    CHECK(row_for(table, "b").rmse_rank == 1.5);
    CHECK(row_for(table, "c").rmse_rank == 2.5);
    // Sample std of {1,3} is sqrt(2); over n=2 cells the SE is 1.
    CHECK(row_for(table, "a").rmse_se == Approx(1.0));
    CHECK(row_for(table, "b").rmse_se == Approx(0.5));
    CHECK(row_for(table, "c").rmse_se == Approx(0.5));
    // All likelihoods tie -> everyone averages the midpoint 2.
    CHECK(row_for(table, "a").ll_rank == 2.0);
    CHECK(row_for(table, "b").ll_rank == 2.0);
  }
  SUBCASE("missing cells are reported by method, dataset and split") {
    std::vector<MetricsRecord> records;
    records.push_back(record("a", "d", 0, 1.0, 0.0, 1.0));
    records.push_back(record("b", "d", 0, 2.0, 0.0, 2.0));
    records.push_back(record("a", "d", 1, 1.0, 0.0, 1.0));
    CHECK_THROWS_WITH_AS(rank_records(records), doctest::Contains("method 'b'"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(rank_records(records), doctest::Contains("split 1"),
                         std::invalid_argument);
  }
  SUBCASE("duplicate cells are rejected") {
    std::vector<MetricsRecord> records;
    records.push_back(record("a", "d", 0, 1.0, 0.0, 1.0));
    records.push_back(record("a", "d", 0, 1.1, 0.0, 1.0));
    CHECK_THROWS_WITH_AS(rank_records(records), doctest::Contains("duplicate"),
                         std::invalid_argument);
  }
}

TEST_CASE("checkpoints restore models exactly") {
  TempDir dir("checkpoint");
  RunConfig cfg = tiny_bimodal_config(dir.file("unused"));
  cfg.m = 5;
  Rng data_rng(3);
  const Dataset data = gen_bimodal(30, data_rng);

  BnnPrior prior(1, {4});
  PosteriorSampler posterior(cfg.m, 12, {6});
  cfg.prior_hidden = {4};
  cfg.post_noise_dim = 12;
  cfg.post_hidden = {6};
  Rng init_rng(2);
  const Tensor xbar0 = init_inducing(InducingInit::kSubset, data.X, cfg.m, init_rng);
  SipModel model = make_sip_model(prior, posterior, xbar0, cfg.train, init_rng);
  TrainingConfig tc = cfg.train;
  tc.epochs = 3;
  train(data, model, tc);

  const std::string path = dir.file("ck.json");
  save_checkpoint(path, cfg, model);
  LoadedModel loaded = load_checkpoint(path);

  CHECK(loaded.prior->kind() == "bnn");
  CHECK(loaded.prior->input_dim() == 1);
  CHECK(loaded.model.m() == 5);
  CHECK(loaded.model.sigma2() == model.sigma2());
  CHECK(loaded.model.params.flatten() == model.params.flatten());
  CHECK(loaded.model.disc_q_params.flatten() == model.disc_q_params.flatten());
  CHECK(loaded.model.disc_p_params.flatten() == model.disc_p_params.flatten());

  SUBCASE("predictions from the restored model are bitwise identical") {
    Tensor xs = Tensor::zeros({4, 1});
    xs[0] = -2.0;
    xs[1] = -0.5;
    xs[2] = 0.5;
    xs[3] = 2.0;
    Rng r1(5), r2(5);
    const PredictiveMixture a = predict(model, xs, 6, r1);
    const PredictiveMixture b = predict(loaded.model, xs, 6, r2);
    REQUIRE(a.means.numel() == b.means.numel());
    for (std::int64_t i = 0; i < a.means.numel(); ++i) {
      CHECK(a.means[i] == b.means[i]);
      CHECK(a.vars[i] == b.vars[i]);
    }
  }
  SUBCASE("a neural-sampler checkpoint restores its prior kind") {
    NeuralSamplerPrior ns_prior(1, 3, {4}, Activation::kTanh, 0.1);
    RunConfig ns_cfg = cfg;
    ns_cfg.prior_kind = PriorKind::kNeuralSampler;
    ns_cfg.prior_hidden = {4};
    ns_cfg.prior_noise_dim = 3;
    ns_cfg.prior_dropout = 0.1;
    Rng ns_rng(4);
    SipModel ns_model = make_sip_model(ns_prior, posterior, xbar0, ns_cfg.train, ns_rng);
    const std::string ns_path = dir.file("ns.json");
    save_checkpoint(ns_path, ns_cfg, ns_model);
    const LoadedModel ns_loaded = load_checkpoint(ns_path);
    CHECK(ns_loaded.prior->kind() == "ns");
    CHECK(ns_loaded.model.params.flatten() == ns_model.params.flatten());
  }
  SUBCASE("corrupt checkpoints are rejected") {
    std::ofstream(dir.file("broken.json")) << "{ not json";
    CHECK_THROWS_AS(load_checkpoint(dir.file("broken.json")), std::runtime_error);
    std::ofstream(dir.file("fmt.json")) << "{\"format\": \"other-v9\"}";
    CHECK_THROWS_AS(load_checkpoint(dir.file("fmt.json")), std::runtime_error);
    CHECK_THROWS_AS(load_checkpoint(dir.file("absent.json")), std::runtime_error);
  }
}

TEST_CASE("experiments write schema-valid artifacts that reload and repeat bit for bit") {
  TempDir dir("e2e");
  RunConfig cfg = tiny_bimodal_config(dir.file("a"));
  const RunOutcome first = run_experiment(cfg);
  REQUIRE(first.exit_code == 0);
  for (const char* name : {"config_snapshot.txt", "history.csv", "inducing_trajectory.csv",
                           "checkpoint.json", "metrics.csv", "predictive.csv",
                           "prior_samples.csv"}) {
    INFO(name);
    CHECK(std::filesystem::exists(dir.path / "a" / name));
  }

  SUBCASE("numeric tables reload through the csv loader") {
    const CsvLoadResult pred = load_csv(dir.file("a/predictive.csv"), -1, true);
    CHECK(pred.dataset.n() == cfg.grid_points * cfg.train.s_test);
    CHECK(pred.dataset.d() == 3);  // x_star, component, mean; variance is the target
    CHECK(pred.rows_skipped == 0);
    const CsvLoadResult traj = load_csv(dir.file("a/inducing_trajectory.csv"), -1, true);
    CHECK(traj.dataset.n() == cfg.train.epochs + 1);  // initial state plus one row per epoch
    CHECK(traj.dataset.d() == cfg.m);
    const CsvLoadResult hist = load_csv(dir.file("a/history.csv"), -1, true);
    CHECK(hist.dataset.n() == cfg.train.epochs);
    CHECK(hist.dataset.d() == 7);
    const CsvLoadResult prior_dump = load_csv(dir.file("a/prior_samples.csv"), -1, true);
    CHECK(prior_dump.dataset.n() == cfg.grid_points * 100);
    CHECK(prior_dump.dataset.d() == 2);
  }
  SUBCASE("the metrics row is finite and tagged") {
    const std::vector<MetricsRecord> recs = read_metrics_csv(dir.file("a/metrics.csv"));
    REQUIRE(recs.size() == 1);
    CHECK(recs[0].method == "sip");
    CHECK(recs[0].dataset == "bimodal");
    CHECK(recs[0].seed == 7);
    CHECK(std::isfinite(recs[0].rmse));
    CHECK(recs[0].train_seconds > 0.0);
  }
  SUBCASE("a rerun reproduces every number, wall-clock aside") {
    RunConfig cfg2 = tiny_bimodal_config(dir.file("b"));
    const RunOutcome second = run_experiment(cfg2);
    REQUIRE(second.exit_code == 0);
    for (const char* name : {"checkpoint.json", "predictive.csv", "prior_samples.csv",
                             "inducing_trajectory.csv"}) {
      INFO(name);
      CHECK(read_file(dir.file(std::string("a/") + name)) ==
            read_file(dir.file(std::string("b/") + name)));
    }
    CHECK(drop_last_column(read_file(dir.file("a/history.csv"))) ==
          drop_last_column(read_file(dir.file("b/history.csv"))));
    CHECK(drop_last_column(read_file(dir.file("a/metrics.csv"))) ==
          drop_last_column(read_file(dir.file("b/metrics.csv"))));
  }
  SUBCASE("the emitted snapshot reproduces the run exactly") {
    const RunConfig replay = RunConfig::from_config(
        ConfigMap::parse_file(dir.file("a/config_snapshot.txt")));
    RunConfig replay_cfg = replay;
    replay_cfg.output_dir = dir.file("c");
    const RunOutcome third = run_experiment(replay_cfg);
    REQUIRE(third.exit_code == 0);
    CHECK(read_file(dir.file("a/checkpoint.json")) == read_file(dir.file("c/checkpoint.json")));
  }
}

TEST_CASE("failed runs exit with the documented codes") {
  TempDir dir("codes");
  SUBCASE("inconsistent configs exit 2 before touching the disk") {
    RunConfig cfg;
    cfg.experiment = ExperimentKind::kTabular;  // csv source missing
    cfg.output_dir = dir.file("never");
    const RunOutcome out = run_experiment(cfg);
    CHECK(out.exit_code == 2);
    CHECK(out.artifacts.empty());
    CHECK_FALSE(std::filesystem::exists(dir.path / "never"));
  }
  SUBCASE("numerical failures exit 3 and keep partial artifacts") {
    RunConfig cfg = tiny_bimodal_config(dir.file("blow"));
    cfg.train.lr_main = 1e25;  // guarantees a numerical failure within a few steps
    const RunOutcome out = run_experiment(cfg);
    CHECK(out.exit_code == 3);
    CHECK(std::filesystem::exists(dir.path / "blow" / "config_snapshot.txt"));
  }
}

TEST_CASE("evaluation reuses a checkpoint without training") {
  TempDir dir("eval");
  RunConfig cfg = tiny_bimodal_config(dir.file("train"));
  REQUIRE(run_experiment(cfg).exit_code == 0);

  RunConfig eval_cfg = cfg;
  eval_cfg.output_dir = dir.file("eval");
  eval_cfg.checkpoint_path = dir.file("train/checkpoint.json");
  const RunOutcome out = run_eval(eval_cfg);
  REQUIRE(out.exit_code == 0);
  const std::vector<MetricsRecord> trained = read_metrics_csv(dir.file("train/metrics.csv"));
  const std::vector<MetricsRecord> evaled = read_metrics_csv(dir.file("eval/metrics.csv"));
  REQUIRE(evaled.size() == 1);
  // Same checkpoint, same data and same evaluation streams: identical scores.
  CHECK(evaled[0].rmse == trained[0].rmse);
  CHECK(evaled[0].log_likelihood == trained[0].log_likelihood);
  CHECK(evaled[0].crps == trained[0].crps);
  CHECK(evaled[0].train_seconds == 0.0);

  SUBCASE("a missing checkpoint path is a config error") {
    eval_cfg.checkpoint_path.clear();
    CHECK(run_eval(eval_cfg).exit_code == 2);
  }
}

TEST_CASE("the gradient comparison matches its small-scale oracles") {
  Rng data_rng(9);
  const Dataset data = gen_bimodal(60, data_rng);

  RunConfig cfg;
  cfg.experiment = ExperimentKind::kGradientDiagnostic;
  cfg.m = 5;
  cfg.prior_hidden = {2};
  cfg.post_noise_dim = 12;
  cfg.post_hidden = {8};
  cfg.train.s_train = 15;
  cfg.train.s_test = 10;
  cfg.train.batch_size = 10;
  cfg.train.epochs = 200;
  cfg.train.disc_steps = 2;
  cfg.train.seed = 21;
  cfg.diag_select = 500;  // larger than the parameter count: keep every coordinate
  cfg.diag_kl_samples = 300;
  // Classifier retraining leaves an absolute noise floor (around 0.05 in
  // gradient units here) under these estimates, so the secant needs to span
  // well past it; curvature is still negligible at this scale.
  cfg.diag_h = 4e-2;

  BnnPrior prior(1, cfg.prior_hidden);
  PosteriorSampler posterior(cfg.m, cfg.post_noise_dim, cfg.post_hidden);
  Rng init_rng(cfg.init_seed);
  const Tensor xbar0 = init_inducing(InducingInit::kSubset, data.X, cfg.m, init_rng);
  SipModel model = make_sip_model(prior, posterior, xbar0, cfg.train, init_rng);
  // A parameter the data term never touches: its tape gradient must surface
  // as an exact zero rather than being dropped from the comparison.
  model.params.add("prior.detached", Tensor::zeros({2}));
  train(data, model, cfg.train);

  const std::vector<GradDiagRow> rows = gradient_diagnostic(model, data, cfg);
  const int theta_coords = 2 * 7 + 2;  // means and log-stds of a 1-2-1 net, plus detached
  REQUIRE(static_cast<int>(rows.size()) == cfg.m + theta_coords);
  for (int c = 0; c < cfg.m; ++c) {
    CHECK(rows[c].name == "xbar");
    CHECK(rows[c].coord == c);
  }

  std::vector<double> abs_data, abs_kl;
  int detached_seen = 0;
  for (const GradDiagRow& row : rows) {
    CHECK(std::isfinite(row.data_grad));
    CHECK(std::isfinite(row.kl_grad));
    CHECK_FALSE(row.flagged);
    if (row.name == "prior.detached") {
      ++detached_seen;
      CHECK(row.data_grad == 0.0);
      CHECK(row.kl_grad == 0.0);
    }
    abs_data.push_back(std::abs(row.data_grad));
    abs_kl.push_back(std::abs(row.kl_grad));
  }
  CHECK(detached_seen == 2);

  const auto median = [](std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    return xs[xs.size() / 2];
  };
  // The qualitative finding at desk scale: the divergence responds far less
  // to parameter perturbations than the data term does.
  CHECK(median(abs_kl) / median(abs_data) < 1.0);

  SUBCASE("halving the step leaves well-resolved estimates within 10%") {
    RunConfig half = cfg;
    half.diag_h = cfg.diag_h / 2.0;
    const std::vector<GradDiagRow> rows_half = gradient_diagnostic(model, data, half);
    REQUIRE(rows_half.size() == rows.size());
    int compared = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      REQUIRE(rows_half[i].name == rows[i].name);
      REQUIRE(rows_half[i].coord == rows[i].coord);
      const double a = rows[i].kl_grad;
      const double b = rows_half[i].kl_grad;
      // Only coordinates an order of magnitude above the retraining noise
      // floor resolve a trustworthy derivative.
      if (std::abs(a) < 0.5) continue;
      ++compared;
      CHECK(std::abs(a - b) / std::abs(a) < 0.10);
    }
    CHECK(compared >= 5);
  }
}
