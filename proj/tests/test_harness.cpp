#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "exitprint/runner.hpp"

using namespace exitprint;
namespace fs = std::filesystem;

namespace {

ExperimentConfig micro_config() {
  ExperimentConfig cfg;
  cfg.name = "micro";
  cfg.dataset.name = "tiles-micro";
  cfg.dataset.splits = {80, 30, 30};
  cfg.dataset.input_shape = {3, 16, 16};
  cfg.dataset.n_classes = 3;
  cfg.arch.channels = {4, 8, 8};
  cfg.arch.pool_blocks = {1, 2};
  cfg.arch.attach_blocks = {1, 2};
  cfg.backbone_epochs = 2;
  cfg.ic_epochs = 2;
  cfg.population = 2;
  cfg.fingerprint.steps = 15;
  cfg.fingerprint.n_samples = 5;
  cfg.baseline.steps = 10;
  cfg.baseline.n_samples = 5;
  cfg.ic_retrain_count = 2;
  cfg.prune_rates = {0.2};
  cfg.finetune_seeds = 1;
  cfg.finetune_epochs = 2;
  cfg.finetune_snapshot_every = 2;
  cfg.advtrain_epochs = 2;
  cfg.advtrain_snapshot_every = 2;
  cfg.n_benign = 16;
  cfg.master_seed = 777;
  return cfg;
}

fs::path fresh_root(const std::string& tag) {
  auto root = fs::temp_directory_path() / ("exitprint-harness-" + tag);
  fs::remove_all(root);
  return root;
}

}  // namespace

TEST_CASE("seed derivation is stable and well separated") {
  const auto a = derive_seed(1, "train", 0);
  REQUIRE(a == derive_seed(1, "train", 0));
  REQUIRE(a != derive_seed(1, "train", 1));
  REQUIRE(a != derive_seed(1, "verify", 0));
  REQUIRE(a != derive_seed(2, "train", 0));
}

TEST_CASE("canonical config serialization drives the output directory") {
  ExperimentConfig a = micro_config();
  ExperimentConfig b = micro_config();
  REQUIRE(config_hash(a) == config_hash(b));
  b.fingerprint.steps += 1;
  REQUIRE(config_hash(a) != config_hash(b));

  ExperimentRunner<float> ra(a, "/tmp/xproot");
  ExperimentRunner<float> rb(b, "/tmp/xproot");
  REQUIRE(ra.out_dir() != rb.out_dir());  // no silent overwrite across configs
}

TEST_CASE("config json round-trip preserves the hash") {
  ExperimentConfig a = micro_config();
  nlohmann::json j = a;
  auto b = j.get<ExperimentConfig>();
  REQUIRE(config_hash(a) == config_hash(b));
}

TEST_CASE("threshold_ablation boundary and monotonicity") {
  std::vector<double> indep = {0.4, 0.5, 0.6};
  std::vector<double> stolen = {0.01, 0.02, 0.3};
  std::vector<double> cands;
  for (int i = 0; i <= 10; ++i) cands.push_back(0.1 * i);
  auto rows = threshold_ablation(indep, stolen, cands);
  REQUIRE(rows.front().t_f == 0.0);
  REQUIRE(rows.front().independent_rate == 0.0);
  REQUIRE(rows.front().stolen_rate == 0.0);
  REQUIRE(rows.back().t_f == 1.0);
  REQUIRE(rows.back().independent_rate == 1.0);
  REQUIRE(rows.back().stolen_rate == 1.0);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    REQUIRE(rows[i].independent_rate >= rows[i - 1].independent_rate);
    REQUIRE(rows[i].stolen_rate >= rows[i - 1].stolen_rate);
  }
  REQUIRE_THROWS_AS(threshold_ablation(indep, stolen, {}), std::invalid_argument);
}

TEST_CASE("environment variable supplies the default output root") {
  REQUIRE(resolve_out_root("explicit") == fs::path("explicit"));
  setenv("EXITPRINT_OUT", "/tmp/from-env", 1);
  REQUIRE(resolve_out_root("") == fs::path("/tmp/from-env"));
  unsetenv("EXITPRINT_OUT");
  REQUIRE(resolve_out_root("") == fs::path("out"));
}

TEST_CASE("micro experiment end to end") {
  auto cfg = micro_config();
  auto root = fresh_root("e2e");
  ExperimentRunner<float> runner(cfg, root.string());
  auto report = runner.run();
  const auto dir = runner.out_dir();

  SECTION("both cohorts are present with expected cardinalities") {
    std::size_t targets = 0, indep = 0, attacked = 0;
    for (const auto& r : report.rows) {
      if (r.cohort == "target") ++targets;
      if (r.cohort == "independent") ++indep;
      if (r.cohort == "attacked") ++attacked;
    }
    REQUIRE(targets == cfg.rad_levels.size());
    REQUIRE(indep == cfg.rad_levels.size() * 2);
    REQUIRE(attacked > 0);
  }

  SECTION("cohort integrity: stolen cohort never contains independents") {
    std::set<std::string> indep_ids;
    for (const auto& r : report.rows)
      if (r.cohort == "independent") indep_ids.insert(r.model_id);
    for (const auto& id : report.stolen_cohort) REQUIRE_FALSE(indep_ids.count(id));
  }

  SECTION("aggregates are recomputable from the persisted rows") {
    for (double rad : report.rad_levels) {
      const auto rk = rad_key(rad);
      std::vector<double> indep_scores;
      for (const auto& r : report.rows)
        if (r.cohort == "independent" && r.rad_level == rad) indep_scores.push_back(r.t_n);
      REQUIRE(report.independent_rate.at(rk) ==
              ip_verified_rate(indep_scores, report.thresholds.at(rk)));
    }
  }

  SECTION("per-model report files and curves exist") {
    REQUIRE(fs::exists(dir / "reports" / "verification" / "target-rad0.05.txt"));
    REQUIRE(fs::exists(dir / "reports" / "verification" / "target-rad0.05.curve.tsv"));
    REQUIRE(fs::exists(dir / "reports" / "verification" / "indep-0-rad0.15.txt"));
    REQUIRE(fs::exists(dir / "reports" / "figures" / "fig2_benign-rad0.05.tsv"));
    REQUIRE(fs::exists(dir / "reports" / "tables.txt"));
    REQUIRE(fs::exists(dir / "reports" / "experiment.json"));
    REQUIRE(fs::exists(dir / "dataset" / "meta.json"));
    REQUIRE(fs::exists(dir / "logs" / "train-target.log"));
  }

  SECTION("report re-emission is byte identical") {
    const auto table_path = dir / "reports" / "tables.txt";
    const std::string before = read_text_file(table_path);
    const std::string curve_before =
        read_text_file(dir / "reports" / "figures" / "fig3_prune-rad0.05.tsv");
    ExperimentRunner<float>::emit_reports(report, dir,
                                          static_cast<std::size_t>(cfg.fingerprint.n_samples));
    REQUIRE(read_text_file(table_path) == before);
    REQUIRE(read_text_file(dir / "reports" / "figures" / "fig3_prune-rad0.05.tsv") ==
            curve_before);
  }

  SECTION("a second run reuses cached stages and reproduces the report") {
    const std::string before = read_text_file(dir / "reports" / "experiment.json");
    ExperimentRunner<float> again(cfg, root.string());
    auto report2 = again.run();
    REQUIRE(read_text_file(dir / "reports" / "experiment.json") == before);
    REQUIRE(report2.thresholds == report.thresholds);
  }

  SECTION("exit-criteria row swaps the policy but reuses the target model") {
    bool found = false;
    for (const auto& r : report.rows)
      if (r.attack_kind == "exit_criteria") {
        found = true;
        REQUIRE(r.cohort == "attacked");
      }
    REQUIRE(found);
  }
}

TEST_CASE("stage failures carry the stage name") {
  auto cfg = micro_config();
  cfg.dataset.kind = "directory";
  cfg.dataset.directory = "/nonexistent/definitely-missing";
  auto root = fresh_root("fail");
  ExperimentRunner<float> runner(cfg, root.string());
  try {
    runner.run();
    FAIL("expected StageError");
  } catch (const StageError& e) {
    REQUIRE(e.stage == "dataset");
    REQUIRE(std::string(e.what()).find("stage dataset") != std::string::npos);
  }
}
