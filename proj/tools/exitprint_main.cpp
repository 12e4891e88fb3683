// Command-line front end for the inference-time fingerprinting toolkit.
//
// Subcommands mirror the pipeline stages: train, to-multiexit, calibrate,
// fingerprint, attack, verify, evaluate, ablate-threshold, report.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "exitprint/exitprint.hpp"

namespace fs = std::filesystem;
using namespace exitprint;

namespace {

struct GlobalOpts {
  std::string config_path;
  std::string out;
  std::string backend;
  std::optional<std::uint64_t> seed;
};

ExperimentConfig load_config(const GlobalOpts& g) {
  ExperimentConfig cfg;
  if (!g.config_path.empty()) {
    nlohmann::json j = nlohmann::json::parse(read_text_file(g.config_path));
    cfg = j.get<ExperimentConfig>();
  }
  if (g.seed) cfg.master_seed = *g.seed;
  if (!g.backend.empty()) cfg.backend = g.backend;
  cfg.validate();
  return cfg;
}

Dataset<float> dataset_from_config(const ExperimentConfig& cfg) {
  DatasetSpec spec = cfg.dataset;
  spec.seed = derive_seed(cfg.master_seed, "dataset");
  return load_dataset<float>(spec);
}

fs::path out_dir(const GlobalOpts& g) {
  fs::path dir = resolve_out_root(g.out);
  fs::create_directories(dir);
  return dir;
}

int cmd_train(const GlobalOpts& g) {
  auto cfg = load_config(g);
  auto data = dataset_from_config(cfg);
  auto dir = out_dir(g);
  std::ofstream log(dir / "train.log");
  auto result = train_backbone<float>(
      cfg.arch, data, cfg.backbone_train_config(derive_seed(cfg.master_seed, "train-target")),
      &log);
  save_backbone(dir / "backbone.model", result.model, "target");
  std::cout << "trained backbone: val_acc=" << result.final_val_accuracy << " -> "
            << (dir / "backbone.model").string() << "\n";
  return 0;
}

int cmd_to_multiexit(const GlobalOpts& g, const std::string& model_path) {
  auto cfg = load_config(g);
  auto data = dataset_from_config(cfg);
  auto dir = out_dir(g);
  auto backbone = load_backbone<float>(model_path);
  auto me = build_multiexit<float>(backbone, attach_indices_for(cfg.arch),
                                   derive_seed(cfg.master_seed, "target-ic-init"), "target");
  std::ofstream log(dir / "ics.log");
  me = train_ics(me, data, cfg.ic_train_config(derive_seed(cfg.master_seed, "target-ic-train")),
                 &log);
  me.id = "target";
  save_multiexit(dir / "multiexit.model", me);
  std::cout << "multi-exit model with " << me.n_exits() << " exits -> "
            << (dir / "multiexit.model").string() << "\n";
  return 0;
}

int cmd_calibrate(const GlobalOpts& g, const std::string& model_path, double rad) {
  auto cfg = load_config(g);
  auto data = dataset_from_config(cfg);
  auto loaded = load_multiexit<float>(model_path);
  auto policy = calibrate_threshold(
      loaded.model, std::span<const LabeledExample<float>>(data.val.data(), data.val.size()), rad);
  save_multiexit(model_path, loaded.model, policy);
  std::cout << "rad=" << rad << " T_c="
            << (policy.t_c ? std::to_string(*policy.t_c) : std::string("never-early")) << "\n";
  return 0;
}

int cmd_fingerprint(const GlobalOpts& g, const std::string& model_path) {
  auto cfg = load_config(g);
  auto data = dataset_from_config(cfg);
  auto dir = out_dir(g);
  auto loaded = load_multiexit<float>(model_path);
  ExitPolicy policy = loaded.policy ? *loaded.policy
                                    : calibrate_threshold(loaded.model,
                                                          std::span<const LabeledExample<float>>(
                                                              data.val.data(), data.val.size()),
                                                          cfg.rad_levels.front());
  std::vector<Tensor<float>> benign;
  for (const auto& ex : data.val) {
    auto confs = forward_all_exits(loaded.model, ex.x);
    if (argmax_label(confs.back()) == ex.label) benign.push_back(ex.x);
  }
  auto set = generate_fingerprint_set(loaded.model,
                                      std::span<const Tensor<float>>(benign.data(), benign.size()),
                                      cfg.fingerprint, derive_seed(cfg.master_seed, "fingerprint"),
                                      policy);
  save_fingerprint_set(dir / "fpset.bin", set, data.input_shape);
  write_text_file(dir / "fpset.manifest.txt", fingerprint_manifest(set, loaded.model.n_exits()));
  std::cout << "crafted " << set.samples.size() << " fingerprints -> "
            << (dir / "fpset.bin").string() << "\n";
  return 0;
}

int cmd_attack(const GlobalOpts& g, const std::string& model_path, const std::string& kind,
               double rate, int bits, int epochs, std::uint64_t attack_seed, double new_tc) {
  auto cfg = load_config(g);
  auto dir = out_dir(g);
  auto loaded = load_multiexit<float>(model_path);
  auto& model = loaded.model;

  auto needs_data = [&]() { return dataset_from_config(cfg); };
  const TrainConfig ic_cfg = cfg.ic_train_config(derive_seed(attack_seed, "cli-ic"));

  MultiExitModel<float> out;
  std::string name;
  if (kind == "ic_retrain") {
    auto data = needs_data();
    out = retrain_ics_attack(model, data, ic_cfg, attack_seed);
    name = "ic_retrain-s" + std::to_string(attack_seed);
  } else if (kind == "prune") {
    out = prune(model, rate);
    std::ostringstream nm;
    nm << "prune-r" << std::fixed << std::setprecision(2) << rate;
    name = nm.str();
  } else if (kind == "quantize") {
    out = quantize(model, bits);
    name = "quantize-b" + std::to_string(bits);
  } else if (kind == "finetune") {
    auto data = needs_data();
    out = finetune(model, data, epochs, attack_seed, ic_cfg);
    name = "finetune-s" + std::to_string(attack_seed) + "-ep" + std::to_string(epochs);
  } else if (kind == "adv_train") {
    auto data = needs_data();
    AttackConfig ac;
    ac.kind = AttackConfig::Kind::adv_train;
    ac.epochs = epochs;
    ac.pgd_iterations = cfg.pgd_iterations;
    ac.pgd_epsilon = cfg.pgd_epsilon;
    ac.pgd_step = cfg.pgd_epsilon / 4.0;
    ac.seed = attack_seed;
    // snapshot only at the final epoch
    auto snaps = adversarial_train(model, data, ac, ic_cfg, epochs);
    out = std::move(snaps.back());
    name = "advtrain-ep" + std::to_string(epochs);
  } else if (kind == "exit_criteria") {
    auto data = needs_data();
    auto change = set_exit_criteria(
        model, std::span<const LabeledExample<float>>(data.val.data(), data.val.size()), new_tc);
    std::cout << "new T_c=" << new_tc << " induced RAD=" << change.rad_induced << "\n";
    save_multiexit(dir / "exit_criteria.model", model, change.policy);
    return 0;
  } else {
    throw std::invalid_argument("unknown attack kind '" + kind + "'");
  }
  out.id = name;
  save_multiexit(dir / (name + ".model"), out);
  std::cout << "attacked model -> " << (dir / (name + ".model")).string() << "\n";
  return 0;
}

int cmd_verify(const GlobalOpts& g, const std::string& model_path, const std::string& fp_path,
               double t_f) {
  auto cfg = load_config(g);
  auto data = dataset_from_config(cfg);
  auto dir = out_dir(g);
  auto loaded = load_multiexit<float>(model_path);
  ExitPolicy policy = loaded.policy ? *loaded.policy
                                    : calibrate_threshold(loaded.model,
                                                          std::span<const LabeledExample<float>>(
                                                              data.val.data(), data.val.size()),
                                                          cfg.rad_levels.front());
  auto fpset = load_fingerprint_set<float>(fp_path);
  std::vector<Tensor<float>> benign;
  for (int i = 0; i < cfg.n_benign && i < static_cast<int>(data.test.size()); ++i)
    benign.push_back(data.test[static_cast<std::size_t>(i)].x);
  auto backend = cfg.timing_backend();
  auto [bauc, tmax] = benign_eec_auc(
      loaded.model, std::span<const Tensor<float>>(benign.data(), benign.size()), policy, backend);
  auto report = verify_ip(loaded.model, fpset, policy, backend, t_f, tmax);

  std::ostringstream os;
  os << "model:   " << report.model_id << "\n"
     << "backend: " << report.backend << "\n"
     << "N:       " << fpset.samples.size() << "\n"
     << "t_max:   " << report.t_max << "\n"
     << "T_N:     " << report.t_n << "\n"
     << "T_f:     " << report.t_f << "\n"
     << "benign:  " << bauc << "\n"
     << "verdict: " << verdict_name(report.verdict) << "\n";
  write_text_file(dir / "verify-report.txt", os.str());
  std::ostringstream curve;
  curve << "# normalized_time\tfraction\n";
  for (const auto& [t, f] : report.curve.points) curve << t << "\t" << f << "\n";
  write_text_file(dir / "verify-curve.tsv", curve.str());
  std::cout << os.str();
  return 0;
}

int cmd_evaluate(const GlobalOpts& g) {
  auto cfg = load_config(g);
  ExperimentRunner<float> runner(cfg, g.out);
  auto report = runner.run();
  std::cout << "experiment '" << report.name << "' complete -> " << runner.out_dir().string()
            << "\n";
  for (double rad : report.rad_levels) {
    const std::string rk = rad_key(rad);
    std::cout << "RAD=" << rk << ": T_f=" << report.thresholds.at(rk)
              << " indep_rate=" << report.independent_rate.at(rk)
              << " stolen_rate=" << report.stolen_rate.at(rk) << " roc=" << report.roc.at(rk)
              << "\n";
  }
  return 0;
}

ExperimentReport load_report(const std::string& run_dir) {
  nlohmann::json j =
      nlohmann::json::parse(read_text_file(fs::path(run_dir) / "reports" / "summary.json"));
  return j.get<ExperimentReport>();
}

int cmd_ablate(const GlobalOpts&, const std::string& run_dir, std::vector<double> candidates) {
  auto report = load_report(run_dir);
  if (candidates.empty())
    for (int i = 0; i <= 20; ++i) candidates.push_back(0.05 * i);
  for (double rad : report.rad_levels) {
    const std::string rk = rad_key(rad);
    std::vector<double> indep, stolen;
    for (const auto& r : report.rows) {
      if (r.rad_level != rad) continue;
      if (r.cohort == "independent") indep.push_back(r.t_n);
    }
    for (const auto& id : report.stolen_cohort)
      for (const auto& r : report.rows)
        if (r.rad_level == rad && r.model_id == id) stolen.push_back(r.t_n);
    auto rows = threshold_ablation(indep, stolen, candidates);
    std::cout << "RAD=" << rk << "\nt_f\tindep_rate\tstolen_rate\n";
    for (const auto& r : rows)
      std::cout << r.t_f << "\t" << r.independent_rate << "\t" << r.stolen_rate << "\n";
  }
  return 0;
}

int cmd_report(const GlobalOpts&, const std::string& run_dir) {
  auto report = load_report(run_dir);
  ExperimentRunner<float>::emit_reports(report, run_dir, 0);
  std::cout << "re-emitted reports under " << (fs::path(run_dir) / "reports").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"inference-time fingerprinting for multi-exit models"};
  app.require_subcommand(1);

  GlobalOpts g;
  app.add_option("--config", g.config_path, "experiment config (JSON)");
  app.add_option("--out", g.out, "output directory (or EXITPRINT_OUT)");
  app.add_option("--backend", g.backend, "timing backend")
      ->check(CLI::IsMember({"cost-model", "wall-clock"}));
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "master seed override");

  std::string model_path, fp_path, attack_kind = "ic_retrain", run_dir;
  double rate = 0.1, t_f = 0.1, rad = 0.05, new_tc = 0.9;
  int bits = 8, epochs = 4;
  std::uint64_t attack_seed = 0;
  std::vector<double> candidates;

  app.add_subcommand("train", "train a backbone from the config dataset");
  auto* sc_me = app.add_subcommand("to-multiexit", "attach and train internal classifiers");
  sc_me->add_option("--model", model_path, "backbone container")->required();
  auto* sc_cal = app.add_subcommand("calibrate", "calibrate the exit threshold for a RAD level");
  sc_cal->add_option("--model", model_path, "multi-exit container")->required();
  sc_cal->add_option("--rad", rad, "relative accuracy drop budget");
  auto* sc_fp = app.add_subcommand("fingerprint", "craft a fingerprint set");
  sc_fp->add_option("--model", model_path, "multi-exit container")->required();
  auto* sc_atk = app.add_subcommand("attack", "apply one adversarial modification");
  sc_atk->add_option("--model", model_path, "multi-exit container")->required();
  sc_atk->add_option("--kind", attack_kind, "attack kind")
      ->check(CLI::IsMember({"ic_retrain", "prune", "quantize", "finetune", "adv_train",
                             "exit_criteria"}));
  sc_atk->add_option("--rate", rate, "pruning rate");
  sc_atk->add_option("--bits", bits, "quantization bits");
  sc_atk->add_option("--epochs", epochs, "finetune / adversarial-training epochs");
  sc_atk->add_option("--attack-seed", attack_seed, "attack seed");
  sc_atk->add_option("--tc", new_tc, "new exit threshold (exit_criteria)");
  auto* sc_ver = app.add_subcommand("verify", "verify ownership of a suspicious model");
  sc_ver->add_option("--model", model_path, "multi-exit container")->required();
  sc_ver->add_option("--fingerprints", fp_path, "fingerprint set container")->required();
  sc_ver->add_option("--tf", t_f, "verification threshold T_f")->required();
  app.add_subcommand("evaluate", "run the full experiment pipeline");
  auto* sc_abl = app.add_subcommand("ablate-threshold", "verified-rate table over candidate T_f");
  sc_abl->add_option("--run", run_dir, "evaluate output directory")->required();
  sc_abl->add_option("--candidates", candidates, "candidate T_f values");
  auto* sc_rep = app.add_subcommand("report", "re-emit reports from a finished run");
  sc_rep->add_option("--run", run_dir, "evaluate output directory")->required();

  CLI11_PARSE(app, argc, argv);
  if (!seed_opt->empty()) g.seed = seed_value;

  try {
    if (app.got_subcommand("train")) return cmd_train(g);
    if (app.got_subcommand("to-multiexit")) return cmd_to_multiexit(g, model_path);
    if (app.got_subcommand("calibrate")) return cmd_calibrate(g, model_path, rad);
    if (app.got_subcommand("fingerprint")) return cmd_fingerprint(g, model_path);
    if (app.got_subcommand("attack"))
      return cmd_attack(g, model_path, attack_kind, rate, bits, epochs, attack_seed, new_tc);
    if (app.got_subcommand("verify")) return cmd_verify(g, model_path, fp_path, t_f);
    if (app.got_subcommand("evaluate")) return cmd_evaluate(g);
    if (app.got_subcommand("ablate-threshold")) return cmd_ablate(g, run_dir, candidates);
    if (app.got_subcommand("report")) return cmd_report(g, run_dir);
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
