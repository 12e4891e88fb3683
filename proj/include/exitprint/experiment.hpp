#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "exitprint/attacks.hpp"
#include "exitprint/dataset.hpp"
#include "exitprint/fingerprint.hpp"
#include "exitprint/serialize.hpp"
#include "exitprint/train.hpp"
#include "exitprint/verify.hpp"

namespace exitprint {

inline constexpr const char* kToolVersion = "0.1.0";

struct StageError : std::runtime_error {
  std::string stage;
  StageError(const std::string& stage_, const std::string& what)
      : std::runtime_error("stage " + stage_ + ": " + what), stage(stage_) {}
};

/// Declarative description of a full uniqueness + robustness run.
struct ExperimentConfig {
  std::string name = "desk";
  DatasetSpec dataset;
  ArchSpec arch;

  int backbone_epochs = 6;
  int backbone_batch = 32;
  std::string backbone_optimizer = "sgd-momentum";
  double backbone_lr = 0.02;
  double backbone_momentum = 0.9;
  double backbone_weight_decay = 0.0;
  bool augment_hflip = false;
  bool augment_crop = false;

  int ic_epochs = 10;
  double ic_lr = 0.001;

  std::vector<double> rad_levels = {0.05, 0.15};
  int population = 10;

  FingerprintConfig fingerprint;
  BaselineConfig baseline;
  double baseline_match_threshold = 0.5;

  int ic_retrain_count = 10;
  std::vector<double> prune_rates = {0.1, 0.2, 0.3, 0.4};
  int quantize_bits = 8;
  int finetune_seeds = 3;
  int finetune_epochs = 8;
  int finetune_snapshot_every = 2;
  int advtrain_epochs = 6;
  int advtrain_snapshot_every = 2;
  int pgd_iterations = 10;
  double pgd_epsilon = 8.0 / 256.0;
  bool exit_criteria_attack = true;
  double max_attack_rad = 0.15;

  std::string backend = "cost-model";
  int n_benign = 100;
  std::uint64_t master_seed = 20240501;

  void validate() const {
    if (population < 2) throw std::invalid_argument("config: population must be >= 2");
    for (double r : rad_levels)
      if (!(r > 0.0 && r < 1.0))
        throw std::invalid_argument("config: rad levels must lie in (0,1)");
    if (rad_levels.empty()) throw std::invalid_argument("config: no rad levels");
    if (backend != "cost-model" && backend != "wall-clock")
      throw std::invalid_argument("config: backend must be cost-model or wall-clock");
    if (n_benign < 1) throw std::invalid_argument("config: n_benign must be >= 1");
  }

  TrainConfig backbone_train_config(std::uint64_t seed) const {
    TrainConfig tc;
    tc.epochs = backbone_epochs;
    tc.batch_size = backbone_batch;
    tc.optimizer = backbone_optimizer == "adam"
                       ? OptimizerDesc::adam(backbone_lr)
                       : OptimizerDesc::sgd(backbone_lr, backbone_momentum, backbone_weight_decay);
    tc.seed = seed;
    tc.augment.horizontal_flip = augment_hflip;
    tc.augment.random_crop = augment_crop;
    return tc;
  }

  TrainConfig ic_train_config(std::uint64_t seed) const {
    TrainConfig tc;
    tc.epochs = ic_epochs;
    tc.batch_size = 32;
    tc.optimizer = OptimizerDesc::adam(ic_lr);
    tc.seed = seed;
    return tc;
  }

  TimingBackend timing_backend() const {
    return backend == "wall-clock" ? TimingBackend::wall_clock() : TimingBackend::cost_model();
  }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{
      {"name", c.name},
      {"dataset",
       {{"name", c.dataset.name},
        {"kind", c.dataset.kind},
        {"directory", c.dataset.directory},
        {"train", c.dataset.splits.train},
        {"val", c.dataset.splits.val},
        {"test", c.dataset.splits.test},
        {"input_shape", c.dataset.input_shape},
        {"n_classes", c.dataset.n_classes},
        {"noise_lo", c.dataset.noise_lo},
        {"noise_hi", c.dataset.noise_hi}}},
      {"arch",
       {{"id", c.arch.id},
        {"channels", c.arch.channels},
        {"pool_blocks", c.arch.pool_blocks},
        {"attach_blocks", c.arch.attach_blocks}}},
      {"train",
       {{"epochs", c.backbone_epochs},
        {"batch", c.backbone_batch},
        {"optimizer", c.backbone_optimizer},
        {"lr", c.backbone_lr},
        {"momentum", c.backbone_momentum},
        {"weight_decay", c.backbone_weight_decay},
        {"hflip", c.augment_hflip},
        {"crop", c.augment_crop}}},
      {"ic_train", {{"epochs", c.ic_epochs}, {"lr", c.ic_lr}}},
      {"rad_levels", c.rad_levels},
      {"population", c.population},
      {"fingerprint",
       {{"c", c.fingerprint.c},
        {"steps", c.fingerprint.steps},
        {"lr", c.fingerprint.learning_rate},
        {"N", c.fingerprint.n_samples}}},
      {"baseline",
       {{"steps", c.baseline.steps},
        {"lr", c.baseline.learning_rate},
        {"N", c.baseline.n_samples},
        {"match_threshold", c.baseline_match_threshold}}},
      {"attacks",
       {{"ic_retrain_count", c.ic_retrain_count},
        {"prune_rates", c.prune_rates},
        {"quantize_bits", c.quantize_bits},
        {"finetune_seeds", c.finetune_seeds},
        {"finetune_epochs", c.finetune_epochs},
        {"finetune_snapshot_every", c.finetune_snapshot_every},
        {"advtrain_epochs", c.advtrain_epochs},
        {"advtrain_snapshot_every", c.advtrain_snapshot_every},
        {"pgd_iterations", c.pgd_iterations},
        {"pgd_epsilon", c.pgd_epsilon},
        {"exit_criteria", c.exit_criteria_attack},
        {"max_attack_rad", c.max_attack_rad}}},
      {"backend", c.backend},
      {"n_benign", c.n_benign},
      {"seed", c.master_seed}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  c = ExperimentConfig{};
  c.name = j.value("name", c.name);
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    c.dataset.name = d.value("name", std::string("tiles"));
    c.dataset.kind = d.value("kind", std::string("synthetic-gratings"));
    c.dataset.directory = d.value("directory", std::string());
    c.dataset.splits.train = d.value("train", 1500);
    c.dataset.splits.val = d.value("val", 400);
    c.dataset.splits.test = d.value("test", 600);
    if (d.contains("input_shape"))
      c.dataset.input_shape = d.at("input_shape").get<std::vector<std::int64_t>>();
    c.dataset.n_classes = d.value("n_classes", 4);
    c.dataset.noise_lo = d.value("noise_lo", 0.05);
    c.dataset.noise_hi = d.value("noise_hi", 0.45);
  }
  if (j.contains("arch")) {
    const auto& a = j.at("arch");
    c.arch.id = a.value("id", c.arch.id);
    if (a.contains("channels")) c.arch.channels = a.at("channels").get<std::vector<int>>();
    if (a.contains("pool_blocks")) c.arch.pool_blocks = a.at("pool_blocks").get<std::vector<int>>();
    if (a.contains("attach_blocks"))
      c.arch.attach_blocks = a.at("attach_blocks").get<std::vector<int>>();
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    c.backbone_epochs = t.value("epochs", c.backbone_epochs);
    c.backbone_batch = t.value("batch", c.backbone_batch);
    c.backbone_optimizer = t.value("optimizer", c.backbone_optimizer);
    c.backbone_lr = t.value("lr", c.backbone_lr);
    c.backbone_momentum = t.value("momentum", c.backbone_momentum);
    c.backbone_weight_decay = t.value("weight_decay", c.backbone_weight_decay);
    c.augment_hflip = t.value("hflip", c.augment_hflip);
    c.augment_crop = t.value("crop", c.augment_crop);
  }
  if (j.contains("ic_train")) {
    c.ic_epochs = j.at("ic_train").value("epochs", c.ic_epochs);
    c.ic_lr = j.at("ic_train").value("lr", c.ic_lr);
  }
  if (j.contains("rad_levels")) c.rad_levels = j.at("rad_levels").get<std::vector<double>>();
  c.population = j.value("population", c.population);
  if (j.contains("fingerprint")) {
    const auto& f = j.at("fingerprint");
    c.fingerprint.c = f.value("c", c.fingerprint.c);
    c.fingerprint.steps = f.value("steps", c.fingerprint.steps);
    c.fingerprint.learning_rate = f.value("lr", c.fingerprint.learning_rate);
    c.fingerprint.n_samples = f.value("N", c.fingerprint.n_samples);
  }
  if (j.contains("baseline")) {
    const auto& b = j.at("baseline");
    c.baseline.steps = b.value("steps", c.baseline.steps);
    c.baseline.learning_rate = b.value("lr", c.baseline.learning_rate);
    c.baseline.n_samples = b.value("N", c.baseline.n_samples);
    c.baseline_match_threshold = b.value("match_threshold", c.baseline_match_threshold);
  }
  if (j.contains("attacks")) {
    const auto& a = j.at("attacks");
    c.ic_retrain_count = a.value("ic_retrain_count", c.ic_retrain_count);
    if (a.contains("prune_rates")) c.prune_rates = a.at("prune_rates").get<std::vector<double>>();
    c.quantize_bits = a.value("quantize_bits", c.quantize_bits);
    c.finetune_seeds = a.value("finetune_seeds", c.finetune_seeds);
    c.finetune_epochs = a.value("finetune_epochs", c.finetune_epochs);
    c.finetune_snapshot_every = a.value("finetune_snapshot_every", c.finetune_snapshot_every);
    c.advtrain_epochs = a.value("advtrain_epochs", c.advtrain_epochs);
    c.advtrain_snapshot_every = a.value("advtrain_snapshot_every", c.advtrain_snapshot_every);
    c.pgd_iterations = a.value("pgd_iterations", c.pgd_iterations);
    c.pgd_epsilon = a.value("pgd_epsilon", c.pgd_epsilon);
    c.exit_criteria_attack = a.value("exit_criteria", c.exit_criteria_attack);
    c.max_attack_rad = a.value("max_attack_rad", c.max_attack_rad);
  }
  c.backend = j.value("backend", c.backend);
  c.n_benign = j.value("n_benign", c.n_benign);
  c.master_seed = j.value("seed", c.master_seed);
}

// nlohmann objects keep keys sorted, so dump() is already canonical.
inline std::string canonical_config_string(const ExperimentConfig& c) {
  nlohmann::json j = c;
  return j.dump();
}

inline std::string config_hash(const ExperimentConfig& c) {
  const std::uint64_t h = fnv1a64(canonical_config_string(c));
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline std::string rad_key(double rad) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%.2f", rad);
  return buf;
}

/// One (model, RAD level) verification outcome; everything the aggregate
/// tables need is recomputable from these rows.
struct VerifyRow {
  std::string model_id;
  std::string cohort;       // target | independent | attacked
  std::string attack_kind;  // empty unless cohort == attacked
  double attack_param = -1.0;
  int attack_seed = -1;
  int attack_epoch = -1;
  double rad_level = 0.0;
  double t_n = 0.0;
  double t_f = 0.0;
  double t_max = 0.0;
  double benign_auc = 0.0;
  bool stolen = false;
  double rad_guard = 0.0;  // usability drop vs the target's full accuracy
  bool flagged = false;    // rad_guard exceeded the acceptance cap
};

inline void to_json(nlohmann::json& j, const VerifyRow& r) {
  j = nlohmann::json{{"model_id", r.model_id},   {"cohort", r.cohort},
                     {"attack_kind", r.attack_kind}, {"attack_param", r.attack_param},
                     {"attack_seed", r.attack_seed}, {"attack_epoch", r.attack_epoch},
                     {"rad_level", r.rad_level},  {"t_n", r.t_n},
                     {"t_f", r.t_f},              {"t_max", r.t_max},
                     {"benign_auc", r.benign_auc}, {"stolen", r.stolen},
                     {"rad_guard", r.rad_guard},  {"flagged", r.flagged}};
}

inline void from_json(const nlohmann::json& j, VerifyRow& r) {
  r.model_id = j.at("model_id").get<std::string>();
  r.cohort = j.at("cohort").get<std::string>();
  r.attack_kind = j.at("attack_kind").get<std::string>();
  r.attack_param = j.at("attack_param").get<double>();
  r.attack_seed = j.at("attack_seed").get<int>();
  r.attack_epoch = j.at("attack_epoch").get<int>();
  r.rad_level = j.at("rad_level").get<double>();
  r.t_n = j.at("t_n").get<double>();
  r.t_f = j.at("t_f").get<double>();
  r.t_max = j.at("t_max").get<double>();
  r.benign_auc = j.at("benign_auc").get<double>();
  r.stolen = j.at("stolen").get<bool>();
  r.rad_guard = j.at("rad_guard").get<double>();
  r.flagged = j.at("flagged").get<bool>();
}

struct AblationRow {
  double t_f = 0.0;
  double independent_rate = 0.0;
  double stolen_rate = 0.0;
};

struct AtContrastPoint {
  int epoch = 0;                     // 0 = unmodified target
  double baseline_match_rate = 0.0;
  double t_n = 0.0;
};

struct ExperimentReport {
  std::string name;
  std::string config_hash;
  std::string tool_version;
  std::uint64_t master_seed = 0;
  std::string backend;
  std::vector<double> rad_levels;
  double target_full_accuracy = 0.0;
  std::map<std::string, double> target_t_c;        // rad key -> calibrated T_c (-1 = never-early)
  std::map<std::string, double> thresholds;        // rad key -> desk T_f
  std::map<std::string, double> fp_last_exit_frac; // rad key -> fraction at last exit
  std::vector<VerifyRow> rows;
  std::vector<std::string> stolen_cohort;
  std::map<std::string, double> independent_rate;
  std::map<std::string, double> stolen_rate;
  std::map<std::string, double> roc;
  std::map<std::string, std::vector<AblationRow>> ablation;
  std::map<std::string, std::vector<AtContrastPoint>> at_contrast;
};

inline void to_json(nlohmann::json& j, const AblationRow& r) {
  j = {{"t_f", r.t_f}, {"independent_rate", r.independent_rate}, {"stolen_rate", r.stolen_rate}};
}
inline void from_json(const nlohmann::json& j, AblationRow& r) {
  r.t_f = j.at("t_f").get<double>();
  r.independent_rate = j.at("independent_rate").get<double>();
  r.stolen_rate = j.at("stolen_rate").get<double>();
}
inline void to_json(nlohmann::json& j, const AtContrastPoint& p) {
  j = {{"epoch", p.epoch}, {"baseline_match_rate", p.baseline_match_rate}, {"t_n", p.t_n}};
}
inline void from_json(const nlohmann::json& j, AtContrastPoint& p) {
  p.epoch = j.at("epoch").get<int>();
  p.baseline_match_rate = j.at("baseline_match_rate").get<double>();
  p.t_n = j.at("t_n").get<double>();
}

inline void to_json(nlohmann::json& j, const ExperimentReport& r) {
  j = nlohmann::json{{"name", r.name},
                     {"config_hash", r.config_hash},
                     {"tool_version", r.tool_version},
                     {"master_seed", r.master_seed},
                     {"backend", r.backend},
                     {"rad_levels", r.rad_levels},
                     {"target_full_accuracy", r.target_full_accuracy},
                     {"target_t_c", r.target_t_c},
                     {"thresholds", r.thresholds},
                     {"fp_last_exit_frac", r.fp_last_exit_frac},
                     {"rows", r.rows},
                     {"stolen_cohort", r.stolen_cohort},
                     {"independent_rate", r.independent_rate},
                     {"stolen_rate", r.stolen_rate},
                     {"roc", r.roc},
                     {"ablation", r.ablation},
                     {"at_contrast", r.at_contrast}};
}

inline void from_json(const nlohmann::json& j, ExperimentReport& r) {
  r.name = j.at("name").get<std::string>();
  r.config_hash = j.at("config_hash").get<std::string>();
  r.tool_version = j.at("tool_version").get<std::string>();
  r.master_seed = j.at("master_seed").get<std::uint64_t>();
  r.backend = j.at("backend").get<std::string>();
  r.rad_levels = j.at("rad_levels").get<std::vector<double>>();
  r.target_full_accuracy = j.at("target_full_accuracy").get<double>();
  r.target_t_c = j.at("target_t_c").get<std::map<std::string, double>>();
  r.thresholds = j.at("thresholds").get<std::map<std::string, double>>();
  r.fp_last_exit_frac = j.at("fp_last_exit_frac").get<std::map<std::string, double>>();
  r.rows = j.at("rows").get<std::vector<VerifyRow>>();
  r.stolen_cohort = j.at("stolen_cohort").get<std::vector<std::string>>();
  r.independent_rate = j.at("independent_rate").get<std::map<std::string, double>>();
  r.stolen_rate = j.at("stolen_rate").get<std::map<std::string, double>>();
  r.roc = j.at("roc").get<std::map<std::string, double>>();
  r.ablation = j.at("ablation").get<std::map<std::string, std::vector<AblationRow>>>();
  r.at_contrast = j.at("at_contrast").get<std::map<std::string, std::vector<AtContrastPoint>>>();
}

/// For each candidate T_f: the verified rate over each cohort's scores.
/// Both columns are non-decreasing in T_f by construction of the rule.
inline std::vector<AblationRow> threshold_ablation(const std::vector<double>& independent_scores,
                                                   const std::vector<double>& stolen_scores,
                                                   const std::vector<double>& candidates) {
  if (candidates.empty()) throw std::invalid_argument("threshold_ablation: no candidates");
  std::vector<AblationRow> out;
  for (double t_f : candidates)
    out.push_back({t_f, ip_verified_rate(independent_scores, t_f),
                   ip_verified_rate(stolen_scores, t_f)});
  return out;
}

}  // namespace exitprint
