// Minimal end-to-end walkthrough: train a small multi-exit model on the
// synthetic dataset, craft a handful of fingerprints, and verify the model
// against itself and against an independently trained copy.

#include <iostream>

#include "exitprint/exitprint.hpp"

using namespace exitprint;

int main() {
  DatasetSpec dspec;
  dspec.name = "tiles-quickstart";
  dspec.splits = {400, 100, 100};
  dspec.n_classes = 4;
  dspec.seed = 7;
  auto data = load_dataset<float>(dspec);

  ArchSpec arch;
  arch.channels = {8, 16, 24};
  arch.pool_blocks = {1, 2};
  arch.attach_blocks = {1, 2};

  TrainConfig tc;
  tc.epochs = 4;
  tc.optimizer = OptimizerDesc::sgd(0.02);
  tc.seed = 1;
  auto trained = train_backbone<float>(arch, data, tc);
  std::cout << "backbone val accuracy: " << trained.final_val_accuracy << "\n";

  auto model = build_multiexit<float>(trained.model, attach_indices_for(arch), 2, "quickstart");
  TrainConfig icc;
  icc.epochs = 4;
  icc.optimizer = OptimizerDesc::adam(0.001);
  icc.seed = 3;
  model = train_ics(model, data, icc);
  model.id = "quickstart";

  auto val = std::span<const LabeledExample<float>>(data.val.data(), data.val.size());
  ExitPolicy policy = calibrate_threshold(model, val, 0.15);
  std::cout << "calibrated T_c: " << (policy.t_c ? *policy.t_c : -1.0) << "\n";

  std::vector<Tensor<float>> benign;
  for (const auto& ex : data.test) benign.push_back(ex.x);
  auto benign_span = std::span<const Tensor<float>>(benign.data(), benign.size());

  FingerprintConfig fc;
  fc.steps = 200;
  fc.n_samples = 16;
  auto fpset = generate_fingerprint_set(model, benign_span, fc, 11, policy);

  auto backend = TimingBackend::cost_model();
  auto [benign_auc, t_max] = benign_eec_auc(model, benign_span, policy, backend);
  auto self_report = verify_ip(model, fpset, policy, backend, 0.2, t_max);
  std::cout << "target:      benign AUC " << benign_auc << ", fingerprint T_N "
            << self_report.t_n << " -> " << verdict_name(self_report.verdict) << "\n";

  TrainConfig other = tc;
  other.seed = 42;
  auto indep_backbone = train_backbone<float>(arch, data, other);
  auto indep = build_multiexit<float>(indep_backbone.model, attach_indices_for(arch), 43, "indep");
  icc.seed = 44;
  indep = train_ics(indep, data, icc);
  indep.id = "indep";
  ExitPolicy indep_policy = calibrate_threshold(indep, val, 0.15);
  auto [iauc, itmax] = benign_eec_auc(indep, benign_span, indep_policy, backend);
  auto indep_report = verify_ip(indep, fpset, indep_policy, backend, 0.2, itmax);
  std::cout << "independent: benign AUC " << iauc << ", fingerprint T_N " << indep_report.t_n
            << " -> " << verdict_name(indep_report.verdict) << "\n";
  return 0;
}
