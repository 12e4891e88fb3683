#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "exitprint/fingerprint.hpp"
#include "exitprint/io.hpp"
#include "exitprint/model.hpp"

namespace exitprint {

inline constexpr std::uint32_t kModelFormatVersion = 1;
inline constexpr std::uint32_t kFingerprintFormatVersion = 1;
inline constexpr char kModelMagic[8] = {'X', 'P', 'R', 'M', 'O', 'D', 'L', '1'};
inline constexpr char kFingerprintMagic[8] = {'X', 'P', 'R', 'F', 'P', 'S', 'T', '1'};

inline nlohmann::json policy_to_json(const ExitPolicy& p) {
  nlohmann::json j;
  j["t_c"] = p.t_c ? nlohmann::json(*p.t_c) : nlohmann::json(nullptr);
  j["rad_target"] = p.rad_target ? nlohmann::json(*p.rad_target) : nlohmann::json(nullptr);
  return j;
}

inline ExitPolicy policy_from_json(const nlohmann::json& j) {
  ExitPolicy p;
  if (!j.at("t_c").is_null()) p = ExitPolicy::with_threshold(j.at("t_c").get<double>());
  if (!j.at("rad_target").is_null()) p.rad_target = j.at("rad_target").get<double>();
  return p;
}

namespace detail {

inline LayerKind layer_kind_from_name(const std::string& s) {
  if (s == "conv3x3") return LayerKind::conv3x3;
  if (s == "relu") return LayerKind::relu;
  if (s == "avgpool2") return LayerKind::avgpool2;
  if (s == "global_avgpool") return LayerKind::global_avgpool;
  if (s == "dense") return LayerKind::dense;
  throw std::runtime_error("model container: unknown layer kind '" + s + "'");
}

template <typename T>
nlohmann::json backbone_arch_json(const Backbone<T>& b) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : b.layers()) {
    const LayerSpec s = l->spec();
    nlohmann::json jl{{"kind", layer_kind_name(s.kind)}};
    if (s.kind == LayerKind::conv3x3 || s.kind == LayerKind::dense) {
      jl["in"] = s.in;
      jl["out"] = s.out;
    }
    layers.push_back(jl);
  }
  return nlohmann::json{{"input_shape", b.input_shape()},
                        {"n_classes", b.n_classes()},
                        {"layers", layers}};
}

template <typename T>
Backbone<T> backbone_from_arch_json(const nlohmann::json& arch) {
  Backbone<T> b(arch.at("input_shape").get<std::vector<std::int64_t>>(),
                arch.at("n_classes").get<int>());
  for (const auto& jl : arch.at("layers")) {
    LayerSpec s;
    s.kind = layer_kind_from_name(jl.at("kind").get<std::string>());
    if (s.kind == LayerKind::conv3x3 || s.kind == LayerKind::dense) {
      s.in = jl.at("in").get<std::int64_t>();
      s.out = jl.at("out").get<std::int64_t>();
    }
    b.add(make_layer<T>(s));
  }
  return b;
}

// Parameters are serialized as raw little-endian float32 in a fixed order:
// every backbone layer's params, then every IC head's params.
template <typename T>
void write_param_blob(std::ostream& os, const std::vector<const Tensor<T>*>& params) {
  std::vector<float> buf;
  for (const auto* t : params) {
    buf.resize(static_cast<std::size_t>(t->numel()));
    for (std::int64_t i = 0; i < t->numel(); ++i)
      buf[static_cast<std::size_t>(i)] = static_cast<float>((*t)[i]);
    write_f32_span(os, buf.data(), buf.size());
  }
}

template <typename T>
void read_param_blob(std::istream& is, const std::vector<Tensor<T>*>& params) {
  std::vector<float> buf;
  for (auto* t : params) {
    buf.resize(static_cast<std::size_t>(t->numel()));
    read_f32_span(is, buf.data(), buf.size());
    for (std::int64_t i = 0; i < t->numel(); ++i)
      (*t)[i] = static_cast<T>(buf[static_cast<std::size_t>(i)]);
  }
}

inline void write_container(const std::filesystem::path& path, const char magic[8],
                            std::uint32_t version, const nlohmann::json& header,
                            const std::function<void(std::ostream&)>& write_payload) {
  auto os = open_binary_out(path);
  write_bytes(os, magic, 8);
  write_pod<std::uint32_t>(os, version);
  const std::string h = header.dump();
  write_pod<std::uint64_t>(os, h.size());
  write_bytes(os, h.data(), h.size());
  write_payload(os);
}

inline nlohmann::json read_container_header(std::istream& is, const char magic[8],
                                            std::uint32_t expect_version,
                                            const std::string& what) {
  char got[8];
  read_bytes(is, got, 8);
  if (!std::equal(got, got + 8, magic))
    throw std::runtime_error(what + ": bad magic (not a " + what + " file)");
  const auto version = read_pod<std::uint32_t>(is);
  if (version != expect_version)
    throw std::runtime_error(what + ": unsupported format version " + std::to_string(version));
  const auto len = read_pod<std::uint64_t>(is);
  std::string h(len, '\0');
  read_bytes(is, h.data(), len);
  return nlohmann::json::parse(h);
}

}  // namespace detail

/// Container layout: magic, u32 format version, u64 header length, JSON
/// header (architecture descriptor, attach indices, layer costs, policy),
/// then the raw float32 parameter payload. Round-trips are bit-exact.
template <typename T>
void save_multiexit(const std::filesystem::path& path, const MultiExitModel<T>& m,
                    const std::optional<ExitPolicy>& policy = {}) {
  m.validate();
  nlohmann::json header;
  header["format_version"] = kModelFormatVersion;
  header["model_type"] = "multiexit";
  header["id"] = m.id;
  header["arch"] = detail::backbone_arch_json(m.backbone);
  nlohmann::json attach = nlohmann::json::array();
  for (const auto& ic : m.ics) attach.push_back(ic.attach_index);
  header["attach_indices"] = attach;
  header["layer_costs"] = m.layer_costs;
  header["policy"] = policy ? policy_to_json(*policy) : nlohmann::json(nullptr);

  detail::write_container(path, kModelMagic, kModelFormatVersion, header, [&](std::ostream& os) {
    auto params = m.backbone.parameters();
    for (const auto* p : m.ic_parameters()) params.push_back(p);
    detail::write_param_blob<T>(os, params);
  });
}

template <typename T>
struct LoadedModel {
  MultiExitModel<T> model;
  std::optional<ExitPolicy> policy;
};

template <typename T>
LoadedModel<T> load_multiexit(const std::filesystem::path& path) {
  auto is = open_binary_in(path);
  auto header = detail::read_container_header(is, kModelMagic, kModelFormatVersion, "model");
  if (header.at("model_type").get<std::string>() != "multiexit")
    throw std::runtime_error("model: container holds a backbone, not a multi-exit model");

  LoadedModel<T> out;
  out.model.id = header.at("id").get<std::string>();
  out.model.backbone = detail::backbone_from_arch_json<T>(header.at("arch"));
  for (int a : header.at("attach_indices").get<std::vector<int>>()) {
    auto feat = out.model.backbone.shape_after(static_cast<std::size_t>(a));
    out.model.ics.emplace_back(a, feat[0], out.model.backbone.n_classes());
  }
  out.model.layer_costs = header.at("layer_costs").get<std::vector<double>>();
  if (!header.at("policy").is_null()) out.policy = policy_from_json(header.at("policy"));

  auto params = out.model.backbone.parameters();
  for (auto* p : out.model.ic_parameters()) params.push_back(p);
  detail::read_param_blob<T>(is, params);
  out.model.validate();
  return out;
}

template <typename T>
void save_backbone(const std::filesystem::path& path, const Backbone<T>& b,
                   const std::string& id = "") {
  b.validate();
  nlohmann::json header;
  header["format_version"] = kModelFormatVersion;
  header["model_type"] = "backbone";
  header["id"] = id;
  header["arch"] = detail::backbone_arch_json(b);
  detail::write_container(path, kModelMagic, kModelFormatVersion, header, [&](std::ostream& os) {
    detail::write_param_blob<T>(os, b.parameters());
  });
}

template <typename T>
Backbone<T> load_backbone(const std::filesystem::path& path) {
  auto is = open_binary_in(path);
  auto header = detail::read_container_header(is, kModelMagic, kModelFormatVersion, "model");
  if (header.at("model_type").get<std::string>() != "backbone")
    throw std::runtime_error("model: container holds a multi-exit model, not a backbone");
  auto b = detail::backbone_from_arch_json<T>(header.at("arch"));
  auto params = b.parameters();
  detail::read_param_blob<T>(is, params);
  b.validate();
  return b;
}

template <typename T>
void save_fingerprint_set(const std::filesystem::path& path, const FingerprintSet<T>& set,
                          const std::vector<std::int64_t>& input_shape) {
  nlohmann::json header;
  header["format_version"] = kFingerprintFormatVersion;
  header["target_model_id"] = set.target_model_id;
  header["seed"] = set.seed;
  header["created_unix"] = set.created_unix;
  header["input_shape"] = input_shape;
  header["config"] = {{"c", set.config.c},
                      {"steps", set.config.steps},
                      {"learning_rate", set.config.learning_rate},
                      {"n_samples", set.config.n_samples}};
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : set.samples)
    samples.push_back({{"l2_distance", s.l2_distance},
                       {"final_loss", s.final_loss},
                       {"exit_index_on_target", s.exit_index_on_target}});
  header["samples"] = samples;

  detail::write_container(path, kFingerprintMagic, kFingerprintFormatVersion, header,
                          [&](std::ostream& os) {
                            for (const auto& s : set.samples) {
                              std::vector<const Tensor<T>*> pair{&s.x, &s.x_prime};
                              detail::write_param_blob<T>(os, pair);
                            }
                          });
}

template <typename T>
FingerprintSet<T> load_fingerprint_set(const std::filesystem::path& path) {
  auto is = open_binary_in(path);
  auto header =
      detail::read_container_header(is, kFingerprintMagic, kFingerprintFormatVersion, "fingerprint set");
  FingerprintSet<T> set;
  set.target_model_id = header.at("target_model_id").get<std::string>();
  set.seed = header.at("seed").get<std::uint64_t>();
  set.created_unix = header.at("created_unix").get<std::int64_t>();
  set.config.c = header.at("config").at("c").get<double>();
  set.config.steps = header.at("config").at("steps").get<int>();
  set.config.learning_rate = header.at("config").at("learning_rate").get<double>();
  set.config.n_samples = header.at("config").at("n_samples").get<int>();
  const auto shape = header.at("input_shape").get<std::vector<std::int64_t>>();

  for (const auto& js : header.at("samples")) {
    FingerprintSample<T> s;
    s.l2_distance = js.at("l2_distance").get<double>();
    s.final_loss = js.at("final_loss").get<double>();
    s.exit_index_on_target = js.at("exit_index_on_target").get<int>();
    s.x = Tensor<T>(shape);
    s.x_prime = Tensor<T>(shape);
    std::vector<Tensor<T>*> pair{&s.x, &s.x_prime};
    detail::read_param_blob<T>(is, pair);
    set.samples.push_back(std::move(s));
  }
  return set;
}

inline constexpr char kBaselineMagic[8] = {'X', 'P', 'R', 'B', 'A', 'S', 'E', '1'};

template <typename T>
void save_baseline_set(const std::filesystem::path& path,
                       const std::vector<BaselineSample<T>>& set,
                       const std::vector<std::int64_t>& input_shape) {
  nlohmann::json header;
  header["format_version"] = 1;
  header["input_shape"] = input_shape;
  nlohmann::json labels = nlohmann::json::array();
  for (const auto& s : set) labels.push_back(s.expected_label);
  header["expected_labels"] = labels;
  detail::write_container(path, kBaselineMagic, 1, header, [&](std::ostream& os) {
    for (const auto& s : set) {
      std::vector<const Tensor<T>*> one{&s.x_adv};
      detail::write_param_blob<T>(os, one);
    }
  });
}

template <typename T>
std::vector<BaselineSample<T>> load_baseline_set(const std::filesystem::path& path) {
  auto is = open_binary_in(path);
  auto header = detail::read_container_header(is, kBaselineMagic, 1, "baseline set");
  const auto shape = header.at("input_shape").get<std::vector<std::int64_t>>();
  std::vector<BaselineSample<T>> out;
  for (const auto& jl : header.at("expected_labels")) {
    BaselineSample<T> s;
    s.expected_label = jl.get<int>();
    s.x_adv = Tensor<T>(shape);
    std::vector<Tensor<T>*> one{&s.x_adv};
    detail::read_param_blob<T>(is, one);
    out.push_back(std::move(s));
  }
  return out;
}

/// Human-readable companion file: sample count, mean perturbation size, and
/// the exit-index histogram on the target. Deliberately timestamp-free so
/// report trees diff cleanly between runs.
template <typename T>
std::string fingerprint_manifest(const FingerprintSet<T>& set, int n_exits) {
  std::ostringstream os;
  os << "fingerprint set for model '" << set.target_model_id << "'\n";
  os << "N=" << set.samples.size() << " c=" << set.config.c << " steps=" << set.config.steps
     << " lr=" << set.config.learning_rate << " seed=" << set.seed << "\n";
  double l2_sum = 0.0;
  std::vector<int> hist(static_cast<std::size_t>(n_exits) + 1, 0);
  for (const auto& s : set.samples) {
    l2_sum += s.l2_distance;
    if (s.exit_index_on_target >= 1 && s.exit_index_on_target <= n_exits)
      ++hist[static_cast<std::size_t>(s.exit_index_on_target)];
  }
  os << "mean_l2=" << (set.samples.empty() ? 0.0 : l2_sum / static_cast<double>(set.samples.size()))
     << "\n";
  os << "exit_histogram:";
  for (int e = 1; e <= n_exits; ++e) os << " " << e << ":" << hist[static_cast<std::size_t>(e)];
  os << "\n";
  return os.str();
}

}  // namespace exitprint
