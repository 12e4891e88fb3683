#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "exitprint/io.hpp"
#include "exitprint/model.hpp"
#include "exitprint/rng.hpp"

namespace exitprint {

struct SplitSizes {
  int train = 0;
  int val = 0;
  int test = 0;
  int total() const { return train + val + test; }
};

/// Where a dataset comes from: a directory of raw float32 arrays plus an
/// integer label file, or the built-in synthetic generator.
struct DatasetSpec {
  std::string name;
  std::string kind = "synthetic-gratings";  // or "directory"
  std::string directory;                    // kind == "directory"
  SplitSizes splits;
  std::vector<std::int64_t> input_shape = {3, 32, 32};
  int n_classes = 4;
  double noise_lo = 0.05;   // synthetic: per-sample noise amplitude range
  double noise_hi = 0.55;
  std::uint64_t seed = 0;   // synthetic generation seed
};

template <typename T>
struct Dataset {
  std::string name;
  std::vector<std::int64_t> input_shape;
  int n_classes = 0;
  std::vector<LabeledExample<T>> train;
  std::vector<LabeledExample<T>> val;
  std::vector<LabeledExample<T>> test;
};

/// Synthetic image classes: oriented high-frequency gratings. Class k is a
/// sine grating at orientation k * 180/n_classes degrees (plus a small
/// per-sample jitter), with random wavelength, phase, contrast, brightness,
/// and a per-sample noise amplitude drawn from [noise_lo, noise_hi]. Local
/// orientation is visible to a single 3x3 convolution, so clean samples can
/// exit confidently at the first head, while heavily noised samples defer to
/// deeper exits; that spread is what the timing curves need.
template <typename T>
LabeledExample<T> synth_grating_example(const DatasetSpec& spec, int label, Pcg32& rng) {
  const std::int64_t c = spec.input_shape.at(0);
  const std::int64_t h = spec.input_shape.at(1);
  const std::int64_t w = spec.input_shape.at(2);
  const double theta = (180.0 / static_cast<double>(spec.n_classes)) * label +
                       rng.uniform(-8.0, 8.0);
  const double rad = theta * std::numbers::pi / 180.0;
  const double dir_x = std::cos(rad), dir_y = std::sin(rad);
  const double wavelength = rng.uniform(4.0, 7.5);
  const double phase = rng.uniform() * 2.0 * std::numbers::pi;
  const double contrast = rng.uniform(0.35, 1.0);
  const double brightness = rng.uniform(-0.08, 0.08);
  const double noise_amp = rng.uniform(spec.noise_lo, spec.noise_hi);

  LabeledExample<T> ex;
  ex.label = label;
  ex.x = Tensor<T>(spec.input_shape);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const double gain = 1.0 - 0.15 * static_cast<double>(ch % 3);
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        const double arg =
            2.0 * std::numbers::pi *
                (dir_x * static_cast<double>(x) + dir_y * static_cast<double>(y)) / wavelength +
            phase;
        double v = 0.5 + brightness + 0.32 * contrast * gain * std::sin(arg) +
                   noise_amp * rng.uniform(-1.0, 1.0);
        v = std::min(1.0, std::max(0.0, v));
        ex.x.at(ch, y, x) = static_cast<T>(static_cast<float>(v));
      }
    }
  }
  return ex;
}

template <typename T>
std::vector<LabeledExample<T>> synth_grating_block(const DatasetSpec& spec, int count,
                                                   std::uint64_t seed) {
  Pcg32 rng(seed, /*stream=*/0xda7a);
  std::vector<LabeledExample<T>> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i)
    out.push_back(synth_grating_example<T>(
        spec, static_cast<int>(rng.bounded(static_cast<std::uint32_t>(spec.n_classes))), rng));
  return out;
}

template <typename T>
Dataset<T> generate_synthetic(const DatasetSpec& spec) {
  if (spec.n_classes < 2) throw std::invalid_argument("dataset: need at least 2 classes");
  if (spec.splits.train < 1 || spec.splits.val < 1 || spec.splits.test < 1)
    throw std::invalid_argument("dataset: every split must be non-empty");
  Dataset<T> d;
  d.name = spec.name;
  d.input_shape = spec.input_shape;
  d.n_classes = spec.n_classes;
  d.train = synth_grating_block<T>(spec, spec.splits.train, derive_seed(spec.seed, "data-train"));
  d.val = synth_grating_block<T>(spec, spec.splits.val, derive_seed(spec.seed, "data-val"));
  d.test = synth_grating_block<T>(spec, spec.splits.test, derive_seed(spec.seed, "data-test"));
  return d;
}

/// Directory layout: meta.json + images.f32 (count*C*H*W little-endian
/// float32) + labels.i32 (count little-endian int32). Samples are split
/// train/val/test in file order.
template <typename T>
void save_dataset_dir(const Dataset<T>& d, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::int64_t per = Tensor<T>::numel_of(d.input_shape);
  nlohmann::json meta{
      {"format_version", 1},
      {"name", d.name},
      {"channels", d.input_shape[0]},
      {"height", d.input_shape[1]},
      {"width", d.input_shape[2]},
      {"n_classes", d.n_classes},
      {"count", d.train.size() + d.val.size() + d.test.size()},
      {"splits",
       {{"train", d.train.size()}, {"val", d.val.size()}, {"test", d.test.size()}}}};
  write_text_file(dir / "meta.json", meta.dump(2) + "\n");

  auto imgs = open_binary_out(dir / "images.f32");
  auto labels = open_binary_out(dir / "labels.i32");
  std::vector<float> buf(static_cast<std::size_t>(per));
  auto dump_split = [&](const std::vector<LabeledExample<T>>& split) {
    for (const auto& ex : split) {
      for (std::int64_t i = 0; i < per; ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(ex.x[i]);
      write_f32_span(imgs, buf.data(), buf.size());
      write_pod<std::int32_t>(labels, static_cast<std::int32_t>(ex.label));
    }
  };
  dump_split(d.train);
  dump_split(d.val);
  dump_split(d.test);
}

template <typename T>
Dataset<T> load_dataset_dir(const std::filesystem::path& dir) {
  auto meta = nlohmann::json::parse(read_text_file(dir / "meta.json"));
  Dataset<T> d;
  d.name = meta.at("name").get<std::string>();
  d.input_shape = {meta.at("channels").get<std::int64_t>(), meta.at("height").get<std::int64_t>(),
                   meta.at("width").get<std::int64_t>()};
  d.n_classes = meta.at("n_classes").get<int>();
  const std::int64_t count = meta.at("count").get<std::int64_t>();
  SplitSizes sp{meta.at("splits").at("train").get<int>(), meta.at("splits").at("val").get<int>(),
                meta.at("splits").at("test").get<int>()};
  if (sp.total() > count) throw std::runtime_error("dataset: splits exceed sample count");

  const std::int64_t per = Tensor<T>::numel_of(d.input_shape);
  auto imgs = open_binary_in(dir / "images.f32");
  auto labels = open_binary_in(dir / "labels.i32");
  std::vector<float> buf(static_cast<std::size_t>(per));
  auto read_split = [&](int n) {
    std::vector<LabeledExample<T>> split;
    split.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      LabeledExample<T> ex;
      ex.x = Tensor<T>(d.input_shape);
      read_f32_span(imgs, buf.data(), buf.size());
      for (std::int64_t k = 0; k < per; ++k) ex.x[k] = static_cast<T>(buf[static_cast<std::size_t>(k)]);
      ex.label = static_cast<int>(read_pod<std::int32_t>(labels));
      if (ex.label < 0 || ex.label >= d.n_classes)
        throw std::runtime_error("dataset: label out of range");
      split.push_back(std::move(ex));
    }
    return split;
  };
  d.train = read_split(sp.train);
  d.val = read_split(sp.val);
  d.test = read_split(sp.test);
  return d;
}

template <typename T>
Dataset<T> load_dataset(const DatasetSpec& spec) {
  if (spec.kind == "synthetic-gratings") return generate_synthetic<T>(spec);
  if (spec.kind == "directory") return load_dataset_dir<T>(spec.directory);
  throw std::invalid_argument("dataset: unknown kind '" + spec.kind + "'");
}

}  // namespace exitprint
