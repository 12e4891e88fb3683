#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "exitprint/model.hpp"

namespace exitprint {

/// Small convolutional classifier family used throughout: one 3x3 conv +
/// ReLU per block, 2x2 average pooling after the blocks listed in
/// pool_blocks, then a global-average-pool + dense head. Exit heads go
/// after the blocks in attach_blocks (1-based).
struct ArchSpec {
  std::string id = "small-convnet";
  std::vector<int> channels = {8, 16, 24, 32, 32, 48};
  std::vector<int> pool_blocks = {1, 2, 3};
  std::vector<int> attach_blocks = {1, 2, 3, 4, 5};
};

namespace detail {
inline bool has_block(const std::vector<int>& blocks, int b) {
  return std::find(blocks.begin(), blocks.end(), b) != blocks.end();
}
}  // namespace detail

template <typename T>
Backbone<T> make_backbone(const ArchSpec& arch, std::vector<std::int64_t> input_shape,
                          int n_classes, std::uint64_t init_seed) {
  Backbone<T> b(std::move(input_shape), n_classes);
  Pcg32 rng(init_seed, /*stream=*/0xa11);
  std::int64_t in_ch = b.input_shape().at(0);
  for (std::size_t i = 0; i < arch.channels.size(); ++i) {
    auto conv = std::make_unique<Conv3x3<T>>(in_ch, arch.channels[i]);
    conv->init(rng);
    in_ch = arch.channels[i];
    b.add(std::move(conv));
    b.add(std::make_unique<ReLU<T>>());
    if (detail::has_block(arch.pool_blocks, static_cast<int>(i) + 1))
      b.add(std::make_unique<AvgPool2<T>>());
  }
  b.add(std::make_unique<GlobalAvgPool<T>>());
  auto fc = std::make_unique<Dense<T>>(in_ch, n_classes);
  fc->init(rng);
  b.add(std::move(fc));
  b.validate();
  return b;
}

/// Backbone layer indices corresponding to arch.attach_blocks (the last
/// layer of each block, i.e. its ReLU or pooling output).
inline std::vector<int> attach_indices_for(const ArchSpec& arch) {
  std::vector<int> out;
  int idx = -1;
  for (std::size_t i = 0; i < arch.channels.size(); ++i) {
    idx += 2;  // conv, relu
    if (detail::has_block(arch.pool_blocks, static_cast<int>(i) + 1)) ++idx;
    if (detail::has_block(arch.attach_blocks, static_cast<int>(i) + 1)) out.push_back(idx);
  }
  return out;
}

}  // namespace exitprint
