#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fna/arch.hpp"
#include "fna/network.hpp"
#include "fna/tensor.hpp"

namespace fna {

// Index conventions are 0-based throughout: layer i of an m-layer target
// stage reads seed layer min(i, l-1); group g of output channel i is
// floor(i / (p/groups)); dilated taps sit at {0, (k-1)/2, k-1}.

// Seed layer index for each of `m` target layers given `l` seed layers.
std::vector<std::size_t> depth_sources(std::size_t l, std::size_t m);

template <typename T>
std::vector<T> remap_depth(const std::vector<T>& seed_layers, std::size_t m) {
  std::vector<T> out;
  for (std::size_t i : depth_sources(seed_layers.size(), m)) out.push_back(seed_layers[i]);
  return out;
}

// Zero-pads or truncates the channel axes (dims 0 and 1 of a conv weight,
// dim 0 of a vector); spatial dims must match. New entries get `fill`.
Tensor remap_width(const Tensor& seed, const Shape& target_shape, double fill = 0.0);
// [p, q, h, w] plain conv -> [p, q/groups, h, w] grouped conv.
Tensor remap_grouped(const Tensor& seed, int groups);
// Central crop or central zero-embedding of the spatial k x k window.
Tensor remap_kernel(const Tensor& seed, int target_k);
// Seed taps placed at {0, (k-1)/2, k-1}; zero elsewhere. Seed must be 3x3.
Tensor remap_kernel_dilated(const Tensor& seed, int target_k);

enum class ReferenceKind { kBNGammaAbs, kWeightStd, kWeightL1 };

// Per-output-channel reference values. `gamma` is used by kBNGammaAbs only.
std::vector<double> reference_vector(ReferenceKind kind, const Tensor& weight, const Tensor& gamma);
// Indices of the q largest values, ties broken toward the lower index, then
// sorted ascending.
std::vector<std::size_t> select_top_channels(std::span<const double> ref, std::size_t q);
// Gathers `indices` along axis `dim`.
Tensor select_channels(const Tensor& t, std::size_t dim, const std::vector<std::size_t>& indices);
// Output channels chosen by reference value, input channels padded/truncated.
Tensor remap_width_by_reference(const Tensor& seed, const Shape& target_shape, std::span<const double> ref);

enum class RemapStrategy { kStandard, kBNGamma, kWeightStd, kWeightL1, kKernelDilate };

std::string_view strategy_name(RemapStrategy s);
RemapStrategy parse_strategy(std::string_view name);

enum class RemapRule {
  kCopy,
  kDepthReplicate,
  kWidthPad,
  kWidthTruncate,
  kChannelSelect,
  kGroupSlice,
  kKernelCenterEmbed,
  kKernelCenterCrop,
  kKernelDilate,
  kFreshInit,
};

std::string_view rule_name(RemapRule rule);

struct RemapStep {
  RemapRule rule;
  std::size_t dim = 0;               // width rules
  std::size_t size = 0;              // width target / groups / kernel size
  double fill = 0.0;                 // width pad value
  std::vector<std::size_t> indices = {};  // channel select
};

struct RemapEntry {
  std::string target;
  std::string source;  // empty for kFreshInit
  Shape source_shape;
  Shape target_shape;
  std::vector<RemapStep> steps;
};

struct RemapPlan {
  std::vector<RemapEntry> entries;

  // One line per target tensor: target <- source : rule(args) -> rule(args).
  std::string dump() const;
};

// Applies the steps of one entry to its source tensor.
Tensor apply_entry(const RemapEntry& entry, const Tensor& source);

struct RemapResult {
  ParamMap params;
  RemapPlan plan;
};

struct RemapOptions {
  RemapStrategy strategy = RemapStrategy::kStandard;
  std::uint64_t init_seed = 0;  // for tensors with no source (changed head)
};

// Parameter name prefix of a candidate inside the super network. Layers with
// a single candidate keep the plain layer prefix.
std::string supernet_prefix(const SearchSpace& space, std::size_t stage, std::size_t layer, std::size_t cand);

RemapResult remap_seed_to_supernet(const ArchDescriptor& seed, const ParamMap& seed_params, const SearchSpace& space,
                                   const RemapOptions& options = {});
// Pure collection of the chosen candidates' tensors.
RemapResult remap_supernet_to_target(const SearchSpace& space, const ParamMap& super_params,
                                     const ArchDescriptor& arch);
RemapResult remap_seed_to_target(const ArchDescriptor& seed, const ParamMap& seed_params, const ArchDescriptor& arch,
                                 const RemapOptions& options = {});

}  // namespace fna
