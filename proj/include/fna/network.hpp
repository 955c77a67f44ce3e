#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "fna/arch.hpp"
#include "fna/ops.hpp"
#include "fna/tensor.hpp"

namespace fna {

// Flat, name-ordered parameter store. Copies share tensor storage.
using ParamMap = std::map<std::string, Tensor>;

// One convolution + batch-norm pair inside a block.
struct ConvUnit {
  std::string name;
  int in_channels;
  int out_channels;
  int kernel;
  int groups;
  int stride;
};

// Conv units of a block in forward order; empty for Identity. ResNet blocks
// list their projection shortcut as "shortcut" when one is needed.
std::vector<ConvUnit> op_conv_units(const OpSpec& op);

inline constexpr const char* kBNFields[4] = {"gamma", "beta", "running_mean", "running_var"};

std::string layer_prefix(std::size_t stage, std::size_t layer);
inline std::string weight_name(const std::string& unit_prefix) { return unit_prefix + ".weight"; }
inline std::string bn_name(const std::string& unit_prefix, const char* field) {
  return unit_prefix + ".bn." + field;
}

// Appends freshly initialized tensors of one block (He-normal conv weights,
// BN gamma=1, beta=0, mean=0, var=1).
void init_op_params(ParamMap& params, const OpSpec& op, const std::string& prefix, std::mt19937_64& rng);
void init_head_params(ParamMap& params, const HeadSpec& head, int channels, std::mt19937_64& rng);
ParamMap init_params(const ArchDescriptor& arch, std::uint64_t seed);

// Names and shapes of every tensor of `arch`, in name order.
std::vector<std::pair<std::string, Shape>> param_shapes(const ArchDescriptor& arch);

// Marks every gamma/beta/weight/bias as trainable; running statistics never are.
void mark_trainable(ParamMap& params);
bool is_running_stat(const std::string& name);

ParamMap clone_params(const ParamMap& params);

struct RunMode {
  BNMode bn = BNMode::kTrain;
  bool bn_identity = false;  // bypass every BN (function-preservation checks)
};

Tensor op_forward(const OpSpec& op, const std::string& prefix, ParamMap& params, const Tensor& x, RunMode mode);
Tensor head_forward(const HeadSpec& head, ParamMap& params, const Tensor& features, int upsample);
Tensor network_forward(const ArchDescriptor& arch, ParamMap& params, const Tensor& x, RunMode mode);

}  // namespace fna
