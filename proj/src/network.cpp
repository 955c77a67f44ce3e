#include "fna/network.hpp"

#include <cmath>

#include "fna/error.hpp"

namespace fna {

namespace {

bool has_shortcut_conv(const OpSpec& op) { return op.stride != 1 || op.in_channels != op.out_channels; }

Tensor& lookup(ParamMap& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw ConfigError("missing parameter '" + name + "'");
  return it->second;
}

Tensor conv_bn(ParamMap& params, const std::string& prefix, const ConvUnit& u, const Tensor& x, RunMode mode,
               bool activation) {
  const std::string up = prefix + "." + u.name;
  ConvParams conv{lookup(params, weight_name(up)), u.stride, u.kernel / 2, 1, u.groups};
  Tensor y = conv2d(x, conv);
  BNParams bn{lookup(params, bn_name(up, "gamma")), lookup(params, bn_name(up, "beta")),
              lookup(params, bn_name(up, "running_mean")), lookup(params, bn_name(up, "running_var"))};
  bn.identity_mode = mode.bn_identity;
  y = batch_norm(y, bn, mode.bn);
  return activation ? relu6(y) : y;
}

void add_unit(ParamMap& params, const std::string& up, const ConvUnit& u, std::mt19937_64& rng) {
  const int cg = u.in_channels / u.groups;
  const Shape ws{static_cast<std::size_t>(u.out_channels), static_cast<std::size_t>(cg),
                 static_cast<std::size_t>(u.kernel), static_cast<std::size_t>(u.kernel)};
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(cg * u.kernel * u.kernel)));
  std::vector<double> w(shape_numel(ws));
  for (double& v : w) v = dist(rng);
  const Shape cs{static_cast<std::size_t>(u.out_channels)};
  params[weight_name(up)] = Tensor::from(ws, std::move(w), true);
  params[bn_name(up, "gamma")] = Tensor::full(cs, 1.0, true);
  params[bn_name(up, "beta")] = Tensor::zeros(cs, true);
  params[bn_name(up, "running_mean")] = Tensor::zeros(cs);
  params[bn_name(up, "running_var")] = Tensor::full(cs, 1.0);
}

}  // namespace

std::vector<ConvUnit> op_conv_units(const OpSpec& op) {
  std::vector<ConvUnit> units;
  switch (op.kind) {
    case OpKind::kIdentity: break;
    case OpKind::kPlainConv:
      units.push_back({"conv", op.in_channels, op.out_channels, op.kernel, op.groups, op.stride});
      break;
    case OpKind::kMBConv: {
      const int inner = op.in_channels * op.expansion;
      if (op.expansion != 1) units.push_back({"expand", op.in_channels, inner, 1, 1, 1});
      units.push_back({"dw", inner, inner, op.kernel, inner, op.stride});
      units.push_back({"project", inner, op.out_channels, 1, 1, 1});
      break;
    }
    case OpKind::kResBasic:
      units.push_back({"conv1", op.in_channels, op.out_channels, op.kernel, op.groups, op.stride});
      units.push_back({"conv2", op.out_channels, op.out_channels, 3, 1, 1});
      if (has_shortcut_conv(op)) units.push_back({"shortcut", op.in_channels, op.out_channels, 1, 1, op.stride});
      break;
    case OpKind::kResBottleneck: {
      const int mid = op.out_channels / 4;
      units.push_back({"reduce", op.in_channels, mid, 1, 1, 1});
      units.push_back({"conv", mid, mid, op.kernel, op.groups, op.stride});
      units.push_back({"expand", mid, op.out_channels, 1, 1, 1});
      if (has_shortcut_conv(op)) units.push_back({"shortcut", op.in_channels, op.out_channels, 1, 1, op.stride});
      break;
    }
  }
  return units;
}

std::string layer_prefix(std::size_t stage, std::size_t layer) {
  return "stages." + std::to_string(stage) + ".layers." + std::to_string(layer);
}

void init_op_params(ParamMap& params, const OpSpec& op, const std::string& prefix, std::mt19937_64& rng) {
  for (const ConvUnit& u : op_conv_units(op)) add_unit(params, prefix + "." + u.name, u, rng);
}

void init_head_params(ParamMap& params, const HeadSpec& head, int channels, std::mt19937_64& rng) {
  const auto k = static_cast<std::size_t>(head.classes);
  const auto c = static_cast<std::size_t>(channels);
  std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / static_cast<double>(channels)));
  std::vector<double> w(k * c);
  for (double& v : w) v = dist(rng);
  const Shape ws = head.kind == HeadKind::kDense ? Shape{k, c, 1, 1} : Shape{k, c};
  params["head.weight"] = Tensor::from(ws, std::move(w), true);
  params["head.bias"] = Tensor::zeros({k}, true);
}

ParamMap init_params(const ArchDescriptor& arch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamMap params;
  init_op_params(params, arch.stem, "stem", rng);
  for (std::size_t s = 0; s < arch.stages.size(); ++s)
    for (std::size_t l = 0; l < arch.stages[s].layers.size(); ++l)
      init_op_params(params, arch.stages[s].layers[l], layer_prefix(s, l), rng);
  init_head_params(params, arch.head, arch.feature_channels(), rng);
  return params;
}

std::vector<std::pair<std::string, Shape>> param_shapes(const ArchDescriptor& arch) {
  const ParamMap params = init_params(arch, 0);
  std::vector<std::pair<std::string, Shape>> out;
  for (const auto& [name, t] : params) out.emplace_back(name, t.shape());
  return out;
}

bool is_running_stat(const std::string& name) {
  return name.ends_with(".running_mean") || name.ends_with(".running_var");
}

void mark_trainable(ParamMap& params) {
  for (auto& [name, t] : params) t.set_requires_grad(!is_running_stat(name));
}

ParamMap clone_params(const ParamMap& params) {
  ParamMap out;
  for (const auto& [name, t] : params) {
    Tensor c = t.clone();
    c.set_requires_grad(t.requires_grad());
    out.emplace(name, std::move(c));
  }
  return out;
}

Tensor op_forward(const OpSpec& op, const std::string& prefix, ParamMap& params, const Tensor& x, RunMode mode) {
  if (x.rank() != 4 || static_cast<int>(x.dim(1)) != op.in_channels)
    throw ShapeError(prefix + ": expected input with " + std::to_string(op.in_channels) + " channels, got " +
                     shape_str(x.shape()));
  const std::vector<ConvUnit> units = op_conv_units(op);
  switch (op.kind) {
    case OpKind::kIdentity: return x;
    case OpKind::kPlainConv: return conv_bn(params, prefix, units[0], x, mode, true);
    case OpKind::kMBConv: {
      Tensor h = x;
      for (std::size_t i = 0; i < units.size(); ++i) h = conv_bn(params, prefix, units[i], h, mode, i + 1 < units.size());
      if (op.stride == 1 && op.in_channels == op.out_channels) h = add(h, x);
      return h;
    }
    case OpKind::kResBasic: {
      Tensor h = conv_bn(params, prefix, units[0], x, mode, true);
      h = conv_bn(params, prefix, units[1], h, mode, false);
      Tensor skip = has_shortcut_conv(op) ? conv_bn(params, prefix, units[2], x, mode, false) : x;
      return relu6(add(h, skip));
    }
    case OpKind::kResBottleneck: {
      Tensor h = conv_bn(params, prefix, units[0], x, mode, true);
      h = conv_bn(params, prefix, units[1], h, mode, true);
      h = conv_bn(params, prefix, units[2], h, mode, false);
      Tensor skip = has_shortcut_conv(op) ? conv_bn(params, prefix, units[3], x, mode, false) : x;
      return relu6(add(h, skip));
    }
  }
  return x;
}

Tensor head_forward(const HeadSpec& head, ParamMap& params, const Tensor& features, int upsample) {
  Tensor& w = lookup(params, "head.weight");
  Tensor& b = lookup(params, "head.bias");
  if (head.kind == HeadKind::kClassification) return linear(global_avg_pool(features), w, b);
  Tensor y = add_channel_bias(conv2d(features, ConvParams{w, 1, 0, 1, 1}), b);
  return upsample > 1 ? upsample_nearest(y, upsample) : y;
}

Tensor network_forward(const ArchDescriptor& arch, ParamMap& params, const Tensor& x, RunMode mode) {
  const int stride = arch.total_stride();
  if (arch.head.kind == HeadKind::kDense && x.rank() == 4 &&
      (x.dim(2) % static_cast<std::size_t>(stride) != 0 || x.dim(3) % static_cast<std::size_t>(stride) != 0))
    throw ShapeError("dense head needs input size divisible by the total stride " + std::to_string(stride) +
                     ", got " + shape_str(x.shape()));
  Tensor h = op_forward(arch.stem, "stem", params, x, mode);
  for (std::size_t s = 0; s < arch.stages.size(); ++s)
    for (std::size_t l = 0; l < arch.stages[s].layers.size(); ++l)
      h = op_forward(arch.stages[s].layers[l], layer_prefix(s, l), params, h, mode);
  return head_forward(arch.head, params, h, stride);
}

}  // namespace fna
