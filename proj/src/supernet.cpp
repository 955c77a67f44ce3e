#include "fna/supernet.hpp"

#include "fna/error.hpp"
#include "fna/remap.hpp"

namespace fna {

namespace {

Tensor layer_forward(SuperNet& net, std::size_t s, std::size_t l, std::size_t cand, const Tensor& x, RunMode mode) {
  return op_forward(net.space.stages[s].layers[l].ops[cand], supernet_prefix(net.space, s, l, cand), net.params, x,
                    mode);
}

// Shared driver; `pick(index, x)` handles searchable layers.
template <typename Pick>
Tensor run(SuperNet& net, const Tensor& x, RunMode mode, Pick&& pick) {
  Tensor h = op_forward(net.space.stem, "stem", net.params, x, mode);
  std::size_t index = 0;
  int stride = net.space.stem.stride;
  for (std::size_t s = 0; s < net.space.stages.size(); ++s) {
    const auto& layers = net.space.stages[s].layers;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      h = layers[l].ops.size() >= 2 ? pick(index++, h) : layer_forward(net, s, l, 0, h, mode);
      stride *= layers[l].ops.front().stride;
    }
  }
  return head_forward(net.space.head, net.params, h, stride);
}

}  // namespace

SuperNet make_supernet(const SearchSpace& space, ParamMap params, std::uint64_t rng_seed) {
  validate_space(space);
  SuperNet net;
  net.space = space;
  net.params = std::move(params);
  mark_trainable(net.params);
  net.costs = build_cost_table(space);
  for (const LayerRef& ref : space.searchable_layers())
    net.alpha.push_back(Tensor::zeros({space.candidates(ref).ops.size()}, true));
  net.rng.seed(rng_seed);
  return net;
}

ParamMap init_supernet_params(const SearchSpace& space, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamMap params;
  init_op_params(params, space.stem, "stem", rng);
  for (std::size_t s = 0; s < space.stages.size(); ++s)
    for (std::size_t l = 0; l < space.stages[s].layers.size(); ++l)
      for (std::size_t c = 0; c < space.stages[s].layers[l].ops.size(); ++c)
        init_op_params(params, space.stages[s].layers[l].ops[c], supernet_prefix(space, s, l, c), rng);
  const int channels = space.stages.empty() ? space.stem.out_channels : space.stages.back().spec.out_channels;
  init_head_params(params, space.head, channels, rng);
  return params;
}

std::vector<std::vector<double>> alpha_values(const SuperNet& net) {
  std::vector<std::vector<double>> out;
  for (const Tensor& a : net.alpha) out.emplace_back(a.data().begin(), a.data().end());
  return out;
}

void set_alpha(SuperNet& net, const std::vector<std::vector<double>>& values) {
  if (values.size() != net.alpha.size()) throw ShapeError("set_alpha: layer count mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].size() != net.alpha[i].numel()) throw ShapeError("set_alpha: candidate count mismatch");
    std::copy(values[i].begin(), values[i].end(), net.alpha[i].mutable_data().begin());
  }
}

void set_bn_updates(SuperNet& net, bool enabled) {
  net.bn_updates = enabled;
  for (auto& [name, t] : net.params)
    if (name.find(".bn.gamma") != std::string::npos || name.find(".bn.beta") != std::string::npos)
      t.set_requires_grad(enabled);
}

BNMode train_bn_mode(const SuperNet& net) { return net.bn_updates ? BNMode::kTrain : BNMode::kFrozen; }

std::vector<std::size_t> sample_path(SuperNet& net) {
  std::vector<std::size_t> path;
  for (const Tensor& a : net.alpha) {
    Tensor p;
    {
      NoGradGuard guard;
      p = softmax(a);
    }
    // 53-bit uniform draw, then inverse CDF; avoids library-specific distributions.
    const double u = static_cast<double>(net.rng() >> 11) * 0x1.0p-53;
    std::size_t pick = p.numel() - 1;
    double cdf = 0.0;
    for (std::size_t c = 0; c < p.numel(); ++c) {
      cdf += p.data()[c];
      if (u < cdf) {
        pick = c;
        break;
      }
    }
    path.push_back(pick);
  }
  return path;
}

Tensor mixed_forward(SuperNet& net, std::size_t index, const Tensor& x, RunMode mode) {
  const auto refs = net.space.searchable_layers();
  if (index >= refs.size()) throw ShapeError("mixed_forward: no searchable layer " + std::to_string(index));
  const LayerRef ref = refs[index];
  const auto& ops = net.space.candidates(ref).ops;
  std::vector<Tensor> outs;
  for (std::size_t c = 0; c < ops.size(); ++c) {
    outs.push_back(layer_forward(net, ref.stage, ref.layer, c, x, mode));
    if (outs.back().shape() != outs.front().shape())
      throw ShapeError("mixed_forward: candidate " + ops[c].label() + " outputs " + shape_str(outs.back().shape()) +
                       ", expected " + shape_str(outs.front().shape()));
  }
  return weighted_sum(outs, softmax(net.alpha[index]));
}

Tensor supernet_forward(SuperNet& net, const Tensor& x, RunMode mode) {
  return run(net, x, mode, [&](std::size_t index, const Tensor& h) { return mixed_forward(net, index, h, mode); });
}

Tensor path_forward(SuperNet& net, const std::vector<std::size_t>& path, const Tensor& x, RunMode mode) {
  const auto refs = net.space.searchable_layers();
  if (path.size() != refs.size())
    throw ShapeError("path_forward: path has " + std::to_string(path.size()) + " entries, expected " +
                     std::to_string(refs.size()));
  return run(net, x, mode, [&](std::size_t index, const Tensor& h) {
    const LayerRef ref = refs[index];
    if (path[index] >= net.space.candidates(ref).ops.size())
      throw ShapeError("path_forward: index " + std::to_string(path[index]) + " out of range at searchable layer " +
                       std::to_string(index));
    return layer_forward(net, ref.stage, ref.layer, path[index], h, mode);
  });
}

Tensor expected_cost(const SuperNet& net) {
  Tensor total = Tensor::scalar(net.costs.fixed_cost);
  for (std::size_t i = 0; i < net.alpha.size(); ++i) total = add(total, dot_const(softmax(net.alpha[i]), net.costs.layers[i]));
  return total;
}

std::vector<Tensor> weight_tensors(const SuperNet& net) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : net.params)
    if (!is_running_stat(name)) out.push_back(t);
  return out;
}

}  // namespace fna
