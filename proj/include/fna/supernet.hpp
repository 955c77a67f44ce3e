#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "fna/arch.hpp"
#include "fna/cost.hpp"
#include "fna/network.hpp"
#include "fna/tensor.hpp"

namespace fna {

// Search-space network: shared stem and head, one MixedLayer per searchable
// layer, fixed layers elsewhere.
struct SuperNet {
  SearchSpace space;
  ParamMap params;
  std::vector<Tensor> alpha;  // one rank-1 tensor per searchable layer
  CostTable costs;
  bool bn_updates = true;
  std::mt19937_64 rng;
};

// alpha starts at zero (uniform softmax).
SuperNet make_supernet(const SearchSpace& space, ParamMap params, std::uint64_t rng_seed);
// Freshly initialized candidate weights, for the no-remap arms.
ParamMap init_supernet_params(const SearchSpace& space, std::uint64_t seed);

std::vector<std::vector<double>> alpha_values(const SuperNet& net);
void set_alpha(SuperNet& net, const std::vector<std::vector<double>>& values);

// Toggles BN affine learning and running-statistics accumulation.
void set_bn_updates(SuperNet& net, bool enabled);
// BN mode used by training steps given the current BN-update setting.
BNMode train_bn_mode(const SuperNet& net);

// One index per searchable layer, drawn from softmax(alpha) with net.rng.
std::vector<std::size_t> sample_path(SuperNet& net);

// softmax(alpha)-weighted sum of the candidates of searchable layer `index`.
Tensor mixed_forward(SuperNet& net, std::size_t index, const Tensor& x, RunMode mode);
// Whole network with every searchable layer mixed.
Tensor supernet_forward(SuperNet& net, const Tensor& x, RunMode mode);
// Whole network along one path; alpha is not part of the graph.
Tensor path_forward(SuperNet& net, const std::vector<std::size_t>& path, const Tensor& x, RunMode mode);

// fixed_cost + sum_l softmax(alpha_l) . cost_l, differentiable in alpha.
Tensor expected_cost(const SuperNet& net);

// Operation weights w: every parameter except BN running statistics.
std::vector<Tensor> weight_tensors(const SuperNet& net);

}  // namespace fna
