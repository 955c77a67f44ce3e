#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fna/arch.hpp"

namespace fna {

using MAdds = std::int64_t;

struct Resolution {
  int height = 0;
  int width = 0;

  bool operator==(const Resolution&) const = default;
};

// Output size of a `same`-padded convolution: ceil(in / stride).
Resolution output_resolution(Resolution in, int stride);

// H'.W'.k^2.(C_in/g).C_out at the given output resolution.
MAdds conv_madds(Resolution out, int kernel, int in_channels, int out_channels, int groups);
// Sum over the convolutions of one block; Identity costs nothing.
MAdds op_madds(const OpSpec& op, Resolution input);
MAdds head_madds(const HeadSpec& head, int channels, Resolution features);

// Sum_o softmax(alpha)_o * costs_o.
double expected_layer_cost(std::span<const double> costs, std::span<const double> alpha);

// Candidate costs for every searchable layer plus the constant rest.
struct CostTable {
  std::vector<std::vector<double>> layers;
  double fixed_cost = 0.0;
};

// Input resolution of every layer, indexed [stage][layer]; independent of the
// choices since only first layers are strided and they are never Identity.
std::vector<std::vector<Resolution>> layer_resolutions(const SearchSpace& space);

CostTable build_cost_table(const SearchSpace& space);

// Expected cost under alpha: fixed + sum of per-layer expectations.
double network_cost(const CostTable& table, const std::vector<std::vector<double>>& alpha);
// Cost of a single path through the table (no prefix truncation).
double path_cost(const CostTable& table, const std::vector<std::size_t>& choices);
// Exact cost of a concrete network (stem, every layer, head).
MAdds network_cost(const ArchDescriptor& arch, Resolution input);

// Per-layer candidate table with totals, as a JSON document.
std::string cost_report(const SearchSpace& space, const CostTable& table,
                        const std::vector<std::vector<double>>* alpha);

// Per-block MAdds of a concrete network with its total, as a JSON document.
std::string arch_cost_report(const ArchDescriptor& arch, Resolution input);

}  // namespace fna
