// Small architectures and spaces shared by the unit tests.
#pragma once

#include <random>
#include <vector>

#include "fna/arch.hpp"
#include "fna/cost.hpp"

namespace fna::fixture {

inline ArchDescriptor desk_seed(const std::string& profile = "seg", HeadKind head = HeadKind::kClassification,
                                int classes = 2) {
  DeskSeedOptions o;
  o.profile = profile;
  o.head = HeadSpec{head, classes};
  return make_mbconv_seed(o);
}

inline SearchSpace desk_space(const ArchDescriptor& seed, const std::string& profile = "seg", int hw = 16) {
  return build_mbconv_space(seed, desk_profile(table_profile(profile), 4, 0.5), hw, hw);
}

// Two searchable stages, a few layers each; cheap enough to enumerate paths.
inline SearchSpace tiny_space(int hw = 8, HeadKind head = HeadKind::kDense) {
  DeskSeedOptions o;
  o.stage_count = 2;
  o.depth_scale = 0.5;
  o.head = HeadSpec{head, 3};
  const ArchDescriptor seed = make_mbconv_seed(o);
  return build_mbconv_space(seed, TaskProfile{"tiny", {2, 2}, {2, 1}}, hw, hw);
}

inline std::vector<std::vector<double>> random_alpha(const SearchSpace& space, std::mt19937_64& rng,
                                                     double scale = 2.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<std::vector<double>> a;
  for (const LayerRef& r : space.searchable_layers()) {
    std::vector<double> v(space.candidates(r).ops.size());
    for (double& x : v) x = d(rng);
    a.push_back(std::move(v));
  }
  return a;
}

inline std::vector<std::size_t> random_choices(const SearchSpace& space, std::mt19937_64& rng) {
  std::vector<std::size_t> c;
  for (const LayerRef& r : space.searchable_layers())
    c.push_back(std::uniform_int_distribution<std::size_t>(0, space.candidates(r).ops.size() - 1)(rng));
  return c;
}

}  // namespace fna::fixture
