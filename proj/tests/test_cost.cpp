#include <doctest.h>

#include <cmath>
#include <random>

#include <json.hpp>

#include "fixtures.hpp"
#include "fna/cost.hpp"
#include "fna/error.hpp"
#include "fna/network.hpp"
#include "oracles.hpp"

using namespace fna;

namespace {

// Multiply-adds of one block by enumerating the loop nest of each conv.
long long block_madds_oracle(const OpSpec& op, int h, int w) {
  long long total = 0;
  int ch = h, cw = w;
  for (const ConvUnit& u : op_conv_units(op)) {
    const int in_h = u.name == "shortcut" ? h : ch;
    const int in_w = u.name == "shortcut" ? w : cw;
    total += oracle::conv2d_count_madds(u.in_channels, in_h, in_w, u.out_channels, u.kernel, u.stride, u.kernel / 2,
                                        u.groups);
    if (u.name != "shortcut") {
      ch = (in_h + 2 * (u.kernel / 2) - u.kernel) / u.stride + 1;
      cw = (in_w + 2 * (u.kernel / 2) - u.kernel) / u.stride + 1;
    }
  }
  return total;
}

}  // namespace

TEST_CASE("conv MAdds match the loop-nest count") {
  CHECK(conv_madds({8, 8}, 3, 16, 32, 1) == 294912);
  CHECK(oracle::conv2d_count_madds(16, 8, 8, 32, 3, 1, 1, 1) == 294912);
  CHECK(conv_madds({8, 8}, 3, 16, 32, 2) == 147456);
  CHECK(oracle::conv2d_count_madds(16, 8, 8, 32, 3, 1, 1, 2) == 147456);
  CHECK(op_madds(identity_op(16), {8, 8}) == 0);
  CHECK(op_madds(plain_conv_op(3, 1, 16, 32), {8, 8}) == 294912);
}

TEST_CASE("block MAdds match the per-conv enumeration") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> res(3, 12);
  for (int t = 0; t < 60; ++t) {
    const int h = res(rng), w = res(rng);
    const int k = 3 + 2 * (t % 3);
    const int stride = 1 + t % 2;
    const OpSpec ops[] = {
        mbconv_op(k, 1 + (t % 2) * 5, stride, 4, 6),
        mbconv_op(k, 3, 1, 6, 6),
        resnet_op(OpKind::kResBasic, resnet_catalog()[t % 5].kernel, resnet_catalog()[t % 5].groups, stride, 16, 16),
        resnet_op(OpKind::kResBottleneck, resnet_catalog()[t % 5].kernel, resnet_catalog()[t % 5].groups, stride, 16,
                  32),
        plain_conv_op(k, stride, 3, 5),
    };
    for (const OpSpec& op : ops) CHECK(op_madds(op, {h, w}) == block_madds_oracle(op, h, w));
  }
}

TEST_CASE("expected layer cost") {
  const std::vector<double> costs{100.0, 300.0};
  CHECK(expected_layer_cost(costs, std::vector<double>{0.0, 0.0}) == doctest::Approx(200.0).epsilon(1e-15));
  CHECK(expected_layer_cost(costs, std::vector<double>{1e9, -1e9}) == doctest::Approx(100.0).epsilon(1e-12));
  // softmax([0, ln 3]) = [1/4, 3/4]
  CHECK(expected_layer_cost(costs, std::vector<double>{0.0, std::log(3.0)}) == doctest::Approx(250.0).epsilon(1e-14));
  CHECK_THROWS_AS(expected_layer_cost(costs, std::vector<double>{0.0}), ShapeError);

  std::mt19937_64 rng(4);
  std::normal_distribution<double> d(0.0, 3.0);
  std::uniform_real_distribution<double> c(0.0, 1e6);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> cs(5), a(5);
    for (auto& x : cs) x = c(rng);
    for (auto& x : a) x = d(rng);
    const double e = expected_layer_cost(cs, a);
    CHECK(e >= *std::min_element(cs.begin(), cs.end()) - 1e-6);
    CHECK(e <= *std::max_element(cs.begin(), cs.end()) + 1e-6);
    // Raising the costliest op's alpha never lowers the expectation.
    const std::size_t top = static_cast<std::size_t>(std::max_element(cs.begin(), cs.end()) - cs.begin());
    a[top] += 0.5;
    CHECK(expected_layer_cost(cs, a) >= e - 1e-9);
  }
}

TEST_CASE("network cost of a space") {
  const SearchSpace space = fixture::tiny_space();
  const CostTable table = build_cost_table(space);
  const auto refs = space.searchable_layers();
  REQUIRE(table.layers.size() == refs.size());
  for (std::size_t i = 0; i < refs.size(); ++i) {
    REQUIRE(table.layers[i].size() == space.candidates(refs[i]).ops.size());
    for (std::size_t c = 0; c < table.layers[i].size(); ++c) {
      CHECK(table.layers[i][c] >= 0.0);
      if (space.candidates(refs[i]).ops[c].is_identity()) CHECK(table.layers[i][c] == 0.0);
    }
  }

  // Uniform alpha: expectation equals the mean over every single path.
  std::vector<std::size_t> idx(refs.size(), 0);
  double sum = 0.0;
  std::size_t paths = 0;
  while (true) {
    sum += path_cost(table, idx);
    ++paths;
    std::size_t d = 0;
    while (d < idx.size() && ++idx[d] == table.layers[d].size()) idx[d++] = 0;
    if (d == idx.size()) break;
  }
  std::vector<std::vector<double>> uniform;
  for (const auto& l : table.layers) uniform.emplace_back(l.size(), 0.0);
  CHECK(paths > 100);
  CHECK(network_cost(table, uniform) == doctest::Approx(sum / static_cast<double>(paths)).epsilon(1e-12));

  // Saturating one op per layer gives that path's cost.
  std::mt19937_64 rng(9);
  const auto pick = fixture::random_choices(space, rng);
  std::vector<std::vector<double>> sat = uniform;
  for (std::size_t i = 0; i < sat.size(); ++i) sat[i][pick[i]] = 1e9;
  CHECK(network_cost(table, sat) == doctest::Approx(path_cost(table, pick)).epsilon(1e-12));
}

TEST_CASE("derived architecture cost equals the table lookup") {
  const SearchSpace space = fixture::desk_space(fixture::desk_seed());
  const CostTable table = build_cost_table(space);
  const auto refs = space.searchable_layers();
  double lo = table.fixed_cost, hi = table.fixed_cost;
  for (const auto& l : table.layers) {
    lo += *std::min_element(l.begin(), l.end());
    hi += *std::max_element(l.begin(), l.end());
  }
  std::mt19937_64 rng(21);
  for (int t = 0; t < 100; ++t) {
    const auto alpha = fixture::random_alpha(space, rng);
    const auto choice = argmax_choices(space, alpha);
    double lookup = table.fixed_cost;
    std::size_t stage = refs.empty() ? 0 : refs[0].stage;
    bool cut = false;
    for (std::size_t i = 0; i < refs.size(); ++i) {
      if (refs[i].stage != stage) {
        stage = refs[i].stage;
        cut = false;
      }
      cut = cut || space.candidates(refs[i]).ops[choice[i]].is_identity();
      if (!cut) lookup += table.layers[i][choice[i]];
    }
    const ArchDescriptor a = derive_architecture(space, alpha);
    const double exact = static_cast<double>(network_cost(a, {space.input_height, space.input_width}));
    CHECK(exact == lookup);
    CHECK(exact >= lo);
    CHECK(exact <= hi);
  }
}

TEST_CASE("forward-pass multiply-adds equal the cost model") {
  std::mt19937_64 rng(31);
  for (const char* prof : {"seg", "det"}) {
    for (HeadKind hk : {HeadKind::kClassification, HeadKind::kDense}) {
      const ArchDescriptor seed = fixture::desk_seed(prof, hk, 3);
      const SearchSpace space = fixture::desk_space(seed, prof);
      for (int t = 0; t < 5; ++t) {
        const ArchDescriptor a = arch_from_choices(space, fixture::random_choices(space, rng));
        ParamMap p = init_params(a, 1);
        const Tensor x = oracle::random_tensor({1, 1, 16, 16}, rng);
        MaddsCounter counter;
        {
          NoGradGuard g;
          network_forward(a, p, x, RunMode{BNMode::kEval});
        }
        CHECK(counter.total() == network_cost(a, {16, 16}));
      }
    }
  }
  // The counter itself agrees with the loop-nest enumeration.
  for (int t = 0; t < 20; ++t) {
    const int k = 1 + 2 * (t % 4), stride = 1 + t % 2, groups = 1 + t % 2;
    const Tensor x = oracle::random_tensor({2, 4, 9, 7}, rng);
    const Tensor w = oracle::random_tensor({6, static_cast<std::size_t>(4 / groups), static_cast<std::size_t>(k),
                                            static_cast<std::size_t>(k)},
                                           rng);
    MaddsCounter counter;
    conv2d(x, ConvParams{w, stride, k / 2, 1, groups});
    const long long per_sample = oracle::conv2d_count_madds(4, 9, 7, 6, k, stride, k / 2, groups);
    CHECK(counter.total() == 2 * per_sample);
  }
}

TEST_CASE("doubling the resolution quadruples stride-free MAdds") {
  ArchDescriptor a;
  a.stem = plain_conv_op(3, 1, 1, 4);
  a.stages.push_back(ArchStage{StageSpec{8, 2, 1, true}, {mbconv_op(5, 3, 1, 4, 8), mbconv_op(7, 6, 1, 8, 8)}});
  a.head = HeadSpec{HeadKind::kDense, 3};
  CHECK(network_cost(a, {32, 32}) == 4 * network_cost(a, {16, 16}));
  CHECK(network_cost(a, {16, 32}) == 2 * network_cost(a, {16, 16}));
}

TEST_CASE("identity-heavy architectures cost less") {
  const SearchSpace space = fixture::desk_space(fixture::desk_seed());
  const auto refs = space.searchable_layers();
  std::vector<std::size_t> full(refs.size(), 1), shallow(refs.size(), 1);
  for (std::size_t i = 0; i < refs.size(); ++i)
    if (refs[i].layer > 0) shallow[i] = space.candidates(refs[i]).ops.size() - 1;
  const Resolution r{16, 16};
  CHECK(network_cost(arch_from_choices(space, shallow), r) < network_cost(arch_from_choices(space, full), r));
}

TEST_CASE("cost report totals") {
  const SearchSpace space = fixture::tiny_space();
  const CostTable table = build_cost_table(space);
  std::mt19937_64 rng(8);
  const auto alpha = fixture::random_alpha(space, rng);
  const auto doc = nlohmann::json::parse(cost_report(space, table, &alpha));
  CHECK(doc["expected_madds"].get<double>() == network_cost(table, alpha));
  CHECK(doc["layers"].size() == table.layers.size());
  CHECK(doc["min_path_madds"].get<double>() <= doc["expected_madds"].get<double>());
  CHECK(doc["max_path_madds"].get<double>() >= doc["expected_madds"].get<double>());
}
