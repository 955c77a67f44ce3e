#include <doctest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "fna/error.hpp"
#include "fna/remap.hpp"
#include "fna/supernet.hpp"
#include "oracles.hpp"

using namespace fna;

namespace {

SuperNet tiny_net(std::uint64_t seed = 1, HeadKind head = HeadKind::kDense) {
  const SearchSpace space = fixture::tiny_space(8, head);
  return make_supernet(space, init_supernet_params(space, seed), seed);
}

// Choices in canonical form: once Identity is picked, the rest of the stage is Identity too.
std::vector<std::size_t> canonical_choices(const SearchSpace& space, std::mt19937_64& rng) {
  auto c = fixture::random_choices(space, rng);
  const auto refs = space.searchable_layers();
  bool cut = false;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (i > 0 && refs[i].stage != refs[i - 1].stage) cut = false;
    const auto& ops = space.candidates(refs[i]).ops;
    if (cut) c[i] = ops.size() - 1;
    cut = cut || ops[c[i]].is_identity();
  }
  return c;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double d = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) d = std::max(d, std::abs(a.data()[i] - b.data()[i]));
  return d;
}

}  // namespace

TEST_CASE("mixed layer is the softmax-weighted candidate sum") {
  SuperNet net = tiny_net();
  std::mt19937_64 rng(2);
  const auto refs = net.space.searchable_layers();
  const RunMode mode{BNMode::kEval};
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& ops = net.space.candidates(refs[i]).ops;
    const int c_in = ops.front().in_channels;
    const Tensor x = oracle::random_tensor({2, static_cast<std::size_t>(c_in), 4, 4}, rng);
    std::vector<Tensor> outs;
    for (std::size_t c = 0; c < ops.size(); ++c)
      outs.push_back(op_forward(ops[c], supernet_prefix(net.space, refs[i].stage, refs[i].layer, c), net.params, x, mode));

    // Zero alpha gives the plain average.
    const Tensor avg = mixed_forward(net, i, x, mode);
    for (std::size_t e = 0; e < avg.numel(); ++e) {
      double want = 0.0;
      for (const Tensor& o : outs) want += o.data()[e];
      CHECK(avg.data()[e] == doctest::Approx(want / static_cast<double>(outs.size())).epsilon(1e-12));
    }
    // alpha = [0, ln 3, -inf-ish...] puts 1/4 and 3/4 on the first two.
    std::vector<double> a(ops.size(), -800.0);
    a[0] = 0.0;
    a[1] = std::log(3.0);
    std::copy(a.begin(), a.end(), net.alpha[i].mutable_data().begin());
    const Tensor mix = mixed_forward(net, i, x, mode);
    for (std::size_t e = 0; e < mix.numel(); ++e)
      CHECK(mix.data()[e] == doctest::Approx(0.25 * outs[0].data()[e] + 0.75 * outs[1].data()[e]).epsilon(1e-12));
  }
  CHECK_THROWS_AS(mixed_forward(net, refs.size(), Tensor::zeros({1, 1, 4, 4}), mode), ShapeError);
}

TEST_CASE("alpha gradients match finite differences") {
  SuperNet net = tiny_net(3);
  std::mt19937_64 rng(4);
  set_alpha(net, fixture::random_alpha(net.space, rng, 0.7));
  const Tensor x = oracle::random_tensor({2, 1, 8, 8}, rng);
  const RunMode mode{BNMode::kEval};
  for (std::size_t i = 0; i < net.alpha.size(); ++i) {
    const double err =
        oracle::gradient_relative_error(net.alpha[i], [&] { return oracle::random_projection(supernet_forward(net, x, mode), 5); });
    CHECK(err < 1e-6);
  }
  // Through batch-statistics BN; a smaller step keeps clear of ReLU6 kinks.
  const double err = oracle::gradient_relative_error(
      net.alpha[0], [&] { return oracle::random_projection(supernet_forward(net, x, RunMode{BNMode::kBatchStats}), 6); },
      1e-6);
  CHECK(err < 1e-6);
}

TEST_CASE("expected cost and its gradient") {
  SuperNet net = tiny_net(5);
  std::mt19937_64 rng(6);
  for (int t = 0; t < 20; ++t) {
    const auto a = fixture::random_alpha(net.space, rng);
    set_alpha(net, a);
    for (Tensor& al : net.alpha) al.zero_grad();
    Tensor c = expected_cost(net);
    CHECK(c.item() == doctest::Approx(network_cost(net.costs, a)).epsilon(1e-12));
    c.backward();
    // d E / d alpha_c = p_c (cost_c - E_layer)
    for (std::size_t i = 0; i < a.size(); ++i) {
      const auto& cs = net.costs.layers[i];
      double m = -1e300, z = 0.0, e = 0.0;
      for (double v : a[i]) m = std::max(m, v);
      for (double v : a[i]) z += std::exp(v - m);
      for (std::size_t k = 0; k < cs.size(); ++k) e += std::exp(a[i][k] - m) / z * cs[k];
      for (std::size_t k = 0; k < cs.size(); ++k) {
        const double p = std::exp(a[i][k] - m) / z;
        CHECK(net.alpha[i].grad()[k] == doctest::Approx(p * (cs[k] - e)).epsilon(1e-9).scale(1.0));
      }
    }
  }
}

TEST_CASE("path sampling follows softmax(alpha)") {
  SuperNet net = tiny_net(7);
  std::mt19937_64 rng(8);
  set_alpha(net, fixture::random_alpha(net.space, rng, 1.0));
  const auto a = alpha_values(net);
  const int draws = 10000;
  std::vector<std::vector<int>> counts;
  for (const auto& l : a) counts.emplace_back(l.size(), 0);
  for (int d = 0; d < draws; ++d) {
    const auto path = sample_path(net);
    REQUIRE(path.size() == a.size());
    for (std::size_t i = 0; i < path.size(); ++i) ++counts[i][path[i]];
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    double z = 0.0;
    for (double v : a[i]) z += std::exp(v);
    for (std::size_t c = 0; c < a[i].size(); ++c)
      CHECK(std::abs(counts[i][c] / static_cast<double>(draws) - std::exp(a[i][c]) / z) <= 0.02);
  }
  // Same seed, same sequence.
  SuperNet n1 = tiny_net(9), n2 = tiny_net(9);
  set_alpha(n1, a);
  set_alpha(n2, a);
  for (int d = 0; d < 50; ++d) CHECK(sample_path(n1) == sample_path(n2));
}

TEST_CASE("path forward equals the derived network with collected weights") {
  for (HeadKind head : {HeadKind::kDense, HeadKind::kClassification}) {
    SuperNet net = tiny_net(10, head);
    std::mt19937_64 rng(11);
    for (int t = 0; t < 15; ++t) {
      const auto choice = canonical_choices(net.space, rng);
      const ArchDescriptor arch = arch_from_choices(net.space, choice);
      ParamMap p = remap_supernet_to_target(net.space, net.params, arch).params;
      const Tensor x = oracle::random_tensor({2, 1, 8, 8}, rng);
      const RunMode mode{BNMode::kEval};
      const Tensor a = path_forward(net, choice, x, mode);
      const Tensor b = network_forward(arch, p, x, mode);
      CHECK(max_abs_diff(a, b) <= 1e-6);
      // Saturated alpha makes the mixture collapse onto the same path.
      std::vector<std::vector<double>> sat;
      for (std::size_t i = 0; i < choice.size(); ++i) {
        sat.emplace_back(net.alpha[i].numel(), -800.0);
        sat.back()[choice[i]] = 0.0;
      }
      set_alpha(net, sat);
      CHECK(max_abs_diff(supernet_forward(net, x, mode), a) <= 1e-6);
    }
    CHECK_THROWS_AS(path_forward(net, {0}, Tensor::zeros({1, 1, 8, 8}), RunMode{}), ShapeError);
  }
}

TEST_CASE("unselected candidates receive no gradient") {
  SuperNet net = tiny_net(12);
  std::mt19937_64 rng(13);
  const auto refs = net.space.searchable_layers();
  const auto path = canonical_choices(net.space, rng);
  const Tensor x = oracle::random_tensor({2, 1, 8, 8}, rng);
  for (auto& [n, t] : net.params) t.zero_grad();
  oracle::random_projection(path_forward(net, path, x, RunMode{BNMode::kTrain}), 1).backward();
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& ops = net.space.candidates(refs[i]).ops;
    for (std::size_t c = 0; c < ops.size(); ++c) {
      const std::string prefix = supernet_prefix(net.space, refs[i].stage, refs[i].layer, c) + ".";
      for (const auto& [name, t] : net.params) {
        if (!name.starts_with(prefix) || is_running_stat(name)) continue;
        double g = 0.0;
        if (t.has_grad())
          for (double v : t.grad()) g += std::abs(v);
        if (c != path[i]) CHECK(g == 0.0);
      }
    }
    CHECK_FALSE(net.alpha[i].has_grad());
  }
  CHECK(net.params.at("stem.conv.weight").has_grad());
}

TEST_CASE("BN updates can be frozen") {
  SuperNet net = tiny_net(14);
  std::mt19937_64 rng(15);
  const Tensor x = oracle::random_tensor({4, 1, 8, 8}, rng);
  CHECK(train_bn_mode(net) == BNMode::kTrain);
  const std::vector<double> before(net.params.at("stem.conv.bn.running_mean").data().begin(),
                                   net.params.at("stem.conv.bn.running_mean").data().end());
  supernet_forward(net, x, RunMode{train_bn_mode(net)});
  const auto& rm = net.params.at("stem.conv.bn.running_mean");
  CHECK_FALSE(std::equal(before.begin(), before.end(), rm.data().begin()));

  set_bn_updates(net, false);
  CHECK(train_bn_mode(net) == BNMode::kFrozen);
  CHECK_FALSE(net.params.at("stem.conv.bn.gamma").requires_grad());
  CHECK(net.params.at("stem.conv.weight").requires_grad());
  const ParamMap snap = clone_params(net.params);
  for (auto& [n, t] : net.params) t.zero_grad();
  oracle::random_projection(supernet_forward(net, x, RunMode{train_bn_mode(net)}), 2).backward();
  for (const auto& [name, t] : net.params) {
    if (name.find(".bn.") == std::string::npos) continue;
    CHECK(std::equal(t.data().begin(), t.data().end(), snap.at(name).data().begin()));
    if (!is_running_stat(name)) CHECK_FALSE(t.has_grad());
  }
  // Frozen mode uses running statistics, so it matches eval exactly.
  CHECK(max_abs_diff(supernet_forward(net, x, RunMode{BNMode::kFrozen}), supernet_forward(net, x, RunMode{BNMode::kEval})) ==
        0.0);
  set_bn_updates(net, true);
  CHECK(net.params.at("stem.conv.bn.gamma").requires_grad());
}

TEST_CASE("weight tensors exclude running statistics") {
  const SuperNet net = tiny_net(16);
  std::size_t stats = 0;
  for (const auto& [name, t] : net.params) stats += is_running_stat(name);
  CHECK(weight_tensors(net).size() + stats == net.params.size());
  for (const Tensor& t : weight_tensors(net)) CHECK(t.requires_grad());
  CHECK(stats > 0);
}
