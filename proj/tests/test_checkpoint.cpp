#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "fixtures.hpp"
#include "fna/checkpoint.hpp"
#include "fna/error.hpp"
#include "fna/supernet.hpp"
#include "oracles.hpp"

using namespace fna;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "fna_test_checkpoint";
  fs::create_directories(dir);
  return dir / name;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

SuperNet trained_looking_net() {
  const SearchSpace space = fixture::tiny_space();
  SuperNet net = make_supernet(space, init_supernet_params(space, 3), 17);
  std::mt19937_64 rng(4);
  set_alpha(net, fixture::random_alpha(space, rng));
  for (auto& [name, t] : net.params)
    for (double& v : t.mutable_data()) v += std::normal_distribution<double>(0.0, 0.05)(rng);
  for (int i = 0; i < 7; ++i) sample_path(net);
  return net;
}

}  // namespace

TEST_CASE("super network round trip is bitwise") {
  SuperNet net = trained_looking_net();
  set_bn_updates(net, false);
  const fs::path p = scratch("roundtrip.ckpt");
  save_checkpoint(p, supernet_checkpoint(net));
  SuperNet back = supernet_from_checkpoint(load_checkpoint(p));

  CHECK(serialize_space(back.space) == serialize_space(net.space));
  CHECK(back.bn_updates == false);
  CHECK(alpha_values(back) == alpha_values(net));
  REQUIRE(back.params.size() == net.params.size());
  for (const auto& [name, t] : net.params) {
    const Tensor& u = back.params.at(name);
    CHECK(u.shape() == t.shape());
    CHECK(std::equal(t.data().begin(), t.data().end(), u.data().begin()));
    CHECK(u.requires_grad() == t.requires_grad());
  }
  std::mt19937_64 rng(5);
  const Tensor x = oracle::random_tensor({2, 1, 8, 8}, rng);
  const Tensor a = supernet_forward(net, x, RunMode{BNMode::kEval});
  const Tensor b = supernet_forward(back, x, RunMode{BNMode::kEval});
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  for (int i = 0; i < 100; ++i) CHECK(sample_path(net) == sample_path(back));
  // Saving the reloaded network reproduces the file byte for byte.
  const fs::path q = scratch("roundtrip2.ckpt");
  save_checkpoint(q, supernet_checkpoint(back));
  SuperNet again = supernet_from_checkpoint(load_checkpoint(p));
  save_checkpoint(q, supernet_checkpoint(again));
  CHECK(read_bytes(p) == read_bytes(q));
}

TEST_CASE("plain parameter checkpoints") {
  const ArchDescriptor seed = fixture::desk_seed();
  Checkpoint c;
  c.params = init_params(seed, 9);
  c.meta["arch"] = nlohmann::ordered_json::parse(serialize_arch(seed));
  const fs::path p = scratch("plain.ckpt");
  save_checkpoint(p, c);
  const Checkpoint back = load_checkpoint(p);
  CHECK(back.alpha.empty());
  CHECK(back.rng_state.empty());
  CHECK(back.meta["arch"] == c.meta["arch"]);
  for (const auto& [name, t] : c.params)
    CHECK(std::equal(t.data().begin(), t.data().end(), back.params.at(name).data().begin()));
  CHECK_THROWS_AS(supernet_from_checkpoint(back), CheckpointError);
}

TEST_CASE("damaged checkpoints are rejected") {
  const SuperNet net = trained_looking_net();
  const fs::path p = scratch("good.ckpt");
  save_checkpoint(p, supernet_checkpoint(net));
  const std::string good = read_bytes(p);
  const fs::path bad = scratch("bad.ckpt");

  // Flip one payload byte.
  std::string flipped = good;
  flipped[flipped.size() - 3] ^= 0x10;
  write_bytes(bad, flipped);
  CHECK_THROWS_WITH_AS(load_checkpoint(bad), doctest::Contains("checksum"), CheckpointError);

  write_bytes(bad, good.substr(0, good.size() - 8));
  CHECK_THROWS_WITH_AS(load_checkpoint(bad), doctest::Contains("truncated"), CheckpointError);
  write_bytes(bad, good.substr(0, 10));
  CHECK_THROWS_AS(load_checkpoint(bad), CheckpointError);
  write_bytes(bad, good + "x");
  CHECK_THROWS_WITH_AS(load_checkpoint(bad), doctest::Contains("trailing"), CheckpointError);

  std::string magic = good;
  magic[0] = 'X';
  write_bytes(bad, magic);
  CHECK_THROWS_WITH_AS(load_checkpoint(bad), doctest::Contains("magic"), CheckpointError);

  std::string version = good;
  const auto at = version.find(std::string(kCheckpointVersion));
  REQUIRE(at != std::string::npos);
  version[at + kCheckpointVersion.size() - 1] = '9';
  write_bytes(bad, version);
  CHECK_THROWS_WITH_AS(load_checkpoint(bad), doctest::Contains("version"), CheckpointError);

  std::string manifest = good;
  manifest[20] = '}';
  write_bytes(bad, manifest);
  CHECK_THROWS_AS(load_checkpoint(bad), CheckpointError);

  CHECK_THROWS_AS(load_checkpoint(scratch("missing.ckpt")), CheckpointError);
}

TEST_CASE("rng state round trip") {
  std::mt19937_64 a(123);
  for (int i = 0; i < 10; ++i) a();
  std::mt19937_64 b;
  set_rng_state(b, rng_state(a));
  for (int i = 0; i < 100; ++i) CHECK(a() == b());
  CHECK_THROWS_AS(set_rng_state(b, "not a state"), CheckpointError);
}
