#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "fna/network.hpp"

namespace fna {

struct SuperNet;

inline constexpr std::string_view kCheckpointVersion = "fna_ckpt_v1";

// Container layout: 8-byte magic "FNACKPT1", u64 little-endian manifest
// length, JSON manifest, then the raw little-endian f64 tensor blobs. Each
// manifest entry carries name, shape, byte offset, byte length and FNV-1a hash.
struct Checkpoint {
  ParamMap params;
  std::vector<std::vector<double>> alpha;
  std::string rng_state;  // textual engine state; empty when not stored
  bool bn_updates = true;
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint supernet_checkpoint(const SuperNet& net);
// Rebuilds a super network (space stored in meta) with params, alpha and rng.
SuperNet supernet_from_checkpoint(const Checkpoint& ckpt);

std::string rng_state(const std::mt19937_64& rng);
void set_rng_state(std::mt19937_64& rng, const std::string& state);

}  // namespace fna
