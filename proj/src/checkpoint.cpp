#include "fna/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "fna/error.hpp"
#include "fna/supernet.hpp"

namespace fna {

namespace {

constexpr char kMagic[8] = {'F', 'N', 'A', 'C', 'K', 'P', 'T', '1'};

std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  std::uint64_t r = 0;
  for (int i = 0; i < 8; ++i) r = (r << 8) | ((v >> (8 * i)) & 0xff);
  return r;
}

void append_u64(std::string& out, std::uint64_t v) {
  v = to_le(v);
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

std::uint64_t read_u64(const char* p) {
  std::uint64_t v;
  std::memcpy(&v, p, 8);
  return to_le(v);
}

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

void append_blob(std::string& blob, std::span<const double> values) {
  for (double d : values) append_u64(blob, std::bit_cast<std::uint64_t>(d));
}

std::vector<double> decode_blob(const char* p, std::size_t count) {
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = std::bit_cast<double>(read_u64(p + 8 * i));
  return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::string blob;
  nlohmann::ordered_json entries = nlohmann::ordered_json::array();
  auto add = [&](const std::string& name, const Shape& shape, std::span<const double> values) {
    const std::size_t offset = blob.size();
    append_blob(blob, values);
    nlohmann::ordered_json e;
    e["name"] = name;
    e["shape"] = shape;
    e["offset"] = offset;
    e["bytes"] = blob.size() - offset;
    e["fnv1a"] = hex64(fnv1a(blob.data() + offset, blob.size() - offset));
    e["requires_grad"] = false;
    entries.push_back(std::move(e));
    return entries.size() - 1;
  };
  for (const auto& [name, t] : ckpt.params) {
    const std::size_t i = add(name, t.shape(), t.data());
    entries[i]["requires_grad"] = t.requires_grad();
  }
  nlohmann::ordered_json alpha = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < ckpt.alpha.size(); ++i) {
    const std::size_t e = add("alpha." + std::to_string(i), {ckpt.alpha[i].size()}, ckpt.alpha[i]);
    alpha.push_back(entries[e]);
    entries.erase(e);
  }
  nlohmann::ordered_json manifest;
  manifest["version"] = std::string(kCheckpointVersion);
  manifest["dtype"] = "f64le";
  manifest["blob_bytes"] = blob.size();
  manifest["tensors"] = std::move(entries);
  manifest["alpha"] = std::move(alpha);
  manifest["rng_state"] = ckpt.rng_state;
  manifest["bn_updates"] = ckpt.bn_updates;
  manifest["meta"] = ckpt.meta;
  const std::string text = manifest.dump(1);

  std::string out(kMagic, 8);
  append_u64(out, text.size());
  out += text;
  out += blob;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open '" + path.string() + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw CheckpointError("write to '" + path.string() + "' failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const std::string where = "checkpoint '" + path.string() + "': ";
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw CheckpointError(where + "not an fna checkpoint (bad magic or truncated header)");
  const std::uint64_t mlen = read_u64(bytes.data() + 8);
  if (mlen > bytes.size() - 16) throw CheckpointError(where + "truncated manifest");
  nlohmann::ordered_json manifest;
  try {
    manifest = nlohmann::ordered_json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(mlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(where + "corrupted manifest: " + e.what());
  }
  try {
    const std::string version = manifest.at("version").get<std::string>();
    if (version != kCheckpointVersion)
      throw CheckpointError(where + "version '" + version + "' is not supported (expected '" +
                            std::string(kCheckpointVersion) + "')");
    if (manifest.at("dtype").get<std::string>() != "f64le") throw CheckpointError(where + "unsupported dtype");
    const std::size_t blob_start = 16 + mlen;
    const std::uint64_t blob_bytes = manifest.at("blob_bytes").get<std::uint64_t>();
    if (bytes.size() - blob_start < blob_bytes)
      throw CheckpointError(where + "truncated: expected " + std::to_string(blob_bytes) + " blob bytes, found " +
                            std::to_string(bytes.size() - blob_start));
    if (bytes.size() - blob_start > blob_bytes) throw CheckpointError(where + "trailing bytes after tensor data");
    auto read_entry = [&](const nlohmann::ordered_json& e) {
      const std::string name = e.at("name").get<std::string>();
      const Shape shape = e.at("shape").get<Shape>();
      const std::uint64_t offset = e.at("offset").get<std::uint64_t>();
      const std::uint64_t nbytes = e.at("bytes").get<std::uint64_t>();
      if (nbytes != shape_numel(shape) * 8 || offset > blob_bytes || nbytes > blob_bytes - offset)
        throw CheckpointError(where + "entry '" + name + "' has an inconsistent extent");
      const char* p = bytes.data() + blob_start + offset;
      if (hex64(fnv1a(p, nbytes)) != e.at("fnv1a").get<std::string>())
        throw CheckpointError(where + "checksum mismatch for '" + name + "'");
      return std::pair{name, Tensor::from(shape, decode_blob(p, shape_numel(shape)), e.value("requires_grad", false))};
    };
    Checkpoint ckpt;
    for (const auto& e : manifest.at("tensors")) {
      auto [name, t] = read_entry(e);
      if (!ckpt.params.emplace(name, t).second) throw CheckpointError(where + "duplicate tensor '" + name + "'");
    }
    for (const auto& e : manifest.at("alpha")) {
      auto [name, t] = read_entry(e);
      ckpt.alpha.emplace_back(t.data().begin(), t.data().end());
    }
    ckpt.rng_state = manifest.at("rng_state").get<std::string>();
    ckpt.bn_updates = manifest.at("bn_updates").get<bool>();
    ckpt.meta = manifest.at("meta");
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(where + "corrupted manifest: " + e.what());
  }
}

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void set_rng_state(std::mt19937_64& rng, const std::string& state) {
  std::istringstream is(state);
  is >> rng;
  if (!is) throw CheckpointError("invalid rng state");
}

Checkpoint supernet_checkpoint(const SuperNet& net) {
  Checkpoint ckpt;
  ckpt.params = net.params;
  ckpt.alpha = alpha_values(net);
  ckpt.rng_state = rng_state(net.rng);
  ckpt.bn_updates = net.bn_updates;
  ckpt.meta["kind"] = "supernet";
  ckpt.meta["space"] = nlohmann::ordered_json::parse(serialize_space(net.space));
  return ckpt;
}

SuperNet supernet_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.meta.value("kind", "") != "supernet" || !ckpt.meta.contains("space"))
    throw CheckpointError("checkpoint does not hold a super network");
  SuperNet net = make_supernet(deserialize_space(ckpt.meta["space"].dump()), clone_params(ckpt.params), 0);
  set_alpha(net, ckpt.alpha);
  if (!ckpt.rng_state.empty()) set_rng_state(net.rng, ckpt.rng_state);
  set_bn_updates(net, ckpt.bn_updates);
  return net;
}

}  // namespace fna
