#include "fna/arch.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>

#include <json.hpp>

#include "fna/cost.hpp"
#include "fna/error.hpp"

namespace fna {

namespace {

using ordered_json = nlohmann::ordered_json;

std::string describe(const OpSpec& op) {
  return std::string(op_kind_name(op.kind)) + "(" + op.label() + ", " + std::to_string(op.in_channels) + "->" +
         std::to_string(op.out_channels) + ", s" + std::to_string(op.stride) + ")";
}

struct TableRows {
  const char* name;
  std::vector<int> layers;
  std::vector<int> strides;
};

// Six SBlock rows; the stem and MBConv(k3e1) rows are fixed and not listed.
const std::vector<TableRows>& table_rows() {
  static const std::vector<TableRows> rows = {
      {"seg", {4, 4, 6, 6, 4, 1}, {2, 2, 2, 1, 1, 1}},
      {"det", {4, 4, 4, 4, 4, 1}, {2, 2, 2, 1, 2, 1}},
      {"pose", {4, 4, 4, 4, 4, 1}, {2, 2, 2, 1, 2, 1}},
      {"nas", {4, 4, 4, 4, 4, 1}, {2, 2, 2, 1, 2, 1}},
  };
  return rows;
}

// MobileNetV2 channel widths and layer counts of the same six rows.
constexpr int kMbv2Channels[6] = {24, 32, 64, 96, 160, 320};
constexpr int kMbv2Layers[6] = {2, 3, 4, 3, 3, 1};
constexpr int kMbv2Stem = 32;
constexpr int kMbv2FirstBlock = 16;

int scaled_width(int channels, int divisor, int minimum) { return std::max(minimum, channels / divisor); }

int scaled_depth(int layers, double scale) {
  return std::max(1, static_cast<int>(std::ceil(static_cast<double>(layers) * scale - 1e-9)));
}

}  // namespace

std::string_view op_kind_name(OpKind kind) {
  switch (kind) {
    case OpKind::kMBConv: return "MBConv";
    case OpKind::kResBasic: return "ResBasic";
    case OpKind::kResBottleneck: return "ResBottleneck";
    case OpKind::kPlainConv: return "PlainConv";
    case OpKind::kIdentity: return "Identity";
  }
  return "?";
}

OpKind parse_op_kind(std::string_view name) {
  for (OpKind k : {OpKind::kMBConv, OpKind::kResBasic, OpKind::kResBottleneck, OpKind::kPlainConv, OpKind::kIdentity})
    if (op_kind_name(k) == name) return k;
  throw ParseError("unknown op kind '" + std::string(name) + "'");
}

std::string OpSpec::label() const {
  switch (kind) {
    case OpKind::kMBConv: return "k" + std::to_string(kernel) + "e" + std::to_string(expansion);
    case OpKind::kResBasic:
    case OpKind::kResBottleneck: return "k" + std::to_string(kernel) + "g" + std::to_string(groups);
    case OpKind::kPlainConv: return "conv" + std::to_string(kernel);
    case OpKind::kIdentity: return "identity";
  }
  return "?";
}

OpSpec identity_op(int channels) {
  OpSpec op;
  op.kind = OpKind::kIdentity;
  op.kernel = 0;
  op.in_channels = channels;
  op.out_channels = channels;
  return op;
}

OpSpec mbconv_op(int kernel, int expansion, int stride, int in_channels, int out_channels) {
  return OpSpec{OpKind::kMBConv, kernel, expansion, 1, stride, in_channels, out_channels};
}

OpSpec resnet_op(OpKind kind, int kernel, int groups, int stride, int in_channels, int out_channels) {
  return OpSpec{kind, kernel, 1, groups, stride, in_channels, out_channels};
}

OpSpec plain_conv_op(int kernel, int stride, int in_channels, int out_channels) {
  return OpSpec{OpKind::kPlainConv, kernel, 1, 1, stride, in_channels, out_channels};
}

const std::vector<KernelGroups>& resnet_catalog() {
  static const std::vector<KernelGroups> catalog = {{3, 1}, {5, 2}, {5, 4}, {7, 4}, {7, 8}};
  return catalog;
}

void validate_op(const OpSpec& op) {
  if (op.in_channels <= 0 || op.out_channels <= 0)
    throw ConfigError("op " + describe(op) + ": channel counts must be positive");
  if (op.stride < 1) throw ConfigError("op " + describe(op) + ": stride must be >= 1");
  if (op.is_identity()) {
    if (op.in_channels != op.out_channels || op.stride != 1)
      throw ConfigError("Identity requires in_channels == out_channels and stride 1, got " + describe(op));
    return;
  }
  if (op.kernel != 3 && op.kernel != 5 && op.kernel != 7)
    throw ConfigError("op " + describe(op) + ": kernel must be 3, 5 or 7");
  switch (op.kind) {
    case OpKind::kMBConv:
      if (op.expansion != 1 && op.expansion != 3 && op.expansion != 6)
        throw ConfigError("op " + describe(op) + ": expansion must be 1, 3 or 6");
      if (op.groups != 1) throw ConfigError("op " + describe(op) + ": MBConv takes no group count");
      break;
    case OpKind::kResBasic:
    case OpKind::kResBottleneck: {
      const auto& cat = resnet_catalog();
      const bool known = std::any_of(cat.begin(), cat.end(), [&](const KernelGroups& kg) {
        return kg.kernel == op.kernel && kg.groups == op.groups;
      });
      if (!known) throw ConfigError("op " + describe(op) + ": (kernel, groups) not in the ResNet catalog");
      if (op.expansion != 1) throw ConfigError("op " + describe(op) + ": ResNet blocks take no expansion");
      if (op.kind == OpKind::kResBasic) {
        if (op.in_channels % op.groups != 0 || op.out_channels % op.groups != 0)
          throw ConfigError("op " + describe(op) + ": groups must divide in and out channels");
      } else {
        if (op.out_channels % 4 != 0) throw ConfigError("op " + describe(op) + ": bottleneck width needs out % 4 == 0");
        if ((op.out_channels / 4) % op.groups != 0)
          throw ConfigError("op " + describe(op) + ": groups must divide the bottleneck width");
      }
      break;
    }
    case OpKind::kPlainConv:
      if (op.expansion != 1 || op.groups != 1)
        throw ConfigError("op " + describe(op) + ": PlainConv takes no expansion or groups");
      break;
    case OpKind::kIdentity: break;
  }
}

int ArchDescriptor::feature_channels() const {
  return stages.empty() ? stem.out_channels : stages.back().layers.back().out_channels;
}

int ArchDescriptor::total_stride() const {
  int s = stem.stride;
  for (const auto& st : stages)
    for (const auto& op : st.layers) s *= op.stride;
  return s;
}

void validate_arch(const ArchDescriptor& arch) {
  if (arch.stem.is_identity()) throw ConfigError("stem cannot be Identity");
  validate_op(arch.stem);
  if (arch.head.classes < 1) throw ConfigError("head needs at least one class");
  int channels = arch.stem.out_channels;
  for (std::size_t s = 0; s < arch.stages.size(); ++s) {
    const ArchStage& st = arch.stages[s];
    const std::string where = "stage " + std::to_string(s);
    if (st.spec.max_layers < 1) throw ConfigError(where + ": max_layers must be >= 1");
    if (st.layers.empty()) throw ConfigError(where + ": no layers");
    if (static_cast<int>(st.layers.size()) > st.spec.max_layers)
      throw ConfigError(where + ": " + std::to_string(st.layers.size()) + " layers exceed max_layers " +
                        std::to_string(st.spec.max_layers));
    bool seen_identity = false;
    for (std::size_t l = 0; l < st.layers.size(); ++l) {
      const OpSpec& op = st.layers[l];
      const std::string at = where + " layer " + std::to_string(l);
      validate_op(op);
      if (op.in_channels != channels)
        throw ConfigError(at + ": in_channels " + std::to_string(op.in_channels) + " != previous out_channels " +
                          std::to_string(channels));
      if (op.out_channels != st.spec.out_channels)
        throw ConfigError(at + ": out_channels " + std::to_string(op.out_channels) + " != stage width " +
                          std::to_string(st.spec.out_channels));
      if (l == 0) {
        if (op.is_identity()) throw ConfigError(at + ": the first layer of a stage cannot be Identity");
        if (op.stride != st.spec.stride)
          throw ConfigError(at + ": stride " + std::to_string(op.stride) + " != stage stride " +
                            std::to_string(st.spec.stride));
      } else if (op.stride != 1) {
        throw ConfigError(at + ": only the first layer of a stage may be strided");
      }
      if (seen_identity && !op.is_identity())
        throw ConfigError(at + ": non-Identity layer after an Identity layer");
      seen_identity = seen_identity || op.is_identity();
      channels = op.out_channels;
    }
  }
}

std::vector<LayerRef> SearchSpace::searchable_layers() const {
  std::vector<LayerRef> refs;
  for (std::size_t s = 0; s < stages.size(); ++s)
    for (std::size_t l = 0; l < stages[s].layers.size(); ++l)
      if (stages[s].layers[l].ops.size() >= 2) refs.push_back({s, l});
  return refs;
}

void validate_space(const SearchSpace& space) {
  validate_op(space.stem);
  if (space.input_height < 1 || space.input_width < 1) throw ConfigError("space input resolution must be positive");
  int channels = space.stem.out_channels;
  for (std::size_t s = 0; s < space.stages.size(); ++s) {
    const SpaceStage& st = space.stages[s];
    const std::string where = "space stage " + std::to_string(s);
    if (st.spec.max_layers < 1 || static_cast<int>(st.layers.size()) != st.spec.max_layers)
      throw ConfigError(where + ": layer count must equal max_layers >= 1");
    for (std::size_t l = 0; l < st.layers.size(); ++l) {
      const auto& ops = st.layers[l].ops;
      const std::string at = where + " layer " + std::to_string(l);
      if (ops.empty()) throw ConfigError(at + ": empty candidate list");
      if (st.spec.searchable && ops.size() < 2) throw ConfigError(at + ": searchable layer needs >= 2 candidates");
      const int in = l == 0 ? channels : st.spec.out_channels;
      for (const OpSpec& op : ops) {
        validate_op(op);
        if (op.in_channels != in || op.out_channels != st.spec.out_channels)
          throw ConfigError(at + ": candidate " + describe(op) + " breaks the channel chain");
        if (op.stride != (l == 0 ? st.spec.stride : 1)) throw ConfigError(at + ": candidate " + describe(op) + " has the wrong stride");
        if (l == 0 && op.is_identity()) throw ConfigError(at + ": Identity is not allowed on a stage's first layer");
      }
    }
    channels = st.spec.out_channels;
  }
}

TaskProfile table_profile(std::string_view name) {
  for (const auto& row : table_rows())
    if (name == row.name) return TaskProfile{row.name, row.layers, row.strides};
  throw ConfigError("unknown task profile '" + std::string(name) + "' (expected seg, det, pose or nas)");
}

TaskProfile desk_profile(const TaskProfile& table, std::size_t stage_count, double depth_scale) {
  if (stage_count < 1 || stage_count > table.layers.size())
    throw ConfigError("desk profile needs between 1 and " + std::to_string(table.layers.size()) + " stages");
  if (!(depth_scale > 0.0)) throw ConfigError("depth scale must be positive");
  TaskProfile out{table.name, {}, {}};
  const std::size_t first = table.layers.size() - stage_count;
  for (std::size_t i = first; i < table.layers.size(); ++i) {
    out.layers.push_back(scaled_depth(table.layers[i], depth_scale));
    out.strides.push_back(table.strides[i]);
  }
  return out;
}

ArchDescriptor make_mbconv_seed(const DeskSeedOptions& o) {
  const TaskProfile table = table_profile(o.profile);
  const TaskProfile prof = desk_profile(table, o.stage_count, 1.0);
  if (o.width_divisor < 1) throw ConfigError("width divisor must be >= 1");
  ArchDescriptor arch;
  const int stem_out = scaled_width(kMbv2Stem, o.width_divisor, o.min_channels);
  arch.stem = plain_conv_op(3, 1, o.input_channels, stem_out);
  const int first_out = scaled_width(kMbv2FirstBlock, o.width_divisor, o.min_channels);
  arch.stages.push_back(ArchStage{StageSpec{first_out, 1, 1, false}, {mbconv_op(3, 1, 1, stem_out, first_out)}});
  int channels = first_out;
  const std::size_t first_row = 6 - o.stage_count;
  for (std::size_t i = 0; i < o.stage_count; ++i) {
    const int out = scaled_width(kMbv2Channels[first_row + i], o.width_divisor, o.min_channels);
    const int n = scaled_depth(kMbv2Layers[first_row + i], o.depth_scale);
    const int stride = prof.strides[i];
    ArchStage st{StageSpec{out, n, stride, true}, {}};
    for (int l = 0; l < n; ++l) {
      st.layers.push_back(mbconv_op(3, 6, l == 0 ? stride : 1, channels, out));
      channels = out;
    }
    arch.stages.push_back(std::move(st));
  }
  arch.head = o.head;
  validate_arch(arch);
  return arch;
}

ArchDescriptor make_resnet_seed(const DeskResNetOptions& o) {
  if (o.channels.size() != o.layers.size() || o.channels.size() != o.strides.size())
    throw ConfigError("ResNet seed: channels, layers and strides must have equal length");
  if (o.block != OpKind::kResBasic && o.block != OpKind::kResBottleneck)
    throw ConfigError("ResNet seed: block must be ResBasic or ResBottleneck");
  ArchDescriptor arch;
  arch.stem = plain_conv_op(3, 1, o.input_channels, o.stem_channels);
  int channels = o.stem_channels;
  for (std::size_t i = 0; i < o.channels.size(); ++i) {
    ArchStage st{StageSpec{o.channels[i], o.layers[i], o.strides[i], true}, {}};
    for (int l = 0; l < o.layers[i]; ++l) {
      st.layers.push_back(resnet_op(o.block, 3, 1, l == 0 ? o.strides[i] : 1, channels, o.channels[i]));
      channels = o.channels[i];
    }
    arch.stages.push_back(std::move(st));
  }
  arch.head = o.head;
  validate_arch(arch);
  return arch;
}

SearchSpace build_mbconv_space(const ArchDescriptor& seed, const TaskProfile& profile, int input_height,
                               int input_width) {
  validate_arch(seed);
  std::vector<std::size_t> searchable;
  for (std::size_t s = 0; s < seed.stages.size(); ++s) {
    if (!seed.stages[s].spec.searchable) continue;
    searchable.push_back(s);
    for (const OpSpec& op : seed.stages[s].layers)
      if (op.kind != OpKind::kMBConv && !op.is_identity())
        throw ConfigError("build_mbconv_space: seed stage " + std::to_string(s) + " holds a " +
                          std::string(op_kind_name(op.kind)) + " block, expected MBConv");
  }
  if (searchable.size() != profile.layers.size() || profile.layers.size() != profile.strides.size())
    throw ConfigError("seed stage count mismatch: seed has " + std::to_string(searchable.size()) +
                      " searchable stages, profile '" + profile.name + "' has " +
                      std::to_string(profile.layers.size()));
  SearchSpace space;
  space.stem = seed.stem;
  space.head = seed.head;
  space.input_height = input_height;
  space.input_width = input_width;
  int channels = seed.stem.out_channels;
  std::size_t row = 0;
  for (const ArchStage& st : seed.stages) {
    SpaceStage out;
    if (!st.spec.searchable) {
      out.spec = st.spec;
      out.spec.max_layers = static_cast<int>(st.layers.size());
      for (const OpSpec& op : st.layers) out.layers.push_back(LayerCandidates{{op}});
      channels = st.spec.out_channels;
      space.stages.push_back(std::move(out));
      continue;
    }
    const int n = profile.layers[row];
    const int stride = profile.strides[row];
    ++row;
    if (n < 1) throw ConfigError("profile layer count must be >= 1");
    out.spec = StageSpec{st.spec.out_channels, n, stride, true};
    for (int l = 0; l < n; ++l) {
      LayerCandidates cands;
      const int in = l == 0 ? channels : st.spec.out_channels;
      for (int k : {3, 5, 7})
        for (int e : {3, 6}) cands.ops.push_back(mbconv_op(k, e, l == 0 ? stride : 1, in, st.spec.out_channels));
      if (l > 0) cands.ops.push_back(identity_op(st.spec.out_channels));
      out.layers.push_back(std::move(cands));
    }
    channels = st.spec.out_channels;
    space.stages.push_back(std::move(out));
  }
  validate_space(space);
  return space;
}

SearchSpace build_resnet_space(const ArchDescriptor& seed, int input_height, int input_width) {
  validate_arch(seed);
  SearchSpace space;
  space.stem = seed.stem;
  space.head = seed.head;
  space.input_height = input_height;
  space.input_width = input_width;
  for (std::size_t s = 0; s < seed.stages.size(); ++s) {
    const ArchStage& st = seed.stages[s];
    SpaceStage out;
    out.spec = st.spec;
    out.spec.max_layers = static_cast<int>(st.layers.size());
    for (const OpSpec& op : st.layers) {
      if (!st.spec.searchable) {
        out.layers.push_back(LayerCandidates{{op}});
        continue;
      }
      if (op.kind != OpKind::kResBasic && op.kind != OpKind::kResBottleneck)
        throw ConfigError("build_resnet_space: unsupported block kind " + std::string(op_kind_name(op.kind)) +
                          " in stage " + std::to_string(s));
      LayerCandidates cands;
      for (const KernelGroups& kg : resnet_catalog())
        cands.ops.push_back(resnet_op(op.kind, kg.kernel, kg.groups, op.stride, op.in_channels, op.out_channels));
      out.layers.push_back(std::move(cands));
    }
    space.stages.push_back(std::move(out));
  }
  validate_space(space);
  return space;
}

std::size_t find_candidate(const LayerCandidates& layer, const OpSpec& op) {
  for (std::size_t i = 0; i < layer.ops.size(); ++i)
    if (layer.ops[i] == op) return i;
  return std::numeric_limits<std::size_t>::max();
}

ArchDescriptor arch_from_choices(const SearchSpace& space, const std::vector<std::size_t>& choices) {
  const auto refs = space.searchable_layers();
  if (choices.size() != refs.size())
    throw ConfigError("expected " + std::to_string(refs.size()) + " layer choices, got " +
                      std::to_string(choices.size()));
  ArchDescriptor arch;
  arch.stem = space.stem;
  arch.head = space.head;
  std::size_t next = 0;
  for (const SpaceStage& st : space.stages) {
    ArchStage out{st.spec, {}};
    bool truncated = false;
    for (const LayerCandidates& layer : st.layers) {
      std::size_t pick = 0;
      if (layer.ops.empty()) throw ConfigError("empty candidate list");
      if (layer.ops.size() >= 2) {
        pick = choices[next++];
        if (pick >= layer.ops.size())
          throw ConfigError("choice " + std::to_string(pick) + " out of range for a layer with " +
                            std::to_string(layer.ops.size()) + " candidates");
      }
      const OpSpec& op = layer.ops[pick];
      if (op.is_identity()) truncated = true;
      if (!truncated) out.layers.push_back(op);
    }
    arch.stages.push_back(std::move(out));
  }
  validate_arch(arch);
  return arch;
}

std::vector<std::size_t> argmax_choices(const SearchSpace& space, const std::vector<std::vector<double>>& alpha) {
  const auto refs = space.searchable_layers();
  if (alpha.size() != refs.size())
    throw ConfigError("alpha has " + std::to_string(alpha.size()) + " layers, space has " +
                      std::to_string(refs.size()) + " searchable layers");
  const CostTable table = build_cost_table(space);
  std::vector<std::size_t> choices;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& ops = space.candidates(refs[i]).ops;
    const auto& a = alpha[i];
    if (ops.empty()) throw ConfigError("empty candidate list");
    if (a.size() != ops.size())
      throw ConfigError("alpha for searchable layer " + std::to_string(i) + " has " + std::to_string(a.size()) +
                        " entries, expected " + std::to_string(ops.size()));
    std::size_t best = 0;
    for (std::size_t c = 1; c < a.size(); ++c) {
      if (a[c] > a[best] || (a[c] == a[best] && table.layers[i][c] < table.layers[i][best])) best = c;
    }
    choices.push_back(best);
  }
  return choices;
}

ArchDescriptor derive_architecture(const SearchSpace& space, const std::vector<std::vector<double>>& alpha) {
  return arch_from_choices(space, argmax_choices(space, alpha));
}

namespace {

ordered_json op_to_json(const OpSpec& op) {
  ordered_json j;
  j["kind"] = std::string(op_kind_name(op.kind));
  j["kernel"] = op.kernel;
  j["expansion"] = op.expansion;
  j["groups"] = op.groups;
  j["stride"] = op.stride;
  j["in_channels"] = op.in_channels;
  j["out_channels"] = op.out_channels;
  return j;
}

ordered_json stage_spec_to_json(const StageSpec& s) {
  ordered_json j;
  j["out_channels"] = s.out_channels;
  j["max_layers"] = s.max_layers;
  j["stride"] = s.stride;
  j["searchable"] = s.searchable;
  return j;
}

ordered_json head_to_json(const HeadSpec& h) {
  ordered_json j;
  j["kind"] = h.kind == HeadKind::kDense ? "dense" : "classification";
  j["classes"] = h.classes;
  return j;
}

// Line number of the first occurrence of `needle` in `text`, or 0.
std::size_t line_of(std::string_view text, std::string_view needle) {
  const auto pos = text.find(needle);
  if (pos == std::string_view::npos) return 0;
  return static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(pos), '\n')) + 1;
}

class Reader {
 public:
  explicit Reader(std::string_view text) : text_(text) {}

  [[noreturn]] void fail(const std::string& path, const std::string& what, std::string_view needle = {}) const {
    std::string msg = path + ": " + what;
    const std::size_t line = needle.empty() ? 0 : line_of(text_, needle);
    if (line > 0) msg = "line " + std::to_string(line) + ": " + msg;
    throw ParseError(msg);
  }

  const ordered_json& field(const ordered_json& obj, const std::string& path, const char* key) const {
    if (!obj.is_object()) fail(path, "expected an object");
    auto it = obj.find(key);
    if (it == obj.end()) fail(path, std::string("missing field '") + key + "'");
    return *it;
  }

  int get_int(const ordered_json& obj, const std::string& path, const char* key) const {
    const auto& v = field(obj, path, key);
    if (!v.is_number_integer()) fail(path + "." + key, "expected an integer", std::string("\"") + key + "\"");
    return v.get<int>();
  }

  bool get_bool(const ordered_json& obj, const std::string& path, const char* key) const {
    const auto& v = field(obj, path, key);
    if (!v.is_boolean()) fail(path + "." + key, "expected a boolean", std::string("\"") + key + "\"");
    return v.get<bool>();
  }

  std::string get_string(const ordered_json& obj, const std::string& path, const char* key) const {
    const auto& v = field(obj, path, key);
    if (!v.is_string()) fail(path + "." + key, "expected a string", std::string("\"") + key + "\"");
    return v.get<std::string>();
  }

  const ordered_json& get_array(const ordered_json& obj, const std::string& path, const char* key) const {
    const auto& v = field(obj, path, key);
    if (!v.is_array()) fail(path + "." + key, "expected an array", std::string("\"") + key + "\"");
    return v;
  }

  OpSpec op(const ordered_json& j, const std::string& path) const {
    OpSpec op;
    const std::string kind = get_string(j, path, "kind");
    try {
      op.kind = parse_op_kind(kind);
    } catch (const ParseError& e) {
      fail(path + ".kind", e.what(), "\"" + kind + "\"");
    }
    op.kernel = get_int(j, path, "kernel");
    op.expansion = get_int(j, path, "expansion");
    op.groups = get_int(j, path, "groups");
    op.stride = get_int(j, path, "stride");
    op.in_channels = get_int(j, path, "in_channels");
    op.out_channels = get_int(j, path, "out_channels");
    return op;
  }

  StageSpec stage_spec(const ordered_json& j, const std::string& path) const {
    return StageSpec{get_int(j, path, "out_channels"), get_int(j, path, "max_layers"), get_int(j, path, "stride"),
                     get_bool(j, path, "searchable")};
  }

  HeadSpec head(const ordered_json& j, const std::string& path) const {
    HeadSpec h;
    const std::string kind = get_string(j, path, "kind");
    if (kind == "dense") {
      h.kind = HeadKind::kDense;
    } else if (kind == "classification") {
      h.kind = HeadKind::kClassification;
    } else {
      fail(path + ".kind", "unknown head kind '" + kind + "'", "\"" + kind + "\"");
    }
    h.classes = get_int(j, path, "classes");
    return h;
  }

  ordered_json parse(std::string_view expected_version) const {
    ordered_json doc;
    try {
      doc = ordered_json::parse(text_);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("malformed document: ") + e.what());
    }
    const std::string version = get_string(doc, "$", "version");
    if (version != expected_version)
      fail("$.version", "unsupported version '" + version + "', expected '" + std::string(expected_version) + "'",
           "\"" + version + "\"");
    return doc;
  }

 private:
  std::string_view text_;
};

template <typename Fn>
auto with_validation(const char* what, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ParseError(std::string(what) + " failed validation: " + e.what());
  }
}

}  // namespace

std::string serialize_arch(const ArchDescriptor& arch) {
  ordered_json doc;
  doc["version"] = std::string(kArchVersion);
  doc["stem"] = op_to_json(arch.stem);
  ordered_json stages = ordered_json::array();
  for (const ArchStage& st : arch.stages) {
    ordered_json j = stage_spec_to_json(st.spec);
    ordered_json layers = ordered_json::array();
    for (const OpSpec& op : st.layers) layers.push_back(op_to_json(op));
    j["layers"] = std::move(layers);
    stages.push_back(std::move(j));
  }
  doc["stages"] = std::move(stages);
  doc["head"] = head_to_json(arch.head);
  return doc.dump(2) + "\n";
}

ArchDescriptor deserialize_arch(std::string_view text) {
  Reader r(text);
  const ordered_json doc = r.parse(kArchVersion);
  ArchDescriptor arch;
  arch.stem = r.op(r.field(doc, "$", "stem"), "$.stem");
  const auto& stages = r.get_array(doc, "$", "stages");
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const std::string path = "$.stages[" + std::to_string(s) + "]";
    ArchStage st{r.stage_spec(stages[s], path), {}};
    const auto& layers = r.get_array(stages[s], path, "layers");
    for (std::size_t l = 0; l < layers.size(); ++l)
      st.layers.push_back(r.op(layers[l], path + ".layers[" + std::to_string(l) + "]"));
    arch.stages.push_back(std::move(st));
  }
  arch.head = r.head(r.field(doc, "$", "head"), "$.head");
  with_validation("architecture", [&] {
    validate_arch(arch);
    return 0;
  });
  return arch;
}

std::string serialize_space(const SearchSpace& space) {
  ordered_json doc;
  doc["version"] = std::string(kSpaceVersion);
  doc["input_height"] = space.input_height;
  doc["input_width"] = space.input_width;
  doc["stem"] = op_to_json(space.stem);
  ordered_json stages = ordered_json::array();
  for (const SpaceStage& st : space.stages) {
    ordered_json j = stage_spec_to_json(st.spec);
    ordered_json layers = ordered_json::array();
    for (const LayerCandidates& layer : st.layers) {
      ordered_json cands = ordered_json::array();
      for (const OpSpec& op : layer.ops) cands.push_back(op_to_json(op));
      layers.push_back(std::move(cands));
    }
    j["layers"] = std::move(layers);
    stages.push_back(std::move(j));
  }
  doc["stages"] = std::move(stages);
  doc["head"] = head_to_json(space.head);
  return doc.dump(2) + "\n";
}

SearchSpace deserialize_space(std::string_view text) {
  Reader r(text);
  const ordered_json doc = r.parse(kSpaceVersion);
  SearchSpace space;
  space.input_height = r.get_int(doc, "$", "input_height");
  space.input_width = r.get_int(doc, "$", "input_width");
  space.stem = r.op(r.field(doc, "$", "stem"), "$.stem");
  const auto& stages = r.get_array(doc, "$", "stages");
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const std::string path = "$.stages[" + std::to_string(s) + "]";
    SpaceStage st{r.stage_spec(stages[s], path), {}};
    const auto& layers = r.get_array(stages[s], path, "layers");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string lp = path + ".layers[" + std::to_string(l) + "]";
      if (!layers[l].is_array()) r.fail(lp, "expected an array of candidates");
      LayerCandidates cands;
      for (std::size_t c = 0; c < layers[l].size(); ++c)
        cands.ops.push_back(r.op(layers[l][c], lp + "[" + std::to_string(c) + "]"));
      st.layers.push_back(std::move(cands));
    }
    space.stages.push_back(std::move(st));
  }
  space.head = r.head(r.field(doc, "$", "head"), "$.head");
  with_validation("search space", [&] {
    validate_space(space);
    return 0;
  });
  return space;
}

std::string arch_hash(const ArchDescriptor& arch) {
  const std::string text = serialize_arch(arch);
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace fna
