#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace fna {

enum class OpKind { kMBConv, kResBasic, kResBottleneck, kPlainConv, kIdentity };

std::string_view op_kind_name(OpKind kind);
OpKind parse_op_kind(std::string_view name);

// One concrete block choice. `expansion` applies to MBConv, `groups` to the
// ResNet kinds and PlainConv; the unused field stays at 1.
struct OpSpec {
  OpKind kind = OpKind::kIdentity;
  int kernel = 3;
  int expansion = 1;
  int groups = 1;
  int stride = 1;
  int in_channels = 0;
  int out_channels = 0;

  bool operator==(const OpSpec&) const = default;

  bool is_identity() const { return kind == OpKind::kIdentity; }
  // Short label such as "k5e6", "k7g4", "conv3" or "identity".
  std::string label() const;
};

OpSpec identity_op(int channels);
OpSpec mbconv_op(int kernel, int expansion, int stride, int in_channels, int out_channels);
OpSpec resnet_op(OpKind kind, int kernel, int groups, int stride, int in_channels, int out_channels);
OpSpec plain_conv_op(int kernel, int stride, int in_channels, int out_channels);

// Throws ConfigError when an OpSpec breaks the catalog rules.
void validate_op(const OpSpec& op);

// (kernel, groups) pairs of the ResNet block catalog, k3g1 first.
struct KernelGroups {
  int kernel;
  int groups;
};
const std::vector<KernelGroups>& resnet_catalog();

struct StageSpec {
  int out_channels = 0;
  int max_layers = 1;
  int stride = 1;
  bool searchable = false;

  bool operator==(const StageSpec&) const = default;
};

enum class HeadKind { kClassification, kDense };

struct HeadSpec {
  HeadKind kind = HeadKind::kClassification;
  int classes = 2;

  bool operator==(const HeadSpec&) const = default;
};

struct ArchStage {
  StageSpec spec;
  std::vector<OpSpec> layers;

  bool operator==(const ArchStage&) const = default;
};

// A concrete network: stem, stages of chosen blocks, task head.
struct ArchDescriptor {
  OpSpec stem;
  std::vector<ArchStage> stages;
  HeadSpec head;

  bool operator==(const ArchDescriptor&) const = default;

  int feature_channels() const;
  // Product of the stem stride and every layer stride.
  int total_stride() const;
};

// Throws ConfigError on a broken channel chain, stride rule or identity prefix.
void validate_arch(const ArchDescriptor& arch);

struct LayerCandidates {
  std::vector<OpSpec> ops;

  bool operator==(const LayerCandidates&) const = default;
};

struct SpaceStage {
  StageSpec spec;
  std::vector<LayerCandidates> layers;  // size == spec.max_layers

  bool operator==(const SpaceStage&) const = default;
};

struct LayerRef {
  std::size_t stage;
  std::size_t layer;

  bool operator==(const LayerRef&) const = default;
};

// Candidate operations for every layer. Non-searchable layers carry exactly
// one candidate; the order of `searchable_layers()` fixes the alpha layout.
struct SearchSpace {
  OpSpec stem;
  std::vector<SpaceStage> stages;
  HeadSpec head;
  int input_height = 16;
  int input_width = 16;

  bool operator==(const SearchSpace&) const = default;

  std::vector<LayerRef> searchable_layers() const;
  const LayerCandidates& candidates(LayerRef ref) const { return stages[ref.stage].layers[ref.layer]; }
};

void validate_space(const SearchSpace& space);

// Per-stage layer counts and first-layer strides of one task column.
struct TaskProfile {
  std::string name;
  std::vector<int> layers;
  std::vector<int> strides;
};

// Rows of the MobileNetV2 / NAS-seed search-space tables (six SBlock rows).
// Known names: "seg", "det", "pose", "nas".
TaskProfile table_profile(std::string_view name);
// Desk-scale profile: the last `stage_count` rows, layer counts scaled by
// `depth_scale` (rounded up, at least 1), strides unchanged.
TaskProfile desk_profile(const TaskProfile& table, std::size_t stage_count, double depth_scale);

struct DeskSeedOptions {
  std::string profile = "seg";
  std::size_t stage_count = 4;
  double depth_scale = 0.5;
  int width_divisor = 16;
  int min_channels = 4;
  int input_channels = 1;
  HeadSpec head;
};

// MobileNetV2-shaped seed shrunk to desk size: 3x3 stem, one fixed
// MBConv(k3e1) stage, then k3e6 searchable stages.
ArchDescriptor make_mbconv_seed(const DeskSeedOptions& options);

struct DeskResNetOptions {
  std::vector<int> channels{8, 16, 16};
  std::vector<int> layers{1, 1, 1};
  std::vector<int> strides{1, 2, 1};
  OpKind block = OpKind::kResBasic;
  int stem_channels = 8;
  int input_channels = 1;
  HeadSpec head;
};

ArchDescriptor make_resnet_seed(const DeskResNetOptions& options);

// Expands an MBConv seed: every searchable layer gets k{3,5,7} x e{3,6}, plus
// Identity on non-first layers of multi-layer stages.
SearchSpace build_mbconv_space(const ArchDescriptor& seed, const TaskProfile& profile, int input_height,
                               int input_width);
// Expands a ResNet seed: every searchable block gets the five (k, g) options.
SearchSpace build_resnet_space(const ArchDescriptor& seed, int input_height, int input_width);

// Per-searchable-layer candidate indices -> descriptor. Each stage is cut at
// its first Identity choice.
ArchDescriptor arch_from_choices(const SearchSpace& space, const std::vector<std::size_t>& choices);
// Argmax of alpha per searchable layer; ties go to the cheaper candidate,
// then to the lower index.
std::vector<std::size_t> argmax_choices(const SearchSpace& space, const std::vector<std::vector<double>>& alpha);
ArchDescriptor derive_architecture(const SearchSpace& space, const std::vector<std::vector<double>>& alpha);

// Candidate index of `op` in a layer, or npos.
std::size_t find_candidate(const LayerCandidates& layer, const OpSpec& op);

inline constexpr std::string_view kArchVersion = "fna_arch_v1";
inline constexpr std::string_view kSpaceVersion = "fna_space_v1";

std::string serialize_arch(const ArchDescriptor& arch);
ArchDescriptor deserialize_arch(std::string_view text);
std::string serialize_space(const SearchSpace& space);
SearchSpace deserialize_space(std::string_view text);

// 64-bit FNV-1a of the serialized descriptor, as 16 hex digits.
std::string arch_hash(const ArchDescriptor& arch);

}  // namespace fna
