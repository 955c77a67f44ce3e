#include "fna/remap.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "fna/error.hpp"

namespace fna {

namespace {

std::size_t channel_axes(std::size_t rank) { return rank >= 2 ? 2 : 1; }

// Row-major strides of a shape.
std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Calls fn(target_offset, index) for every multi-index of `shape`.
template <typename Fn>
void for_each_index(const Shape& shape, Fn&& fn) {
  const std::size_t n = shape_numel(shape);
  std::vector<std::size_t> idx(shape.size(), 0);
  for (std::size_t off = 0; off < n; ++off) {
    fn(off, idx);
    for (std::size_t d = shape.size(); d-- > 0;) {
      if (++idx[d] < shape[d]) break;
      idx[d] = 0;
    }
  }
}

void require_odd_square(const Tensor& t, const char* op) {
  if (t.rank() != 4 || t.dim(2) != t.dim(3))
    throw RemapError(std::string(op) + ": expected a [C_out, C_in, k, k] weight, got " + shape_str(t.shape()));
  if (t.dim(2) % 2 == 0) throw RemapError(std::string(op) + ": even kernel size " + std::to_string(t.dim(2)));
}

Tensor spatial_map(const Tensor& seed, int target_k, const std::vector<std::size_t>& positions, std::size_t k) {
  const Shape out_shape{seed.dim(0), seed.dim(1), static_cast<std::size_t>(target_k), static_cast<std::size_t>(target_k)};
  std::vector<double> out(shape_numel(out_shape), 0.0);
  auto src = seed.data();
  const std::size_t planes = seed.dim(0) * seed.dim(1);
  const std::size_t tk = static_cast<std::size_t>(target_k);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t u = 0; u < k; ++u)
      for (std::size_t v = 0; v < k; ++v) {
        if (positions[u] >= tk || positions[v] >= tk) continue;
        out[(p * tk + positions[u]) * tk + positions[v]] = src[(p * k + u) * k + v];
      }
  return Tensor::from(out_shape, std::move(out));
}

std::string describe_step(const RemapStep& s) {
  std::ostringstream os;
  os << rule_name(s.rule);
  switch (s.rule) {
    case RemapRule::kDepthReplicate: os << "(from_layer=" << s.size << ")"; break;
    case RemapRule::kWidthPad: os << "(dim=" << s.dim << ", to=" << s.size << ", fill=" << s.fill << ")"; break;
    case RemapRule::kWidthTruncate: os << "(dim=" << s.dim << ", to=" << s.size << ")"; break;
    case RemapRule::kChannelSelect: {
      os << "(dim=" << s.dim << ", indices=[";
      for (std::size_t i = 0; i < s.indices.size(); ++i) os << (i ? "," : "") << s.indices[i];
      os << "])";
      break;
    }
    case RemapRule::kGroupSlice: os << "(groups=" << s.size << ")"; break;
    case RemapRule::kKernelCenterEmbed:
    case RemapRule::kKernelCenterCrop:
    case RemapRule::kKernelDilate: os << "(k=" << s.size << ")"; break;
    case RemapRule::kCopy:
    case RemapRule::kFreshInit: break;
  }
  return os.str();
}

double bn_fill(const char* field) { return std::string_view(field) == "running_var" ? 1.0 : 0.0; }

constexpr std::size_t kSameLayer = std::numeric_limits<std::size_t>::max();

// Builds plans and results for one remapping call.
class Remapper {
 public:
  Remapper(const ParamMap& source, const RemapOptions& options) : source_(source), options_(options), rng_(options.init_seed) {}

  void copy_tensor(const std::string& target, const std::string& source) {
    const Tensor& src = find(source);
    add_entry(RemapEntry{target, source, src.shape(), src.shape(), {{RemapRule::kCopy}}});
  }

  void copy_prefix(const std::string& source_prefix, const std::string& target_prefix) {
    for (auto it = source_.lower_bound(source_prefix); it != source_.end() && it->first.starts_with(source_prefix); ++it)
      copy_tensor(target_prefix + it->first.substr(source_prefix.size()), it->first);
  }

  // Head: copied when unchanged, freshly initialized otherwise.
  void head(const HeadSpec& source_head, int source_channels, const HeadSpec& target_head, int target_channels) {
    if (source_head == target_head && source_channels == target_channels) {
      copy_prefix("head.", "head.");
      return;
    }
    ParamMap fresh;
    init_head_params(fresh, target_head, target_channels, rng_);
    add_fresh(fresh);
  }

  // Remaps one block. `from_layer` is the seed layer index when it differs
  // from the target's (depth replication), kSameLayer otherwise.
  void op(const OpSpec& src_op, const std::string& src_prefix, const OpSpec& dst_op, const std::string& dst_prefix,
          std::size_t from_layer) {
    if (dst_op.is_identity()) return;
    if (src_op.kind != dst_op.kind)
      throw RemapError("cannot remap " + std::string(op_kind_name(src_op.kind)) + " at '" + src_prefix + "' into " +
                       std::string(op_kind_name(dst_op.kind)) + " at '" + dst_prefix + "'");
    const auto src_units = op_conv_units(src_op);
    const auto dst_units = op_conv_units(dst_op);
    const std::vector<std::size_t> inner = inner_selection(src_op, src_prefix, src_units, dst_units);

    for (const ConvUnit& du : dst_units) {
      const auto su_it = std::find_if(src_units.begin(), src_units.end(), [&](const ConvUnit& u) { return u.name == du.name; });
      const std::string dp = dst_prefix + "." + du.name;
      if (su_it == src_units.end()) {
        ParamMap fresh;
        init_unit(fresh, dp, du);
        add_fresh(fresh);
        continue;
      }
      const ConvUnit& su = *su_it;
      const std::string sp = src_prefix + "." + su.name;
      const bool selects_out = !inner.empty() && (du.name == "expand" || du.name == "dw") && src_op.kind == OpKind::kMBConv;
      const bool selects_in = !inner.empty() && du.name == "project";

      std::vector<RemapStep> depth;
      if (from_layer != kSameLayer) depth.push_back(RemapStep{RemapRule::kDepthReplicate, 0, from_layer, 0.0, {}});

      // Weight.
      {
        const Tensor& sw = find(weight_name(sp));
        const Shape target{static_cast<std::size_t>(du.out_channels),
                           static_cast<std::size_t>(du.in_channels / du.groups), static_cast<std::size_t>(du.kernel),
                           static_cast<std::size_t>(du.kernel)};
        std::vector<RemapStep> steps = depth;
        const bool depthwise_src = su.groups == su.in_channels && su.groups > 1;
        const bool depthwise_dst = du.groups == du.in_channels && du.groups > 1;
        if (depthwise_src != depthwise_dst || (su.groups != du.groups && su.groups != 1 && !depthwise_src))
          throw RemapError("unsupported group change " + std::to_string(su.groups) + " -> " +
                           std::to_string(du.groups) + " for '" + dp + "'");
        channel_steps(steps, 0, sw.dim(0), target[0], selects_out ? &inner : nullptr, 0.0);
        if (depthwise_dst) {
          // [C, 1, k, k]: the channel axis is dim 0 only.
        } else if (du.groups > 1 && su.groups == 1) {
          channel_steps(steps, 1, sw.dim(1), static_cast<std::size_t>(du.in_channels), nullptr, 0.0);
          steps.push_back(RemapStep{RemapRule::kGroupSlice, 0, static_cast<std::size_t>(du.groups), 0.0, {}});
        } else {
          channel_steps(steps, 1, sw.dim(1), target[1], selects_in ? &inner : nullptr, 0.0);
        }
        kernel_steps(steps, sw.dim(2), target[2]);
        finish(RemapEntry{weight_name(dp), weight_name(sp), sw.shape(), target, std::move(steps)});
      }
      // Batch-norm vectors follow the conv's output channels.
      for (const char* field : kBNFields) {
        const Tensor& sv = find(bn_name(sp, field));
        const Shape target{static_cast<std::size_t>(du.out_channels)};
        std::vector<RemapStep> steps = depth;
        channel_steps(steps, 0, sv.dim(0), target[0], selects_out ? &inner : nullptr, bn_fill(field));
        finish(RemapEntry{bn_name(dp, field), bn_name(sp, field), sv.shape(), target, std::move(steps)});
      }
    }
  }

  RemapResult take() {
    for (auto& [name, t] : result_.params) t.set_requires_grad(!is_running_stat(name));
    return std::move(result_);
  }

 private:
  const Tensor& find(const std::string& name) const {
    auto it = source_.find(name);
    if (it == source_.end()) throw RemapError("source tensor '" + name + "' not found");
    return it->second;
  }

  void add_entry(RemapEntry entry) {
    if (result_.params.count(entry.target)) throw RemapError("target tensor '" + entry.target + "' mapped twice");
    Tensor out = apply_entry(entry, find(entry.source));
    result_.params.emplace(entry.target, std::move(out));
    result_.plan.entries.push_back(std::move(entry));
  }

  void add_fresh(const ParamMap& fresh) {
    for (const auto& [name, t] : fresh) {
      if (result_.params.count(name)) throw RemapError("target tensor '" + name + "' mapped twice");
      result_.plan.entries.push_back(RemapEntry{name, "", {}, t.shape(), {{RemapRule::kFreshInit}}});
      result_.params.emplace(name, t);
    }
  }

  void init_unit(ParamMap& fresh, const std::string& dp, const ConvUnit& u) {
    OpSpec conv{OpKind::kPlainConv, u.kernel, 1, u.groups, u.stride, u.in_channels, u.out_channels};
    const std::string base = dp.substr(0, dp.rfind('.'));
    ParamMap tmp;
    init_op_params(tmp, conv, base, rng_);
    // init_op_params names the unit "conv"; rename to the requested unit.
    const std::string from = base + ".conv";
    for (auto& [name, t] : tmp) fresh.emplace(dp + name.substr(from.size()), t);
  }

  void finish(RemapEntry entry) {
    if (entry.steps.empty() ||
        std::all_of(entry.steps.begin(), entry.steps.end(),
                    [](const RemapStep& s) { return s.rule == RemapRule::kDepthReplicate; }))
      entry.steps.push_back(RemapStep{RemapRule::kCopy});
    add_entry(std::move(entry));
  }

  void channel_steps(std::vector<RemapStep>& steps, std::size_t dim, std::size_t from, std::size_t to,
                     const std::vector<std::size_t>* selection, double fill) const {
    if (selection && to < from) {
      steps.push_back(RemapStep{RemapRule::kChannelSelect, dim, to, 0.0, *selection});
    } else if (to > from) {
      steps.push_back(RemapStep{RemapRule::kWidthPad, dim, to, fill, {}});
    } else if (to < from) {
      steps.push_back(RemapStep{RemapRule::kWidthTruncate, dim, to, 0.0, {}});
    }
  }

  void kernel_steps(std::vector<RemapStep>& steps, std::size_t from, std::size_t to) const {
    if (to > from) {
      const bool dilate = options_.strategy == RemapStrategy::kKernelDilate && from == 3;
      steps.push_back(RemapStep{dilate ? RemapRule::kKernelDilate : RemapRule::kKernelCenterEmbed, 0, to, 0.0, {}});
    } else if (to < from) {
      steps.push_back(RemapStep{RemapRule::kKernelCenterCrop, 0, to, 0.0, {}});
    }
  }

  // Inner (expansion) channels kept when a reference strategy narrows an
  // MBConv; empty when the standard prefix rule applies.
  std::vector<std::size_t> inner_selection(const OpSpec& src_op, const std::string& src_prefix,
                                           const std::vector<ConvUnit>& su, const std::vector<ConvUnit>& du) const {
    if (src_op.kind != OpKind::kMBConv) return {};
    ReferenceKind kind;
    switch (options_.strategy) {
      case RemapStrategy::kBNGamma: kind = ReferenceKind::kBNGammaAbs; break;
      case RemapStrategy::kWeightStd: kind = ReferenceKind::kWeightStd; break;
      case RemapStrategy::kWeightL1: kind = ReferenceKind::kWeightL1; break;
      default: return {};
    }
    const ConvUnit& src_first = su.front();
    const ConvUnit& dst_first = du.front();
    const std::size_t src_inner = static_cast<std::size_t>(src_first.out_channels);
    const std::size_t dst_inner = static_cast<std::size_t>(dst_first.out_channels);
    if (dst_inner >= src_inner) return {};
    const std::string up = src_prefix + "." + src_first.name;
    const auto ref = reference_vector(kind, find(weight_name(up)), find(bn_name(up, "gamma")));
    return select_top_channels(ref, dst_inner);
  }

  const ParamMap& source_;
  RemapOptions options_;
  std::mt19937_64 rng_;
  RemapResult result_;
};

}  // namespace

std::vector<std::size_t> depth_sources(std::size_t l, std::size_t m) {
  if (l == 0) throw RemapError("remap_depth: seed stage has no layers");
  std::vector<std::size_t> out(m);
  for (std::size_t i = 0; i < m; ++i) out[i] = std::min(i, l - 1);
  return out;
}

Tensor remap_width(const Tensor& seed, const Shape& target_shape, double fill) {
  const Shape& s = seed.shape();
  if (s.size() != target_shape.size())
    throw RemapError("remap_width: rank mismatch " + shape_str(s) + " vs " + shape_str(target_shape));
  const std::size_t axes = channel_axes(s.size());
  for (std::size_t d = axes; d < s.size(); ++d)
    if (s[d] != target_shape[d])
      throw RemapError("remap_width: spatial dims differ " + shape_str(s) + " vs " + shape_str(target_shape));
  const auto st = strides_of(s);
  auto src = seed.data();
  std::vector<double> out(shape_numel(target_shape));
  for_each_index(target_shape, [&](std::size_t off, const std::vector<std::size_t>& idx) {
    std::size_t so = 0;
    for (std::size_t d = 0; d < idx.size(); ++d) {
      if (idx[d] >= s[d]) {
        out[off] = fill;
        return;
      }
      so += idx[d] * st[d];
    }
    out[off] = src[so];
  });
  return Tensor::from(target_shape, std::move(out));
}

Tensor remap_grouped(const Tensor& seed, int groups) {
  if (seed.rank() != 4) throw RemapError("remap_grouped: expected a rank-4 weight, got " + shape_str(seed.shape()));
  const std::size_t p = seed.dim(0), q = seed.dim(1), kh = seed.dim(2), kw = seed.dim(3);
  const auto g = static_cast<std::size_t>(groups);
  if (groups < 1 || p % g != 0 || q % g != 0)
    throw RemapError("remap_grouped: groups " + std::to_string(groups) + " must divide " + std::to_string(p) +
                     " output and " + std::to_string(q) + " input channels");
  const std::size_t qg = q / g, pg = p / g, plane = kh * kw;
  std::vector<double> out(p * qg * plane);
  auto src = seed.data();
  for (std::size_t i = 0; i < p; ++i) {
    const std::size_t id_g = i / pg;
    for (std::size_t j = 0; j < qg; ++j)
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((i * q + id_g * qg + j) * plane), plane,
                  out.begin() + static_cast<std::ptrdiff_t>((i * qg + j) * plane));
  }
  return Tensor::from({p, qg, kh, kw}, std::move(out));
}

Tensor remap_kernel(const Tensor& seed, int target_k) {
  require_odd_square(seed, "remap_kernel");
  if (target_k < 1 || target_k % 2 == 0) throw RemapError("remap_kernel: even target kernel " + std::to_string(target_k));
  const std::size_t k = seed.dim(2);
  const std::size_t tk = static_cast<std::size_t>(target_k);
  if (tk == k) return seed.clone();
  if (tk < k) {
    const std::size_t off = (k - tk) / 2;
    const Shape out_shape{seed.dim(0), seed.dim(1), tk, tk};
    std::vector<double> out(shape_numel(out_shape));
    auto src = seed.data();
    const std::size_t planes = seed.dim(0) * seed.dim(1);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t u = 0; u < tk; ++u)
        for (std::size_t v = 0; v < tk; ++v) out[(p * tk + u) * tk + v] = src[(p * k + u + off) * k + v + off];
    return Tensor::from(out_shape, std::move(out));
  }
  std::vector<std::size_t> pos(k);
  std::iota(pos.begin(), pos.end(), (tk - k) / 2);
  return spatial_map(seed, target_k, pos, k);
}

Tensor remap_kernel_dilated(const Tensor& seed, int target_k) {
  require_odd_square(seed, "remap_kernel_dilated");
  if (seed.dim(2) != 3) throw RemapError("remap_kernel_dilated: seed kernel must be 3x3, got " + shape_str(seed.shape()));
  if (target_k != 3 && target_k != 5 && target_k != 7)
    throw RemapError("remap_kernel_dilated: unsupported target kernel " + std::to_string(target_k));
  const std::size_t tk = static_cast<std::size_t>(target_k);
  return spatial_map(seed, target_k, {0, (tk - 1) / 2, tk - 1}, 3);
}

std::vector<double> reference_vector(ReferenceKind kind, const Tensor& weight, const Tensor& gamma) {
  if (kind == ReferenceKind::kBNGammaAbs) {
    if (!gamma.defined()) throw RemapError("reference_vector: gamma required for the BN reference");
    std::vector<double> r(gamma.numel());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = std::abs(gamma.data()[i]);
    return r;
  }
  const std::size_t c = weight.dim(0);
  const std::size_t per = weight.numel() / c;
  auto w = weight.data();
  std::vector<double> r(c);
  for (std::size_t i = 0; i < c; ++i) {
    const auto row = w.subspan(i * per, per);
    if (kind == ReferenceKind::kWeightL1) {
      double s = 0.0;
      for (double v : row) s += std::abs(v);
      r[i] = s;
    } else {
      double mean = 0.0;
      for (double v : row) mean += v;
      mean /= static_cast<double>(per);
      double var = 0.0;
      for (double v : row) var += (v - mean) * (v - mean);
      r[i] = std::sqrt(var / static_cast<double>(per));
    }
  }
  return r;
}

std::vector<std::size_t> select_top_channels(std::span<const double> ref, std::size_t q) {
  if (q > ref.size())
    throw RemapError("cannot select " + std::to_string(q) + " channels from " + std::to_string(ref.size()));
  std::vector<std::size_t> idx(ref.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return ref[a] > ref[b]; });
  idx.resize(q);
  std::sort(idx.begin(), idx.end());
  return idx;
}

Tensor select_channels(const Tensor& t, std::size_t dim, const std::vector<std::size_t>& indices) {
  if (dim >= t.rank()) throw RemapError("select_channels: axis out of range");
  for (std::size_t i : indices)
    if (i >= t.dim(dim)) throw RemapError("select_channels: index " + std::to_string(i) + " out of range");
  Shape out_shape = t.shape();
  out_shape[dim] = indices.size();
  const auto st = strides_of(t.shape());
  auto src = t.data();
  std::vector<double> out(shape_numel(out_shape));
  for_each_index(out_shape, [&](std::size_t off, const std::vector<std::size_t>& idx) {
    std::size_t so = 0;
    for (std::size_t d = 0; d < idx.size(); ++d) so += (d == dim ? indices[idx[d]] : idx[d]) * st[d];
    out[off] = src[so];
  });
  return Tensor::from(out_shape, std::move(out));
}

Tensor remap_width_by_reference(const Tensor& seed, const Shape& target_shape, std::span<const double> ref) {
  if (ref.size() != seed.dim(0)) throw RemapError("reference length must equal the output channel count");
  const Tensor picked = select_channels(seed, 0, select_top_channels(ref, target_shape.at(0)));
  return remap_width(picked, target_shape);
}

std::string_view strategy_name(RemapStrategy s) {
  switch (s) {
    case RemapStrategy::kStandard: return "standard";
    case RemapStrategy::kBNGamma: return "bn_gamma";
    case RemapStrategy::kWeightStd: return "weight_std";
    case RemapStrategy::kWeightL1: return "weight_l1";
    case RemapStrategy::kKernelDilate: return "kernel_dilate";
  }
  return "?";
}

RemapStrategy parse_strategy(std::string_view name) {
  for (RemapStrategy s : {RemapStrategy::kStandard, RemapStrategy::kBNGamma, RemapStrategy::kWeightStd,
                          RemapStrategy::kWeightL1, RemapStrategy::kKernelDilate})
    if (strategy_name(s) == name) return s;
  throw ConfigError("unknown remap strategy '" + std::string(name) +
                    "' (expected standard, bn_gamma, weight_std, weight_l1 or kernel_dilate)");
}

std::string_view rule_name(RemapRule rule) {
  switch (rule) {
    case RemapRule::kCopy: return "Copy";
    case RemapRule::kDepthReplicate: return "DepthReplicate";
    case RemapRule::kWidthPad: return "WidthPad";
    case RemapRule::kWidthTruncate: return "WidthTruncate";
    case RemapRule::kChannelSelect: return "ChannelSelect";
    case RemapRule::kGroupSlice: return "GroupSlice";
    case RemapRule::kKernelCenterEmbed: return "KernelCenterEmbed";
    case RemapRule::kKernelCenterCrop: return "KernelCenterCrop";
    case RemapRule::kKernelDilate: return "KernelDilate";
    case RemapRule::kFreshInit: return "FreshInit";
  }
  return "?";
}

std::string RemapPlan::dump() const {
  std::ostringstream os;
  for (const RemapEntry& e : entries) {
    os << e.target << " " << shape_str(e.target_shape) << " <- ";
    if (e.source.empty()) {
      os << "(none)";
    } else {
      os << e.source << " " << shape_str(e.source_shape);
    }
    os << " :";
    for (std::size_t i = 0; i < e.steps.size(); ++i) os << (i ? " -> " : " ") << describe_step(e.steps[i]);
    os << "\n";
  }
  return os.str();
}

Tensor apply_entry(const RemapEntry& entry, const Tensor& source) {
  Tensor t = source;
  for (const RemapStep& s : entry.steps) {
    switch (s.rule) {
      case RemapRule::kCopy:
      case RemapRule::kDepthReplicate: break;
      case RemapRule::kWidthPad:
      case RemapRule::kWidthTruncate: {
        Shape target = t.shape();
        target.at(s.dim) = s.size;
        t = remap_width(t, target, s.fill);
        break;
      }
      case RemapRule::kChannelSelect: t = select_channels(t, s.dim, s.indices); break;
      case RemapRule::kGroupSlice: t = remap_grouped(t, static_cast<int>(s.size)); break;
      case RemapRule::kKernelCenterEmbed:
      case RemapRule::kKernelCenterCrop: t = remap_kernel(t, static_cast<int>(s.size)); break;
      case RemapRule::kKernelDilate: t = remap_kernel_dilated(t, static_cast<int>(s.size)); break;
      case RemapRule::kFreshInit: throw RemapError("FreshInit entries have no source to apply");
    }
  }
  if (t.shape() != entry.target_shape)
    throw RemapError("remap of '" + entry.target + "' produced " + shape_str(t.shape()) + ", expected " +
                     shape_str(entry.target_shape));
  return t.same_storage(source) ? source.clone() : t;
}

std::string supernet_prefix(const SearchSpace& space, std::size_t stage, std::size_t layer, std::size_t cand) {
  const std::string base = layer_prefix(stage, layer);
  if (space.stages.at(stage).layers.at(layer).ops.size() < 2) return base;
  return base + ".cand." + std::to_string(cand);
}

namespace {

void check_stage_alignment(std::size_t seed_stages, std::size_t target_stages) {
  if (seed_stages != target_stages)
    throw RemapError("stage misalignment: seed has " + std::to_string(seed_stages) + " stages, target has " +
                     std::to_string(target_stages));
}

}  // namespace

RemapResult remap_seed_to_supernet(const ArchDescriptor& seed, const ParamMap& seed_params, const SearchSpace& space,
                                   const RemapOptions& options) {
  check_stage_alignment(seed.stages.size(), space.stages.size());
  Remapper r(seed_params, options);
  r.op(seed.stem, "stem", space.stem, "stem", kSameLayer);
  int channels = space.stem.out_channels;
  for (std::size_t s = 0; s < space.stages.size(); ++s) {
    const auto& seed_layers = seed.stages[s].layers;
    const auto& layers = space.stages[s].layers;
    const auto src = depth_sources(seed_layers.size(), layers.size());
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::size_t from = src[l] != l ? src[l] : kSameLayer;
      for (std::size_t c = 0; c < layers[l].ops.size(); ++c)
        r.op(seed_layers[src[l]], layer_prefix(s, src[l]), layers[l].ops[c], supernet_prefix(space, s, l, c), from);
    }
    channels = space.stages[s].spec.out_channels;
  }
  r.head(seed.head, seed.feature_channels(), space.head, channels);
  return r.take();
}

RemapResult remap_supernet_to_target(const SearchSpace& space, const ParamMap& super_params,
                                     const ArchDescriptor& arch) {
  check_stage_alignment(space.stages.size(), arch.stages.size());
  Remapper r(super_params, {});
  r.copy_prefix("stem.", "stem.");
  for (std::size_t s = 0; s < arch.stages.size(); ++s) {
    for (std::size_t l = 0; l < arch.stages[s].layers.size(); ++l) {
      const OpSpec& op = arch.stages[s].layers[l];
      if (l >= space.stages[s].layers.size())
        throw RemapError("stage " + std::to_string(s) + " has more layers than the search space allows");
      const std::size_t c = find_candidate(space.stages[s].layers[l], op);
      if (c == std::numeric_limits<std::size_t>::max())
        throw RemapError("op " + op.label() + " is absent from layer " + std::to_string(l) + " of stage " +
                         std::to_string(s));
      if (op.is_identity()) continue;
      r.copy_prefix(supernet_prefix(space, s, l, c) + ".", layer_prefix(s, l) + ".");
    }
  }
  r.copy_prefix("head.", "head.");
  return r.take();
}

RemapResult remap_seed_to_target(const ArchDescriptor& seed, const ParamMap& seed_params, const ArchDescriptor& arch,
                                 const RemapOptions& options) {
  check_stage_alignment(seed.stages.size(), arch.stages.size());
  Remapper r(seed_params, options);
  r.op(seed.stem, "stem", arch.stem, "stem", kSameLayer);
  for (std::size_t s = 0; s < arch.stages.size(); ++s) {
    const auto& seed_layers = seed.stages[s].layers;
    const auto& layers = arch.stages[s].layers;
    const auto src = depth_sources(seed_layers.size(), layers.size());
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::size_t from = src[l] != l ? src[l] : kSameLayer;
      r.op(seed_layers[src[l]], layer_prefix(s, src[l]), layers[l], layer_prefix(s, l), from);
    }
  }
  r.head(seed.head, seed.feature_channels(), arch.head, arch.feature_channels());
  return r.take();
}

}  // namespace fna
