#include "fna/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "fna/error.hpp"

namespace fna {

namespace {

void require(bool condition, const std::string& message) {
  if (!condition) throw ShapeError(message);
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* name) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + name + " must have rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

// Valid output range [lo, hi) along one axis for a given kernel tap.
struct TapRange {
  int lo;
  int hi;
  int offset;  // input index = out * stride + offset
};

std::vector<TapRange> tap_ranges(int in, int out, int kernel, int stride, int padding, int dilation) {
  std::vector<TapRange> taps(static_cast<std::size_t>(kernel));
  for (int kk = 0; kk < kernel; ++kk) {
    const int offset = kk * dilation - padding;
    int lo = 0;
    while (lo < out && lo * stride + offset < 0) ++lo;
    int hi = out;
    while (hi > lo && (hi - 1) * stride + offset >= in) --hi;
    taps[static_cast<std::size_t>(kk)] = {lo, hi, offset};
  }
  return taps;
}

struct ConvGeometry {
  int n, c_in, h, w;
  int c_out, c_group, k;
  int groups, stride;
  int out_h, out_w;
  int in_row, out_row;  // row pitch of input / output planes
  std::vector<TapRange> rows, cols;
};

ConvGeometry conv_geometry(const Tensor& input, const ConvParams& p) {
  require_rank(input, 4, "conv2d", "input");
  require(p.weight.defined(), "conv2d: weight is undefined");
  require_rank(p.weight, 4, "conv2d", "weight");
  require(p.groups >= 1, "conv2d: groups must be positive");
  require(p.stride >= 1, "conv2d: stride must be positive");
  require(p.dilation >= 1, "conv2d: dilation must be positive");
  require(p.padding >= 0, "conv2d: padding must be non-negative");
  ConvGeometry g{};
  g.n = static_cast<int>(input.dim(0));
  g.c_in = static_cast<int>(input.dim(1));
  g.h = static_cast<int>(input.dim(2));
  g.w = static_cast<int>(input.dim(3));
  g.c_out = static_cast<int>(p.weight.dim(0));
  g.c_group = static_cast<int>(p.weight.dim(1));
  g.k = static_cast<int>(p.weight.dim(2));
  g.groups = p.groups;
  g.stride = p.stride;
  require(static_cast<int>(p.weight.dim(3)) == g.k, "conv2d: kernel must be square, got weight " +
                                                         shape_str(p.weight.shape()));
  require(g.k % 2 == 1, "conv2d: kernel size must be odd, got " + std::to_string(g.k));
  require(g.c_group * g.groups == g.c_in, "conv2d: input channels " + std::to_string(g.c_in) +
                                              " != weight.shape[1] (" + std::to_string(g.c_group) +
                                              ") * groups (" + std::to_string(g.groups) + ")");
  require(g.c_out % g.groups == 0, "conv2d: output channels " + std::to_string(g.c_out) +
                                       " not divisible by groups " + std::to_string(g.groups));
  g.out_h = conv_out_extent(g.h, g.k, p.stride, p.padding, p.dilation);
  g.out_w = conv_out_extent(g.w, g.k, p.stride, p.padding, p.dilation);
  require(g.out_h >= 1 && g.out_w >= 1, "conv2d: output spatial size would be empty for input " +
                                            shape_str(input.shape()));
  if (g.k == 1 && p.stride == 1 && p.padding == 0) {
    // Pointwise: treat the whole plane as one contiguous row.
    g.rows = {{0, 1, 0}};
    g.cols = {{0, g.h * g.w, 0}};
    g.in_row = g.h * g.w;
    g.out_row = g.h * g.w;
  } else {
    g.in_row = g.w;
    g.out_row = g.out_w;
    g.rows = tap_ranges(g.h, g.out_h, g.k, p.stride, p.padding, p.dilation);
    g.cols = tap_ranges(g.w, g.out_w, g.k, p.stride, p.padding, p.dilation);
  }
  return g;
}

// Visits every (output row, input row, column range) contributing through one
// kernel tap. The callback receives pointers already offset to the first
// column and the number of columns.
template <typename RowFn>
void for_each_tap_row(const ConvGeometry& g, int kh, int kw, RowFn&& fn) {
  const int in_w = g.in_row;
  const int out_w = g.out_row;
  const TapRange& r = g.rows[static_cast<std::size_t>(kh)];
  const TapRange& c = g.cols[static_cast<std::size_t>(kw)];
  for (int oh = r.lo; oh < r.hi; ++oh) {
    const int ih = oh * g.stride + r.offset;
    fn(static_cast<std::ptrdiff_t>(oh) * out_w + c.lo, static_cast<std::ptrdiff_t>(ih) * in_w +
                                                            static_cast<std::ptrdiff_t>(c.lo) * g.stride + c.offset,
       c.hi - c.lo);
  }
}

thread_local MaddsCounter* active_counter = nullptr;

void count_madds(long long madds) {
  if (active_counter) active_counter->add(madds);
}

}  // namespace

MaddsCounter::MaddsCounter() : outer_(active_counter) { active_counter = this; }

MaddsCounter::~MaddsCounter() { active_counter = outer_; }

void MaddsCounter::add(long long madds) {
  total_ += madds;
  if (outer_) outer_->add(madds);
}

int conv_out_extent(int in, int kernel, int stride, int padding, int dilation) {
  return (in + 2 * padding - dilation * (kernel - 1) - 1) / stride + 1;
}

Tensor conv2d(const Tensor& input, const ConvParams& params) {
  ConvGeometry g = conv_geometry(input, params);
  const int in_plane = g.h * g.w;
  const int out_plane = g.out_h * g.out_w;
  const int oc_per_group = g.c_out / g.groups;
  const int kk = g.k * g.k;
  const int stride = g.stride;
  count_madds(static_cast<long long>(g.n) * out_plane * kk * g.c_group * g.c_out);

  std::vector<double> out(static_cast<std::size_t>(g.n) * g.c_out * out_plane, 0.0);
  const double* x = input.data().data();
  const double* wt = params.weight.data().data();
  for (int n = 0; n < g.n; ++n) {
    for (int oc = 0; oc < g.c_out; ++oc) {
      const int grp = oc / oc_per_group;
      double* op = out.data() + (static_cast<std::size_t>(n) * g.c_out + oc) * out_plane;
      for (int icl = 0; icl < g.c_group; ++icl) {
        const int ic = grp * g.c_group + icl;
        const double* ip = x + (static_cast<std::size_t>(n) * g.c_in + ic) * in_plane;
        const double* wp = wt + (static_cast<std::size_t>(oc) * g.c_group + icl) * kk;
        for (int kh = 0; kh < g.k; ++kh) {
          for (int kw = 0; kw < g.k; ++kw) {
            const double wv = wp[kh * g.k + kw];
            for_each_tap_row(g, kh, kw, [&](std::ptrdiff_t o, std::ptrdiff_t i, int count) {
              double* dst = op + o;
              const double* src = ip + i;
              if (stride == 1) {
                for (int t = 0; t < count; ++t) dst[t] += wv * src[t];
              } else {
                for (int t = 0; t < count; ++t) dst[t] += wv * src[t * stride];
              }
            });
          }
        }
      }
    }
  }

  Tensor weight = params.weight;
  Shape out_shape{static_cast<std::size_t>(g.n), static_cast<std::size_t>(g.c_out),
                  static_cast<std::size_t>(g.out_h), static_cast<std::size_t>(g.out_w)};
  return Tensor::make_result(std::move(out_shape), std::move(out), {input, weight}, [g](detail::Node& self) {
    detail::Node& in_node = *self.parents[0];
    detail::Node& w_node = *self.parents[1];
    const int in_plane = g.h * g.w;
    const int out_plane = g.out_h * g.out_w;
    const int oc_per_group = g.c_out / g.groups;
    const int kk = g.k * g.k;
    const int stride = g.stride;
    const double* gout = self.grad.data();
    const double* x = in_node.data.data();
    const double* wt = w_node.data.data();
    double* gin = in_node.requires_grad ? in_node.ensure_grad().data() : nullptr;
    double* gw = w_node.requires_grad ? w_node.ensure_grad().data() : nullptr;
    for (int n = 0; n < g.n; ++n) {
      for (int oc = 0; oc < g.c_out; ++oc) {
        const int grp = oc / oc_per_group;
        const double* go = gout + (static_cast<std::size_t>(n) * g.c_out + oc) * out_plane;
        for (int icl = 0; icl < g.c_group; ++icl) {
          const int ic = grp * g.c_group + icl;
          const std::size_t in_off = (static_cast<std::size_t>(n) * g.c_in + ic) * in_plane;
          const std::size_t w_off = (static_cast<std::size_t>(oc) * g.c_group + icl) * kk;
          for (int kh = 0; kh < g.k; ++kh) {
            for (int kw = 0; kw < g.k; ++kw) {
              const double wv = wt[w_off + kh * g.k + kw];
              double acc = 0.0;
              for_each_tap_row(g, kh, kw, [&](std::ptrdiff_t o, std::ptrdiff_t i, int count) {
                const double* src_go = go + o;
                if (gin) {
                  double* dst = gin + in_off + i;
                  if (stride == 1) {
                    for (int t = 0; t < count; ++t) dst[t] += wv * src_go[t];
                  } else {
                    for (int t = 0; t < count; ++t) dst[t * stride] += wv * src_go[t];
                  }
                }
                if (gw) {
                  const double* src = x + in_off + i;
                  if (stride == 1) {
                    for (int t = 0; t < count; ++t) acc += src_go[t] * src[t];
                  } else {
                    for (int t = 0; t < count; ++t) acc += src_go[t] * src[t * stride];
                  }
                }
              });
              if (gw) gw[w_off + kh * g.k + kw] += acc;
            }
          }
        }
      }
    }
  });
}

Tensor depthwise_conv2d(const Tensor& input, const ConvParams& params) {
  require_rank(input, 4, "depthwise_conv2d", "input");
  const int c_in = static_cast<int>(input.dim(1));
  if (params.groups != c_in || params.out_channels() != c_in) {
    throw ShapeError("depthwise_conv2d: groups (" + std::to_string(params.groups) + ") and output channels (" +
                     std::to_string(params.out_channels()) + ") must equal input channels (" +
                     std::to_string(c_in) + ")");
  }
  return conv2d(input, params);
}

Tensor batch_norm(const Tensor& input, BNParams& params, bool training) {
  return batch_norm(input, params, training ? BNMode::kTrain : BNMode::kEval);
}

Tensor batch_norm(const Tensor& input, BNParams& params, BNMode mode) {
  if (params.identity_mode) return input;
  require(input.rank() == 4 || input.rank() == 2, "batch_norm: input must be [N,C,H,W] or [N,C], got " +
                                                      shape_str(input.shape()));
  const std::size_t n = input.dim(0);
  const std::size_t c = input.dim(1);
  const std::size_t plane = input.rank() == 4 ? input.dim(2) * input.dim(3) : 1;
  require(params.channels() == c && params.beta.numel() == c && params.running_mean.numel() == c &&
              params.running_var.numel() == c,
          "batch_norm: channel count " + std::to_string(c) + " != parameter length " +
              std::to_string(params.channels()));
  const std::size_t count = n * plane;
  const double* x = input.data().data();
  const double eps = params.eps;

  const bool batch_stats = mode == BNMode::kTrain || mode == BNMode::kBatchStats;
  std::vector<double> mean(c), invstd(c);
  if (batch_stats) {
    std::vector<double> var(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = x + (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const double m = s / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = x + (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - m) * (p[i] - m);
      }
      mean[ch] = m;
      var[ch] = sq / static_cast<double>(count);
      invstd[ch] = 1.0 / std::sqrt(var[ch] + eps);
    }
    if (!all_finite(mean) || !all_finite(var)) throw DivergenceError("batch_norm: non-finite batch statistics");
    if (mode == BNMode::kTrain) {
      auto rm = params.running_mean.mutable_data();
      auto rv = params.running_var.mutable_data();
      const double unbias = count > 1 ? static_cast<double>(count) / static_cast<double>(count - 1) : 1.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        rm[ch] = (1.0 - params.momentum) * rm[ch] + params.momentum * mean[ch];
        rv[ch] = (1.0 - params.momentum) * rv[ch] + params.momentum * var[ch] * unbias;
      }
    }
  } else {
    auto rm = params.running_mean.data();
    auto rv = params.running_var.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      if (!std::isfinite(rm[ch]) || !std::isfinite(rv[ch]) || rv[ch] < 0.0) {
        throw DivergenceError("batch_norm: invalid running statistics in channel " + std::to_string(ch));
      }
      mean[ch] = rm[ch];
      invstd[ch] = 1.0 / std::sqrt(rv[ch] + eps);
    }
  }

  std::vector<double> xhat(input.numel());
  std::vector<double> out(input.numel());
  auto gamma = params.gamma.data();
  auto beta = params.beta.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double xh = (x[off + i] - mean[ch]) * invstd[ch];
        xhat[off + i] = xh;
        out[off + i] = gamma[ch] * xh + beta[ch];
      }
    }
  }

  Tensor gamma_t = mode == BNMode::kFrozen ? params.gamma.detach() : params.gamma;
  Tensor beta_t = mode == BNMode::kFrozen ? params.beta.detach() : params.beta;
  return Tensor::make_result(
      input.shape(), std::move(out), {input, gamma_t, beta_t},
      [n, c, plane, batch_stats, invstd = std::move(invstd), xhat = std::move(xhat)](detail::Node& self) {
        detail::Node& in_node = *self.parents[0];
        detail::Node& g_node = *self.parents[1];
        detail::Node& b_node = *self.parents[2];
        const double* gy = self.grad.data();
        const double* gamma = g_node.data.data();
        const double count = static_cast<double>(n * plane);
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_gy = 0.0;
          double sum_gy_xhat = 0.0;
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_gy += gy[off + i];
              sum_gy_xhat += gy[off + i] * xhat[off + i];
            }
          }
          if (g_node.requires_grad) g_node.ensure_grad()[ch] += sum_gy_xhat;
          if (b_node.requires_grad) b_node.ensure_grad()[ch] += sum_gy;
          if (in_node.requires_grad) {
            auto& gx = in_node.ensure_grad();
            const double k = gamma[ch] * invstd[ch];
            for (std::size_t b = 0; b < n; ++b) {
              const std::size_t off = (b * c + ch) * plane;
              for (std::size_t i = 0; i < plane; ++i) {
                if (batch_stats) {
                  gx[off + i] += k * (gy[off + i] - sum_gy / count - xhat[off + i] * sum_gy_xhat / count);
                } else {
                  gx[off + i] += k * gy[off + i];
                }
              }
            }
          }
        }
      });
}

Tensor relu6(const Tensor& input) {
  auto x = input.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::clamp(x[i], 0.0, 6.0);
  return Tensor::make_result(input.shape(), std::move(out), {input}, [](detail::Node& self) {
    detail::Node& in = *self.parents[0];
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (in.data[i] > 0.0 && in.data[i] < 6.0) g[i] += self.grad[i];
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  auto x = a.data();
  auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (auto& parent : self.parents) {
      if (!parent->requires_grad) continue;
      auto& g = parent->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  auto x = a.data();
  auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    detail::Node& pa = *self.parents[0];
    detail::Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
    }
  });
}

Tensor scale(const Tensor& input, double factor) {
  auto x = input.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = factor * x[i];
  return Tensor::make_result(input.shape(), std::move(out), {input}, [factor](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

Tensor add_scalar(const Tensor& input, double shift) {
  auto x = input.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + shift;
  return Tensor::make_result(input.shape(), std::move(out), {input}, [](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor sum(const Tensor& input) {
  double total = 0.0;
  for (double v : input.data()) total += v;
  return Tensor::make_result({}, {total}, {input}, [](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor log10(const Tensor& input) {
  auto x = input.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0)) throw Error("log10: non-positive argument " + std::to_string(x[i]));
    out[i] = std::log10(x[i]);
  }
  return Tensor::make_result(input.shape(), std::move(out), {input}, [](detail::Node& self) {
    detail::Node& in = *self.parents[0];
    auto& g = in.ensure_grad();
    const double inv_ln10 = 1.0 / std::log(10.0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * inv_ln10 / in.data[i];
  });
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(input, 2, "linear", "input");
  require_rank(weight, 2, "linear", "weight");
  const std::size_t n = input.dim(0);
  const std::size_t in_f = input.dim(1);
  const std::size_t out_f = weight.dim(0);
  require(weight.dim(1) == in_f, "linear: input features " + std::to_string(in_f) + " != weight.shape[1] " +
                                     std::to_string(weight.dim(1)));
  const bool has_bias = bias.defined();
  if (has_bias) require(bias.numel() == out_f, "linear: bias length must equal output features");
  count_madds(static_cast<long long>(n * in_f * out_f));
  auto x = input.data();
  auto w = weight.data();
  std::vector<double> out(n * out_f);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t o = 0; o < out_f; ++o) {
      double acc = has_bias ? bias.data()[o] : 0.0;
      for (std::size_t i = 0; i < in_f; ++i) acc += w[o * in_f + i] * x[b * in_f + i];
      out[b * out_f + o] = acc;
    }
  }
  std::vector<Tensor> parents{input, weight};
  if (has_bias) parents.push_back(bias);
  return Tensor::make_result({n, out_f}, std::move(out), std::move(parents),
                             [n, in_f, out_f, has_bias](detail::Node& self) {
                               detail::Node& xi = *self.parents[0];
                               detail::Node& wi = *self.parents[1];
                               const double* gy = self.grad.data();
                               if (xi.requires_grad) {
                                 auto& gx = xi.ensure_grad();
                                 for (std::size_t b = 0; b < n; ++b)
                                   for (std::size_t o = 0; o < out_f; ++o)
                                     for (std::size_t i = 0; i < in_f; ++i)
                                       gx[b * in_f + i] += gy[b * out_f + o] * wi.data[o * in_f + i];
                               }
                               if (wi.requires_grad) {
                                 auto& gw = wi.ensure_grad();
                                 for (std::size_t b = 0; b < n; ++b)
                                   for (std::size_t o = 0; o < out_f; ++o)
                                     for (std::size_t i = 0; i < in_f; ++i)
                                       gw[o * in_f + i] += gy[b * out_f + o] * xi.data[b * in_f + i];
                               }
                               if (has_bias && self.parents[2]->requires_grad) {
                                 auto& gb = self.parents[2]->ensure_grad();
                                 for (std::size_t b = 0; b < n; ++b)
                                   for (std::size_t o = 0; o < out_f; ++o) gb[o] += gy[b * out_f + o];
                               }
                             });
}

Tensor add_channel_bias(const Tensor& input, const Tensor& bias) {
  require_rank(input, 4, "add_channel_bias", "input");
  const std::size_t n = input.dim(0);
  const std::size_t c = input.dim(1);
  const std::size_t plane = input.dim(2) * input.dim(3);
  require(bias.numel() == c, "add_channel_bias: bias length " + std::to_string(bias.numel()) +
                                 " != channels " + std::to_string(c));
  auto x = input.data();
  auto bv = bias.data();
  std::vector<double> out(x.size());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t idx = (b * c + ch) * plane + i;
        out[idx] = x[idx] + bv[ch];
      }
  return Tensor::make_result(input.shape(), std::move(out), {input, bias}, [n, c, plane](detail::Node& self) {
    if (self.parents[0]->requires_grad) {
      auto& gx = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& gb = self.parents[1]->ensure_grad();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < plane; ++i) gb[ch] += self.grad[(b * c + ch) * plane + i];
    }
  });
}

Tensor global_avg_pool(const Tensor& input) {
  require_rank(input, 4, "global_avg_pool", "input");
  const std::size_t n = input.dim(0);
  const std::size_t c = input.dim(1);
  const std::size_t plane = input.dim(2) * input.dim(3);
  auto x = input.data();
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < plane; ++j) s += x[i * plane + j];
    out[i] = s / static_cast<double>(plane);
  }
  return Tensor::make_result({n, c}, std::move(out), {input}, [n, c, plane](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < n * c; ++i) {
      const double v = self.grad[i] / static_cast<double>(plane);
      for (std::size_t j = 0; j < plane; ++j) g[i * plane + j] += v;
    }
  });
}

Tensor upsample_nearest(const Tensor& input, int factor) {
  require_rank(input, 4, "upsample_nearest", "input");
  require(factor >= 1, "upsample_nearest: factor must be positive");
  if (factor == 1) return input;
  const std::size_t n = input.dim(0);
  const std::size_t c = input.dim(1);
  const std::size_t h = input.dim(2);
  const std::size_t w = input.dim(3);
  const std::size_t f = static_cast<std::size_t>(factor);
  const std::size_t oh = h * f;
  const std::size_t ow = w * f;
  auto x = input.data();
  std::vector<double> out(n * c * oh * ow);
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) out[(p * oh + i) * ow + j] = x[(p * h + i / f) * w + j / f];
  return Tensor::make_result({n, c, oh, ow}, std::move(out), {input}, [n, c, h, w, f](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    const std::size_t oh = h * f;
    const std::size_t ow = w * f;
    for (std::size_t p = 0; p < n * c; ++p)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) g[(p * h + i / f) * w + j / f] += self.grad[(p * oh + i) * ow + j];
  });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require(logits.rank() == 2 || logits.rank() == 4,
          "softmax_cross_entropy: logits must be [N,K] or [N,K,H,W], got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0);
  const std::size_t k = logits.dim(1);
  const std::size_t plane = logits.rank() == 4 ? logits.dim(2) * logits.dim(3) : 1;
  const std::size_t items = n * plane;
  require(labels.size() == items, "softmax_cross_entropy: expected " + std::to_string(items) + " labels, got " +
                                      std::to_string(labels.size()));
  auto z = logits.data();
  std::vector<double> probs(logits.numel());
  double loss = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < plane; ++p) {
      const int label = labels[b * plane + p];
      if (label < 0 || static_cast<std::size_t>(label) >= k) {
        throw ShapeError("softmax_cross_entropy: label " + std::to_string(label) + " outside [0," +
                         std::to_string(k) + ")");
      }
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, z[(b * k + c) * plane + p]);
      double s = 0.0;
      for (std::size_t c = 0; c < k; ++c) s += std::exp(z[(b * k + c) * plane + p] - mx);
      const double lse = mx + std::log(s);
      for (std::size_t c = 0; c < k; ++c) {
        const std::size_t idx = (b * k + c) * plane + p;
        probs[idx] = std::exp(z[idx] - lse);
      }
      loss += lse - z[(b * k + static_cast<std::size_t>(label)) * plane + p];
    }
  }
  loss /= static_cast<double>(items);
  if (!std::isfinite(loss)) throw DivergenceError("softmax_cross_entropy: non-finite loss");
  std::vector<int> owned(labels.begin(), labels.end());
  return Tensor::make_result(
      {}, {loss}, {logits}, [n, k, plane, items, probs = std::move(probs), owned = std::move(owned)](detail::Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        const double scale = self.grad[0] / static_cast<double>(items);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t c = 0; c < k; ++c)
            for (std::size_t p = 0; p < plane; ++p) {
              const std::size_t idx = (b * k + c) * plane + p;
              const double target = static_cast<std::size_t>(owned[b * plane + p]) == c ? 1.0 : 0.0;
              g[idx] += scale * (probs[idx] - target);
            }
      });
}

Tensor softmax(const Tensor& logits) {
  require_rank(logits, 1, "softmax", "logits");
  auto z = logits.data();
  require(!z.empty(), "softmax: empty input");
  const double mx = *std::max_element(z.begin(), z.end());
  std::vector<double> out(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[i] = std::exp(z[i] - mx);
    s += out[i];
  }
  for (double& v : out) v /= s;
  return Tensor::make_result(logits.shape(), out, {logits}, [out](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    double dot = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) dot += self.grad[i] * out[i];
    for (std::size_t i = 0; i < out.size(); ++i) g[i] += out[i] * (self.grad[i] - dot);
  });
}

Tensor weighted_sum(std::span<const Tensor> inputs, const Tensor& weights) {
  require(!inputs.empty(), "weighted_sum: no inputs");
  require_rank(weights, 1, "weighted_sum", "weights");
  require(weights.numel() == inputs.size(), "weighted_sum: " + std::to_string(inputs.size()) + " inputs but " +
                                                std::to_string(weights.numel()) + " weights");
  const Shape& shape = inputs[0].shape();
  for (std::size_t i = 1; i < inputs.size(); ++i) {
    if (inputs[i].shape() != shape) {
      throw ShapeError("weighted_sum: input " + std::to_string(i) + " has shape " + shape_str(inputs[i].shape()) +
                       ", expected " + shape_str(shape));
    }
  }
  auto wv = weights.data();
  std::vector<double> out(shape_numel(shape), 0.0);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto x = inputs[k].data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += wv[k] * x[i];
  }
  std::vector<Tensor> parents(inputs.begin(), inputs.end());
  parents.push_back(weights);
  const std::size_t count = inputs.size();
  return Tensor::make_result(shape, std::move(out), std::move(parents), [count](detail::Node& self) {
    detail::Node& w_node = *self.parents[count];
    for (std::size_t k = 0; k < count; ++k) {
      detail::Node& in = *self.parents[k];
      if (in.requires_grad) {
        auto& g = in.ensure_grad();
        const double wk = w_node.data[k];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += wk * self.grad[i];
      }
      if (w_node.requires_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * in.data[i];
        w_node.ensure_grad()[k] += acc;
      }
    }
  });
}

Tensor dot_const(const Tensor& input, std::span<const double> constants) {
  require_rank(input, 1, "dot_const", "input");
  require(input.numel() == constants.size(), "dot_const: length mismatch " + std::to_string(input.numel()) +
                                                 " vs " + std::to_string(constants.size()));
  auto x = input.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * constants[i];
  std::vector<double> c(constants.begin(), constants.end());
  return Tensor::make_result({}, {acc}, {input}, [c = std::move(c)](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < c.size(); ++i) g[i] += self.grad[0] * c[i];
  });
}

std::vector<int> argmax_classes(const Tensor& logits) {
  require(logits.rank() == 2 || logits.rank() == 4, "argmax_classes: logits must be [N,K] or [N,K,H,W]");
  const std::size_t n = logits.dim(0);
  const std::size_t k = logits.dim(1);
  const std::size_t plane = logits.rank() == 4 ? logits.dim(2) * logits.dim(3) : 1;
  auto z = logits.data();
  std::vector<int> out(n * plane);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < plane; ++p) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c) {
        if (z[(b * k + c) * plane + p] > z[(b * k + best) * plane + p]) best = c;
      }
      out[b * plane + p] = static_cast<int>(best);
    }
  return out;
}

}  // namespace fna
