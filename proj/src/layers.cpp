#include "panet/layers.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace panet {

namespace {

void require_rank4(const Shape& s, const char* op) {
  if (s.size() != 4) {
    throw ShapeError(std::string(op) + ": expected (N,C,H,W), got " + shape_str(s));
  }
}

struct ConvGeometry {
  std::ptrdiff_t n, cin, h, w, cout, hout, wout, k, stride, pad, groups, cin_g, cout_g;

  // Output columns [lo, hi) whose input column for tap `kw` is in range.
  std::pair<std::ptrdiff_t, std::ptrdiff_t> col_range(std::ptrdiff_t tap) const {
    std::ptrdiff_t lo = 0;
    if (pad > tap) lo = (pad - tap + stride - 1) / stride;
    std::ptrdiff_t hi = (w - 1 + pad - tap) / stride + 1;
    if (w - 1 + pad - tap < 0) hi = 0;
    return {lo, std::min(hi, wout)};
  }
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& x, const ConvParams<T>& p, const char* op) {
  require_rank4(x.shape(), op);
  const auto& ws = p.weight.shape();
  if (ws.size() != 4 || ws[2] != p.kernel || ws[3] != p.kernel) {
    throw ShapeError(std::string(op) + ": weight shape " + shape_str(ws) +
                     " does not match kernel " + std::to_string(p.kernel));
  }
  if (p.groups == 0 || p.stride == 0) throw ShapeError(std::string(op) + ": groups/stride must be positive");
  if (x.dim(1) != p.in_channels()) {
    throw ShapeError(std::string(op) + ": input has " + std::to_string(x.dim(1)) +
                     " channels, weights expect " + std::to_string(p.in_channels()));
  }
  if (p.out_channels() % p.groups != 0) {
    throw ShapeError(std::string(op) + ": output channels not divisible by groups");
  }
  if (p.bias && p.bias->numel() != p.out_channels()) {
    throw ShapeError(std::string(op) + ": bias length " + std::to_string(p.bias->numel()) +
                     " != output channels " + std::to_string(p.out_channels()));
  }
  ConvGeometry g{};
  g.n = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = p.out_channels();
  g.k = p.kernel;
  g.stride = p.stride;
  g.pad = p.padding;
  g.groups = p.groups;
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  if (g.h + 2 * g.pad < g.k || g.w + 2 * g.pad < g.k) {
    throw ShapeError(std::string(op) + ": kernel larger than padded input " + shape_str(x.shape()));
  }
  g.hout = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.wout = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  return g;
}

}  // namespace

template <typename T>
LayerNormParams<T> make_layer_norm(std::size_t channels) {
  return {Tensor<T>::full({channels}, T(1), true), Tensor<T>::zeros({channels}, true), T(1e-6)};
}

template <typename T>
ConvParams<T> make_conv(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                        std::size_t stride, std::size_t padding, std::size_t groups, Rng& rng) {
  Shape ws{out_channels, in_channels / groups, kernel, kernel};
  std::vector<T> w(shape_numel(ws));
  for (auto& v : w) v = static_cast<T>(truncated_normal(rng, 0.02));
  ConvParams<T> p;
  p.weight = Tensor<T>(ws, std::move(w), true);
  p.bias = Tensor<T>::zeros({out_channels}, true);
  p.groups = groups;
  p.kernel = kernel;
  p.padding = padding;
  p.stride = stride;
  return p;
}

template <typename T>
ConvParams<T> make_pointwise(std::size_t in_channels, std::size_t out_channels, Rng& rng) {
  return make_conv<T>(in_channels, out_channels, 1, 1, 0, 1, rng);
}

template <typename T>
ConvParams<T> make_depthwise3x3(std::size_t channels, Rng& rng) {
  return make_conv<T>(channels, channels, 3, 1, 1, channels, rng);
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const LayerNormParams<T>& p) {
  require_rank4(x.shape(), "layer_norm");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (p.gain.numel() != c || p.bias.numel() != c) {
    throw ShapeError("layer_norm: input has " + std::to_string(c) + " channels, params sized for " +
                     std::to_string(p.gain.numel()));
  }
  if (!(p.eps > T(0))) throw std::invalid_argument("layer_norm: eps must be positive");
  auto xd = x.data();
  auto gd = p.gain.data();
  auto bd = p.bias.data();
  std::vector<T> out(xd.size());
  // Saved for backward: normalized values and per-position inverse std.
  auto xhat = std::make_shared<std::vector<T>>(xd.size());
  auto inv_std = std::make_shared<std::vector<T>>(n * hw);
  for (std::size_t b = 0; b < n; ++b) {
    const T* xb = xd.data() + b * c * hw;
    for (std::size_t pos = 0; pos < hw; ++pos) {
      T mean = 0;
      for (std::size_t ch = 0; ch < c; ++ch) mean += xb[ch * hw + pos];
      mean /= static_cast<T>(c);
      T var = 0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        T d = xb[ch * hw + pos] - mean;
        var += d * d;
      }
      var /= static_cast<T>(c);
      const T is = T(1) / std::sqrt(var + p.eps);
      (*inv_std)[b * hw + pos] = is;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t i = b * c * hw + ch * hw + pos;
        const T xh = (xd[i] - mean) * is;
        (*xhat)[i] = xh;
        out[i] = xh * gd[ch] + bd[ch];
      }
    }
  }
  auto gain_node = p.gain.node();
  return Tensor<T>::from_op(
      x.shape(), std::move(out), {x, p.gain, p.bias},
      [n, c, hw, xhat, inv_std, gain_node](std::span<const T> g, std::vector<std::vector<T>>& gin) {
        const auto& gain = gain_node->data;
        std::vector<T> gxh(c);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t pos = 0; pos < hw; ++pos) {
            T mean_g = 0, mean_gx = 0;
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t i = b * c * hw + ch * hw + pos;
              gxh[ch] = g[i] * gain[ch];
              mean_g += gxh[ch];
              mean_gx += gxh[ch] * (*xhat)[i];
              if (!gin[1].empty()) gin[1][ch] += g[i] * (*xhat)[i];
              if (!gin[2].empty()) gin[2][ch] += g[i];
            }
            if (gin[0].empty()) continue;
            mean_g /= static_cast<T>(c);
            mean_gx /= static_cast<T>(c);
            const T is = (*inv_std)[b * hw + pos];
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t i = b * c * hw + ch * hw + pos;
              gin[0][i] += is * (gxh[ch] - mean_g - (*xhat)[i] * mean_gx);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p) {
  const ConvGeometry g = conv_geometry(x, p, "conv2d");
  const std::ptrdiff_t plane_in = g.h * g.w, plane_out = g.hout * g.wout;
  auto xd = x.data();
  auto wd = p.weight.data();
  std::vector<T> out(static_cast<std::size_t>(g.n * g.cout * plane_out), T(0));

  for (std::ptrdiff_t b = 0; b < g.n; ++b) {
    for (std::ptrdiff_t co = 0; co < g.cout; ++co) {
      T* o = out.data() + (b * g.cout + co) * plane_out;
      if (p.bias) {
        const T bv = p.bias->data()[co];
        for (std::ptrdiff_t i = 0; i < plane_out; ++i) o[i] = bv;
      }
      const std::ptrdiff_t grp = co / g.cout_g;
      for (std::ptrdiff_t cl = 0; cl < g.cin_g; ++cl) {
        const T* xp = xd.data() + (b * g.cin + grp * g.cin_g + cl) * plane_in;
        const T* wk = wd.data() + (co * g.cin_g + cl) * g.k * g.k;
        for (std::ptrdiff_t kh = 0; kh < g.k; ++kh) {
          for (std::ptrdiff_t kw = 0; kw < g.k; ++kw) {
            const T wv = wk[kh * g.k + kw];
            const auto [lo, hi] = g.col_range(kw);
            for (std::ptrdiff_t oh = 0; oh < g.hout; ++oh) {
              const std::ptrdiff_t ih = oh * g.stride + kh - g.pad;
              if (ih < 0 || ih >= g.h) continue;
              const std::ptrdiff_t row = ih * g.w + kw - g.pad;
              T* orow = o + oh * g.wout;
              for (std::ptrdiff_t ow = lo; ow < hi; ++ow) orow[ow] += wv * xp[row + ow * g.stride];
            }
          }
        }
      }
    }
  }

  std::vector<Tensor<T>> inputs{x, p.weight};
  if (p.bias) inputs.push_back(*p.bias);
  auto xn = x.node();
  auto wn = p.weight.node();
  Shape out_shape{static_cast<std::size_t>(g.n), static_cast<std::size_t>(g.cout),
                  static_cast<std::size_t>(g.hout), static_cast<std::size_t>(g.wout)};
  return Tensor<T>::from_op(
      std::move(out_shape), std::move(out), inputs,
      [g, xn, wn, plane_in, plane_out](std::span<const T> grad, std::vector<std::vector<T>>& gin) {
        const auto& xv = xn->data;
        const auto& wv_all = wn->data;
        const bool want_x = !gin[0].empty();
        const bool want_w = !gin[1].empty();
        const bool want_b = gin.size() > 2 && !gin[2].empty();
        for (std::ptrdiff_t b = 0; b < g.n; ++b) {
          for (std::ptrdiff_t co = 0; co < g.cout; ++co) {
            const T* go = grad.data() + (b * g.cout + co) * plane_out;
            if (want_b) {
              T acc = 0;
              for (std::ptrdiff_t i = 0; i < plane_out; ++i) acc += go[i];
              gin[2][co] += acc;
            }
            const std::ptrdiff_t grp = co / g.cout_g;
            for (std::ptrdiff_t cl = 0; cl < g.cin_g; ++cl) {
              const std::ptrdiff_t in_off = (b * g.cin + grp * g.cin_g + cl) * plane_in;
              const T* xp = xv.data() + in_off;
              T* gxp = want_x ? gin[0].data() + in_off : nullptr;
              const std::ptrdiff_t w_off = (co * g.cin_g + cl) * g.k * g.k;
              for (std::ptrdiff_t kh = 0; kh < g.k; ++kh) {
                for (std::ptrdiff_t kw = 0; kw < g.k; ++kw) {
                  const T wv = wv_all[w_off + kh * g.k + kw];
                  const auto [lo, hi] = g.col_range(kw);
                  T wacc = 0;
                  for (std::ptrdiff_t oh = 0; oh < g.hout; ++oh) {
                    const std::ptrdiff_t ih = oh * g.stride + kh - g.pad;
                    if (ih < 0 || ih >= g.h) continue;
                    const std::ptrdiff_t row = ih * g.w + kw - g.pad;
                    const T* grow = go + oh * g.wout;
                    if (want_w) {
                      for (std::ptrdiff_t ow = lo; ow < hi; ++ow) {
                        wacc += grow[ow] * xp[row + ow * g.stride];
                      }
                    }
                    if (want_x) {
                      for (std::ptrdiff_t ow = lo; ow < hi; ++ow) {
                        gxp[row + ow * g.stride] += grow[ow] * wv;
                      }
                    }
                  }
                  if (want_w) gin[1][w_off + kh * g.k + kw] += wacc;
                }
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> conv_dw3x3(const Tensor<T>& x, const ConvParams<T>& p) {
  require_rank4(x.shape(), "conv_dw3x3");
  if (p.kernel != 3 || p.padding != 1 || p.stride != 1 || p.groups != p.out_channels() ||
      p.weight.dim(1) != 1) {
    throw ShapeError("conv_dw3x3: parameters are not a depthwise 3x3 configuration");
  }
  if (x.dim(1) != p.out_channels()) {
    throw ShapeError("conv_dw3x3: input has " + std::to_string(x.dim(1)) + " channels, kernel has " +
                     std::to_string(p.out_channels()));
  }
  return conv2d(x, p);
}

template <typename T>
Tensor<T> conv_pw(const Tensor<T>& x, const ConvParams<T>& p) {
  require_rank4(x.shape(), "conv_pw");
  if (p.kernel != 1 || p.padding != 0 || p.stride != 1 || p.groups != 1) {
    throw ShapeError("conv_pw: parameters are not a pointwise configuration");
  }
  if (x.dim(1) != p.in_channels()) {
    throw ShapeError("conv_pw: input has " + std::to_string(x.dim(1)) + " channels, weights expect " +
                     std::to_string(p.in_channels()));
  }
  return conv2d(x, p);
}

template <typename T>
Tensor<T> gap(const Tensor<T>& x) {
  require_rank4(x.shape(), "gap");
  const std::size_t planes = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  auto xd = x.data();
  std::vector<T> out(planes);
  for (std::size_t p = 0; p < planes; ++p) {
    T acc = 0;
    for (std::size_t i = 0; i < hw; ++i) acc += xd[p * hw + i];
    out[p] = acc / static_cast<T>(hw);
  }
  return Tensor<T>::from_op({x.dim(0), x.dim(1), 1, 1}, std::move(out), {x},
                            [planes, hw](std::span<const T> g, std::vector<std::vector<T>>& gin) {
                              for (std::size_t p = 0; p < planes; ++p) {
                                const T share = g[p] / static_cast<T>(hw);
                                for (std::size_t i = 0; i < hw; ++i) gin[0][p * hw + i] += share;
                              }
                            });
}

template <typename T>
Tensor<T> gmp(const Tensor<T>& x) {
  require_rank4(x.shape(), "gmp");
  const std::size_t planes = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  auto xd = x.data();
  std::vector<T> out(planes);
  std::vector<std::size_t> argmax(planes);
  for (std::size_t p = 0; p < planes; ++p) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < hw; ++i) {
      if (xd[p * hw + i] > xd[p * hw + best]) best = i;
    }
    argmax[p] = best;
    out[p] = xd[p * hw + best];
  }
  return Tensor<T>::from_op({x.dim(0), x.dim(1), 1, 1}, std::move(out), {x},
                            [hw, argmax = std::move(argmax)](std::span<const T> g,
                                                             std::vector<std::vector<T>>& gin) {
                              for (std::size_t p = 0; p < argmax.size(); ++p) {
                                gin[0][p * hw + argmax[p]] += g[p];
                              }
                            });
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require_rank4(x.shape(), "slice_channels");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (begin >= end || end > c) {
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + std::to_string(c) + " channels");
  }
  const std::size_t width = end - begin;
  auto xd = x.data();
  std::vector<T> out(n * width * hw);
  for (std::size_t b = 0; b < n; ++b) {
    const T* src = xd.data() + (b * c + begin) * hw;
    std::copy(src, src + width * hw, out.begin() + b * width * hw);
  }
  return Tensor<T>::from_op({n, width, x.dim(2), x.dim(3)}, std::move(out), {x},
                            [n, c, hw, begin, width](std::span<const T> g,
                                                     std::vector<std::vector<T>>& gin) {
                              for (std::size_t b = 0; b < n; ++b) {
                                T* dst = gin[0].data() + (b * c + begin) * hw;
                                const T* src = g.data() + b * width * hw;
                                for (std::size_t i = 0; i < width * hw; ++i) dst[i] += src[i];
                              }
                            });
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x) {
  require_rank4(x.shape(), "split_channels");
  const std::size_t c = x.dim(1);
  if (c % 2 != 0) {
    throw ShapeError("split_channels: channel count " + std::to_string(c) + " is odd");
  }
  return {slice_channels(x, 0, c / 2), slice_channels(x, c / 2, c)};
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank4(a.shape(), "concat_channels");
  require_rank4(b.shape(), "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " differ outside the channel axis");
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  auto ad = a.data();
  auto bd = b.data();
  std::vector<T> out(n * (ca + cb) * hw);
  for (std::size_t s = 0; s < n; ++s) {
    std::copy_n(ad.data() + s * ca * hw, ca * hw, out.begin() + s * (ca + cb) * hw);
    std::copy_n(bd.data() + s * cb * hw, cb * hw, out.begin() + (s * (ca + cb) + ca) * hw);
  }
  return Tensor<T>::from_op(
      {n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a, b},
      [n, ca, cb, hw](std::span<const T> g, std::vector<std::vector<T>>& gin) {
        for (std::size_t s = 0; s < n; ++s) {
          const T* src = g.data() + s * (ca + cb) * hw;
          if (!gin[0].empty()) {
            for (std::size_t i = 0; i < ca * hw; ++i) gin[0][s * ca * hw + i] += src[i];
          }
          if (!gin[1].empty()) {
            for (std::size_t i = 0; i < cb * hw; ++i) gin[1][s * cb * hw + i] += src[ca * hw + i];
          }
        }
      });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || bias.rank() != 1) {
    throw ShapeError("linear: expected x (N,in), weight (out,in), bias (out); got " +
                     shape_str(x.shape()) + ", " + shape_str(weight.shape()) + ", " +
                     shape_str(bias.shape()));
  }
  const std::size_t n = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in || bias.dim(0) != out_dim) {
    throw ShapeError("linear: dimension mismatch x " + shape_str(x.shape()) + ", weight " +
                     shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()));
  }
  auto xd = x.data();
  auto wd = weight.data();
  auto bd = bias.data();
  std::vector<T> out(n * out_dim);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t o = 0; o < out_dim; ++o) {
      T acc = bd[o];
      for (std::size_t i = 0; i < in; ++i) acc += wd[o * in + i] * xd[b * in + i];
      out[b * out_dim + o] = acc;
    }
  }
  auto xn = x.node();
  auto wn = weight.node();
  return Tensor<T>::from_op(
      {n, out_dim}, std::move(out), {x, weight, bias},
      [n, in, out_dim, xn, wn](std::span<const T> g, std::vector<std::vector<T>>& gin) {
        const auto& xv = xn->data;
        const auto& wv = wn->data;
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t o = 0; o < out_dim; ++o) {
            const T go = g[b * out_dim + o];
            if (!gin[2].empty()) gin[2][o] += go;
            if (!gin[1].empty()) {
              for (std::size_t i = 0; i < in; ++i) gin[1][o * in + i] += go * xv[b * in + i];
            }
            if (!gin[0].empty()) {
              for (std::size_t i = 0; i < in; ++i) gin[0][b * in + i] += go * wv[o * in + i];
            }
          }
        }
      });
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("flatten: expected rank >= 2, got " + shape_str(x.shape()));
  return reshape(x, {x.dim(0), x.numel() / x.dim(0)});
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("l2_normalize: expected (N,D), got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  auto xd = x.data();
  std::vector<T> out(xd.size());
  std::vector<T> norms(n);
  for (std::size_t b = 0; b < n; ++b) {
    T sq = 0;
    for (std::size_t i = 0; i < d; ++i) sq += xd[b * d + i] * xd[b * d + i];
    const T norm = std::max(std::sqrt(sq), T(1e-12));
    norms[b] = norm;
    for (std::size_t i = 0; i < d; ++i) out[b * d + i] = xd[b * d + i] / norm;
  }
  auto y = std::make_shared<std::vector<T>>(out);
  return Tensor<T>::from_op(
      x.shape(), std::move(out), {x},
      [n, d, y, norms = std::move(norms)](std::span<const T> g, std::vector<std::vector<T>>& gin) {
        for (std::size_t b = 0; b < n; ++b) {
          T dot = 0;
          for (std::size_t i = 0; i < d; ++i) dot += (*y)[b * d + i] * g[b * d + i];
          for (std::size_t i = 0; i < d; ++i) {
            gin[0][b * d + i] += (g[b * d + i] - (*y)[b * d + i] * dot) / norms[b];
          }
        }
      });
}

#define PANET_INSTANTIATE(T)                                                                   \
  template LayerNormParams<T> make_layer_norm<T>(std::size_t);                                 \
  template ConvParams<T> make_conv<T>(std::size_t, std::size_t, std::size_t, std::size_t,      \
                                      std::size_t, std::size_t, Rng&);                         \
  template ConvParams<T> make_pointwise<T>(std::size_t, std::size_t, Rng&);                    \
  template ConvParams<T> make_depthwise3x3<T>(std::size_t, Rng&);                              \
  template Tensor<T> layer_norm(const Tensor<T>&, const LayerNormParams<T>&);                  \
  template Tensor<T> conv2d(const Tensor<T>&, const ConvParams<T>&);                           \
  template Tensor<T> conv_dw3x3(const Tensor<T>&, const ConvParams<T>&);                       \
  template Tensor<T> conv_pw(const Tensor<T>&, const ConvParams<T>&);                          \
  template Tensor<T> gap(const Tensor<T>&);                                                    \
  template Tensor<T> gmp(const Tensor<T>&);                                                    \
  template Tensor<T> slice_channels(const Tensor<T>&, std::size_t, std::size_t);               \
  template std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>&);                   \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> flatten(const Tensor<T>&);                                                \
  template Tensor<T> l2_normalize(const Tensor<T>&);

PANET_INSTANTIATE(float)
PANET_INSTANTIATE(double)
PANET_INSTANTIATE(long double)

#undef PANET_INSTANTIATE

}  // namespace panet
