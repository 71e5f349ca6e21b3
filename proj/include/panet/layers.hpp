#pragma once

#include <cstddef>
#include <optional>
#include <utility>

#include "panet/random.hpp"
#include "panet/tensor.hpp"

namespace panet {

template <typename T>
struct LayerNormParams {
  Tensor<T> gain;  // (C)
  Tensor<T> bias;  // (C)
  T eps = T(1e-6);

  std::size_t channels() const { return gain.numel(); }
};

template <typename T>
struct ConvParams {
  Tensor<T> weight;  // (C_out, C_in / groups, k, k)
  std::optional<Tensor<T>> bias;
  std::size_t groups = 1;
  std::size_t kernel = 1;
  std::size_t padding = 0;
  std::size_t stride = 1;

  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1) * groups; }
};

template <typename T>
LayerNormParams<T> make_layer_norm(std::size_t channels);

/// Truncated-normal(0.02) weights, zero bias.
template <typename T>
ConvParams<T> make_conv(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                        std::size_t stride, std::size_t padding, std::size_t groups, Rng& rng);
template <typename T>
ConvParams<T> make_pointwise(std::size_t in_channels, std::size_t out_channels, Rng& rng);
template <typename T>
ConvParams<T> make_depthwise3x3(std::size_t channels, Rng& rng);

/// Normalizes the C-vector at every (n, h, w) position, then applies gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const LayerNormParams<T>& p);

/// Grouped 2-D cross-correlation with zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p);
template <typename T>
Tensor<T> conv_dw3x3(const Tensor<T>& x, const ConvParams<T>& p);
template <typename T>
Tensor<T> conv_pw(const Tensor<T>& x, const ConvParams<T>& p);

/// (N,C,H,W) -> (N,C,1,1)
template <typename T>
Tensor<T> gap(const Tensor<T>& x);
/// (N,C,H,W) -> (N,C,1,1). Gradient goes to the first maximal position.
template <typename T>
Tensor<T> gmp(const Tensor<T>& x);

/// Channels [begin, end) of an (N,C,H,W) map.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t end);
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x);
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

/// x (N, in), weight (out, in), bias (out) -> (N, out)
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// (N, ...) -> (N, prod(...))
template <typename T>
Tensor<T> flatten(const Tensor<T>& x);

/// Row-wise Euclidean normalization of an (N, D) matrix.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x);

}  // namespace panet
