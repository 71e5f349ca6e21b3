#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <string_view>

#include "panet/layers.hpp"

namespace panet {

/// Which global pooling feeds each half of the channel attention.
enum class PoolingMode { gap_only, gmp_only, both };

/// How the two block branches are composed.
enum class Topology { parallel, serial };

PoolingMode parse_pooling_mode(std::string_view text);
Topology parse_topology(std::string_view text);
std::string to_string(PoolingMode mode);
std::string to_string(Topology topology);

/// Learnable state of one block. Widths for channel count C and MLP ratio r:
///   PAM: LN(C) -> pw C->2C -> dw3x3(2C) -> gate -> C -> attention -> pw C->C
///   FMM: LN(C) -> pw C->2rC -> gate -> rC -> pw rC->C
template <typename T>
struct BlockParams {
  Tensor<T> alpha;  // (C,1,1), scales the PAM branch
  Tensor<T> beta;   // (C,1,1), scales the FMM branch
  LayerNormParams<T> pam_ln;
  LayerNormParams<T> fmm_ln;
  ConvParams<T> pam_expand_pw;
  ConvParams<T> pam_dw;
  ConvParams<T> pam_out_pw;
  ConvParams<T> fmm_in_pw;
  ConvParams<T> fmm_out_pw;

  std::size_t channels() const { return alpha.dim(0); }
};

/// Hidden width 2*r*C of the FMM input projection; throws unless it is a
/// positive even integer.
std::size_t fmm_hidden_width(std::size_t channels, double fmm_ratio);

/// alpha = beta = 0, so a fresh block is the identity map.
template <typename T>
BlockParams<T> make_block_params(std::size_t channels, double fmm_ratio, Rng& rng);

/// Visits every learnable tensor with its name relative to the block.
template <typename T>
void for_each_param(BlockParams<T>& p, const std::function<void(const std::string&, Tensor<T>&)>& fn);

/// Gate: first half of the channels times the second half. C -> C/2.
template <typename T>
Tensor<T> psa(const Tensor<T>& x);

/// Channel attention: the first half is scaled by its per-channel max, the
/// second by its per-channel mean, then the halves are concatenated.
/// gap_only / gmp_only use the named pooling for both halves.
template <typename T>
Tensor<T> pca(const Tensor<T>& x, PoolingMode mode = PoolingMode::both);

template <typename T>
Tensor<T> pam(const Tensor<T>& x, const BlockParams<T>& p, PoolingMode mode = PoolingMode::both);

template <typename T>
Tensor<T> fmm(const Tensor<T>& x, const BlockParams<T>& p);

/// x + alpha * PAM(x) + beta * FMM(x); both branches read the same x.
template <typename T>
Tensor<T> parallel_block(const Tensor<T>& x, const BlockParams<T>& p,
                         PoolingMode mode = PoolingMode::both);

/// y = x + alpha * PAM(x); y + beta * FMM(y).
template <typename T>
Tensor<T> serial_block(const Tensor<T>& x, const BlockParams<T>& p,
                       PoolingMode mode = PoolingMode::both);

/// Parallel block with the chosen pooling variant inside PAM.
template <typename T>
Tensor<T> block_variant(const Tensor<T>& x, const BlockParams<T>& p, PoolingMode mode);

template <typename T>
Tensor<T> block_forward(const Tensor<T>& x, const BlockParams<T>& p, Topology topology,
                        PoolingMode mode);

}  // namespace panet
