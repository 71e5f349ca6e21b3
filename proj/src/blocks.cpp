#include "panet/blocks.hpp"

#include <cmath>
#include <stdexcept>

namespace panet {

PoolingMode parse_pooling_mode(std::string_view text) {
  if (text == "both") return PoolingMode::both;
  if (text == "gap" || text == "gap_only") return PoolingMode::gap_only;
  if (text == "gmp" || text == "gmp_only") return PoolingMode::gmp_only;
  throw std::invalid_argument("unknown pooling mode '" + std::string(text) +
                              "' (expected both, gap or gmp)");
}

Topology parse_topology(std::string_view text) {
  if (text == "parallel") return Topology::parallel;
  if (text == "serial") return Topology::serial;
  throw std::invalid_argument("unknown topology '" + std::string(text) +
                              "' (expected parallel or serial)");
}

std::string to_string(PoolingMode mode) {
  switch (mode) {
    case PoolingMode::gap_only:
      return "gap_only";
    case PoolingMode::gmp_only:
      return "gmp_only";
    case PoolingMode::both:
      return "both";
  }
  return "both";
}

std::string to_string(Topology topology) {
  return topology == Topology::parallel ? "parallel" : "serial";
}

std::size_t fmm_hidden_width(std::size_t channels, double fmm_ratio) {
  const double width = 2.0 * fmm_ratio * static_cast<double>(channels);
  const double rounded = std::round(width);
  if (!(fmm_ratio > 0.0) || std::abs(width - rounded) > 1e-9 || rounded < 2.0 ||
      static_cast<std::size_t>(rounded) % 2 != 0) {
    throw std::invalid_argument("fmm_ratio " + std::to_string(fmm_ratio) + " with " +
                                std::to_string(channels) +
                                " channels does not give an even integer hidden width");
  }
  return static_cast<std::size_t>(rounded);
}

template <typename T>
BlockParams<T> make_block_params(std::size_t channels, double fmm_ratio, Rng& rng) {
  if (channels == 0 || channels % 2 != 0) {
    throw std::invalid_argument("block channel count must be even, got " + std::to_string(channels));
  }
  const std::size_t hidden = fmm_hidden_width(channels, fmm_ratio);
  BlockParams<T> p;
  p.alpha = Tensor<T>::zeros({channels, 1, 1}, true);
  p.beta = Tensor<T>::zeros({channels, 1, 1}, true);
  p.pam_ln = make_layer_norm<T>(channels);
  p.fmm_ln = make_layer_norm<T>(channels);
  p.pam_expand_pw = make_pointwise<T>(channels, 2 * channels, rng);
  p.pam_dw = make_depthwise3x3<T>(2 * channels, rng);
  p.pam_out_pw = make_pointwise<T>(channels, channels, rng);
  p.fmm_in_pw = make_pointwise<T>(channels, hidden, rng);
  p.fmm_out_pw = make_pointwise<T>(hidden / 2, channels, rng);
  return p;
}

template <typename T>
void for_each_param(BlockParams<T>& p, const std::function<void(const std::string&, Tensor<T>&)>& fn) {
  fn("alpha", p.alpha);
  fn("beta", p.beta);
  fn("pam_ln.gain", p.pam_ln.gain);
  fn("pam_ln.bias", p.pam_ln.bias);
  auto conv = [&](const std::string& name, ConvParams<T>& c) {
    fn(name + ".weight", c.weight);
    if (c.bias) fn(name + ".bias", *c.bias);
  };
  conv("pam_expand_pw", p.pam_expand_pw);
  conv("pam_dw", p.pam_dw);
  conv("pam_out_pw", p.pam_out_pw);
  fn("fmm_ln.gain", p.fmm_ln.gain);
  fn("fmm_ln.bias", p.fmm_ln.bias);
  conv("fmm_in_pw", p.fmm_in_pw);
  conv("fmm_out_pw", p.fmm_out_pw);
}

template <typename T>
Tensor<T> psa(const Tensor<T>& x) {
  auto [first, second] = split_channels(x);
  return ew_mul(first, second);
}

template <typename T>
Tensor<T> pca(const Tensor<T>& x, PoolingMode mode) {
  auto [first, second] = split_channels(x);
  auto pool = [](const Tensor<T>& t, bool use_max) { return use_max ? gmp(t) : gap(t); };
  const bool first_max = mode != PoolingMode::gap_only;
  const bool second_max = mode == PoolingMode::gmp_only;
  auto a = ew_mul(first, pool(first, first_max));
  auto b = ew_mul(second, pool(second, second_max));
  return concat_channels(a, b);
}

template <typename T>
Tensor<T> pam(const Tensor<T>& x, const BlockParams<T>& p, PoolingMode mode) {
  auto h = layer_norm(x, p.pam_ln);
  h = conv_pw(h, p.pam_expand_pw);
  h = conv_dw3x3(h, p.pam_dw);
  h = psa(h);
  h = pca(h, mode);
  return conv_pw(h, p.pam_out_pw);
}

template <typename T>
Tensor<T> fmm(const Tensor<T>& x, const BlockParams<T>& p) {
  auto h = layer_norm(x, p.fmm_ln);
  h = conv_pw(h, p.fmm_in_pw);
  h = psa(h);
  return conv_pw(h, p.fmm_out_pw);
}

template <typename T>
Tensor<T> parallel_block(const Tensor<T>& x, const BlockParams<T>& p, PoolingMode mode) {
  if (x.rank() != 4 || x.dim(1) != p.channels()) {
    throw ShapeError("parallel_block: input " + shape_str(x.shape()) + " does not match block width " +
                     std::to_string(p.channels()));
  }
  auto attended = ew_mul(pam(x, p, mode), p.alpha);
  auto mapped = ew_mul(fmm(x, p), p.beta);
  return ew_add(ew_add(attended, mapped), x);
}

template <typename T>
Tensor<T> serial_block(const Tensor<T>& x, const BlockParams<T>& p, PoolingMode mode) {
  if (x.rank() != 4 || x.dim(1) != p.channels()) {
    throw ShapeError("serial_block: input " + shape_str(x.shape()) + " does not match block width " +
                     std::to_string(p.channels()));
  }
  auto y = ew_add(ew_mul(pam(x, p, mode), p.alpha), x);
  return ew_add(ew_mul(fmm(y, p), p.beta), y);
}

template <typename T>
Tensor<T> block_variant(const Tensor<T>& x, const BlockParams<T>& p, PoolingMode mode) {
  return parallel_block(x, p, mode);
}

template <typename T>
Tensor<T> block_forward(const Tensor<T>& x, const BlockParams<T>& p, Topology topology,
                        PoolingMode mode) {
  return topology == Topology::parallel ? parallel_block(x, p, mode) : serial_block(x, p, mode);
}

#define PANET_INSTANTIATE(T)                                                                    \
  template BlockParams<T> make_block_params<T>(std::size_t, double, Rng&);                      \
  template void for_each_param(BlockParams<T>&,                                                 \
                               const std::function<void(const std::string&, Tensor<T>&)>&);     \
  template Tensor<T> psa(const Tensor<T>&);                                                     \
  template Tensor<T> pca(const Tensor<T>&, PoolingMode);                                        \
  template Tensor<T> pam(const Tensor<T>&, const BlockParams<T>&, PoolingMode);                 \
  template Tensor<T> fmm(const Tensor<T>&, const BlockParams<T>&);                              \
  template Tensor<T> parallel_block(const Tensor<T>&, const BlockParams<T>&, PoolingMode);      \
  template Tensor<T> serial_block(const Tensor<T>&, const BlockParams<T>&, PoolingMode);        \
  template Tensor<T> block_variant(const Tensor<T>&, const BlockParams<T>&, PoolingMode);       \
  template Tensor<T> block_forward(const Tensor<T>&, const BlockParams<T>&, Topology, PoolingMode);

PANET_INSTANTIATE(float)
PANET_INSTANTIATE(double)
PANET_INSTANTIATE(long double)

#undef PANET_INSTANTIATE

}  // namespace panet
