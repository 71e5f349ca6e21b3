#include <doctest.h>

#include <cmath>

#include "panet/commands.hpp"
#include "panet/layers.hpp"
#include "support.hpp"

using namespace panet;
using panet::test::from_values;
using panet::test::randn;

namespace {

// Direct 6-loop cross-correlation used as the oracle for conv2d.
std::vector<double> naive_conv(const Tensor<double>& x, const ConvParams<double>& p) {
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = p.out_channels(), k = p.kernel, g = p.groups;
  const std::size_t ho = (h + 2 * p.padding - k) / p.stride + 1, wo = (w + 2 * p.padding - k) / p.stride + 1;
  const std::size_t cin_g = cin / g, cout_g = cout / g;
  std::vector<double> out(n * cout * ho * wo, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double acc = p.bias ? p.bias->data()[co] : 0.0;
          const std::size_t group = co / cout_g;
          for (std::size_t ci = 0; ci < cin_g; ++ci)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = static_cast<long>(oy * p.stride + ky) - static_cast<long>(p.padding);
                const long ix = static_cast<long>(ox * p.stride + kx) - static_cast<long>(p.padding);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                const std::size_t c = group * cin_g + ci;
                acc += x.data()[((b * cin + c) * h + iy) * w + ix] * p.weight.data()[((co * cin_g + ci) * k + ky) * k + kx];
              }
          out[((b * cout + co) * ho + oy) * wo + ox] = acc;
        }
  return out;
}

double channel_stat(const Tensor<double>& y, std::size_t n, std::size_t pos, bool variance) {
  const std::size_t c = y.dim(1), hw = y.dim(2) * y.dim(3);
  double mean = 0.0;
  for (std::size_t k = 0; k < c; ++k) mean += y.data()[(n * c + k) * hw + pos];
  mean /= static_cast<double>(c);
  if (!variance) return mean;
  double var = 0.0;
  for (std::size_t k = 0; k < c; ++k) {
    const double d = y.data()[(n * c + k) * hw + pos] - mean;
    var += d * d;
  }
  return var / static_cast<double>(c);
}

}  // namespace

TEST_CASE("layer_norm: constant channels give the bias") {
  auto ln = make_layer_norm<double>(3);
  ln.bias = from_values<double>({3}, {0.1, -0.2, 0.3});
  auto x = Tensor<double>::full({1, 3, 2, 2}, 7.0);
  auto y = layer_norm(x, ln);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 4; ++i) CHECK(y.data()[c * 4 + i] == doctest::Approx(ln.bias.data()[c]));
}

TEST_CASE("layer_norm: [1,-1] is already normalized") {
  auto ln = make_layer_norm<double>(2);
  auto x = from_values<double>({1, 2, 1, 1}, {1.0, -1.0});
  auto y = layer_norm(x, ln);
  CHECK(y.data()[0] == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(y.data()[1] == doctest::Approx(-1.0).epsilon(1e-5));
}

TEST_CASE("layer_norm: per-position statistics on random input") {
  Rng rng = make_rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = randn({2, 4, 8, 8}, rng, 2.0);
    auto y = layer_norm(x, make_layer_norm<double>(4));
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t pos = 0; pos < 64; ++pos) {
        CHECK(std::abs(channel_stat(y, n, pos, false)) < 1e-6);
        CHECK(std::abs(channel_stat(y, n, pos, true) - 1.0) < 1e-3);
      }
  }
}

TEST_CASE("layer_norm rejects a channel mismatch") {
  CHECK_THROWS_AS(layer_norm(Tensor<double>::zeros({1, 3, 2, 2}), make_layer_norm<double>(4)), ShapeError);
}

TEST_CASE("conv_dw3x3: identity kernel") {
  Rng rng = make_rng(11);
  auto p = make_depthwise3x3<double>(3, rng);
  for (auto& v : p.weight.mutable_data()) v = 0.0;
  for (std::size_t c = 0; c < 3; ++c) p.weight.mutable_data()[c * 9 + 4] = 1.0;
  auto x = randn({2, 3, 5, 6}, rng);
  CHECK(panet::test::bit_equal(conv_dw3x3(x, p), x));
}

TEST_CASE("conv_dw3x3: all-ones kernel is a box sum") {
  Rng rng = make_rng(12);
  auto p = make_depthwise3x3<double>(1, rng);
  for (auto& v : p.weight.mutable_data()) v = 1.0;
  auto x = Tensor<double>::full({1, 1, 5, 5}, 2.5);
  auto y = conv_dw3x3(x, p);
  for (std::size_t r = 1; r < 4; ++r)
    for (std::size_t c = 1; c < 4; ++c) CHECK(y.at({0, 0, r, c}) == doctest::Approx(22.5));
  CHECK(y.at({0, 0, 0, 0}) == doctest::Approx(10.0));
}

TEST_CASE("conv_dw3x3 matches the naive correlation") {
  Rng rng = make_rng(13);
  for (std::size_t channels : {1, 3}) {
    auto p = make_depthwise3x3<double>(channels, rng);
    panet::test::fill_normal(p.weight, rng, 1.0);
    panet::test::fill_normal(*p.bias, rng, 0.5);
    auto x = randn({1, channels, 4, 4}, rng);
    auto y = conv_dw3x3(x, p);
    auto oracle = naive_conv(x, p);
    for (std::size_t i = 0; i < oracle.size(); ++i) CHECK(y.data()[i] == doctest::Approx(oracle[i]).epsilon(1e-9));
  }
}

TEST_CASE("conv wrappers validate their configuration") {
  Rng rng = make_rng(14);
  auto dw = make_depthwise3x3<double>(3, rng);
  CHECK_THROWS_AS(conv_dw3x3(Tensor<double>::zeros({1, 4, 4, 4}), dw), ShapeError);
  CHECK_THROWS(conv_pw(Tensor<double>::zeros({1, 3, 4, 4}), dw));
  auto pw = make_pointwise<double>(4, 2, rng);
  CHECK_THROWS_AS(conv_pw(Tensor<double>::zeros({1, 3, 4, 4}), pw), ShapeError);
  CHECK_THROWS(conv_dw3x3(Tensor<double>::zeros({1, 4, 4, 4}), pw));
}

TEST_CASE("conv_pw: identity weight and zero-weight bias cases") {
  Rng rng = make_rng(15);
  auto p = make_pointwise<double>(3, 3, rng);
  for (auto& v : p.weight.mutable_data()) v = 0.0;
  for (std::size_t c = 0; c < 3; ++c) p.weight.mutable_data()[c * 3 + c] = 1.0;
  auto x = randn({2, 3, 4, 4}, rng);
  CHECK(panet::test::bit_equal(conv_pw(x, p), x));

  auto z = make_pointwise<double>(3, 2, rng);
  for (auto& v : z.weight.mutable_data()) v = 0.0;
  z.bias = from_values<double>({2}, {0.5, -1.25});
  auto y = conv_pw(x, z);
  for (std::size_t i = 0; i < 16; ++i) {
    CHECK(y.data()[i] == 0.5);
    CHECK(y.data()[16 + i] == -1.25);
  }
}

TEST_CASE("conv_pw matches a per-position matrix-vector product") {
  Rng rng = make_rng(16);
  auto p = make_pointwise<double>(5, 7, rng);
  panet::test::fill_normal(p.weight, rng, 1.0);
  panet::test::fill_normal(*p.bias, rng, 1.0);
  auto x = randn({2, 5, 3, 4}, rng);
  auto y = conv_pw(x, p);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t pos = 0; pos < 12; ++pos)
      for (std::size_t o = 0; o < 7; ++o) {
        double acc = p.bias->data()[o];
        for (std::size_t i = 0; i < 5; ++i) acc += p.weight.data()[o * 5 + i] * x.data()[(n * 5 + i) * 12 + pos];
        CHECK(y.data()[(n * 7 + o) * 12 + pos] == doctest::Approx(acc).epsilon(1e-9));
      }
}

TEST_CASE("strided conv2d matches the naive correlation") {
  Rng rng = make_rng(17);
  auto p = make_conv<double>(3, 4, 4, 4, 0, 1, rng);
  panet::test::fill_normal(p.weight, rng, 1.0);
  panet::test::fill_normal(*p.bias, rng, 1.0);
  auto x = randn({2, 3, 8, 12}, rng);
  auto y = conv2d(x, p);
  CHECK(y.shape() == Shape{2, 4, 2, 3});
  auto oracle = naive_conv(x, p);
  for (std::size_t i = 0; i < oracle.size(); ++i) CHECK(y.data()[i] == doctest::Approx(oracle[i]).epsilon(1e-9));
}

TEST_CASE("make_conv initializes with a truncated normal and zero bias") {
  Rng rng = make_rng(18);
  auto p = make_conv<double>(16, 32, 3, 1, 1, 1, rng);
  double sq = 0.0;
  for (double v : p.weight.data()) {
    CHECK(std::abs(v) <= 0.04 + 1e-12);
    sq += v * v;
  }
  const double stddev = std::sqrt(sq / static_cast<double>(p.weight.numel()));
  CHECK(stddev > 0.012);
  CHECK(stddev < 0.02);
  for (double v : p.bias->data()) CHECK(v == 0.0);
  auto ln = make_layer_norm<double>(4);
  for (double v : ln.gain.data()) CHECK(v == 1.0);
  for (double v : ln.bias.data()) CHECK(v == 0.0);
}

TEST_CASE("gap and gmp examples") {
  auto x = from_values<double>({1, 1, 2, 2}, {1, 2, 3, 4}, true);
  CHECK(gap(x).item() == 2.5);
  CHECK(gmp(x).item() == 4.0);
  auto c = Tensor<double>::full({1, 1, 3, 3}, -1.5);
  CHECK(gap(c).item() == doctest::Approx(-1.5));
  CHECK(gmp(c).item() == -1.5);
}

TEST_CASE("gap backward spreads g/(H*W)") {
  auto x = Tensor<double>::zeros({1, 1, 2, 2}, true);
  auto g = backward(sum(scale(gap(x), 3.0)));
  for (double v : panet::test::values(g.of(x))) CHECK(v == 0.75);
}

TEST_CASE("gmp backward goes to the first maximal position") {
  auto x = from_values<double>({1, 1, 2, 2}, {1, 5, 5, 2}, true);
  auto g = backward(sum(gmp(x)));
  CHECK(g.of(x).data()[0] == 0.0);
  CHECK(g.of(x).data()[1] == 1.0);
  CHECK(g.of(x).data()[2] == 0.0);
  CHECK(g.of(x).data()[3] == 0.0);
}

TEST_CASE("gmp >= gap, with equality exactly on constant channels") {
  Rng rng = make_rng(19);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = randn({2, 3, 4, 4}, rng);
    auto mx = gmp(x), av = gap(x);
    for (std::size_t i = 0; i < mx.numel(); ++i) CHECK(mx.data()[i] > av.data()[i]);
    auto c = Tensor<double>::full({1, 2, 3, 3}, standard_normal(rng));
    CHECK(gmp(c).data()[0] == doctest::Approx(gap(c).data()[0]).epsilon(1e-15));
  }
}

TEST_CASE("split and concat") {
  Rng rng = make_rng(20);
  auto x = randn({2, 6, 3, 3}, rng, 1.0, true);
  auto [a, b] = split_channels(x);
  CHECK(a.shape() == Shape{2, 3, 3, 3});
  CHECK(panet::test::bit_equal(concat_channels(a, b), x));
  CHECK_THROWS_AS(split_channels(Tensor<double>::zeros({1, 3, 2, 2})), ShapeError);
  CHECK_THROWS_AS(concat_channels(Tensor<double>::zeros({1, 2, 2, 2}), Tensor<double>::zeros({1, 2, 3, 2})),
                  ShapeError);

  auto pair = from_values<double>({1, 2, 1, 2}, {4, 4, 9, 9});
  auto [c1, c2] = split_channels(pair);
  CHECK(c1.data()[0] == 4);
  CHECK(c2.data()[1] == 9);
}

TEST_CASE("concat gradient scatters to disjoint halves") {
  auto a = Tensor<double>::zeros({1, 2, 2, 2}, true);
  auto b = Tensor<double>::zeros({1, 3, 2, 2}, true);
  auto y = concat_channels(a, b);
  std::vector<double> w(y.numel());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<double>(i);
  auto g = backward(sum(ew_mul(y, Tensor<double>(y.shape(), w))));
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(g.of(a).data()[i] == static_cast<double>(i));
  for (std::size_t i = 0; i < b.numel(); ++i) CHECK(g.of(b).data()[i] == static_cast<double>(a.numel() + i));
}

TEST_CASE("linear examples and oracle") {
  Rng rng = make_rng(21);
  auto x = randn({3, 4}, rng);
  std::vector<double> eye(16, 0.0);
  for (std::size_t i = 0; i < 4; ++i) eye[i * 5] = 1.0;
  CHECK(panet::test::bit_equal(linear(x, Tensor<double>({4, 4}, eye), Tensor<double>::zeros({4})), x));

  auto b = from_values<double>({2}, {3.0, -4.0});
  auto y0 = linear(x, Tensor<double>::zeros({2, 4}), b);
  for (std::size_t n = 0; n < 3; ++n) {
    CHECK(y0.at({n, 0}) == 3.0);
    CHECK(y0.at({n, 1}) == -4.0);
  }

  auto w = randn({5, 4}, rng);
  auto bias = randn({5}, rng);
  auto y = linear(x, w, bias);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t o = 0; o < 5; ++o) {
      double acc = bias.data()[o];
      for (std::size_t i = 0; i < 4; ++i) acc += w.at({o, i}) * x.at({n, i});
      CHECK(y.at({n, o}) == doctest::Approx(acc).epsilon(1e-12));
    }
  CHECK_THROWS_AS(linear(x, Tensor<double>::zeros({5, 3}), bias), ShapeError);
}

TEST_CASE("flatten and l2_normalize") {
  Rng rng = make_rng(22);
  auto x = randn({3, 2, 1, 1}, rng);
  auto f = flatten(x);
  CHECK(f.shape() == Shape{3, 2});
  auto u = l2_normalize(randn({4, 16}, rng));
  for (std::size_t n = 0; n < 4; ++n) {
    double norm = 0.0;
    for (std::size_t d = 0; d < 16; ++d) norm += u.at({n, d}) * u.at({n, d});
    CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("convolutions are translation consistent in the interior") {
  Rng rng = make_rng(23);
  auto dw = make_depthwise3x3<double>(2, rng);
  panet::test::fill_normal(dw.weight, rng, 1.0);
  auto pw = make_pointwise<double>(2, 3, rng);
  panet::test::fill_normal(pw.weight, rng, 1.0);
  auto x = randn({1, 2, 8, 8}, rng);
  // x shifted right by one column
  std::vector<double> shifted(x.numel(), 0.0);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t col = 1; col < 8; ++col) shifted[(c * 8 + r) * 8 + col] = x.data()[(c * 8 + r) * 8 + col - 1];
  auto xs = Tensor<double>(x.shape(), shifted);
  for (int which = 0; which < 2; ++which) {
    auto y = which == 0 ? conv_dw3x3(x, dw) : conv_pw(x, pw);
    auto ys = which == 0 ? conv_dw3x3(xs, dw) : conv_pw(xs, pw);
    const std::size_t co = y.dim(1);
    for (std::size_t c = 0; c < co; ++c)
      for (std::size_t r = 1; r < 7; ++r)
        for (std::size_t col = 2; col < 7; ++col)
          CHECK(ys.at({0, c, r, col}) == doctest::Approx(y.at({0, c, r, col - 1})).epsilon(1e-12));
  }
}

TEST_CASE("every layer passes gradcheck below 1e-4") {
  GradcheckArgs args;
  args.scope = GradcheckScope::layer;
  for (std::uint64_t seed : {0, 1}) {
    args.seed = seed;
    for (const auto& c : run_gradcheck_suite(args)) {
      for (const auto& e : c.report.entries) {
        INFO(c.name << " / " << e.name);
        CHECK_FALSE(e.non_finite);
        CHECK(e.max_rel_error < 1e-4);
      }
    }
  }
}

TEST_CASE("float and double layers agree") {
  Rng rng = make_rng(24);
  auto x = randn({1, 4, 5, 5}, rng);
  auto p = make_depthwise3x3<double>(4, rng);
  panet::test::fill_normal(p.weight, rng, 1.0);
  ConvParams<float> pf{cast_tensor<float>(p.weight, false), cast_tensor<float>(*p.bias, false), p.groups,
                       p.kernel, p.padding, p.stride};
  auto yd = conv_dw3x3(x, p);
  auto yf = conv_dw3x3(cast_tensor<float>(x, false), pf);
  for (std::size_t i = 0; i < yd.numel(); ++i) CHECK(yf.data()[i] == doctest::Approx(yd.data()[i]).epsilon(1e-5));
}
