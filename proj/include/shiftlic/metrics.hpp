#pragma once

#include <array>
#include <cmath>
#include <cstdint>

#include "graph.hpp"

namespace shiftlic {

inline constexpr double kPsnrCap = 100.0;

// Mean squared error with both inputs in [0, 1], reported on the 0..255
// scale used for rate-distortion curves.
template <typename S>
double mse_255(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.same_shape(b), "mse: shape mismatch");
  require(a.numel() > 0, "mse: empty tensors");
  double acc = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double d = (double(a.data[i]) - double(b.data[i])) * 255.0;
    acc += d * d;
  }
  return acc / double(a.numel());
}

inline double psnr_db(double mse255) {
  require(mse255 >= 0, "psnr: negative error");
  if (mse255 <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(255.0 * 255.0 / mse255));
}

// Mean squared error as a graph node, scaled to 0..255 units.
template <typename S>
typename Graph<S>::Id mse_node(Graph<S>& g, typename Graph<S>::Id a,
                               typename Graph<S>::Id b) {
  const Tensor<S>& at = g.value(a);
  require(at.same_shape(g.value(b)), "mse: shape mismatch");
  auto d = g.add(a, g.affine(b, -1.0, 0.0));
  auto sq = g.mul(d, d);
  return g.affine(g.reduce_sum(sq), 255.0 * 255.0 / double(at.numel()), 0.0);
}

namespace detail {

template <typename S>
std::pair<Tensor<S>, Tensor<S>> blur_taps(std::int64_t channels) {
  constexpr int kTaps = 11;
  constexpr double kSigma = 1.5;
  std::array<double, kTaps> k{};
  double sum = 0;
  for (int i = 0; i < kTaps; ++i) {
    const double d = i - (kTaps - 1) / 2.0;
    k[std::size_t(i)] = std::exp(-d * d / (2.0 * kSigma * kSigma));
    sum += k[std::size_t(i)];
  }
  Tensor<S> col(channels, 1, kTaps, 1);
  Tensor<S> row(channels, 1, 1, kTaps);
  for (std::int64_t c = 0; c < channels; ++c)
    for (int i = 0; i < kTaps; ++i) {
      col.at(c, 0, i, 0) = S(k[std::size_t(i)] / sum);
      row.at(c, 0, 0, i) = S(k[std::size_t(i)] / sum);
    }
  return {std::move(col), std::move(row)};
}

}  // namespace detail

// Multi-scale structural similarity over five dyadic scales, separable
// 11-tap Gaussian window, luminance term only at the coarsest scale. Inputs
// are (B, C, H, W) in [0, 1]; the shorter side must be at least 176 so the
// coarsest scale still exceeds the window.
template <typename S>
typename Graph<S>::Id msssim_node(Graph<S>& g, typename Graph<S>::Id x,
                                  typename Graph<S>::Id y) {
  using Id = typename Graph<S>::Id;
  constexpr int kScales = 5;
  constexpr std::array<double, kScales> kWeights{0.0448, 0.2856, 0.3001, 0.2363,
                                                 0.1333};
  constexpr double kC1 = 0.01 * 0.01;
  constexpr double kC2 = 0.03 * 0.03;
  constexpr double kFloor = 1e-6;

  const Tensor<S>& xt = g.value(x);
  require(xt.same_shape(g.value(y)), "msssim: shape mismatch");
  require(std::min(xt.h(), xt.w()) >= 176, "msssim: image smaller than 176 pixels");
  const std::int64_t channels = xt.c();

  auto [col_t, row_t] = detail::blur_taps<S>(channels);
  const Id col = g.constant(std::move(col_t));
  const Id row = g.constant(std::move(row_t));
  Tensor<S> zb(1, channels, 1, 1);
  const Id zero_bias = g.constant(std::move(zb));

  auto blur = [&](Id t) {
    return g.depthwise_conv(g.depthwise_conv(t, col, zero_bias), row, zero_bias);
  };
  auto crop_valid = [&](Id t) {
    const Tensor<S>& tt = g.value(t);
    return g.spatial_crop(t, 5, 5, tt.h() - 10, tt.w() - 10);
  };
  auto mean = [&](Id t) {
    return g.affine(g.reduce_sum(t), 1.0 / double(g.value(t).numel()), 0.0);
  };
  auto halve = [&](Id t) {
    const Tensor<S>& tt = g.value(t);
    const std::int64_t eh = tt.h() - (tt.h() % 2), ew = tt.w() - (tt.w() % 2);
    if (eh != tt.h() || ew != tt.w()) t = g.spatial_crop(t, 0, 0, eh, ew);
    return g.resample(t, 2, Resample::kDown);
  };

  Id score = g.constant(Tensor<S>::scalar(S(1)));
  for (int s = 0; s < kScales; ++s) {
    const Id mx = crop_valid(blur(x));
    const Id my = crop_valid(blur(y));
    const Id mxx = g.mul(mx, mx);
    const Id myy = g.mul(my, my);
    const Id mxy = g.mul(mx, my);
    const Id sxx = g.add(crop_valid(blur(g.mul(x, x))), g.affine(mxx, -1.0, 0.0));
    const Id syy = g.add(crop_valid(blur(g.mul(y, y))), g.affine(myy, -1.0, 0.0));
    const Id sxy = g.add(crop_valid(blur(g.mul(x, y))), g.affine(mxy, -1.0, 0.0));

    const Id cs = g.div(g.affine(sxy, 2.0, kC2),
                        g.max_const(g.affine(g.add(sxx, syy), 1.0, kC2), kFloor));
    const Id cs_mean = g.max_const(mean(cs), kFloor);
    if (s + 1 < kScales) {
      score = g.mul(score, g.pow_const(cs_mean, kWeights[std::size_t(s)]));
      x = halve(x);
      y = halve(y);
    } else {
      const Id lum = g.div(g.affine(mxy, 2.0, kC1),
                           g.max_const(g.affine(g.add(mxx, myy), 1.0, kC1), kFloor));
      const Id both = g.mul(g.max_const(mean(lum), kFloor), cs_mean);
      score = g.mul(score, g.pow_const(both, kWeights[std::size_t(s)]));
    }
  }
  return score;
}

template <typename S>
double msssim_value(const Tensor<S>& a, const Tensor<S>& b) {
  Graph<S> g;
  const auto id = msssim_node(g, g.constant(a), g.constant(b));
  return double(g.value(id).data[0]);
}

inline double msssim_db(double d) {
  require(d >= 0 && d <= 1.0 + 1e-9, "msssim: score out of range");
  const double gap = std::max(1.0 - d, 1e-10);
  return -10.0 * std::log10(gap);
}

}  // namespace shiftlic
