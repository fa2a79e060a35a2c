#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "layers.hpp"

namespace shiftlic {

inline constexpr double kSigmaMin = 0.11;
inline constexpr double kLikelihoodFloor = 1e-9;
inline constexpr double kTailMass = 1e-9;
inline constexpr int kProbBits = 16;
inline constexpr std::uint32_t kProbTotal = 1u << kProbBits;
// Fallback window for symbols outside a table's main support; an escape slot
// redirects to a flat model over [-kWideHalf, kWideHalf - 1].
inline constexpr std::int64_t kWideHalf = 32768;

enum class QuantizeMode { kNoise, kRound };

// Training-style quantization adds uniform noise in [-0.5, 0.5); inference
// rounds to the nearest integer around the given offset, ties away from zero.
template <typename S>
Tensor<S> quantize(const Tensor<S>& x, QuantizeMode mode,
                   const Tensor<S>* offset = nullptr, Rng* rng = nullptr) {
  Tensor<S> out(x.b(), x.c(), x.h(), x.w());
  if (mode == QuantizeMode::kNoise) {
    require(rng != nullptr, "quantize: noise mode needs an rng");
    for (std::int64_t i = 0; i < x.numel(); ++i)
      out.data[i] = x.data[i] + S(rng->uniform(-0.5, 0.5));
    return out;
  }
  if (offset != nullptr)
    require(offset->same_shape(x), "quantize: offset shape mismatch");
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double off = offset ? double(offset->data[i]) : 0.0;
    out.data[i] = S(off + std::round(double(x.data[i]) - off));
  }
  return out;
}

// Sum of -log2(p) over a likelihood tensor.
template <typename S>
double total_bits(const Tensor<S>& likelihoods) {
  double bits = 0;
  for (std::int64_t i = 0; i < likelihoods.numel(); ++i) {
    const double p = double(likelihoods.data[i]);
    require(p > 0 && p <= 1.0 + 1e-6, "total_bits: likelihood out of range");
    bits -= std::log2(p);
  }
  return bits;
}

// Cumulative frequency table with 16-bit precision. Slots cover
// [min_symbol, min_symbol + n - 2] plus a trailing escape slot.
struct CdfTable {
  std::vector<std::uint32_t> cum;  // size = slots + 1; cum[0] = 0, back() = 2^16
  std::int64_t min_symbol = 0;

  int slots() const { return int(cum.size()) - 1; }
  int escape_slot() const { return slots() - 1; }
  std::uint32_t freq(int slot) const { return cum[slot + 1] - cum[slot]; }

  void validate() const {
    require(cum.size() >= 3, "cdf: too few slots");
    require(cum.front() == 0 && cum.back() == kProbTotal, "cdf: bad endpoints");
    for (std::size_t i = 1; i < cum.size(); ++i)
      require(cum[i] > cum[i - 1], "cdf: non-increasing");
  }
};

// Scales a probability vector to integer frequencies summing to 2^16, each
// at least 1. Rounding drift is settled against the heaviest slots.
inline std::vector<std::uint32_t> quantize_pmf(const std::vector<double>& pmf) {
  const std::size_t n = pmf.size();
  require(n >= 2 && n <= std::size_t(kProbTotal), "quantize_pmf: bad slot count");
  std::vector<std::uint32_t> freq(n);
  std::int64_t sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    require(pmf[i] >= 0, "quantize_pmf: negative mass");
    freq[i] = std::uint32_t(
        std::max<std::int64_t>(1, std::llround(pmf[i] * double(kProbTotal))));
    sum += freq[i];
  }
  while (sum > std::int64_t(kProbTotal)) {
    std::size_t k = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (freq[i] > freq[k]) k = i;
    require(freq[k] > 1, "quantize_pmf: cannot settle drift");
    const std::uint32_t take = std::uint32_t(
        std::min<std::int64_t>(sum - kProbTotal, freq[k] - 1));
    freq[k] -= take;
    sum -= take;
  }
  while (sum < std::int64_t(kProbTotal)) {
    std::size_t k = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (pmf[i] > pmf[k]) k = i;
    const std::uint32_t give = std::uint32_t(kProbTotal - sum);
    freq[k] += give;
    sum += give;
  }
  return freq;
}

inline CdfTable cdf_from_pmf(const std::vector<double>& pmf, std::int64_t min_symbol) {
  const auto freq = quantize_pmf(pmf);
  CdfTable t;
  t.min_symbol = min_symbol;
  t.cum.resize(freq.size() + 1);
  t.cum[0] = 0;
  for (std::size_t i = 0; i < freq.size(); ++i) t.cum[i + 1] = t.cum[i] + freq[i];
  t.validate();
  return t;
}

namespace detail {

inline double gauss_cdf(double t) { return 0.5 * std::erfc(-t * 0.7071067811865476); }

inline double gauss_interval(double v, double sigma) {
  return gauss_cdf((v + 0.5) / sigma) - gauss_cdf((v - 0.5) / sigma);
}

}  // namespace detail

// Quantized-CDF models for zero-mean Gaussians over a fixed ladder of 64
// geometrically spaced scales in [0.11, 256]. Each scale gets a centered
// window of half-range ceil(4*sigma) + 2 plus an escape slot.
class GaussianConditional {
 public:
  static constexpr int kScaleCount = 64;
  static constexpr double kScaleLo = kSigmaMin;
  static constexpr double kScaleHi = 256.0;

  GaussianConditional() {
    for (int i = 0; i < kScaleCount; ++i) {
      const double t = double(i) / double(kScaleCount - 1);
      scales_[i] = kScaleLo * std::pow(kScaleHi / kScaleLo, t);
      tables_[i] = build_table(scales_[i]);
    }
  }

  const std::array<double, kScaleCount>& scale_table() const { return scales_; }

  // Nearest ladder entry; ties resolve to the lower index.
  int snap_index(double sigma) const {
    int best = 0;
    double best_diff = std::abs(sigma - scales_[0]);
    for (int i = 1; i < kScaleCount; ++i) {
      const double d = std::abs(sigma - scales_[i]);
      if (d < best_diff) {
        best = i;
        best_diff = d;
      }
    }
    return best;
  }

  const CdfTable& table(int index) const { return tables_.at(std::size_t(index)); }

 private:
  static CdfTable build_table(double sigma) {
    const std::int64_t half = std::int64_t(std::ceil(4.0 * sigma)) + 2;
    std::vector<double> pmf;
    pmf.reserve(std::size_t(2 * half + 2));
    double covered = 0;
    for (std::int64_t v = -half; v <= half; ++v) {
      const double p = detail::gauss_interval(double(v), sigma);
      pmf.push_back(p);
      covered += p;
    }
    pmf.push_back(std::max(0.0, 1.0 - covered));  // escape
    return cdf_from_pmf(pmf, -half);
  }

  std::array<double, kScaleCount> scales_{};
  std::array<CdfTable, kScaleCount> tables_{};
};

// Learned per-channel density over integers, built from a stack of monotone
// scalar maps: positive-weight affine steps with bounded tanh gates and a
// final sigmoid. The cumulative is evaluated per channel; interval masses of
// width one give symbol probabilities.
template <typename S>
struct FactorizedPrior {
  using Id = typename Graph<S>::Id;
  static constexpr std::array<int, 5> kWidths{1, 3, 3, 3, 1};

  std::int64_t channels = 0;
  std::vector<Parameter<S>> mats;    // layer k: (C * out_k, in_k, 1, 1)
  std::vector<Parameter<S>> biases;  // (1, C * out_k, 1, 1)
  std::vector<Parameter<S>> gates;   // (1, C * out_k, 1, 1), inner layers only

  FactorizedPrior() = default;
  FactorizedPrior(const std::string& name, std::int64_t c, Rng& rng) : channels(c) {
    const int layers = int(kWidths.size()) - 1;
    const double scale = std::pow(10.0, 1.0 / layers);
    for (int k = 0; k < layers; ++k) {
      const std::int64_t in = kWidths[k], out = kWidths[k + 1];
      Parameter<S> m(name + ".m" + std::to_string(k) + ".weight",
                     Tensor<S>(c * out, in, 1, 1));
      const double init = std::log(std::expm1(1.0 / (scale * double(out))));
      m.value.fill(S(init));
      mats.push_back(std::move(m));
      Parameter<S> b(name + ".b" + std::to_string(k) + ".bias",
                     Tensor<S>(1, c * out, 1, 1));
      fill_uniform(b.value, rng, -0.5, 0.5);
      biases.push_back(std::move(b));
      if (k + 1 < layers) {
        Parameter<S> a(name + ".a" + std::to_string(k) + ".weight",
                       Tensor<S>(1, c * out, 1, 1));
        gates.push_back(std::move(a));
      }
    }
  }

  // Elementwise cumulative over an (B, C, H, W) input.
  Id cdf(Graph<S>& g, Id x) {
    const int layers = int(kWidths.size()) - 1;
    Id t = x;
    for (int k = 0; k < layers; ++k) {
      Id w = g.softplus(g.param(mats[k]));
      t = g.conv1x1(t, w, g.param(biases[k]), int(channels));
      if (k + 1 < layers)
        t = g.add(t, g.channel_scale(g.tanh_op(t), g.tanh_op(g.param(gates[std::size_t(k)]))));
    }
    return g.sigmoid(t);
  }

  Id likelihood(Graph<S>& g, Id z_hat) {
    Id hi = cdf(g, g.affine(z_hat, 1.0, 0.5));
    Id lo = cdf(g, g.affine(z_hat, 1.0, -0.5));
    return g.max_const(g.add(hi, g.affine(lo, -1.0, 0.0)), kLikelihoodFloor);
  }

  // Plain per-channel evaluation used for building code tables.
  double cdf_value(std::int64_t channel, double x) const {
    const int layers = int(kWidths.size()) - 1;
    std::array<double, 4> cur{x, 0, 0, 0};
    std::array<double, 4> next{};
    int cur_n = 1;
    for (int k = 0; k < layers; ++k) {
      const std::int64_t in = kWidths[k], out = kWidths[k + 1];
      for (std::int64_t o = 0; o < out; ++o) {
        double acc = double(biases[k].value.data[channel * out + o]);
        for (std::int64_t i = 0; i < in; ++i) {
          const double raw = double(mats[k].value.at(channel * out + o, i, 0, 0));
          const double pos = std::max(raw, 0.0) + std::log1p(std::exp(-std::abs(raw)));
          acc += pos * cur[std::size_t(i)];
        }
        if (k + 1 < layers) {
          const double a = std::tanh(double(gates[std::size_t(k)].value.data[channel * out + o]));
          acc += a * std::tanh(acc);
        }
        next[std::size_t(o)] = acc;
      }
      cur = next;
      cur_n = int(out);
    }
    require(cur_n == 1, "prior: bad layer widths");
    const double v = cur[0];
    return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }

  double interval_mass(std::int64_t channel, double v) const {
    return cdf_value(channel, v + 0.5) - cdf_value(channel, v - 0.5);
  }

  // One code table per channel over the integer window that carries all but
  // kTailMass of the density, capped to +/-1024, escape slot appended.
  std::vector<CdfTable> build_tables() const {
    constexpr std::int64_t kScanLimit = 1024;
    std::vector<CdfTable> tables;
    tables.reserve(std::size_t(channels));
    for (std::int64_t c = 0; c < channels; ++c) {
      std::int64_t lo = 0, hi = 0;
      while (lo > -kScanLimit && cdf_value(c, double(lo) - 0.5) > kTailMass) --lo;
      while (hi < kScanLimit && 1.0 - cdf_value(c, double(hi) + 0.5) > kTailMass) ++hi;
      std::vector<double> pmf;
      pmf.reserve(std::size_t(hi - lo + 2));
      double covered = 0;
      for (std::int64_t v = lo; v <= hi; ++v) {
        const double p = interval_mass(c, double(v));
        pmf.push_back(std::max(p, 0.0));
        covered += p;
      }
      pmf.push_back(std::max(0.0, 1.0 - covered));  // escape
      tables.push_back(cdf_from_pmf(pmf, lo));
    }
    return tables;
  }

  void visit(const ParamVisitor<S>& fn) {
    for (auto& p : mats) fn(p);
    for (auto& p : biases) fn(p);
    for (auto& p : gates) fn(p);
  }

  std::uint64_t weight_count() const {
    std::uint64_t n = 0;
    for (const auto& p : mats) n += std::uint64_t(p.numel());
    for (const auto& p : gates) n += std::uint64_t(p.numel());
    return n;
  }
};

}  // namespace shiftlic
