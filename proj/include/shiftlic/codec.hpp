#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "codec_net.hpp"
#include "range_coder.hpp"

namespace shiftlic {

inline constexpr char kStreamMagic[4] = {'S', 'L', 'I', 'C'};
inline constexpr std::uint8_t kStreamVersion = 1;
inline constexpr std::uint8_t kLambdaUnindexed = 0xFF;

// Replicates the last row and column out to the next multiple of `mult`.
template <typename S>
Tensor<S> pad_replicate(const Tensor<S>& x, std::int64_t mult) {
  const std::int64_t h = x.h(), w = x.w();
  const std::int64_t ph = (h + mult - 1) / mult * mult;
  const std::int64_t pw = (w + mult - 1) / mult * mult;
  if (ph == h && pw == w) return x;
  Tensor<S> out(x.b(), x.c(), ph, pw);
  for (std::int64_t n = 0; n < x.b(); ++n)
    for (std::int64_t c = 0; c < x.c(); ++c)
      for (std::int64_t i = 0; i < ph; ++i)
        for (std::int64_t j = 0; j < pw; ++j)
          out.at(n, c, i, j) =
              x.at(n, c, std::min(i, h - 1), std::min(j, w - 1));
  return out;
}

// Codes one integer symbol against a table. Values outside the table's main
// window go through the escape slot followed by a flat 16-bit residual.
inline void code_symbol(RangeEncoder& enc, const CdfTable& t, std::int64_t v,
                        double* bits = nullptr) {
  const std::int64_t rel = v - t.min_symbol;
  if (rel >= 0 && rel < t.escape_slot()) {
    enc.encode(t.cum[std::size_t(rel)], t.freq(int(rel)), kProbTotal);
    if (bits) *bits -= std::log2(double(t.freq(int(rel))) / kProbTotal);
    return;
  }
  const int esc = t.escape_slot();
  require(v >= -kWideHalf && v < kWideHalf, "encode: symbol out of range");
  enc.encode(t.cum[std::size_t(esc)], t.freq(esc), kProbTotal);
  enc.encode(std::uint32_t(v + kWideHalf), 1, kProbTotal);
  if (bits) *bits += 16.0 - std::log2(double(t.freq(esc)) / kProbTotal);
}

inline std::int64_t decode_symbol(RangeDecoder& dec, const CdfTable& t) {
  const std::uint32_t f = dec.peek(kProbTotal);
  const int slot =
      int(std::upper_bound(t.cum.begin(), t.cum.end(), f) - t.cum.begin()) - 1;
  dec.consume(t.cum[std::size_t(slot)], t.freq(slot));
  if (slot != t.escape_slot()) return t.min_symbol + slot;
  const std::uint32_t wide = dec.peek(kProbTotal);
  dec.consume(wide, 1);
  return std::int64_t(wide) - kWideHalf;
}

struct Container {
  std::uint8_t config_id = 0;
  std::uint8_t lambda_index = kLambdaUnindexed;
  std::int64_t true_h = 0;
  std::int64_t true_w = 0;
  std::vector<std::uint8_t> z_payload;
  std::vector<std::uint8_t> y_payload;
};

inline std::vector<std::uint8_t> serialize_container(const Container& c) {
  require(c.true_h > 0 && c.true_h <= 0xFFFF && c.true_w > 0 && c.true_w <= 0xFFFF,
          "bitstream: image dimensions out of range");
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kStreamMagic, kStreamMagic + 4);
  out.push_back(kStreamVersion);
  out.push_back(c.config_id);
  out.push_back(c.lambda_index);
  auto be16 = [&out](std::int64_t v) {
    out.push_back(std::uint8_t((v >> 8) & 0xFF));
    out.push_back(std::uint8_t(v & 0xFF));
  };
  auto be32 = [&out](std::size_t v) {
    out.push_back(std::uint8_t((v >> 24) & 0xFF));
    out.push_back(std::uint8_t((v >> 16) & 0xFF));
    out.push_back(std::uint8_t((v >> 8) & 0xFF));
    out.push_back(std::uint8_t(v & 0xFF));
  };
  be16(c.true_h);
  be16(c.true_w);
  require(c.z_payload.size() <= 0xFFFFFFFFull && c.y_payload.size() <= 0xFFFFFFFFull,
          "bitstream: payload too large");
  be32(c.z_payload.size());
  out.insert(out.end(), c.z_payload.begin(), c.z_payload.end());
  be32(c.y_payload.size());
  out.insert(out.end(), c.y_payload.begin(), c.y_payload.end());
  return out;
}

inline Container parse_container(const std::vector<std::uint8_t>& buf) {
  std::size_t pos = 0;
  auto need = [&buf, &pos](std::size_t n) {
    require(pos + n <= buf.size(), "bitstream: truncated");
  };
  need(11);
  require(std::equal(kStreamMagic, kStreamMagic + 4, buf.begin()),
          "bitstream: bad magic");
  require(buf[4] == kStreamVersion, "bitstream: unsupported version");
  Container c;
  c.config_id = buf[5];
  c.lambda_index = buf[6];
  c.true_h = (std::int64_t(buf[7]) << 8) | buf[8];
  c.true_w = (std::int64_t(buf[9]) << 8) | buf[10];
  require(c.true_h > 0 && c.true_w > 0, "bitstream: bad image dimensions");
  pos = 11;
  auto take_payload = [&buf, &pos, &need]() {
    need(4);
    const std::size_t len = (std::size_t(buf[pos]) << 24) |
                            (std::size_t(buf[pos + 1]) << 16) |
                            (std::size_t(buf[pos + 2]) << 8) |
                            std::size_t(buf[pos + 3]);
    pos += 4;
    need(len);
    std::vector<std::uint8_t> payload(buf.begin() + std::ptrdiff_t(pos),
                                      buf.begin() + std::ptrdiff_t(pos + len));
    pos += len;
    return payload;
  };
  c.z_payload = take_payload();
  c.y_payload = take_payload();
  require(pos == buf.size(), "bitstream: trailing bytes");
  return c;
}

template <typename S>
struct EncodeResult {
  std::vector<std::uint8_t> container;
  Tensor<S> y_hat;  // over the padded grid
  Tensor<S> z_hat;
  double estimated_bits = 0;
  double estimated_bpp = 0;
  double measured_bpp = 0;
};

template <typename S>
struct DecodeResult {
  Tensor<S> image;  // (1, 3, true_h, true_w), clamped to [0, 1]
  Tensor<S> y_hat;
  Tensor<S> z_hat;
};

// Binds a model to the code tables derived from its weights. Encode and
// decode rebuild the Gaussian parameters from the coded side channel, so
// both ends pick identical tables symbol for symbol.
template <typename S>
class Codec {
 public:
  explicit Codec(Model<S>& model)
      : model_(model), prior_tables_(model.prior.build_tables()) {}

  EncodeResult<S> encode(const Tensor<S>& image,
                         std::uint8_t lambda_index = kLambdaUnindexed) {
    require(image.b() == 1 && image.c() == 3, "encode: expected a (1,3,H,W) image");
    const std::int64_t true_h = image.h(), true_w = image.w();
    const Tensor<S> padded = pad_replicate(image, model_.cfg.pad_multiple());

    Graph<S> g;
    const typename Graph<S>::Id x = g.constant(padded);
    const Tensor<S> y = g.value(model_.analysis(g, x));
    const Tensor<S> z =
        g.value(model_.hyper_analysis(g, g.constant(y)));

    Tensor<S> z_hat(z.b(), z.c(), z.h(), z.w());
    for (std::int64_t i = 0; i < z.numel(); ++i)
      z_hat.data[i] = S(std::round(double(z.data[i])));

    double bits = 0;
    RangeEncoder z_enc;
    for (std::int64_t c = 0; c < z.c(); ++c) {
      const CdfTable& t = prior_tables_[std::size_t(c)];
      for (std::int64_t i = 0; i < z.h(); ++i)
        for (std::int64_t j = 0; j < z.w(); ++j)
          code_symbol(z_enc, t, std::int64_t(std::llround(double(z_hat.at(0, c, i, j)))),
                      &bits);
    }

    auto [mu_id, sigma_id] = model_.hyper_synthesis(g, g.constant(z_hat));
    const Tensor<S> mu = g.value(mu_id);
    const Tensor<S> sigma = g.value(sigma_id);
    require(mu.same_shape(y), "encode: side channel does not cover the latents");

    Tensor<S> y_hat(y.b(), y.c(), y.h(), y.w());
    RangeEncoder y_enc;
    for (std::int64_t c = 0; c < y.c(); ++c)
      for (std::int64_t i = 0; i < y.h(); ++i)
        for (std::int64_t j = 0; j < y.w(); ++j) {
          const double m = double(mu.at(0, c, i, j));
          const std::int64_t s =
              std::llround(std::round(double(y.at(0, c, i, j)) - m));
          const int scale = gauss_.snap_index(double(sigma.at(0, c, i, j)));
          code_symbol(y_enc, gauss_.table(scale), s, &bits);
          y_hat.at(0, c, i, j) = S(m + double(s));
        }

    Container c;
    c.config_id = model_.cfg.id_hash();
    c.lambda_index = lambda_index;
    c.true_h = true_h;
    c.true_w = true_w;
    c.z_payload = z_enc.finish();
    c.y_payload = y_enc.finish();

    EncodeResult<S> r;
    r.container = serialize_container(c);
    r.y_hat = std::move(y_hat);
    r.z_hat = std::move(z_hat);
    r.estimated_bits = bits;
    const double px = double(true_h) * double(true_w);
    r.estimated_bpp = bits / px;
    r.measured_bpp = 8.0 * double(r.container.size()) / px;
    return r;
  }

  DecodeResult<S> decode(const std::vector<std::uint8_t>& buf) {
    const Container c = parse_container(buf);
    require(c.config_id == model_.cfg.id_hash(),
            "bitstream: stream was produced by a different model shape");
    const std::int64_t mult = model_.cfg.pad_multiple();
    const std::int64_t ph = (c.true_h + mult - 1) / mult * mult;
    const std::int64_t pw = (c.true_w + mult - 1) / mult * mult;
    const std::int64_t zh = ph / 64, zw = pw / 64;

    Tensor<S> z_hat(1, model_.cfg.hyper_width, zh, zw);
    RangeDecoder z_dec(c.z_payload.data(), c.z_payload.size());
    for (std::int64_t ch = 0; ch < z_hat.c(); ++ch) {
      const CdfTable& t = prior_tables_[std::size_t(ch)];
      for (std::int64_t i = 0; i < zh; ++i)
        for (std::int64_t j = 0; j < zw; ++j)
          z_hat.at(0, ch, i, j) = S(double(decode_symbol(z_dec, t)));
    }

    Graph<S> g;
    auto [mu_id, sigma_id] = model_.hyper_synthesis(g, g.constant(z_hat));
    const Tensor<S> mu = g.value(mu_id);
    const Tensor<S> sigma = g.value(sigma_id);

    Tensor<S> y_hat(1, model_.cfg.m, ph / 16, pw / 16);
    require(mu.same_shape(y_hat), "decode: side channel does not cover the latents");
    RangeDecoder y_dec(c.y_payload.data(), c.y_payload.size());
    for (std::int64_t ch = 0; ch < y_hat.c(); ++ch)
      for (std::int64_t i = 0; i < y_hat.h(); ++i)
        for (std::int64_t j = 0; j < y_hat.w(); ++j) {
          const int scale = gauss_.snap_index(double(sigma.at(0, ch, i, j)));
          const std::int64_t s = decode_symbol(y_dec, gauss_.table(scale));
          y_hat.at(0, ch, i, j) = S(double(mu.at(0, ch, i, j)) + double(s));
        }

    const Tensor<S>& recon = g.value(model_.synthesis(g, g.constant(y_hat)));
    DecodeResult<S> r;
    r.image = Tensor<S>(1, 3, c.true_h, c.true_w);
    for (std::int64_t ch = 0; ch < 3; ++ch)
      for (std::int64_t i = 0; i < c.true_h; ++i)
        for (std::int64_t j = 0; j < c.true_w; ++j)
          r.image.at(0, ch, i, j) =
              S(std::clamp(double(recon.at(0, ch, i, j)), 0.0, 1.0));
    r.y_hat = std::move(y_hat);
    r.z_hat = std::move(z_hat);
    return r;
  }

  const GaussianConditional& gaussian() const { return gauss_; }
  const std::vector<CdfTable>& prior_tables() const { return prior_tables_; }

 private:
  Model<S>& model_;
  GaussianConditional gauss_;
  std::vector<CdfTable> prior_tables_;
};

}  // namespace shiftlic
