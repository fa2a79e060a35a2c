#pragma once

#include <string>
#include <vector>

#include "rational.hpp"
#include "ssb.hpp"

namespace shiftlic {

// Closed-form weight count of the recursive attention block on N channels.
inline Rational cra_param_count(std::int64_t n) {
  require(n >= 0, "cra_param_count: negative channels");
  return Rational(9 * n) + Rational(39 * n * n, 8);
}

// Closed-form forward multiplies of the same block at the given resolution.
inline Rational cra_flops(std::int64_t n, std::int64_t h, std::int64_t w) {
  require(n >= 0 && h >= 0 && w >= 0, "cra_flops: negative argument");
  const Rational per_pixel = Rational(765 * n, 256) + Rational(125 * n * n, 16);
  return per_pixel * Rational(h * w);
}

// Channel recursive attention. An entry conv feeds a four-level channel
// pyramid (each level mean-pooled by a growing power of two, filtered
// depthwise, and upsampled back); the levels are fused pairwise by
// shuffle-and-project convs of growing width; the fused map gates the block
// input. A shuffled shift block refines the gated output.
template <typename S>
struct Cra {
  using Id = typename Graph<S>::Id;

  Conv1x1Layer<S> entry;
  std::vector<DwConvLayer<S>> pyramid;
  std::vector<Conv1x1Layer<S>> fuse;
  std::optional<Ssb<S>> local;
  std::int64_t width = 0;
  int levels = 4;
  int shuffle_groups = 8;
  bool recursive_shuffle = true;

  Cra() = default;
  Cra(const std::string& name, std::int64_t n, const ShiftSpec& shift, Rng& rng,
      int shuffle_groups_in = 8, bool with_recursive_shuffle = true,
      bool with_local = true)
      : width(n), shuffle_groups(shuffle_groups_in),
        recursive_shuffle(with_recursive_shuffle) {
    require(n % levels == 0, "cra: width not divisible by pyramid levels");
    const std::int64_t gc = n / levels;
    entry = Conv1x1Layer<S>(name + ".entry", n, n, rng);
    for (int i = 0; i < levels; ++i)
      pyramid.emplace_back(name + ".dw" + std::to_string(i), gc, 3, 3, rng);
    for (int i = 1; i < levels; ++i) {
      const std::int64_t fw = gc * (i + 1);
      require(fw % shuffle_groups == 0,
              "cra: fuse width not divisible by shuffle groups");
      fuse.emplace_back(name + ".fuse" + std::to_string(i - 1), fw, fw, rng);
    }
    if (with_local)
      local.emplace(name + ".local", n, n, shift, rng);
  }

  Id forward(Graph<S>& g, Id x) {
    const Tensor<S>& xt = g.value(x);
    require(xt.c() == width, "cra: channel mismatch");
    const std::int64_t deepest = std::int64_t(1) << (levels - 1);
    require(xt.h() % deepest == 0 && xt.w() % deepest == 0,
            "cra: size not divisible by pyramid depth");

    Id t = entry.forward(g, x);
    auto parts = g.channel_split(t, levels);
    std::vector<Id> branches(parts.size());
    for (int i = 0; i < levels; ++i) {
      Id bi = parts[i];
      const std::int64_t f = std::int64_t(1) << i;
      if (f > 1) bi = g.resample(bi, f, Resample::kDown);
      bi = pyramid[i].forward(g, bi);
      if (f > 1) bi = g.resample(bi, f, Resample::kUp);
      branches[i] = bi;
    }
    Id y = branches[0];
    for (int i = 1; i < levels; ++i) {
      Id cat = g.channel_concat({y, branches[i]});
      if (recursive_shuffle) cat = g.channel_shuffle(cat, shuffle_groups);
      y = fuse[i - 1].forward(g, cat);
    }
    Id out = g.add(g.mul(g.gelu(y), x), x);
    if (local) {
      out = g.channel_shuffle(out, shuffle_groups);
      out = local->forward(g, out);
    }
    return out;
  }

  void visit(const ParamVisitor<S>& fn) {
    entry.visit(fn);
    for (auto& p : pyramid) p.visit(fn);
    for (auto& f : fuse) f.visit(fn);
    if (local) local->visit(fn);
  }

  std::uint64_t weight_count() const {
    std::uint64_t n = entry.weight_count();
    for (const auto& p : pyramid) n += p.weight_count();
    for (const auto& f : fuse) n += f.weight_count();
    if (local) n += local->weight_count();
    return n;
  }

  // Forward multiplies of the constructed block at the given resolution:
  // pointwise convs at full resolution, depthwise filters at their pyramid
  // levels (nine taps per output).
  std::uint64_t counted_macs(std::int64_t h, std::int64_t w) const {
    const std::uint64_t hw = std::uint64_t(h) * std::uint64_t(w);
    std::uint64_t macs = entry.weight_count() * hw;
    for (int i = 0; i < levels; ++i) {
      const std::uint64_t f2 = std::uint64_t(1) << (2 * i);
      macs += pyramid[i].weight_count() * (hw / f2);
    }
    for (const auto& f : fuse) macs += f.weight_count() * hw;
    if (local) macs += local->weight_count() * hw;
    return macs;
  }
};

}  // namespace shiftlic
