#pragma once

#include <optional>
#include <string>

#include "layers.hpp"

namespace shiftlic {

// Bias-exclusive weight count of a shift block: pointwise in-projection,
// grouped spatial shift (free), pointwise out-projection, plus a pointwise
// shortcut only when the channel count changes.
inline std::uint64_t ssb_param_count(std::int64_t cin, std::int64_t cout) {
  require(cin >= 0 && cout >= 0, "ssb_param_count: negative channels");
  const std::uint64_t in = std::uint64_t(cin), out = std::uint64_t(cout);
  return cin == cout ? out * out + in * out : out * out + 2 * in * out;
}

// Forward multiplies of the same block; every pointwise conv runs at full
// spatial resolution.
inline std::uint64_t ssb_flops(std::int64_t cin, std::int64_t cout, std::int64_t h,
                               std::int64_t w) {
  require(h >= 0 && w >= 0, "ssb_flops: negative size");
  return ssb_param_count(cin, cout) * std::uint64_t(h) * std::uint64_t(w);
}

// Spatial shift block: conv1 -> gelu -> grouped shift -> conv2, with an
// identity shortcut (1x1 conv when the width changes). The shift and the
// trailing conv can be switched off to reproduce the reduced variants.
template <typename S>
struct Ssb {
  using Id = typename Graph<S>::Id;

  Conv1x1Layer<S> conv1;
  std::optional<Conv1x1Layer<S>> conv2;
  std::optional<Conv1x1Layer<S>> shortcut;
  ShiftSpec spec;
  bool shift_enabled = true;
  std::int64_t cin = 0, cout = 0;

  Ssb() = default;
  Ssb(const std::string& name, std::int64_t in, std::int64_t out,
      const ShiftSpec& shift, Rng& rng, bool with_shift = true,
      bool with_conv2 = true)
      : spec(shift), shift_enabled(with_shift), cin(in), cout(out) {
    spec.validate();
    require(out % spec.groups == 0, "ssb: width not divisible by shift groups");
    conv1 = Conv1x1Layer<S>(name + ".conv1", in, out, rng);
    if (with_conv2) conv2.emplace(name + ".conv2", out, out, rng);
    if (in != out) shortcut.emplace(name + ".shortcut", in, out, rng);
  }

  Id forward(Graph<S>& g, Id x) {
    Id t = conv1.forward(g, x);
    t = g.gelu(t);
    if (shift_enabled) t = g.spatial_shift(t, spec);
    if (conv2) t = conv2->forward(g, t);
    const Id sc = shortcut ? shortcut->forward(g, x) : x;
    return g.add(t, sc);
  }

  void visit(const ParamVisitor<S>& fn) {
    conv1.visit(fn);
    if (conv2) conv2->visit(fn);
    if (shortcut) shortcut->visit(fn);
  }

  std::uint64_t weight_count() const {
    std::uint64_t n = conv1.weight_count();
    if (conv2) n += conv2->weight_count();
    if (shortcut) n += shortcut->weight_count();
    return n;
  }
};

}  // namespace shiftlic
