#pragma once

#include <cmath>
#include <cstring>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace shiftlic {

template <typename S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<S> v) : name(std::move(n)), value(std::move(v)) {
    grad = Tensor<S>(value.b(), value.c(), value.h(), value.w());
  }
  void zero_grad() { grad.fill(S(0)); }
  std::int64_t numel() const { return value.numel(); }
};

// Grouped spatial shift: channels are split into `groups` equal slices and
// slice g moves by offsets[g] * step (rows down, cols right). Vacated
// positions are zero-filled.
struct ShiftSpec {
  int groups = 4;
  std::vector<std::pair<int, int>> offsets = {{-1, -1}, {-1, +1}, {+1, -1}, {+1, +1}};
  int step = 1;

  void validate() const {
    require(groups >= 1, "shift: groups must be >= 1");
    require(static_cast<int>(offsets.size()) == groups,
            "shift: offsets size must equal groups");
    require(step >= 1, "shift: step must be >= 1");
  }

  // True when every group keeps part of the plane in view at this extent.
  bool within(std::int64_t h, std::int64_t w) const {
    for (auto [dy, dx] : offsets) {
      if (std::int64_t(std::abs(dy)) * step >= h) return false;
      if (std::int64_t(std::abs(dx)) * step >= w) return false;
    }
    return true;
  }

  ShiftSpec negated() const {
    ShiftSpec s = *this;
    for (auto& [dy, dx] : s.offsets) {
      dy = -dy;
      dx = -dx;
    }
    return s;
  }
};

enum class Rearrange { kSpaceToChannel, kChannelToSpace };
enum class Resample { kDown, kUp };

namespace detail {

template <typename S>
inline double phi_pdf(S t) {
  return std::exp(-0.5 * double(t) * double(t)) * 0.3989422804014327;
}

template <typename S>
inline double phi_cdf(S t) {
  return 0.5 * std::erfc(-double(t) * 0.7071067811865476);
}

inline bool power_of_two(std::int64_t f) { return f >= 1 && (f & (f - 1)) == 0; }

}  // namespace detail

// Reverse-mode tape over rank-4 tensors. Each recorded op stores its output
// and a closure that routes the output gradient to the op inputs. One
// backward() per recorded tape.
template <typename S>
class Graph {
 public:
  using Id = std::int32_t;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // ---- leaves ----

  Id constant(Tensor<S> t) { return emit("constant", std::move(t), false, nullptr); }

  Id variable(Tensor<S> t) { return emit("variable", std::move(t), true, nullptr); }

  Id param(Parameter<S>& p) {
    auto it = param_ids_.find(&p);
    if (it != param_ids_.end()) return it->second;
    Id id = emit("param", Tensor<S>(p.value), true, nullptr);
    nodes_[id].bound = &p;
    param_ids_.emplace(&p, id);
    return id;
  }

  // ---- access ----

  const Tensor<S>& value(Id id) const { return nodes_.at(id).value; }

  // Gradient of the last backward()'s loss w.r.t. this node; zeros when the
  // node was never reached.
  Tensor<S> grad(Id id) const {
    const Node& n = nodes_.at(id);
    if (n.grad.numel() == 0) {
      const auto& s = n.value.shape;
      return Tensor<S>(s[0], s[1], s[2], s[3]);
    }
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  // ---- primitive ops ----

  // 1x1 convolution, optionally grouped. w: (Cout, Cin/groups, 1, 1),
  // b: (1, Cout, 1, 1).
  Id conv1x1(Id x, Id w, Id b, int groups = 1) {
    const Tensor<S>& xt = val(x);
    const Tensor<S>& wt = val(w);
    const Tensor<S>& bt = val(b);
    const std::int64_t B = xt.b(), Cin = xt.c(), H = xt.h(), W = xt.w();
    const std::int64_t Cout = wt.b();
    require(groups >= 1 && Cin % groups == 0 && Cout % groups == 0,
            "conv1x1: channels not divisible by groups");
    const std::int64_t cing = Cin / groups, coutg = Cout / groups;
    require(wt.c() == cing && wt.h() == 1 && wt.w() == 1, "conv1x1: bad weight shape");
    require(bt.b() == 1 && bt.c() == Cout && bt.h() == 1 && bt.w() == 1,
            "conv1x1: bad bias shape");
    const std::int64_t HW = H * W;

    Tensor<S> out(B, Cout, H, W);
    for (std::int64_t n = 0; n < B; ++n) {
      for (std::int64_t g = 0; g < groups; ++g) {
        for (std::int64_t oc = 0; oc < coutg; ++oc) {
          const std::int64_t ocg = g * coutg + oc;
          S* op = out.ptr(n, ocg);
          const S bias = bt.data[ocg];
          for (std::int64_t p = 0; p < HW; ++p) op[p] = bias;
          for (std::int64_t ic = 0; ic < cing; ++ic) {
            const S* xp = xt.ptr(n, g * cing + ic);
            const S wv = wt.at(ocg, ic, 0, 0);
            for (std::int64_t p = 0; p < HW; ++p) op[p] += wv * xp[p];
          }
        }
      }
    }
    auto& ctr = op_counter();
    ctr.macs += std::uint64_t(B) * Cout * cing * HW;
    ctr.adds += std::uint64_t(B) * Cout * cing * HW + std::uint64_t(B) * Cout * HW;

    bool track = tracked(x) || tracked(w) || tracked(b);
    return emit("conv1x1", std::move(out), track,
                [x, w, b, groups](Graph& g2, Id self) {
                  const Tensor<S>& go = g2.nodes_[self].grad;
                  const Tensor<S>& xt2 = g2.val(x);
                  const Tensor<S>& wt2 = g2.val(w);
                  const std::int64_t B2 = xt2.b(), Cin2 = xt2.c(), HW2 = xt2.plane();
                  const std::int64_t Cout2 = wt2.b();
                  const std::int64_t cing2 = Cin2 / groups, coutg2 = Cout2 / groups;
                  if (g2.tracked(x)) {
                    Tensor<S> gx(xt2.b(), xt2.c(), xt2.h(), xt2.w());
                    for (std::int64_t n = 0; n < B2; ++n)
                      for (std::int64_t g = 0; g < groups; ++g)
                        for (std::int64_t oc = 0; oc < coutg2; ++oc) {
                          const std::int64_t ocg = g * coutg2 + oc;
                          const S* gop = go.ptr(n, ocg);
                          for (std::int64_t ic = 0; ic < cing2; ++ic) {
                            S* gxp = gx.ptr(n, g * cing2 + ic);
                            const S wv = wt2.at(ocg, ic, 0, 0);
                            for (std::int64_t p = 0; p < HW2; ++p) gxp[p] += wv * gop[p];
                          }
                        }
                    g2.accum(x, std::move(gx));
                  }
                  if (g2.tracked(w)) {
                    Tensor<S> gw(wt2.b(), wt2.c(), 1, 1);
                    for (std::int64_t n = 0; n < B2; ++n)
                      for (std::int64_t g = 0; g < groups; ++g)
                        for (std::int64_t oc = 0; oc < coutg2; ++oc) {
                          const std::int64_t ocg = g * coutg2 + oc;
                          const S* gop = go.ptr(n, ocg);
                          for (std::int64_t ic = 0; ic < cing2; ++ic) {
                            const S* xp = xt2.ptr(n, g * cing2 + ic);
                            double acc = 0;
                            for (std::int64_t p = 0; p < HW2; ++p)
                              acc += double(gop[p]) * double(xp[p]);
                            gw.at(ocg, ic, 0, 0) += S(acc);
                          }
                        }
                    g2.accum(w, std::move(gw));
                  }
                  if (g2.tracked(b)) {
                    Tensor<S> gb(1, Cout2, 1, 1);
                    for (std::int64_t n = 0; n < B2; ++n)
                      for (std::int64_t c = 0; c < Cout2; ++c) {
                        const S* gop = go.ptr(n, c);
                        double acc = 0;
                        for (std::int64_t p = 0; p < HW2; ++p) acc += double(gop[p]);
                        gb.data[c] += S(acc);
                      }
                    g2.accum(b, std::move(gb));
                  }
                });
  }

  // Depthwise convolution with odd kernel, zero padding, stride 1.
  // w: (C, 1, Kh, Kw), b: (1, C, 1, 1).
  Id depthwise_conv(Id x, Id w, Id b) {
    const Tensor<S>& xt = val(x);
    const Tensor<S>& wt = val(w);
    const Tensor<S>& bt = val(b);
    const std::int64_t B = xt.b(), C = xt.c(), H = xt.h(), W = xt.w();
    const std::int64_t Kh = wt.h(), Kw = wt.w();
    require(wt.b() == C && wt.c() == 1, "depthwise_conv: bad weight shape");
    require(Kh % 2 == 1 && Kw % 2 == 1, "depthwise_conv: kernel must be odd");
    require(bt.b() == 1 && bt.c() == C && bt.h() == 1 && bt.w() == 1,
            "depthwise_conv: bad bias shape");
    const std::int64_t ph = Kh / 2, pw = Kw / 2;

    Tensor<S> out(B, C, H, W);
    for (std::int64_t n = 0; n < B; ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        const S* xp = xt.ptr(n, c);
        const S* wp = wt.ptr(c, 0);
        S* op = out.ptr(n, c);
        const S bias = bt.data[c];
        for (std::int64_t i = 0; i < H; ++i)
          for (std::int64_t j = 0; j < W; ++j) {
            S acc = bias;
            for (std::int64_t u = 0; u < Kh; ++u) {
              const std::int64_t ii = i + u - ph;
              if (ii < 0 || ii >= H) continue;
              for (std::int64_t v = 0; v < Kw; ++v) {
                const std::int64_t jj = j + v - pw;
                if (jj < 0 || jj >= W) continue;
                acc += wp[u * Kw + v] * xp[ii * W + jj];
              }
            }
            op[i * W + j] = acc;
          }
      }
    auto& ctr = op_counter();
    ctr.macs += std::uint64_t(B) * C * H * W * Kh * Kw;
    ctr.adds += std::uint64_t(B) * C * H * W * (Kh * Kw + 1);

    bool track = tracked(x) || tracked(w) || tracked(b);
    return emit("depthwise_conv", std::move(out), track,
                [x, w, b](Graph& g2, Id self) {
                  const Tensor<S>& go = g2.nodes_[self].grad;
                  const Tensor<S>& xt2 = g2.val(x);
                  const Tensor<S>& wt2 = g2.val(w);
                  const std::int64_t B2 = xt2.b(), C2 = xt2.c(), H2 = xt2.h(), W2 = xt2.w();
                  const std::int64_t Kh2 = wt2.h(), Kw2 = wt2.w();
                  const std::int64_t ph2 = Kh2 / 2, pw2 = Kw2 / 2;
                  if (g2.tracked(x)) {
                    Tensor<S> gx(B2, C2, H2, W2);
                    for (std::int64_t n = 0; n < B2; ++n)
                      for (std::int64_t c = 0; c < C2; ++c) {
                        S* gxp = gx.ptr(n, c);
                        const S* wp = wt2.ptr(c, 0);
                        const S* gop = go.ptr(n, c);
                        for (std::int64_t i = 0; i < H2; ++i)
                          for (std::int64_t j = 0; j < W2; ++j) {
                            const S gv = gop[i * W2 + j];
                            for (std::int64_t u = 0; u < Kh2; ++u) {
                              const std::int64_t ii = i + u - ph2;
                              if (ii < 0 || ii >= H2) continue;
                              for (std::int64_t v = 0; v < Kw2; ++v) {
                                const std::int64_t jj = j + v - pw2;
                                if (jj < 0 || jj >= W2) continue;
                                gxp[ii * W2 + jj] += wp[u * Kw2 + v] * gv;
                              }
                            }
                          }
                      }
                    g2.accum(x, std::move(gx));
                  }
                  if (g2.tracked(w)) {
                    Tensor<S> gw(C2, 1, Kh2, Kw2);
                    for (std::int64_t n = 0; n < B2; ++n)
                      for (std::int64_t c = 0; c < C2; ++c) {
                        const S* xp = xt2.ptr(n, c);
                        const S* gop = go.ptr(n, c);
                        S* gwp = gw.ptr(c, 0);
                        for (std::int64_t u = 0; u < Kh2; ++u)
                          for (std::int64_t v = 0; v < Kw2; ++v) {
                            double acc = 0;
                            for (std::int64_t i = 0; i < H2; ++i) {
                              const std::int64_t ii = i + u - ph2;
                              if (ii < 0 || ii >= H2) continue;
                              for (std::int64_t j = 0; j < W2; ++j) {
                                const std::int64_t jj = j + v - pw2;
                                if (jj < 0 || jj >= W2) continue;
                                acc += double(gop[i * W2 + j]) * double(xp[ii * W2 + jj]);
                              }
                            }
                            gwp[u * Kw2 + v] += S(acc);
                          }
                      }
                    g2.accum(w, std::move(gw));
                  }
                  if (g2.tracked(b)) {
                    Tensor<S> gb(1, C2, 1, 1);
                    for (std::int64_t n = 0; n < B2; ++n)
                      for (std::int64_t c = 0; c < C2; ++c) {
                        const S* gop = go.ptr(n, c);
                        double acc = 0;
                        for (std::int64_t p = 0; p < H2 * W2; ++p) acc += double(gop[p]);
                        gb.data[c] += S(acc);
                      }
                    g2.accum(b, std::move(gb));
                  }
                });
  }

  Id spatial_shift(Id x, const ShiftSpec& spec) {
    spec.validate();
    const Tensor<S>& xt = val(x);
    require(xt.c() % spec.groups == 0, "spatial_shift: channels not divisible by groups");
    Tensor<S> out = shift_kernel(xt, spec);
    return emit("spatial_shift", std::move(out), tracked(x),
                [x, spec](Graph& g2, Id self) {
                  g2.accum(x, shift_kernel(g2.nodes_[self].grad, spec.negated()));
                });
  }

  Id channel_shuffle(Id x, int groups) {
    const Tensor<S>& xt = val(x);
    require(groups >= 1 && xt.c() % groups == 0,
            "channel_shuffle: channels not divisible by groups");
    Tensor<S> out = shuffle_kernel(xt, groups);
    const int inv = static_cast<int>(xt.c() / groups);
    return emit("channel_shuffle", std::move(out), tracked(x),
                [x, inv](Graph& g2, Id self) {
                  g2.accum(x, shuffle_kernel(g2.nodes_[self].grad, inv));
                });
  }

  Id pixel_rearrange(Id x, int r, Rearrange dir) {
    require(r >= 1, "pixel_rearrange: factor must be >= 1");
    const Tensor<S>& xt = val(x);
    Tensor<S> out = rearrange_kernel(xt, r, dir);
    const Rearrange back_dir = dir == Rearrange::kSpaceToChannel
                                   ? Rearrange::kChannelToSpace
                                   : Rearrange::kSpaceToChannel;
    return emit("pixel_rearrange", std::move(out), tracked(x),
                [x, r, back_dir](Graph& g2, Id self) {
                  g2.accum(x, rearrange_kernel(g2.nodes_[self].grad, r, back_dir));
                });
  }

  Id resample(Id x, std::int64_t factor, Resample dir) {
    require(detail::power_of_two(factor), "resample: factor must be a power of two");
    const Tensor<S>& xt = val(x);
    const std::int64_t B = xt.b(), C = xt.c(), H = xt.h(), W = xt.w();
    Tensor<S> out;
    if (dir == Resample::kDown) {
      require(H % factor == 0 && W % factor == 0,
              "resample: size not divisible by factor");
      out = Tensor<S>(B, C, H / factor, W / factor);
      const S inv = S(1.0 / double(factor * factor));
      for (std::int64_t n = 0; n < B; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
          const S* xp = xt.ptr(n, c);
          S* op = out.ptr(n, c);
          for (std::int64_t i = 0; i < H / factor; ++i)
            for (std::int64_t j = 0; j < W / factor; ++j) {
              S acc = S(0);
              for (std::int64_t u = 0; u < factor; ++u)
                for (std::int64_t v = 0; v < factor; ++v)
                  acc += xp[(i * factor + u) * W + j * factor + v];
              op[i * (W / factor) + j] = acc * inv;
            }
        }
      op_counter().other_muls += std::uint64_t(out.numel());
      op_counter().adds += std::uint64_t(xt.numel());
    } else {
      out = Tensor<S>(B, C, H * factor, W * factor);
      for (std::int64_t n = 0; n < B; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
          const S* xp = xt.ptr(n, c);
          S* op = out.ptr(n, c);
          for (std::int64_t i = 0; i < H * factor; ++i)
            for (std::int64_t j = 0; j < W * factor; ++j)
              op[i * W * factor + j] = xp[(i / factor) * W + j / factor];
        }
    }
    return emit("resample", std::move(out), tracked(x),
                [x, factor, dir](Graph& g2, Id self) {
                  const Tensor<S>& go = g2.nodes_[self].grad;
                  const Tensor<S>& xt2 = g2.val(x);
                  const std::int64_t B2 = xt2.b(), C2 = xt2.c(), H2 = xt2.h(), W2 = xt2.w();
                  Tensor<S> gx(B2, C2, H2, W2);
                  if (dir == Resample::kDown) {
                    const S inv = S(1.0 / double(factor * factor));
                    for (std::int64_t n = 0; n < B2; ++n)
                      for (std::int64_t c = 0; c < C2; ++c) {
                        S* gxp = gx.ptr(n, c);
                        const S* gop = go.ptr(n, c);
                        for (std::int64_t i = 0; i < H2; ++i)
                          for (std::int64_t j = 0; j < W2; ++j)
                            gxp[i * W2 + j] =
                                gop[(i / factor) * (W2 / factor) + j / factor] * inv;
                      }
                  } else {
                    for (std::int64_t n = 0; n < B2; ++n)
                      for (std::int64_t c = 0; c < C2; ++c) {
                        S* gxp = gx.ptr(n, c);
                        const S* gop = go.ptr(n, c);
                        for (std::int64_t i = 0; i < H2 * factor; ++i)
                          for (std::int64_t j = 0; j < W2 * factor; ++j)
                            gxp[(i / factor) * W2 + j / factor] +=
                                gop[i * W2 * factor + j];
                      }
                  }
                  g2.accum(x, std::move(gx));
                });
  }

  // x * cdf(x) with the exact Gauss error function.
  Id gelu(Id x) {
    const Tensor<S>& xt = val(x);
    Tensor<S> out(xt.b(), xt.c(), xt.h(), xt.w());
    for (std::int64_t i = 0; i < xt.numel(); ++i) {
      const double v = double(xt.data[i]);
      out.data[i] = S(v * detail::phi_cdf(v));
    }
    op_counter().other_muls += std::uint64_t(xt.numel());
    return emit("gelu", std::move(out), tracked(x), [x](Graph& g2, Id self) {
      const Tensor<S>& go = g2.nodes_[self].grad;
      const Tensor<S>& xt2 = g2.val(x);
      Tensor<S> gx(xt2.b(), xt2.c(), xt2.h(), xt2.w());
      for (std::int64_t i = 0; i < xt2.numel(); ++i) {
        const double v = double(xt2.data[i]);
        gx.data[i] = S((detail::phi_cdf(v) + v * detail::phi_pdf(v)) * double(go.data[i]));
      }
      g2.accum(x, std::move(gx));
    });
  }

  Id tanh_op(Id x) {
    const Tensor<S>& xt = val(x);
    Tensor<S> out(xt.b(), xt.c(), xt.h(), xt.w());
    for (std::int64_t i = 0; i < xt.numel(); ++i)
      out.data[i] = S(std::tanh(double(xt.data[i])));
    return emit("tanh", std::move(out), tracked(x), [x](Graph& g2, Id self) {
      const Tensor<S>& go = g2.nodes_[self].grad;
      const Tensor<S>& yt = g2.nodes_[self].value;
      Tensor<S> gx(yt.b(), yt.c(), yt.h(), yt.w());
      for (std::int64_t i = 0; i < yt.numel(); ++i) {
        const double y = double(yt.data[i]);
        gx.data[i] = S((1.0 - y * y) * double(go.data[i]));
      }
      g2.accum(x, std::move(gx));
    });
  }

  Id sigmoid(Id x) {
    const Tensor<S>& xt = val(x);
    Tensor<S> out(xt.b(), xt.c(), xt.h(), xt.w());
    for (std::int64_t i = 0; i < xt.numel(); ++i) {
      const double v = double(xt.data[i]);
      out.data[i] = S(v >= 0 ? 1.0 / (1.0 + std::exp(-v))
                             : std::exp(v) / (1.0 + std::exp(v)));
    }
    return emit("sigmoid", std::move(out), tracked(x), [x](Graph& g2, Id self) {
      const Tensor<S>& go = g2.nodes_[self].grad;
      const Tensor<S>& yt = g2.nodes_[self].value;
      Tensor<S> gx(yt.b(), yt.c(), yt.h(), yt.w());
      for (std::int64_t i = 0; i < yt.numel(); ++i) {
        const double y = double(yt.data[i]);
        gx.data[i] = S(y * (1.0 - y) * double(go.data[i]));
      }
      g2.accum(x, std::move(gx));
    });
  }

  Id softplus(Id x) {
    const Tensor<S>& xt = val(x);
    Tensor<S> out(xt.b(), xt.c(), xt.h(), xt.w());
    for (std::int64_t i = 0; i < xt.numel(); ++i) {
      const double v = double(xt.data[i]);
      out.data[i] = S(std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))));
    }
    return emit("softplus", std::move(out), tracked(x), [x](Graph& g2, Id self) {
      const Tensor<S>& go = g2.nodes_[self].grad;
      const Tensor<S>& xt2 = g2.val(x);
      Tensor<S> gx(xt2.b(), xt2.c(), xt2.h(), xt2.w());
      for (std::int64_t i = 0; i < xt2.numel(); ++i) {
        const double v = double(xt2.data[i]);
        const double sig = v >= 0 ? 1.0 / (1.0 + std::exp(-v))
                                  : std::exp(v) / (1.0 + std::exp(v));
        gx.data[i] = S(sig * double(go.data[i]));
      }
      g2.accum(x, std::move(gx));
    });
  }

  Id log_op(Id x) {
    const Tensor<S>& xt = val(x);
    Tensor<S> out(xt.b(), xt.c(), xt.h(), xt.w());
    for (std::int64_t i = 0; i < xt.numel(); ++i) {
      require(xt.data[i] > S(0), "log: non-positive input");
      out.data[i] = S(std::log(double(xt.data[i])));
    }
    return emit("log", std::move(out), tracked(x), [x](Graph& g2, Id self) {
      const Tensor<S>& go = g2.nodes_[self].grad;
      const Tensor<S>& xt2 = g2.val(x);
      Tensor<S> gx(xt2.b(), xt2.c(), xt2.h(), xt2.w());
      for (std::int64_t i = 0; i < xt2.numel(); ++i)
        gx.data[i] = go.data[i] / xt2.data[i];
      g2.accum(x, std::move(gx));
    });
  }

  // a*x + b with scalar constants.
  Id affine(Id x, double a, double b) {
    const Tensor<S>& xt = val(x);
    Tensor<S> out(xt.b(), xt.c(), xt.h(), xt.w());
    for (std::int64_t i = 0; i < xt.numel(); ++i)
      out.data[i] = S(a * double(xt.data[i]) + b);
    op_counter().other_muls += std::uint64_t(xt.numel());
    return emit("affine", std::move(out), tracked(x), [x, a](Graph& g2, Id self) {
      const Tensor<S>& go = g2.nodes_[self].grad;
      Tensor<S> gx(go.b(), go.c(), go.h(), go.w());
      for (std::int64_t i = 0; i < go.numel(); ++i)
        gx.data[i] = S(a * double(go.data[i]));
      g2.accum(x, std::move(gx));
    });
  }

  // x^p for non-negative x and constant exponent.
  Id pow_const(Id x, double p) {
    const Tensor<S>& xt = val(x);
    Tensor<S> out(xt.b(), xt.c(), xt.h(), xt.w());
    for (std::int64_t i = 0; i < xt.numel(); ++i) {
      require(xt.data[i] >= S(0), "pow_const: negative base");
      out.data[i] = S(std::pow(double(xt.data[i]), p));
    }
    return emit("pow_const", std::move(out), tracked(x), [x, p](Graph& g2, Id self) {
      const Tensor<S>& go = g2.nodes_[self].grad;
      const Tensor<S>& xt2 = g2.val(x);
      Tensor<S> gx(xt2.b(), xt2.c(), xt2.h(), xt2.w());
      for (std::int64_t i = 0; i < xt2.numel(); ++i)
        gx.data[i] =
            S(p * std::pow(double(xt2.data[i]), p - 1.0) * double(go.data[i]));
      g2.accum(x, std::move(gx));
    });
  }

  // max(x, c); gradient passes only where x > c.
  Id max_const(Id x, double c) {
    const Tensor<S>& xt = val(x);
    Tensor<S> out(xt.b(), xt.c(), xt.h(), xt.w());
    for (std::int64_t i = 0; i < xt.numel(); ++i)
      out.data[i] = std::max(xt.data[i], S(c));
    return emit("max_const", std::move(out), tracked(x), [x, c](Graph& g2, Id self) {
      const Tensor<S>& go = g2.nodes_[self].grad;
      const Tensor<S>& xt2 = g2.val(x);
      Tensor<S> gx(xt2.b(), xt2.c(), xt2.h(), xt2.w());
      for (std::int64_t i = 0; i < xt2.numel(); ++i)
        gx.data[i] = xt2.data[i] > S(c) ? go.data[i] : S(0);
      g2.accum(x, std::move(gx));
    });
  }

  Id add(Id a, Id b) {
    const Tensor<S>& at = val(a);
    const Tensor<S>& bt = val(b);
    require(at.same_shape(bt), "add: shape mismatch");
    Tensor<S> out(at.b(), at.c(), at.h(), at.w());
    for (std::int64_t i = 0; i < at.numel(); ++i) out.data[i] = at.data[i] + bt.data[i];
    op_counter().adds += std::uint64_t(at.numel());
    return emit("add", std::move(out), tracked(a) || tracked(b),
                [a, b](Graph& g2, Id self) {
                  const Tensor<S>& go = g2.nodes_[self].grad;
                  g2.accum(a, go);
                  g2.accum(b, go);
                });
  }

  Id mul(Id a, Id b) {
    const Tensor<S>& at = val(a);
    const Tensor<S>& bt = val(b);
    require(at.same_shape(bt), "mul: shape mismatch");
    Tensor<S> out(at.b(), at.c(), at.h(), at.w());
    for (std::int64_t i = 0; i < at.numel(); ++i) out.data[i] = at.data[i] * bt.data[i];
    op_counter().other_muls += std::uint64_t(at.numel());
    return emit("mul", std::move(out), tracked(a) || tracked(b),
                [a, b](Graph& g2, Id self) {
                  const Tensor<S>& go = g2.nodes_[self].grad;
                  const Tensor<S>& at2 = g2.val(a);
                  const Tensor<S>& bt2 = g2.val(b);
                  if (g2.tracked(a)) {
                    Tensor<S> ga(at2.b(), at2.c(), at2.h(), at2.w());
                    for (std::int64_t i = 0; i < at2.numel(); ++i)
                      ga.data[i] = go.data[i] * bt2.data[i];
                    g2.accum(a, std::move(ga));
                  }
                  if (g2.tracked(b)) {
                    Tensor<S> gb(bt2.b(), bt2.c(), bt2.h(), bt2.w());
                    for (std::int64_t i = 0; i < bt2.numel(); ++i)
                      gb.data[i] = go.data[i] * at2.data[i];
                    g2.accum(b, std::move(gb));
                  }
                });
  }

  Id div(Id a, Id b) {
    const Tensor<S>& at = val(a);
    const Tensor<S>& bt = val(b);
    require(at.same_shape(bt), "div: shape mismatch");
    Tensor<S> out(at.b(), at.c(), at.h(), at.w());
    for (std::int64_t i = 0; i < at.numel(); ++i) out.data[i] = at.data[i] / bt.data[i];
    op_counter().divs += std::uint64_t(at.numel());
    return emit("div", std::move(out), tracked(a) || tracked(b),
                [a, b](Graph& g2, Id self) {
                  const Tensor<S>& go = g2.nodes_[self].grad;
                  const Tensor<S>& at2 = g2.val(a);
                  const Tensor<S>& bt2 = g2.val(b);
                  if (g2.tracked(a)) {
                    Tensor<S> ga(at2.b(), at2.c(), at2.h(), at2.w());
                    for (std::int64_t i = 0; i < at2.numel(); ++i)
                      ga.data[i] = go.data[i] / bt2.data[i];
                    g2.accum(a, std::move(ga));
                  }
                  if (g2.tracked(b)) {
                    Tensor<S> gb(bt2.b(), bt2.c(), bt2.h(), bt2.w());
                    for (std::int64_t i = 0; i < bt2.numel(); ++i) {
                      const S bv = bt2.data[i];
                      gb.data[i] = -go.data[i] * at2.data[i] / (bv * bv);
                    }
                    g2.accum(b, std::move(gb));
                  }
                });
  }

  Id channel_concat(const std::vector<Id>& xs) {
    require(!xs.empty(), "channel_concat: no inputs");
    const Tensor<S>& first = val(xs[0]);
    std::int64_t ctotal = 0;
    bool track = false;
    for (Id id : xs) {
      const Tensor<S>& t = val(id);
      require(t.b() == first.b() && t.h() == first.h() && t.w() == first.w(),
              "channel_concat: spatial/batch mismatch");
      ctotal += t.c();
      track = track || tracked(id);
    }
    Tensor<S> out(first.b(), ctotal, first.h(), first.w());
    const std::int64_t HW = first.plane();
    for (std::int64_t n = 0; n < first.b(); ++n) {
      std::int64_t co = 0;
      for (Id id : xs) {
        const Tensor<S>& t = val(id);
        std::memcpy(out.ptr(n, co), t.ptr(n, 0),
                    sizeof(S) * std::size_t(t.c() * HW));
        co += t.c();
      }
    }
    return emit("channel_concat", std::move(out), track, [xs](Graph& g2, Id self) {
      const Tensor<S>& go = g2.nodes_[self].grad;
      const std::int64_t HW2 = go.plane();
      std::int64_t co = 0;
      for (Id id : xs) {
        const Tensor<S>& t = g2.val(id);
        if (g2.tracked(id)) {
          Tensor<S> gi(t.b(), t.c(), t.h(), t.w());
          for (std::int64_t n = 0; n < t.b(); ++n)
            std::memcpy(gi.ptr(n, 0), go.ptr(n, co),
                        sizeof(S) * std::size_t(t.c() * HW2));
          g2.accum(id, std::move(gi));
        }
        co += t.c();
      }
    });
  }

  Id channel_slice(Id x, std::int64_t c0, std::int64_t c1) {
    const Tensor<S>& xt = val(x);
    require(0 <= c0 && c0 < c1 && c1 <= xt.c(), "channel_slice: bad range");
    Tensor<S> out(xt.b(), c1 - c0, xt.h(), xt.w());
    const std::int64_t HW = xt.plane();
    for (std::int64_t n = 0; n < xt.b(); ++n)
      std::memcpy(out.ptr(n, 0), xt.ptr(n, c0),
                  sizeof(S) * std::size_t((c1 - c0) * HW));
    return emit("channel_slice", std::move(out), tracked(x),
                [x, c0, c1](Graph& g2, Id self) {
                  const Tensor<S>& go = g2.nodes_[self].grad;
                  const Tensor<S>& xt2 = g2.val(x);
                  Tensor<S> gx(xt2.b(), xt2.c(), xt2.h(), xt2.w());
                  const std::int64_t HW2 = xt2.plane();
                  for (std::int64_t n = 0; n < xt2.b(); ++n)
                    std::memcpy(gx.ptr(n, c0), go.ptr(n, 0),
                                sizeof(S) * std::size_t((c1 - c0) * HW2));
                  g2.accum(x, std::move(gx));
                });
  }

  std::vector<Id> channel_split(Id x, int n) {
    const Tensor<S>& xt = val(x);
    require(n >= 1 && xt.c() % n == 0, "channel_split: channels not divisible");
    const std::int64_t step = xt.c() / n;
    std::vector<Id> parts;
    parts.reserve(n);
    for (int i = 0; i < n; ++i)
      parts.push_back(channel_slice(x, i * step, (i + 1) * step));
    return parts;
  }

  Id spatial_crop(Id x, std::int64_t i0, std::int64_t j0, std::int64_t nh,
                  std::int64_t nw) {
    const Tensor<S>& xt = val(x);
    require(i0 >= 0 && j0 >= 0 && nh >= 1 && nw >= 1 && i0 + nh <= xt.h() &&
                j0 + nw <= xt.w(),
            "spatial_crop: bad window");
    Tensor<S> out(xt.b(), xt.c(), nh, nw);
    for (std::int64_t n = 0; n < xt.b(); ++n)
      for (std::int64_t c = 0; c < xt.c(); ++c) {
        const S* xp = xt.ptr(n, c);
        S* op = out.ptr(n, c);
        for (std::int64_t i = 0; i < nh; ++i)
          std::memcpy(op + i * nw, xp + (i0 + i) * xt.w() + j0,
                      sizeof(S) * std::size_t(nw));
      }
    return emit("spatial_crop", std::move(out), tracked(x),
                [x, i0, j0, nh, nw](Graph& g2, Id self) {
                  const Tensor<S>& go = g2.nodes_[self].grad;
                  const Tensor<S>& xt2 = g2.val(x);
                  Tensor<S> gx(xt2.b(), xt2.c(), xt2.h(), xt2.w());
                  for (std::int64_t n = 0; n < xt2.b(); ++n)
                    for (std::int64_t c = 0; c < xt2.c(); ++c) {
                      S* gxp = gx.ptr(n, c);
                      const S* gop = go.ptr(n, c);
                      for (std::int64_t i = 0; i < nh; ++i)
                        std::memcpy(gxp + (i0 + i) * xt2.w() + j0, gop + i * nw,
                                    sizeof(S) * std::size_t(nw));
                    }
                  g2.accum(x, std::move(gx));
                });
  }

  Id reduce_sum(Id x) {
    const Tensor<S>& xt = val(x);
    double acc = 0;
    for (std::int64_t i = 0; i < xt.numel(); ++i) acc += double(xt.data[i]);
    op_counter().adds += std::uint64_t(xt.numel());
    return emit("reduce_sum", Tensor<S>::scalar(S(acc)), tracked(x),
                [x](Graph& g2, Id self) {
                  const S gv = g2.nodes_[self].grad.data[0];
                  const Tensor<S>& xt2 = g2.val(x);
                  Tensor<S> gx(xt2.b(), xt2.c(), xt2.h(), xt2.w());
                  gx.fill(gv);
                  g2.accum(x, std::move(gx));
                });
  }

  // Per-channel scaling: s has shape (1, C, 1, 1).
  Id channel_scale(Id x, Id s) {
    const Tensor<S>& xt = val(x);
    const Tensor<S>& st = val(s);
    require(st.b() == 1 && st.c() == xt.c() && st.h() == 1 && st.w() == 1,
            "channel_scale: bad scale shape");
    Tensor<S> out(xt.b(), xt.c(), xt.h(), xt.w());
    const std::int64_t HW = xt.plane();
    for (std::int64_t n = 0; n < xt.b(); ++n)
      for (std::int64_t c = 0; c < xt.c(); ++c) {
        const S sv = st.data[c];
        const S* xp = xt.ptr(n, c);
        S* op = out.ptr(n, c);
        for (std::int64_t p = 0; p < HW; ++p) op[p] = xp[p] * sv;
      }
    op_counter().other_muls += std::uint64_t(xt.numel());
    return emit("channel_scale", std::move(out), tracked(x) || tracked(s),
                [x, s](Graph& g2, Id self) {
                  const Tensor<S>& go = g2.nodes_[self].grad;
                  const Tensor<S>& xt2 = g2.val(x);
                  const Tensor<S>& st2 = g2.val(s);
                  const std::int64_t HW2 = xt2.plane();
                  if (g2.tracked(x)) {
                    Tensor<S> gx(xt2.b(), xt2.c(), xt2.h(), xt2.w());
                    for (std::int64_t n = 0; n < xt2.b(); ++n)
                      for (std::int64_t c = 0; c < xt2.c(); ++c) {
                        const S sv = st2.data[c];
                        const S* gop = go.ptr(n, c);
                        S* gxp = gx.ptr(n, c);
                        for (std::int64_t p = 0; p < HW2; ++p) gxp[p] = gop[p] * sv;
                      }
                    g2.accum(x, std::move(gx));
                  }
                  if (g2.tracked(s)) {
                    Tensor<S> gs(1, xt2.c(), 1, 1);
                    for (std::int64_t n = 0; n < xt2.b(); ++n)
                      for (std::int64_t c = 0; c < xt2.c(); ++c) {
                        const S* gop = go.ptr(n, c);
                        const S* xp = xt2.ptr(n, c);
                        double acc = 0;
                        for (std::int64_t p = 0; p < HW2; ++p)
                          acc += double(gop[p]) * double(xp[p]);
                        gs.data[c] += S(acc);
                      }
                    g2.accum(s, std::move(gs));
                  }
                });
  }

  // Probability mass of the unit interval around y under a Gaussian with the
  // given per-element mean and scale, floored at 1e-9.
  Id gaussian_mass(Id y, Id mu, Id sigma) {
    const Tensor<S>& yt = val(y);
    const Tensor<S>& mt = val(mu);
    const Tensor<S>& st = val(sigma);
    require(yt.same_shape(mt) && yt.same_shape(st), "gaussian_mass: shape mismatch");
    constexpr double kFloor = 1e-9;
    Tensor<S> out(yt.b(), yt.c(), yt.h(), yt.w());
    for (std::int64_t i = 0; i < yt.numel(); ++i) {
      const double sv = double(st.data[i]);
      require(sv > 0, "gaussian_mass: non-positive sigma");
      const double d = double(yt.data[i]) - double(mt.data[i]);
      const double p =
          detail::phi_cdf((d + 0.5) / sv) - detail::phi_cdf((d - 0.5) / sv);
      out.data[i] = S(std::max(p, kFloor));
    }
    bool track = tracked(y) || tracked(mu) || tracked(sigma);
    return emit("gaussian_mass", std::move(out), track,
                [y, mu, sigma](Graph& g2, Id self) {
                  const Tensor<S>& go = g2.nodes_[self].grad;
                  const Tensor<S>& yt2 = g2.val(y);
                  const Tensor<S>& mt2 = g2.val(mu);
                  const Tensor<S>& st2 = g2.val(sigma);
                  const std::int64_t n = yt2.numel();
                  Tensor<S> gy, gm, gs;
                  const bool wy = g2.tracked(y), wm = g2.tracked(mu),
                             ws = g2.tracked(sigma);
                  if (wy) gy = Tensor<S>(yt2.b(), yt2.c(), yt2.h(), yt2.w());
                  if (wm) gm = Tensor<S>(yt2.b(), yt2.c(), yt2.h(), yt2.w());
                  if (ws) gs = Tensor<S>(yt2.b(), yt2.c(), yt2.h(), yt2.w());
                  for (std::int64_t i = 0; i < n; ++i) {
                    const double sv = double(st2.data[i]);
                    const double d = double(yt2.data[i]) - double(mt2.data[i]);
                    const double a = (d + 0.5) / sv;
                    const double b = (d - 0.5) / sv;
                    const double p = detail::phi_cdf(a) - detail::phi_cdf(b);
                    if (p < 1e-9) continue;  // clamped region: zero gradient
                    const double pa = detail::phi_pdf(a), pb = detail::phi_pdf(b);
                    const double gv = double(go.data[i]);
                    if (wy) gy.data[i] = S((pa - pb) / sv * gv);
                    if (wm) gm.data[i] = S(-(pa - pb) / sv * gv);
                    if (ws) gs.data[i] = S((pb * b - pa * a) / sv * gv);
                  }
                  if (wy) g2.accum(y, std::move(gy));
                  if (wm) g2.accum(mu, std::move(gm));
                  if (ws) g2.accum(sigma, std::move(gs));
                });
  }

  // ---- backward ----

  void backward(Id loss) {
    require(!consumed_, "backward: tape already consumed");
    const Tensor<S>& lt = val(loss);
    require(lt.numel() == 1, "backward: loss must be scalar");
    consumed_ = true;
    accum(loss, Tensor<S>::scalar(S(1)));
    for (Id i = loss; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.numel() != 0 && n.back) n.back(*this, i);
    }
    for (auto& [p, id] : param_ids_) {
      Node& n = nodes_[id];
      if (n.grad.numel() == 0) continue;
      for (std::int64_t i = 0; i < n.grad.numel(); ++i)
        p->grad.data[i] += n.grad.data[i];
    }
  }

 private:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;  // empty until first accumulation
    bool track = false;
    std::function<void(Graph&, Id)> back;
    Parameter<S>* bound = nullptr;
  };

  const Tensor<S>& val(Id id) const { return nodes_.at(id).value; }
  bool tracked(Id id) const { return nodes_.at(id).track; }

  Id emit(const char* op, Tensor<S>&& value, bool track,
          std::function<void(Graph&, Id)> back) {
    if (!value.all_finite())
      throw Error(std::string(op) + ": non-finite values produced");
    Node n;
    n.value = std::move(value);
    n.track = track;
    if (track) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
  }

  void accum(Id id, Tensor<S>&& g) {
    Node& n = nodes_[id];
    if (!n.track) return;
    if (n.grad.numel() == 0) {
      n.grad = std::move(g);
      return;
    }
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) n.grad.data[i] += g.data[i];
  }

  void accum(Id id, const Tensor<S>& g) {
    Node& n = nodes_[id];
    if (!n.track) return;
    if (n.grad.numel() == 0) {
      n.grad = g;
      return;
    }
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) n.grad.data[i] += g.data[i];
  }

  static Tensor<S> shift_kernel(const Tensor<S>& x, const ShiftSpec& spec) {
    const std::int64_t B = x.b(), C = x.c(), H = x.h(), W = x.w();
    const std::int64_t cpg = C / spec.groups;
    Tensor<S> out(B, C, H, W);
    for (std::int64_t n = 0; n < B; ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        const auto [oy, ox] = spec.offsets[static_cast<std::size_t>(c / cpg)];
        const std::int64_t dy = std::int64_t(oy) * spec.step;
        const std::int64_t dx = std::int64_t(ox) * spec.step;
        const S* xp = x.ptr(n, c);
        S* op = out.ptr(n, c);
        for (std::int64_t i = 0; i < H; ++i) {
          const std::int64_t si = i + dy;
          if (si < 0 || si >= H) continue;
          const std::int64_t j0 = std::max<std::int64_t>(0, -dx);
          const std::int64_t j1 = std::min<std::int64_t>(W, W - dx);
          for (std::int64_t j = j0; j < j1; ++j) op[i * W + j] = xp[si * W + j + dx];
        }
      }
    return out;
  }

  static Tensor<S> shuffle_kernel(const Tensor<S>& x, int groups) {
    const std::int64_t C = x.c();
    const std::int64_t cpg = C / groups;
    Tensor<S> out(x.b(), C, x.h(), x.w());
    const std::int64_t HW = x.plane();
    for (std::int64_t n = 0; n < x.b(); ++n)
      for (std::int64_t src = 0; src < C; ++src) {
        const std::int64_t dst = (src % cpg) * groups + src / cpg;
        std::memcpy(out.ptr(n, dst), x.ptr(n, src), sizeof(S) * std::size_t(HW));
      }
    return out;
  }

  static Tensor<S> rearrange_kernel(const Tensor<S>& x, int r, Rearrange dir) {
    const std::int64_t B = x.b(), C = x.c(), H = x.h(), W = x.w();
    const std::int64_t r2 = std::int64_t(r) * r;
    if (dir == Rearrange::kSpaceToChannel) {
      require(H % r == 0 && W % r == 0, "pixel_rearrange: size not divisible");
      Tensor<S> out(B, C * r2, H / r, W / r);
      for (std::int64_t n = 0; n < B; ++n)
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t dy = 0; dy < r; ++dy)
            for (std::int64_t dx = 0; dx < r; ++dx) {
              const S* xp = x.ptr(n, c);
              S* op = out.ptr(n, c * r2 + dy * r + dx);
              for (std::int64_t i = 0; i < H / r; ++i)
                for (std::int64_t j = 0; j < W / r; ++j)
                  op[i * (W / r) + j] = xp[(i * r + dy) * W + j * r + dx];
            }
      return out;
    }
    require(C % r2 == 0, "pixel_rearrange: channels not divisible");
    Tensor<S> out(B, C / r2, H * r, W * r);
    for (std::int64_t n = 0; n < B; ++n)
      for (std::int64_t c = 0; c < C / r2; ++c)
        for (std::int64_t dy = 0; dy < r; ++dy)
          for (std::int64_t dx = 0; dx < r; ++dx) {
            const S* xp = x.ptr(n, c * r2 + dy * r + dx);
            S* op = out.ptr(n, c);
            for (std::int64_t i = 0; i < H; ++i)
              for (std::int64_t j = 0; j < W; ++j)
                op[(i * r + dy) * W * r + j * r + dx] = xp[i * W + j];
          }
    return out;
  }

  std::deque<Node> nodes_;  // reference-stable: value() refs survive later node creation
  std::unordered_map<Parameter<S>*, Id> param_ids_;
  bool consumed_ = false;
};

// Compares tape gradients of sum(fn(x)) against central finite differences.
// Returns the worst |analytic - numeric| / (|numeric| + 1e-8) over all
// coordinates of x.
template <typename S, typename Fn>
double finite_diff_check(Fn fn, const Tensor<S>& x, double h = 1e-4) {
  Tensor<S> analytic;
  {
    Graph<S> g;
    auto xv = g.variable(x);
    auto out = fn(g, xv);
    g.backward(g.reduce_sum(out));
    analytic = g.grad(xv);
  }
  auto eval = [&fn](const Tensor<S>& t) {
    Graph<S> g;
    auto xv = g.constant(t);
    auto out = fn(g, xv);
    return double(g.value(g.reduce_sum(out)).data[0]);
  };
  double worst = 0;
  Tensor<S> probe = x;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const S orig = probe.data[i];
    probe.data[i] = S(double(orig) + h);
    const double fp = eval(probe);
    probe.data[i] = S(double(orig) - h);
    const double fm = eval(probe);
    probe.data[i] = orig;
    const double numeric = (fp - fm) / (2 * h);
    const double rel =
        std::abs(double(analytic.data[i]) - numeric) / (std::abs(numeric) + 1e-8);
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace shiftlic
