#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "graph.hpp"
#include "tensor.hpp"

namespace shiftlic {

template <typename S>
using ParamVisitor = std::function<void(Parameter<S>&)>;

inline bool is_bias_name(const std::string& name) {
  static const std::string kSuffix = ".bias";
  return name.size() >= kSuffix.size() &&
         name.compare(name.size() - kSuffix.size(), kSuffix.size(), kSuffix) == 0;
}

namespace detail {

// Fan-in scaled uniform init, matching the usual convolution default.
template <typename S>
inline void init_conv(Tensor<S>& w, Tensor<S>& b, std::int64_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(double(fan_in));
  fill_uniform(w, rng, -bound, bound);
  fill_uniform(b, rng, -bound, bound);
}

}  // namespace detail

template <typename S>
struct Conv1x1Layer {
  Parameter<S> w, b;
  int groups = 1;
  std::int64_t cin = 0, cout = 0;

  Conv1x1Layer() = default;
  Conv1x1Layer(const std::string& name, std::int64_t in, std::int64_t out, Rng& rng,
               int groups_in = 1)
      : groups(groups_in), cin(in), cout(out) {
    require(in % groups == 0 && out % groups == 0,
            "conv layer: channels not divisible by groups");
    w = Parameter<S>(name + ".weight", Tensor<S>(out, in / groups, 1, 1));
    b = Parameter<S>(name + ".bias", Tensor<S>(1, out, 1, 1));
    detail::init_conv(w.value, b.value, in / groups, rng);
  }

  typename Graph<S>::Id forward(Graph<S>& g, typename Graph<S>::Id x) {
    return g.conv1x1(x, g.param(w), g.param(b), groups);
  }

  void visit(const ParamVisitor<S>& fn) {
    fn(w);
    fn(b);
  }

  std::uint64_t weight_count() const { return std::uint64_t(w.numel()); }
};

template <typename S>
struct DwConvLayer {
  Parameter<S> w, b;
  std::int64_t channels = 0;

  DwConvLayer() = default;
  DwConvLayer(const std::string& name, std::int64_t ch, int kh, int kw, Rng& rng)
      : channels(ch) {
    w = Parameter<S>(name + ".weight", Tensor<S>(ch, 1, kh, kw));
    b = Parameter<S>(name + ".bias", Tensor<S>(1, ch, 1, 1));
    detail::init_conv(w.value, b.value, std::int64_t(kh) * kw, rng);
  }

  typename Graph<S>::Id forward(Graph<S>& g, typename Graph<S>::Id x) {
    return g.depthwise_conv(x, g.param(w), g.param(b));
  }

  void visit(const ParamVisitor<S>& fn) {
    fn(w);
    fn(b);
  }

  std::uint64_t weight_count() const { return std::uint64_t(w.numel()); }
};

}  // namespace shiftlic
