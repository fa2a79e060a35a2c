#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "codec_net.hpp"
#include "metrics.hpp"

namespace shiftlic {

enum class Metric { kMse, kMsssim };

// Rate multipliers of the standard seven-point quality ladders.
inline const std::vector<double>& lambda_ladder(Metric metric) {
  static const std::vector<double> mse{0.0035, 0.005, 0.0067, 0.0130,
                                       0.0250, 0.050, 0.100};
  static const std::vector<double> msssim{5.0, 6.51, 8.73, 16.64,
                                          31.73, 60.50, 140.0};
  return metric == Metric::kMse ? mse : msssim;
}

inline double lambda_for_index(Metric metric, int index) {
  const auto& ladder = lambda_ladder(metric);
  require(index >= 0 && index < int(ladder.size()), "lambda: index out of range");
  return ladder[std::size_t(index)];
}

// Quantization surrogate inside a loss graph. Noise mode perturbs by
// uniform noise; round mode adds the rounding residual as a constant so
// gradients pass straight through.
template <typename S>
typename Graph<S>::Id quantize_node(Graph<S>& g, typename Graph<S>::Id v,
                                    QuantizeMode mode, Rng& rng,
                                    std::optional<typename Graph<S>::Id> mean = {}) {
  const Tensor<S>& vt = g.value(v);
  Tensor<S> delta(vt.b(), vt.c(), vt.h(), vt.w());
  if (mode == QuantizeMode::kNoise) {
    fill_uniform(delta, rng, -0.5, 0.5);
  } else {
    const Tensor<S>* off = nullptr;
    Tensor<S> mean_copy;
    if (mean) {
      mean_copy = g.value(*mean);
      off = &mean_copy;
    }
    const Tensor<S> rounded = quantize(vt, QuantizeMode::kRound, off);
    for (std::int64_t i = 0; i < vt.numel(); ++i)
      delta.data[i] = rounded.data[i] - vt.data[i];
  }
  return g.add(v, g.constant(std::move(delta)));
}

template <typename S>
struct RdNodes {
  typename Graph<S>::Id loss;
  typename Graph<S>::Id rate_bpp;
  typename Graph<S>::Id distortion;
  typename Graph<S>::Id reconstruction;
};

// Full rate-distortion objective: loss = bits-per-pixel + lambda * D, with
// D the 0..255-scale squared error or one minus the multi-scale similarity.
template <typename S>
RdNodes<S> rd_forward(Model<S>& model, Graph<S>& g, const Tensor<S>& image,
                      double lambda, Metric metric, QuantizeMode mode, Rng& rng) {
  using Id = typename Graph<S>::Id;
  const Id x = g.constant(image);
  const Id y = model.analysis(g, x);
  const Id z = model.hyper_analysis(g, y);
  const Id z_hat = quantize_node(g, z, mode, rng);
  const Id p_z = model.prior.likelihood(g, z_hat);
  auto [mu, sigma] = model.hyper_synthesis(g, z_hat);
  const Id y_hat = quantize_node(g, y, mode, rng, mu);
  const Id p_y = g.gaussian_mass(y_hat, mu, sigma);
  const Id x_hat = model.synthesis(g, y_hat);

  const double px = double(image.b()) * double(image.h()) * double(image.w());
  const Id nats = g.add(g.reduce_sum(g.log_op(p_y)), g.reduce_sum(g.log_op(p_z)));
  const Id rate = g.affine(nats, -1.0 / (std::log(2.0) * px), 0.0);
  const Id dist = metric == Metric::kMse
                      ? mse_node(g, x, x_hat)
                      : g.affine(msssim_node(g, x, x_hat), -1.0, 1.0);
  const Id loss = g.add(rate, g.affine(dist, lambda, 0.0));
  return {loss, rate, dist, x_hat};
}

// Scales every gradient so the joint norm is at most `max_norm`; returns
// the norm before clipping.
template <typename S>
double clip_global_norm(Model<S>& model, double max_norm) {
  double sq = 0;
  model.visit([&sq](Parameter<S>& p) {
    for (std::int64_t i = 0; i < p.grad.numel(); ++i)
      sq += double(p.grad.data[i]) * double(p.grad.data[i]);
  });
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const S scale = S(max_norm / norm);
    model.visit([scale](Parameter<S>& p) {
      for (std::int64_t i = 0; i < p.grad.numel(); ++i) p.grad.data[i] *= scale;
    });
  }
  return norm;
}

template <typename S>
void zero_grads(Model<S>& model) {
  model.visit([](Parameter<S>& p) { p.zero_grad(); });
}

// Adam with bias correction. Moment slots follow the model's fixed
// parameter visitation order.
template <typename S>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  void step(Model<S>& model) {
    if (slots_.empty()) {
      model.visit([this](Parameter<S>& p) {
        slots_.push_back({Tensor<S>(p.value.shape[0], p.value.shape[1],
                                    p.value.shape[2], p.value.shape[3]),
                          Tensor<S>(p.value.shape[0], p.value.shape[1],
                                    p.value.shape[2], p.value.shape[3])});
      });
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, double(t_));
    const double c2 = 1.0 - std::pow(beta2_, double(t_));
    std::size_t idx = 0;
    model.visit([this, c1, c2, &idx](Parameter<S>& p) {
      require(idx < slots_.size(), "adam: parameter set changed");
      Slot& s = slots_[idx++];
      for (std::int64_t i = 0; i < p.value.numel(); ++i) {
        const double g = double(p.grad.data[i]);
        const double m = beta1_ * double(s.m.data[i]) + (1.0 - beta1_) * g;
        const double v = beta2_ * double(s.v.data[i]) + (1.0 - beta2_) * g * g;
        s.m.data[i] = S(m);
        s.v.data[i] = S(v);
        p.value.data[i] -=
            S(lr_ * (m / c1) / (std::sqrt(v / c2) + eps_));
      }
    });
  }

 private:
  struct Slot {
    Tensor<S> m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  std::vector<Slot> slots_;
  std::int64_t t_ = 0;
};

// Procedural training patch: a smooth per-channel wave plus strong white
// noise, clamped to [0, 1]. The noise keeps the source entropy high.
template <typename S>
Tensor<S> make_texture(Rng& rng, std::int64_t h, std::int64_t w) {
  Tensor<S> t(1, 3, h, w);
  for (std::int64_t c = 0; c < 3; ++c) {
    const double fi = rng.uniform(0.01, 0.12);
    const double fj = rng.uniform(0.01, 0.12);
    const double phase = rng.uniform(0.0, 6.283185307179586);
    for (std::int64_t i = 0; i < h; ++i)
      for (std::int64_t j = 0; j < w; ++j) {
        const double wave =
            std::sin(6.283185307179586 * (fi * double(i) + fj * double(j)) + phase);
        const double noise = rng.uniform(-0.3, 0.3);
        t.at(0, c, i, j) = S(std::clamp(0.5 + 0.15 * wave + noise, 0.0, 1.0));
      }
  }
  return t;
}

struct TrainConfig {
  int steps = 500;
  double lr = 1e-4;
  int lr_drop1_step = -1;  // switch to lr/2; negative disables
  int lr_drop2_step = -1;  // switch to lr/10
  double lambda = 0.01;
  Metric metric = Metric::kMse;
  std::int64_t patch = 64;
  std::uint64_t seed = 0;
  bool overfit = false;  // reuse the first patch for every step
  int log_every = 25;
  std::string csv_path;
  std::string checkpoint_path;
};

struct TrainResult {
  double first_loss = 0;
  double final_loss = 0;
  double final_rate_bpp = 0;
  double final_distortion = 0;
  int steps_run = 0;
  bool aborted = false;
  std::string abort_reason;
};

namespace detail {

template <typename S>
std::string first_non_finite(Model<S>& model) {
  std::string name;
  model.visit([&name](Parameter<S>& p) {
    if (!name.empty()) return;
    if (!p.value.all_finite()) {
      name = p.name + " (value)";
      return;
    }
    if (!p.grad.all_finite()) name = p.name + " (gradient)";
  });
  return name;
}

}  // namespace detail

// Optimizes the model on procedural patches, or on `fixed_patch` when one
// is supplied (the overfit flag does the same with a single generated
// patch). Progress rows go to the CSV path when set; a non-finite loss or
// parameter aborts the run, restores the last finite weights, and reports
// the offending parameter.
template <typename S>
TrainResult train_loop(Model<S>& model, const TrainConfig& tc,
                       std::ostream* log = nullptr,
                       const Tensor<S>* fixed_patch = nullptr) {
  require(tc.steps > 0, "train: step count must be positive");
  Rng data_rng(tc.seed);
  Rng noise_rng(tc.seed ^ 0x9E3779B97F4A7C15ull);
  Adam<S> opt(tc.lr);

  std::ofstream csv;
  if (!tc.csv_path.empty()) {
    csv.open(tc.csv_path, std::ios::trunc);
    require(bool(csv), "train: cannot open csv '" + tc.csv_path + "'");
    csv << "step,loss,rate_bpp,distortion,lr\n";
  }

  std::vector<Tensor<S>> snapshot;
  auto take_snapshot = [&model, &snapshot]() {
    snapshot.clear();
    model.visit([&snapshot](Parameter<S>& p) { snapshot.push_back(p.value); });
  };
  auto restore_snapshot = [&model, &snapshot]() {
    std::size_t i = 0;
    model.visit([&snapshot, &i](Parameter<S>& p) { p.value = snapshot[i++]; });
  };

  Tensor<S> pinned;
  if (fixed_patch) {
    pinned = *fixed_patch;
  } else if (tc.overfit) {
    pinned = make_texture<S>(data_rng, tc.patch, tc.patch);
  }

  TrainResult res;
  for (int step = 0; step < tc.steps; ++step) {
    if (step == tc.lr_drop1_step) opt.set_lr(tc.lr * 0.5);
    if (step == tc.lr_drop2_step) opt.set_lr(tc.lr * 0.1);

    const Tensor<S> patch = pinned.numel() > 0
                                ? pinned
                                : make_texture<S>(data_rng, tc.patch, tc.patch);
    take_snapshot();
    double loss = 0, rate = 0, dist = 0;
    try {
      Graph<S> g;
      const RdNodes<S> nodes = rd_forward(model, g, patch, tc.lambda, tc.metric,
                                          QuantizeMode::kNoise, noise_rng);
      loss = double(g.value(nodes.loss).data[0]);
      rate = double(g.value(nodes.rate_bpp).data[0]);
      dist = double(g.value(nodes.distortion).data[0]);
      zero_grads(model);
      g.backward(nodes.loss);
      clip_global_norm(model, 1.0);
      opt.step(model);
      const std::string bad = detail::first_non_finite(model);
      if (!bad.empty()) throw Error("train: non-finite parameter " + bad);
    } catch (const Error& e) {
      restore_snapshot();
      res.aborted = true;
      res.abort_reason = e.what();
      const std::string bad = detail::first_non_finite(model);
      if (!bad.empty()) res.abort_reason += "; first bad parameter: " + bad;
      if (!tc.checkpoint_path.empty()) save_checkpoint(model, tc.checkpoint_path);
      if (log) *log << "aborted at step " << step << ": " << res.abort_reason << "\n";
      return res;
    }

    if (step == 0) res.first_loss = loss;
    res.final_loss = loss;
    res.final_rate_bpp = rate;
    res.final_distortion = dist;
    res.steps_run = step + 1;

    if (csv.is_open())
      csv << step << ',' << loss << ',' << rate << ',' << dist << ','
          << opt.lr() << '\n';
    if (log && (step % tc.log_every == 0 || step + 1 == tc.steps))
      *log << "step " << step << "  loss " << loss << "  rate " << rate
           << "  dist " << dist << "\n";
  }

  if (!tc.checkpoint_path.empty()) save_checkpoint(model, tc.checkpoint_path);
  return res;
}

}  // namespace shiftlic
