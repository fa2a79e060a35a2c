#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "codec.hpp"
#include "image_io.hpp"
#include "metrics.hpp"
#include "rational.hpp"
#include "ssb.hpp"

namespace shiftlic {

// Closed-form weight and multiply counts for the block families compared in
// the complexity study. Counts cover weights only; multiplies are forward
// convolution multiplies at the given resolution.
enum class BlockKind { kResidual, kShift, kAttention, kNonlocal, kRecursiveAttention };

struct BlockCost {
  Rational params;
  Rational flops;
};

inline BlockCost closed_form_cost(BlockKind kind, std::int64_t m, std::int64_t n,
                                  std::int64_t h, std::int64_t w) {
  require(m >= 0 && n >= 0 && h >= 0 && w >= 0, "closed_form: negative argument");
  const Rational hw(h * w);
  switch (kind) {
    case BlockKind::kResidual: {
      const Rational p(9 * m * m + 18 * m * n);
      return {p, p * hw};
    }
    case BlockKind::kShift: {
      const Rational p(ssb_param_count(m, n));
      return {p, p * hw};
    }
    case BlockKind::kAttention: {
      const Rational p = Rational(41 * n * n, 2);
      return {p, (p + Rational(n)) * hw};
    }
    case BlockKind::kNonlocal: {
      const Rational p = Rational(45 * n * n, 2);
      return {p, (p + Rational(n) + hw * Rational(n)) * hw};
    }
    case BlockKind::kRecursiveAttention:
      return {cra_param_count(n), cra_flops(n, h, w)};
  }
  throw Error("closed_form: unknown block kind");
}

inline BlockKind block_kind_from_name(const std::string& name) {
  if (name == "residual") return BlockKind::kResidual;
  if (name == "ssb") return BlockKind::kShift;
  if (name == "attention") return BlockKind::kAttention;
  if (name == "nonlocal") return BlockKind::kNonlocal;
  if (name == "cra") return BlockKind::kRecursiveAttention;
  throw Error("closed_form: unknown block kind '" + name + "'");
}

struct LayerRow {
  std::string name;
  std::uint64_t weights = 0;       // multiplicative parameters as built
  std::uint64_t biases = 0;
  std::uint64_t macs = 0;          // forward multiplies at the report size
  bool has_closed_form = false;    // shift and attention rows carry formulas
  Rational closed_weights;
  Rational closed_macs;
};

struct ComplexityReport {
  std::int64_t image_h = 0, image_w = 0;
  std::vector<LayerRow> rows;
  std::uint64_t total_weights = 0;  // column sums over the rows
  std::uint64_t total_biases = 0;
  std::uint64_t total_params = 0;  // weights plus biases, whole model
  std::uint64_t total_macs = 0;    // one pass of all four transforms
  Rational total_closed_weights{0};
  Rational total_closed_macs{0};
  double kmacs_per_pixel = 0;
};

namespace detail {

template <typename S>
std::uint64_t layer_bias_count(Conv1x1Layer<S>& l) {
  return std::uint64_t(l.b.numel());
}

template <typename S>
LayerRow conv_row(const std::string& name, Conv1x1Layer<S>& l, std::int64_t h,
                  std::int64_t w) {
  LayerRow r;
  r.name = name;
  r.weights = l.weight_count();
  r.biases = layer_bias_count(l);
  r.macs = l.weight_count() * std::uint64_t(h) * std::uint64_t(w);
  r.has_closed_form = true;
  r.closed_weights = Rational(std::int64_t(r.weights));
  r.closed_macs = Rational(std::int64_t(r.macs));
  return r;
}

template <typename S>
LayerRow ssb_row(const std::string& name, Ssb<S>& b, std::int64_t h,
                 std::int64_t w) {
  LayerRow r;
  r.name = name;
  r.weights = b.weight_count();
  r.biases = std::uint64_t(b.conv1.b.numel());
  if (b.conv2) r.biases += std::uint64_t(b.conv2->b.numel());
  if (b.shortcut) r.biases += std::uint64_t(b.shortcut->b.numel());
  r.macs = b.weight_count() * std::uint64_t(h) * std::uint64_t(w);
  r.has_closed_form = true;
  r.closed_weights = Rational(ssb_param_count(b.cin, b.cout));
  r.closed_macs = ssb_flops(b.cin, b.cout, h, w);
  return r;
}

template <typename S>
LayerRow cra_row(const std::string& name, Cra<S>& c, std::int64_t h,
                 std::int64_t w) {
  LayerRow r;
  r.name = name;
  r.weights = c.weight_count();
  r.biases = std::uint64_t(c.entry.b.numel());
  for (auto& p : c.pyramid) r.biases += std::uint64_t(p.b.numel());
  for (auto& f : c.fuse) r.biases += std::uint64_t(f.b.numel());
  if (c.local) {
    r.biases += std::uint64_t(c.local->conv1.b.numel());
    if (c.local->conv2) r.biases += std::uint64_t(c.local->conv2->b.numel());
  }
  r.macs = c.counted_macs(h, w);
  r.has_closed_form = true;
  r.closed_weights = cra_param_count(c.width);
  r.closed_macs = cra_flops(c.width, h, w);
  return r;
}

}  // namespace detail

// Analytic parameter and multiply budget of a model at the given input
// size. Multiplies follow the convolution kernels exactly, so a counted
// forward pass of the four transforms reproduces total_macs.
template <typename S>
ComplexityReport count_model(Model<S>& model, std::int64_t h, std::int64_t w) {
  require(h % model.cfg.pad_multiple() == 0 && w % model.cfg.pad_multiple() == 0,
          "count_model: size not padded to the transform multiple");
  ComplexityReport rep;
  rep.image_h = h;
  rep.image_w = w;

  auto add = [&rep](LayerRow r) {
    rep.total_weights += r.weights;
    rep.total_biases += r.biases;
    rep.total_macs += r.macs;
    if (r.has_closed_form) {
      rep.total_closed_weights = rep.total_closed_weights + r.closed_weights;
      rep.total_closed_macs = rep.total_closed_macs + r.closed_macs;
    }
    rep.rows.push_back(std::move(r));
  };

  std::int64_t rh = h, rw = w;
  for (std::size_t k = 0; k < model.a_stages.size(); ++k) {
    auto& st = model.a_stages[k];
    rh /= 2;
    rw /= 2;
    const std::string base = "ga.s" + std::to_string(k);
    add(detail::conv_row(base + ".project", st.project, rh, rw));
    for (std::size_t j = 0; j < st.blocks.size(); ++j)
      add(detail::ssb_row(base + ".ssb" + std::to_string(j), st.blocks[j], rh, rw));
    if (st.cra) add(detail::cra_row(base + ".cra", *st.cra, rh, rw));
  }
  add(detail::conv_row("ga.out", model.a_out, rh, rw));

  add(detail::conv_row("gs.in", model.s_in, rh, rw));
  for (std::size_t idx = 0; idx < model.s_stages.size(); ++idx) {
    auto& st = model.s_stages[idx];
    const int k = int(model.s_stages.size()) - 1 - int(idx);
    const std::string base = "gs.s" + std::to_string(k);
    if (st.cra) add(detail::cra_row(base + ".cra", *st.cra, rh, rw));
    for (std::size_t j = 0; j < st.blocks.size(); ++j)
      add(detail::ssb_row(base + ".ssb" + std::to_string(j), st.blocks[j], rh, rw));
    add(detail::conv_row(base + ".project", st.project, rh, rw));
    rh *= 2;
    rw *= 2;
  }

  std::int64_t yh = h / 16, yw = w / 16;
  for (std::size_t k = 0; k < model.ha_stages.size(); ++k) {
    auto& st = model.ha_stages[k];
    yh /= 2;
    yw /= 2;
    const std::string base = "ha.s" + std::to_string(k);
    add(detail::conv_row(base + ".project", st.project, yh, yw));
    for (std::size_t j = 0; j < st.blocks.size(); ++j)
      add(detail::ssb_row(base + ".ssb" + std::to_string(j), st.blocks[j], yh, yw));
  }
  for (std::size_t k = 0; k < model.hs_stages.size(); ++k) {
    auto& st = model.hs_stages[k];
    const std::string base = "hs.s" + std::to_string(k);
    for (std::size_t j = 0; j < st.blocks.size(); ++j)
      add(detail::ssb_row(base + ".ssb" + std::to_string(j), st.blocks[j], yh, yw));
    add(detail::conv_row(base + ".project", st.project, yh, yw));
    yh *= 2;
    yw *= 2;
  }
  add(detail::conv_row("hs.out", model.hs_out, yh, yw));

  LayerRow prior_row;
  prior_row.name = "prior";
  prior_row.weights = model.prior.weight_count();
  for (const auto& p : model.prior.biases) prior_row.biases += std::uint64_t(p.numel());
  prior_row.has_closed_form = true;
  prior_row.closed_weights = Rational(std::int64_t(prior_row.weights));
  add(std::move(prior_row));

  rep.total_params = model.parameter_total();
  rep.kmacs_per_pixel = double(rep.total_macs) / (double(h) * double(w) * 1000.0);
  return rep;
}

// Runs the four transforms once with the multiply counter reset, so tests
// can check the analytic budget against the instrumented kernels.
template <typename S>
std::uint64_t measured_transform_macs(Model<S>& model, std::int64_t h,
                                      std::int64_t w) {
  Graph<S> g;
  Tensor<S> img(1, 3, h, w);
  Rng rng(7);
  fill_uniform(img, rng, 0.0, 1.0);
  op_counter().reset();
  const auto y = model.analysis(g, g.constant(std::move(img)));
  const auto z = model.hyper_analysis(g, y);
  auto [mu, sigma] = model.hyper_synthesis(g, z);
  (void)mu;
  (void)sigma;
  (void)model.synthesis(g, y);
  return op_counter().macs;
}

struct RdPoint {
  double bpp = 0;
  double quality_db = 0;
};

// A rate-quality sweep. Points must be ordered by rate with quality rising
// alongside, at least four of them.
struct RdCurve {
  std::vector<RdPoint> points;

  void validate() const {
    require(points.size() >= 4, "rd curve: need at least four points");
    for (std::size_t i = 1; i < points.size(); ++i) {
      require(points[i].bpp > points[i - 1].bpp, "rd curve: rates must increase");
      require(points[i].quality_db > points[i - 1].quality_db,
              "rd curve: quality must increase with rate");
    }
    for (const auto& p : points) require(p.bpp > 0, "rd curve: rates must be positive");
  }
};

namespace detail {

// Monotone cubic interpolant (Fritsch-Carlson slopes).
struct Pchip {
  std::vector<double> x, y, d;

  static Pchip fit(std::vector<double> xs, std::vector<double> ys) {
    const std::size_t n = xs.size();
    require(n >= 2 && ys.size() == n, "pchip: need matching knots");
    for (std::size_t i = 1; i < n; ++i)
      require(xs[i] > xs[i - 1], "pchip: knots must increase");
    std::vector<double> h(n - 1), delta(n - 1), d(n);
    for (std::size_t i = 0; i + 1 < n; ++i) {
      h[i] = xs[i + 1] - xs[i];
      delta[i] = (ys[i + 1] - ys[i]) / h[i];
    }
    if (n == 2) {
      d[0] = d[1] = delta[0];
    } else {
      for (std::size_t i = 1; i + 1 < n; ++i) {
        if (delta[i - 1] * delta[i] <= 0) {
          d[i] = 0;
        } else {
          const double w1 = 2 * h[i] + h[i - 1];
          const double w2 = h[i] + 2 * h[i - 1];
          d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
        }
      }
      d[0] = edge_slope(h[0], h[1], delta[0], delta[1]);
      d[n - 1] = edge_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    }
    return Pchip{std::move(xs), std::move(ys), std::move(d)};
  }

  double eval(double t) const {
    const std::size_t n = x.size();
    std::size_t i =
        std::size_t(std::upper_bound(x.begin(), x.end(), t) - x.begin());
    if (i == 0) i = 1;
    if (i >= n) i = n - 1;
    const std::size_t k = i - 1;
    const double h = x[k + 1] - x[k];
    const double s = (t - x[k]) / h;
    const double s2 = s * s, s3 = s2 * s;
    const double h00 = 2 * s3 - 3 * s2 + 1;
    const double h10 = s3 - 2 * s2 + s;
    const double h01 = -2 * s3 + 3 * s2;
    const double h11 = s3 - s2;
    return h00 * y[k] + h * h10 * d[k] + h01 * y[k + 1] + h * h11 * d[k + 1];
  }

 private:
  static double edge_slope(double h0, double h1, double d0, double d1) {
    double s = ((2 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if (s * d0 <= 0)
      s = 0;
    else if (d0 * d1 < 0 && std::abs(s) > 3 * std::abs(d0))
      s = 3 * d0;
    return s;
  }
};

}  // namespace detail

// Average rate difference of `test` against `ref` over their shared quality
// range, in percent. Negative values mean the test curve spends fewer bits
// for equal quality.
inline double bd_rate_percent(const RdCurve& ref, const RdCurve& test) {
  ref.validate();
  test.validate();
  auto knots = [](const RdCurve& c) {
    std::vector<double> q, lr;
    for (const auto& p : c.points) {
      q.push_back(p.quality_db);
      lr.push_back(std::log(p.bpp));
    }
    return detail::Pchip::fit(std::move(q), std::move(lr));
  };
  const detail::Pchip a = knots(ref);
  const detail::Pchip b = knots(test);
  const double lo = std::max(a.x.front(), b.x.front());
  const double hi = std::min(a.x.back(), b.x.back());
  require(hi - lo >= 1.0, "bd rate: quality overlap below one decibel");

  constexpr int kSamples = 1000;
  double acc = 0;
  double prev = b.eval(lo) - a.eval(lo);
  for (int i = 1; i <= kSamples; ++i) {
    const double t = lo + (hi - lo) * double(i) / kSamples;
    const double cur = b.eval(t) - a.eval(t);
    acc += 0.5 * (prev + cur);
    prev = cur;
  }
  const double mean_dlog = acc / kSamples;
  return 100.0 * (std::exp(mean_dlog) - 1.0);
}

// BD-rate gain normalized by decoder-side complexity, percent per MAC per
// pixel.
inline double bd_rate_per_mac(double bd_percent, double kmacs_per_pixel) {
  require(kmacs_per_pixel > 0, "bd per mac: complexity must be positive");
  return bd_percent / (kmacs_per_pixel * 1000.0);
}

struct EvalRow {
  std::string image;
  double bpp = 0;
  double psnr = 0;
  double msssim = 0;
  double msssim_decibel = 0;
};

// Compresses and reconstructs every .ppm image in a folder. Unreadable
// files produce a warning and are skipped; an empty folder is an error.
template <typename S>
std::vector<EvalRow> eval_folder(Model<S>& model, const std::string& dir,
                                 std::ostream* csv, std::ostream* warnings) {
  namespace fs = std::filesystem;
  require(fs::is_directory(dir), "eval: '" + dir + "' is not a directory");
  std::vector<std::string> paths;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ppm")
      paths.push_back(e.path().string());
  std::sort(paths.begin(), paths.end());
  require(!paths.empty(), "eval: no .ppm images in '" + dir + "'");

  Codec<S> codec(model);
  std::vector<EvalRow> rows;
  if (csv) *csv << "image,bpp,psnr_db,msssim,msssim_db\n";
  for (const auto& p : paths) {
    Tensor<S> img;
    try {
      img = read_ppm<S>(p);
    } catch (const Error& e) {
      if (warnings) *warnings << "warning: skipping '" << p << "': " << e.what() << "\n";
      continue;
    }
    const EncodeResult<S> enc = codec.encode(img);
    const DecodeResult<S> dec = codec.decode(enc.container);
    EvalRow r;
    r.image = fs::path(p).filename().string();
    r.bpp = enc.measured_bpp;
    r.psnr = psnr_db(mse_255(img, dec.image));
    if (std::min(img.h(), img.w()) >= 176) {
      r.msssim = msssim_value(img, dec.image);
      r.msssim_decibel = msssim_db(r.msssim);
    } else {
      if (warnings)
        *warnings << "warning: '" << p
                  << "' smaller than 176 px, similarity column left as nan\n";
      r.msssim = std::nan("");
      r.msssim_decibel = std::nan("");
    }
    if (csv)
      *csv << r.image << ',' << r.bpp << ',' << r.psnr << ',' << r.msssim << ','
           << r.msssim_decibel << "\n";
    rows.push_back(std::move(r));
  }
  require(!rows.empty(), "eval: no readable images in '" + dir + "'");
  return rows;
}

// Folder averages, one rate-quality point. Similarity averages skip images
// that were too small for the multi-scale window.
struct EvalSummary {
  std::size_t images = 0;
  double mean_bpp = 0;
  double mean_psnr = 0;
  double mean_msssim = 0;
  double mean_msssim_db = 0;
};

inline EvalSummary summarize(const std::vector<EvalRow>& rows) {
  require(!rows.empty(), "eval: nothing to summarize");
  EvalSummary s;
  s.images = rows.size();
  std::size_t sim_rows = 0;
  for (const auto& r : rows) {
    s.mean_bpp += r.bpp;
    s.mean_psnr += r.psnr;
    if (!std::isnan(r.msssim)) {
      s.mean_msssim += r.msssim;
      s.mean_msssim_db += r.msssim_decibel;
      ++sim_rows;
    }
  }
  s.mean_bpp /= double(s.images);
  s.mean_psnr /= double(s.images);
  if (sim_rows > 0) {
    s.mean_msssim /= double(sim_rows);
    s.mean_msssim_db /= double(sim_rows);
  } else {
    s.mean_msssim = std::nan("");
    s.mean_msssim_db = std::nan("");
  }
  return s;
}

}  // namespace shiftlic
