#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace shiftlic {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

// Tallies of arithmetic performed by the forward kernels. `macs` counts only
// weight-times-activation multiplies of linear layers; everything else goes
// to the informational buckets.
struct OpCounter {
  std::uint64_t macs = 0;
  std::uint64_t other_muls = 0;
  std::uint64_t adds = 0;
  std::uint64_t divs = 0;
  void reset() { *this = OpCounter{}; }
};

inline OpCounter& op_counter() {
  thread_local OpCounter counter;
  return counter;
}

// Dense rank-4 tensor in batch-channel-height-width order, row-major.
template <typename S>
struct Tensor {
  std::array<std::int64_t, 4> shape{0, 0, 0, 0};
  std::vector<S> data;

  Tensor() = default;
  Tensor(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w)
      : shape{b, c, h, w} {
    require(b >= 0 && c >= 0 && h >= 0 && w >= 0, "tensor: negative dimension");
    data.assign(static_cast<std::size_t>(b * c * h * w), S(0));
  }

  std::int64_t b() const { return shape[0]; }
  std::int64_t c() const { return shape[1]; }
  std::int64_t h() const { return shape[2]; }
  std::int64_t w() const { return shape[3]; }
  std::int64_t numel() const { return shape[0] * shape[1] * shape[2] * shape[3]; }
  std::int64_t plane() const { return shape[2] * shape[3]; }

  S* ptr(std::int64_t n, std::int64_t c) {
    return data.data() + (n * shape[1] + c) * plane();
  }
  const S* ptr(std::int64_t n, std::int64_t c) const {
    return data.data() + (n * shape[1] + c) * plane();
  }

  S& at(std::int64_t n, std::int64_t c, std::int64_t i, std::int64_t j) {
    return data[((n * shape[1] + c) * shape[2] + i) * shape[3] + j];
  }
  S at(std::int64_t n, std::int64_t c, std::int64_t i, std::int64_t j) const {
    return data[((n * shape[1] + c) * shape[2] + i) * shape[3] + j];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  void fill(S v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (S v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  static Tensor scalar(S v) {
    Tensor t(1, 1, 1, 1);
    t.data[0] = v;
    return t;
  }

  static Tensor from(std::int64_t b, std::int64_t c, std::int64_t h,
                     std::int64_t w, std::initializer_list<S> vals) {
    Tensor t(b, c, h, w);
    require(static_cast<std::int64_t>(vals.size()) == t.numel(),
            "tensor: initializer size mismatch");
    std::copy(vals.begin(), vals.end(), t.data.begin());
    return t;
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> t(shape[0], shape[1], shape[2], shape[3]);
    for (std::size_t i = 0; i < data.size(); ++i)
      t.data[i] = static_cast<T>(data[i]);
    return t;
  }
};

// Deterministic RNG with explicit value transforms so sampled streams depend
// only on the engine, not on library distribution internals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  double uniform() {  // [0, 1)
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::int64_t index(std::int64_t n) {  // [0, n)
    return static_cast<std::int64_t>(engine_() % static_cast<std::uint64_t>(n));
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

template <typename S>
inline void fill_uniform(Tensor<S>& t, Rng& rng, double lo, double hi) {
  for (auto& v : t.data) v = static_cast<S>(rng.uniform(lo, hi));
}

}  // namespace shiftlic
