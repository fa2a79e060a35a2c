#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "tensor.hpp"

namespace shiftlic {

// Byte-oriented renormalizing range coder. 64-bit low with carry counting on
// the encode side, 32-bit code register on the decode side. Frequencies are
// integer counts against an arbitrary total <= 2^16; renormalization keeps
// the range above 2^24 so the total always divides without underflow.
inline constexpr std::uint32_t kRangeTop = 1u << 24;

class RangeEncoder {
 public:
  void encode(std::uint32_t cum, std::uint32_t freq, std::uint32_t tot) {
    require(freq > 0 && cum + freq <= tot, "range encoder: bad interval");
    require(tot >= 2 && tot <= (1u << 16), "range encoder: bad total");
    range_ /= tot;
    low_ += std::uint64_t(cum) * range_;
    range_ *= freq;
    while (range_ < kRangeTop) {
      range_ <<= 8;
      shift_low();
    }
  }

  // Terminates the stream; the encoder cannot be reused afterwards.
  std::vector<std::uint8_t> finish() {
    for (int i = 0; i < 5; ++i) shift_low();
    return std::move(out_);
  }

 private:
  void shift_low() {
    if (low_ < 0xFF000000ull || low_ > 0xFFFFFFFFull) {
      const std::uint8_t carry = std::uint8_t(low_ >> 32);
      std::uint8_t byte = cache_;
      do {
        put(std::uint8_t(byte + carry));
        byte = 0xFF;
      } while (--pending_ != 0);
      cache_ = std::uint8_t(low_ >> 24);
    }
    ++pending_;
    low_ = (low_ << 8) & 0xFFFFFFFFull;
  }

  // The first byte the coder produces is always zero (the initial cache is
  // flushed before any carry can reach it), so it is dropped from the output
  // and the decoder starts with a 4-byte preload instead of 5.
  void put(std::uint8_t b) {
    if (lead_) {
      require(b == 0, "range encoder: corrupt leading byte");
      lead_ = false;
      return;
    }
    out_.push_back(b);
  }

  std::vector<std::uint8_t> out_;
  std::uint64_t low_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint8_t cache_ = 0;
  std::uint64_t pending_ = 1;
  bool lead_ = true;
};

class RangeDecoder {
 public:
  RangeDecoder(const std::uint8_t* data, std::size_t size)
      : ptr_(data), end_(data + size) {
    for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | take();
  }

  // Scaled cumulative value of the next symbol; the caller locates the slot
  // whose [cum, cum + freq) interval contains it, then calls consume.
  std::uint32_t peek(std::uint32_t tot) {
    require(tot >= 2 && tot <= (1u << 16), "range decoder: bad total");
    range_ /= tot;
    return std::min(code_ / range_, tot - 1);
  }

  void consume(std::uint32_t cum, std::uint32_t freq) {
    code_ -= cum * range_;
    range_ *= freq;
    while (range_ < kRangeTop) {
      code_ = (code_ << 8) | take();
      range_ <<= 8;
    }
  }

  std::size_t consumed() const { return used_; }

 private:
  std::uint8_t take() {
    require(ptr_ < end_, "range decoder: payload truncated");
    ++used_;
    return *ptr_++;
  }

  const std::uint8_t* ptr_;
  const std::uint8_t* end_;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint32_t code_ = 0;
  std::size_t used_ = 0;
};

}  // namespace shiftlic
