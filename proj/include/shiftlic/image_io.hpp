#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>

#include "tensor.hpp"

namespace shiftlic {

namespace detail {

// Reads one whitespace-delimited header token, treating '#' comments as
// running to end of line.
inline std::string ppm_token(std::istream& is) {
  int ch;
  while ((ch = is.get()) != EOF) {
    if (ch == '#') {
      while ((ch = is.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (!std::isspace(ch)) break;
  }
  require(ch != EOF, "ppm: truncated header");
  std::string tok;
  while (ch != EOF && !std::isspace(ch) && ch != '#') {
    tok.push_back(char(ch));
    ch = is.get();
  }
  if (ch == '#') is.unget();
  return tok;
}

inline std::int64_t ppm_number(std::istream& is) {
  const std::string tok = ppm_token(is);
  for (char c : tok)
    require(std::isdigit(static_cast<unsigned char>(c)), "ppm: bad header number");
  require(tok.size() <= 9, "ppm: header number too large");
  return std::stoll(tok);
}

}  // namespace detail

// Binary 8-bit PPM (P6, maxval 255) to a (1, 3, H, W) tensor in [0, 1].
template <typename S>
Tensor<S> read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), "ppm: cannot open '" + path + "'");
  require(detail::ppm_token(is) == "P6", "ppm: not a P6 file");
  const std::int64_t w = detail::ppm_number(is);
  const std::int64_t h = detail::ppm_number(is);
  const std::int64_t maxval = detail::ppm_number(is);
  require(w > 0 && h > 0, "ppm: bad dimensions");
  require(maxval == 255, "ppm: only maxval 255 is supported");

  std::vector<unsigned char> raw(std::size_t(w) * std::size_t(h) * 3);
  is.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
  require(std::size_t(is.gcount()) == raw.size(), "ppm: truncated pixel data");

  Tensor<S> t(1, 3, h, w);
  for (std::int64_t i = 0; i < h; ++i)
    for (std::int64_t j = 0; j < w; ++j)
      for (std::int64_t c = 0; c < 3; ++c)
        t.at(0, c, i, j) = S(raw[std::size_t((i * w + j) * 3 + c)] / 255.0);
  return t;
}

template <typename S>
void write_ppm(const std::string& path, const Tensor<S>& t) {
  require(t.b() == 1 && t.c() == 3, "ppm: expected a (1,3,H,W) tensor");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(bool(os), "ppm: cannot open '" + path + "' for writing");
  os << "P6\n" << t.w() << " " << t.h() << "\n255\n";
  std::vector<unsigned char> raw(std::size_t(t.w()) * std::size_t(t.h()) * 3);
  for (std::int64_t i = 0; i < t.h(); ++i)
    for (std::int64_t j = 0; j < t.w(); ++j)
      for (std::int64_t c = 0; c < 3; ++c) {
        const double v = std::clamp(double(t.at(0, c, i, j)), 0.0, 1.0);
        raw[std::size_t((i * t.w() + j) * 3 + c)] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
  os.write(reinterpret_cast<const char*>(raw.data()), std::streamsize(raw.size()));
  require(bool(os), "ppm: write failed for '" + path + "'");
}

}  // namespace shiftlic
