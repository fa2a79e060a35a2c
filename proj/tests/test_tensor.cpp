#include <catch2/catch_amalgamated.hpp>

#include "shiftlic/rational.hpp"
#include "shiftlic/tensor.hpp"

using namespace shiftlic;

TEST_CASE("tensor layout and accessors") {
  Tensor<float> t(2, 3, 4, 5);
  REQUIRE(t.numel() == 120);
  REQUIRE(t.plane() == 20);
  t.at(1, 2, 3, 4) = 7.0f;
  REQUIRE(t.data[119] == 7.0f);
  t.at(0, 0, 0, 0) = -1.0f;
  REQUIRE(t.data[0] == -1.0f);

  // ptr(n, c) addresses the start of one channel plane
  REQUIRE(t.ptr(1, 2) == t.data.data() + (1 * 3 + 2) * 20);

  Tensor<float> u(2, 3, 4, 5);
  REQUIRE(t.same_shape(u));
  Tensor<float> v(1, 3, 4, 5);
  REQUIRE_FALSE(t.same_shape(v));
}

TEST_CASE("tensor helpers") {
  auto s = Tensor<double>::scalar(2.5);
  REQUIRE(s.numel() == 1);
  REQUIRE(s.data[0] == 2.5);

  auto m = Tensor<int>::from(1, 1, 2, 2, {1, 2, 3, 4});
  REQUIRE(m.at(0, 0, 1, 0) == 3);
  REQUIRE_THROWS_AS(Tensor<int>::from(1, 1, 2, 2, {1, 2, 3}), Error);

  auto d = m.cast<double>();
  REQUIRE(d.at(0, 0, 1, 1) == 4.0);

  Tensor<double> f(1, 1, 1, 3);
  f.fill(0.5);
  REQUIRE(f.data == std::vector<double>{0.5, 0.5, 0.5});

  REQUIRE(f.all_finite());
  f.data[1] = std::nan("");
  REQUIRE_FALSE(f.all_finite());
}

TEST_CASE("empty tensor is default state") {
  Tensor<float> t;
  REQUIRE(t.numel() == 0);
  REQUIRE(t.all_finite());
}

TEST_CASE("rng is deterministic and honors bounds") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next() == b.next());

  Rng r(7);
  double lo = 1, hi = 0;
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    lo = std::min(lo, u);
    hi = std::max(hi, u);
  }
  REQUIRE(lo < 0.05);
  REQUIRE(hi > 0.95);

  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform(-2.0, 3.0);
    REQUIRE(u >= -2.0);
    REQUIRE(u < 3.0);
  }
  for (int i = 0; i < 1000; ++i) REQUIRE(r.index(5) < 5);
}

TEST_CASE("fill_uniform covers the requested interval") {
  Tensor<double> t(1, 2, 8, 8);
  Rng r(3);
  fill_uniform(t, r, -0.5, 0.5);
  double lo = 1, hi = -1;
  for (double v : t.data) {
    REQUIRE(v >= -0.5);
    REQUIRE(v < 0.5);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  REQUIRE(lo < -0.4);
  REQUIRE(hi > 0.4);
}

TEST_CASE("rational arithmetic reduces and compares") {
  Rational a(1, 2), b(1, 3);
  REQUIRE(a + b == Rational(5, 6));
  REQUIRE(a - b == Rational(1, 6));
  REQUIRE(a * b == Rational(1, 6));
  REQUIRE(a / b == Rational(3, 2));
  REQUIRE(Rational(4, 8) == Rational(1, 2));
  REQUIRE(Rational(-4, 8) == Rational(1, -2));
  REQUIRE(Rational(6, 3).is_integer());
  REQUIRE_FALSE(a.is_integer());
  REQUIRE(Rational(3, 4).to_double() == 0.75);
  REQUIRE(Rational(125, 16).to_double() == 7.8125);
  REQUIRE(Rational(0, 5) == Rational(0));
  REQUIRE_THROWS_AS(Rational(1, 0), Error);
}

TEST_CASE("op counter tallies reset") {
  op_counter().reset();
  op_counter().macs += 10;
  op_counter().adds += 3;
  REQUIRE(op_counter().macs == 10);
  op_counter().reset();
  REQUIRE(op_counter().macs == 0);
  REQUIRE(op_counter().adds == 0);
}
