// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "fedpisa/lora.hpp"
#include "fedpisa/rng.hpp"

using namespace fedpisa;

TEST_CASE("new_adapter draws A and zeroes B") {
  Rng rng(7);
  const LoraAdapter ad = new_adapter(2, 3, 1, 2.0, rng);
  REQUIRE(ad.a.rows() == 1);
  REQUIRE(ad.a.cols() == 3);
  REQUIRE(ad.b.rows() == 2);
  REQUIRE(ad.b.cols() == 1);
  REQUIRE(ad.b.isZero(0.0));
  REQUIRE(merge_delta(ad).isZero(0.0));

  Rng rng_again(7);
  const LoraAdapter twin = new_adapter(2, 3, 1, 2.0, rng_again);
  REQUIRE(ad.a == twin.a);

  Rng other(8);
  const LoraAdapter differs = new_adapter(2, 3, 1, 2.0, other);
  REQUIRE(ad.a != differs.a);
}

TEST_CASE("new_adapter rejects bad dimensions") {
  Rng rng(1);
  REQUIRE_THROWS_AS(new_adapter(0, 3, 1, 2.0, rng), ConfigError);
  REQUIRE_THROWS_AS(new_adapter(2, 0, 1, 2.0, rng), ConfigError);
  REQUIRE_THROWS_AS(new_adapter(2, 3, 0, 2.0, rng), ConfigError);
  REQUIRE_THROWS_AS(new_adapter(2, 3, 1, 0.0, rng), ConfigError);
}

TEST_CASE("merge_delta matches the hand product") {
  LoraAdapter ad;
  ad.rank = 1;
  ad.alpha = 2.0;
  ad.a = Matrix(1, 2);
  ad.a << 1.0, 2.0;
  ad.b = Matrix(2, 1);
  ad.b << 3.0, 4.0;
  Matrix expected(2, 2);
  expected << 6.0, 12.0, 8.0, 16.0;
  REQUIRE(merge_delta(ad) == expected);
}

TEST_CASE("merge_delta is linear in A") {
  Rng rng(3);
  LoraAdapter ad = new_adapter(4, 5, 2, 8.0, rng);
  for (long i = 0; i < ad.b.rows(); ++i) {
    for (long j = 0; j < ad.b.cols(); ++j) ad.b(i, j) = rng.gaussian();
  }
  LoraAdapter a1 = ad, a2 = ad;
  for (long i = 0; i < a2.a.rows(); ++i) {
    for (long j = 0; j < a2.a.cols(); ++j) a2.a(i, j) = rng.gaussian();
  }
  LoraAdapter sum = ad;
  sum.a = a1.a + a2.a;
  const Matrix lhs = merge_delta(sum);
  const Matrix rhs = merge_delta(a1) + merge_delta(a2);
  REQUIRE((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("merge_delta is invariant under compensating rescaling") {
  Rng rng(11);
  LoraAdapter ad = new_adapter(3, 4, 2, 16.0, rng);
  for (long i = 0; i < ad.b.rows(); ++i) {
    for (long j = 0; j < ad.b.cols(); ++j) ad.b(i, j) = rng.gaussian();
  }
  const Matrix base = merge_delta(ad);
  for (const double c : {2.0, -0.5, 10.0}) {
    LoraAdapter scaled = ad;
    scaled.a *= c;
    scaled.b /= c;
    REQUIRE((merge_delta(scaled) - base).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("flatten walks rows first") {
  Matrix m(2, 2);
  m << 1.0, 2.0, 3.0, 4.0;
  const Vector v = flatten(m);
  REQUIRE(v.size() == 4);
  REQUIRE(v(0) == 1.0);
  REQUIRE(v(1) == 2.0);
  REQUIRE(v(2) == 3.0);
  REQUIRE(v(3) == 4.0);

  Matrix single(1, 1);
  single << 5.0;
  REQUIRE(flatten(single)(0) == 5.0);
  REQUIRE(flatten(Matrix::Zero(3, 2)).isZero(0.0));
}

TEST_CASE("unflatten inverts flatten exactly") {
  Rng rng(5);
  Matrix m(3, 4);
  for (long i = 0; i < m.rows(); ++i) {
    for (long j = 0; j < m.cols(); ++j) m(i, j) = rng.gaussian();
  }
  REQUIRE(unflatten(flatten(m), 3, 4) == m);
  REQUIRE_THROWS_AS(unflatten(flatten(m), 2, 4), ShapeError);
}

TEST_CASE("cosine_similarity on hand vectors") {
  Vector u(2), v(2);
  u << 1.0, 0.0;
  v << 0.0, 1.0;
  REQUIRE(cosine_similarity(u, v) == 0.0);

  Vector w(2);
  w << 3.0, 4.0;
  REQUIRE(cosine_similarity(w, w) == Catch::Approx(1.0).margin(1e-15));

  Vector p(2), q(2);
  p << 1.0, 1.0;
  q << 1.0, 0.0;
  REQUIRE(cosine_similarity(p, q) ==
          Catch::Approx(0.7071067811865475).margin(1e-15));
}

TEST_CASE("cosine_similarity guards and errors") {
  Vector u(2), zero(2), longer(3);
  u << 1.0, 2.0;
  zero.setZero();
  longer.setZero();
  REQUIRE(cosine_similarity(u, zero) == 0.0);
  REQUIRE(cosine_similarity(zero, zero) == 0.0);
  REQUIRE_THROWS_AS(cosine_similarity(u, longer), ShapeError);
}

TEST_CASE("cosine_similarity scale behavior and bounds") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    Vector u(6), v(6);
    for (int i = 0; i < 6; ++i) {
      u(i) = rng.gaussian();
      v(i) = rng.gaussian();
    }
    const double s = cosine_similarity(u, v);
    REQUIRE(s == Catch::Approx(cosine_similarity(v, u)).margin(1e-15));
    REQUIRE(s >= -1.0 - 1e-12);
    REQUIRE(s <= 1.0 + 1e-12);
    REQUIRE(cosine_similarity(u, Vector(2.5 * u)) ==
            Catch::Approx(1.0).margin(1e-12));
    REQUIRE(cosine_similarity(u, Vector(-0.5 * u)) ==
            Catch::Approx(-1.0).margin(1e-12));
  }
}

TEST_CASE("adapter wire round-trip is bit exact") {
  Rng rng(23);
  LoraAdapter ad = new_adapter(4, 6, 2, 16.0, rng);
  for (long i = 0; i < ad.b.rows(); ++i) {
    for (long j = 0; j < ad.b.cols(); ++j) ad.b(i, j) = rng.gaussian();
  }
  std::vector<std::uint8_t> buf;
  append_adapter(buf, ad, AdapterRole::Style);
  std::size_t off = 0;
  AdapterRole role;
  const LoraAdapter back = read_adapter(buf, off, role);
  REQUIRE(off == buf.size());
  REQUIRE(role == AdapterRole::Style);
  REQUIRE(back.rank == ad.rank);
  REQUIRE(back.alpha == ad.alpha);
  REQUIRE(back.a == ad.a);
  REQUIRE(back.b == ad.b);
}

TEST_CASE("adapter wire layout is little endian with B before A") {
  LoraAdapter ad;
  ad.rank = 1;
  ad.alpha = 2.0;
  ad.a = Matrix(1, 2);
  ad.a << 1.0, 2.0;
  ad.b = Matrix(2, 1);
  ad.b << 3.0, 4.0;
  std::vector<std::uint8_t> buf;
  append_adapter(buf, ad, AdapterRole::Identity);
  // role u8, rank u32, d_out u32, d_in u32, alpha f64, B (2 f64), A (2 f64)
  REQUIRE(buf.size() == 1 + 4 + 4 + 4 + 8 + 16 + 16);
  REQUIRE(buf[0] == 0);
  REQUIRE(buf[1] == 1);  // rank low byte
  REQUIRE(buf[2] == 0);
  REQUIRE(buf[5] == 2);  // d_out low byte
  REQUIRE(buf[9] == 2);  // d_in low byte
  std::size_t off = 13;
  REQUIRE(wire::get_f64(buf, off) == 2.0);   // alpha
  REQUIRE(wire::get_f64(buf, off) == 3.0);   // B row 0
  REQUIRE(wire::get_f64(buf, off) == 4.0);   // B row 1
  REQUIRE(wire::get_f64(buf, off) == 1.0);   // A entry 0
  REQUIRE(wire::get_f64(buf, off) == 2.0);   // A entry 1
}

TEST_CASE("adapter wire rejects truncation and junk roles") {
  Rng rng(29);
  const LoraAdapter ad = new_adapter(2, 2, 1, 2.0, rng);
  std::vector<std::uint8_t> buf;
  append_adapter(buf, ad, AdapterRole::Style);

  std::vector<std::uint8_t> truncated(buf.begin(), buf.end() - 3);
  std::size_t off = 0;
  AdapterRole role;
  REQUIRE_THROWS_AS(read_adapter(truncated, off, role), ProtocolError);

  std::vector<std::uint8_t> junk = buf;
  junk[0] = 9;
  off = 0;
  REQUIRE_THROWS_AS(read_adapter(junk, off, role), ProtocolError);
}

TEST_CASE("adapter_param_count counts both factors") {
  Rng rng(31);
  const LoraAdapter ad = new_adapter(8, 8, 4, 16.0, rng);
  REQUIRE(adapter_param_count(ad) == 4 * 8 + 8 * 4);
}

TEST_CASE("hash_adapter separates different adapters") {
  Rng rng(37);
  const LoraAdapter a = new_adapter(3, 3, 2, 4.0, rng);
  const LoraAdapter b = new_adapter(3, 3, 2, 4.0, rng);
  REQUIRE(hash_adapter(a) == hash_adapter(a));
  REQUIRE(hash_adapter(a) != hash_adapter(b));
}
