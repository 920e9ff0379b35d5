// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <vector>

#include "fedpisa/error.hpp"
#include "fedpisa/matrix.hpp"
#include "fedpisa/rng.hpp"

namespace fedpisa {

enum class AdapterRole : std::uint8_t { Identity = 0, Style = 1 };

/// Low-rank factor pair. The effective weight delta is
/// (alpha / rank) * b * a, with a: rank x d_in and b: d_out x rank.
struct LoraAdapter {
  Matrix a;
  Matrix b;
  int rank = 0;
  double alpha = 0.0;

  int d_in() const { return static_cast<int>(a.cols()); }
  int d_out() const { return static_cast<int>(b.rows()); }
  double scale() const { return alpha / rank; }
};

/// a ~ N(0, 1/d_in); b = 0, so the initial delta is exactly zero.
inline LoraAdapter new_adapter(int d_out, int d_in, int rank, double alpha,
                               Rng& rng) {
  if (d_out < 1 || d_in < 1 || rank < 1) {
    throw ConfigError("adapter dimensions and rank must be >= 1");
  }
  if (!(alpha > 0.0)) {
    throw ConfigError("adapter alpha must be positive");
  }
  LoraAdapter ad;
  ad.rank = rank;
  ad.alpha = alpha;
  ad.a = Matrix(rank, d_in);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(d_in));
  for (int r = 0; r < rank; ++r) {
    for (int c = 0; c < d_in; ++c) {
      ad.a(r, c) = stddev * rng.gaussian();
    }
  }
  ad.b = Matrix::Zero(d_out, rank);
  return ad;
}

inline Matrix merge_delta(const LoraAdapter& ad) {
  return ad.scale() * ad.b * ad.a;
}

/// Row-major concatenation of the entries.
inline Vector flatten(const Matrix& m) {
  Vector v(m.size());
  std::memcpy(v.data(), m.data(),
              static_cast<std::size_t>(m.size()) * sizeof(double));
  return v;
}

inline Matrix unflatten(const Vector& v, int rows, int cols) {
  if (v.size() != static_cast<long>(rows) * cols) {
    throw ShapeError("unflatten: length does not match rows*cols");
  }
  Matrix m(rows, cols);
  std::memcpy(m.data(), v.data(),
              static_cast<std::size_t>(v.size()) * sizeof(double));
  return m;
}

/// dot(u,v) / (|u||v|); 0.0 when either norm is below 1e-12 so an untrained
/// (all-zero) factor cannot inject NaN into a downstream softmax.
inline double cosine_similarity(const Vector& u, const Vector& v) {
  if (u.size() != v.size()) {
    throw ShapeError("cosine_similarity: length mismatch");
  }
  const double nu = u.norm();
  const double nv = v.norm();
  if (nu < 1e-12 || nv < 1e-12) return 0.0;
  return u.dot(v) / (nu * nv);
}

// --- wire format -----------------------------------------------------------
//
// Adapter block, little-endian:
//   role: u8, rank: u32, d_out: u32, d_in: u32, alpha: f64,
//   then row-major f64 entries of b, then of a.

namespace wire {

inline void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) {
  out.push_back(v);
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f64(std::vector<std::uint8_t>& out, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, sizeof(v));
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint8_t get_u8(std::span<const std::uint8_t> buf, std::size_t& off) {
  if (off + 1 > buf.size()) throw ProtocolError("wire: truncated message");
  return buf[off++];
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> buf,
                             std::size_t& off) {
  if (off + 4 > buf.size()) throw ProtocolError("wire: truncated message");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[off++]) << (8 * i);
  return v;
}

inline double get_f64(std::span<const std::uint8_t> buf, std::size_t& off) {
  if (off + 8 > buf.size()) throw ProtocolError("wire: truncated message");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[off++]) << (8 * i);
  double d;
  std::memcpy(&d, &v, sizeof(d));
  return d;
}

inline void put_matrix(std::vector<std::uint8_t>& out, const Matrix& m) {
  for (long i = 0; i < m.size(); ++i) put_f64(out, m.data()[i]);
}

inline Matrix get_matrix(std::span<const std::uint8_t> buf, std::size_t& off,
                         int rows, int cols) {
  Matrix m(rows, cols);
  for (long i = 0; i < m.size(); ++i) m.data()[i] = get_f64(buf, off);
  return m;
}

}  // namespace wire

inline void append_adapter(std::vector<std::uint8_t>& out,
                           const LoraAdapter& ad, AdapterRole role) {
  wire::put_u8(out, static_cast<std::uint8_t>(role));
  wire::put_u32(out, static_cast<std::uint32_t>(ad.rank));
  wire::put_u32(out, static_cast<std::uint32_t>(ad.d_out()));
  wire::put_u32(out, static_cast<std::uint32_t>(ad.d_in()));
  wire::put_f64(out, ad.alpha);
  wire::put_matrix(out, ad.b);
  wire::put_matrix(out, ad.a);
}

inline LoraAdapter read_adapter(std::span<const std::uint8_t> buf,
                                std::size_t& off, AdapterRole& role_out) {
  const std::uint8_t role = wire::get_u8(buf, off);
  if (role > 1) throw ProtocolError("wire: unknown adapter role byte");
  role_out = static_cast<AdapterRole>(role);
  LoraAdapter ad;
  ad.rank = static_cast<int>(wire::get_u32(buf, off));
  const int d_out = static_cast<int>(wire::get_u32(buf, off));
  const int d_in = static_cast<int>(wire::get_u32(buf, off));
  ad.alpha = wire::get_f64(buf, off);
  if (ad.rank < 1 || d_out < 1 || d_in < 1 || !(ad.alpha > 0.0)) {
    throw ProtocolError("wire: invalid adapter header");
  }
  ad.b = wire::get_matrix(buf, off, d_out, ad.rank);
  ad.a = wire::get_matrix(buf, off, ad.rank, d_in);
  return ad;
}

inline std::int64_t adapter_param_count(const LoraAdapter& ad) {
  return ad.a.size() + ad.b.size();
}

inline std::uint64_t hash_adapter(const LoraAdapter& ad,
                                  std::uint64_t h = kFnvOffset) {
  h = fnv1a64(&ad.rank, sizeof(ad.rank), h);
  h = fnv1a64(&ad.alpha, sizeof(ad.alpha), h);
  h = hash_matrix(ad.a, h);
  return hash_matrix(ad.b, h);
}

}  // namespace fedpisa
