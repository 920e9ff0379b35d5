// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>

namespace fedpisa {

// Row-major throughout so that flatten() and the wire format are plain
// memcpy views of the storage.
using Matrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

/// Hash of dimensions plus raw entry bytes; used for byte-identity checks.
inline std::uint64_t hash_matrix(const Matrix& m,
                                 std::uint64_t h = kFnvOffset) {
  const std::int64_t dims[2] = {m.rows(), m.cols()};
  h = fnv1a64(dims, sizeof(dims), h);
  return fnv1a64(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double),
                 h);
}

}  // namespace fedpisa
