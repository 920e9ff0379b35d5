// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "fedpisa/error.hpp"

namespace fedpisa {

enum class Direction : std::uint8_t { Upload = 0, Download = 1 };

struct CostEntry {
  int round = 0;
  int client_id = -1;
  Direction direction = Direction::Upload;
  std::int64_t param_count = 0;
};

/// Append-only record of adapter parameters crossing the network, one entry
/// per transfer. Bytes are derived at query time so the same ledger can be
/// priced under different wire precisions.
class CostLedger {
 public:
  void record_transfer(int round, int client_id, Direction direction,
                       std::int64_t param_count) {
    if (param_count <= 0) {
      throw ProtocolError("cost ledger: param_count must be positive");
    }
    entries_.push_back({round, client_id, direction, param_count});
  }

  std::int64_t total_params() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) n += e.param_count;
    return n;
  }

  std::int64_t total_params(Direction direction) const {
    std::int64_t n = 0;
    for (const auto& e : entries_) {
      if (e.direction == direction) n += e.param_count;
    }
    return n;
  }

  std::int64_t total_bytes(int bytes_per_param) const {
    check_bytes_per_param(bytes_per_param);
    return total_params() * bytes_per_param;
  }

  std::int64_t total_bytes(Direction direction, int bytes_per_param) const {
    check_bytes_per_param(bytes_per_param);
    return total_params(direction) * bytes_per_param;
  }

  double total_cost_gib(int bytes_per_param) const {
    return static_cast<double>(total_bytes(bytes_per_param)) / kGiB;
  }

  double total_cost_gib(Direction direction, int bytes_per_param) const {
    return static_cast<double>(total_bytes(direction, bytes_per_param)) / kGiB;
  }

  const std::vector<CostEntry>& entries() const { return entries_; }

 private:
  static void check_bytes_per_param(int bytes_per_param) {
    if (bytes_per_param < 1) {
      throw ConfigError("cost ledger: bytes_per_param must be >= 1");
    }
  }

  static constexpr double kGiB = 1024.0 * 1024.0 * 1024.0;

  std::vector<CostEntry> entries_;
};

enum class CostDirections { Both, UploadOnly };

/// Pricing convention applied when a ledger is summarized. Entries are always
/// recorded for both directions; upload-only pricing just filters the sum.
struct CostConfig {
  int bytes_per_param = 2;
  CostDirections directions = CostDirections::Both;

  double ledger_gib(const CostLedger& ledger) const {
    return directions == CostDirections::UploadOnly
               ? ledger.total_cost_gib(Direction::Upload, bytes_per_param)
               : ledger.total_cost_gib(bytes_per_param);
  }
};

}  // namespace fedpisa
