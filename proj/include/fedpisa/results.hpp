// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

#include <json.hpp>

#include "fedpisa/config.hpp"
#include "fedpisa/runner.hpp"

namespace fedpisa {

inline std::string hex_u64(std::uint64_t v) {
  std::ostringstream out;
  out << "0x" << std::hex << std::setfill('0') << std::setw(16) << v;
  return out.str();
}

namespace detail {

inline nlohmann::ordered_json attention_to_json(
    const std::vector<AttentionMatrix>& mats) {
  nlohmann::ordered_json sites = nlohmann::ordered_json::array();
  for (const auto& att : mats) {
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (long i = 0; i < att.weights.rows(); ++i) {
      nlohmann::ordered_json row = nlohmann::ordered_json::array();
      for (long j = 0; j < att.weights.cols(); ++j) {
        row.push_back(att.weights(i, j));
      }
      rows.push_back(std::move(row));
    }
    sites.push_back(std::move(rows));
  }
  return sites;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

}  // namespace detail

inline nlohmann::ordered_json round_to_json(const RoundRecord& rec,
                                            const ResultsBundle& bundle) {
  nlohmann::ordered_json j;
  j["round"] = rec.round;
  if (rec.round == 0) j["world_hash"] = hex_u64(bundle.world_hash);
  j["participants"] = rec.participants;
  nlohmann::ordered_json metrics = nlohmann::ordered_json::array();
  for (const auto& [client, m] : rec.metrics) {
    nlohmann::ordered_json row;
    row["client"] = client;
    row["cluster"] = bundle.world.assignment[static_cast<std::size_t>(client)];
    row["neutral_test_mse"] = m.neutral_test_mse;
    row["expressive_test_mse"] = m.expressive_test_mse;
    row["identity_error"] = m.identity_error;
    row["style_error"] = m.style_error;
    metrics.push_back(std::move(row));
  }
  j["metrics"] = std::move(metrics);
  if (!rec.alpha.empty()) {
    j["alpha"] = detail::attention_to_json(rec.alpha);
    j["beta"] = detail::attention_to_json(rec.beta);
    j["within_cluster_alpha_mass"] = rec.within_cluster_alpha_mass;
  }
  if (rec.round > 0) {
    nlohmann::ordered_json phases = nlohmann::ordered_json::array();
    for (std::size_t k = 0; k < rec.participants.size(); ++k) {
      nlohmann::ordered_json ph;
      ph["client"] = rec.participants[k];
      const auto& tr = rec.timbre_reports[k];
      const auto& sr = rec.style_reports[k];
      ph["timbre_steps"] = tr.steps_run;
      ph["style_frozen_in_timbre"] =
          tr.style_hash_before == tr.style_hash_after;
      ph["style_steps"] = sr.steps_run;
      ph["id_frozen_in_style"] = sr.id_hash_before == sr.id_hash_after;
      phases.push_back(std::move(ph));
    }
    j["phases"] = std::move(phases);
    j["cumulative_cost_gib"] = rec.cumulative_cost_gib;
  }
  return j;
}

inline void write_rounds_jsonl(const std::filesystem::path& path,
                               const ResultsBundle& bundle) {
  auto out = detail::open_out(path);
  for (const auto& rec : bundle.rounds) {
    out << round_to_json(rec, bundle).dump() << "\n";
  }
}

inline void write_summary_csv(const std::filesystem::path& path,
                              const ResultsBundle& bundle) {
  auto out = detail::open_out(path);
  out << "strategy,client,round,cluster,participated,neutral_test_mse,"
         "expressive_test_mse,identity_error,style_error\n";
  const std::string label = strategy_label(bundle.config.federation.strategy);
  for (const auto& rec : bundle.rounds) {
    for (const auto& [client, m] : rec.metrics) {
      const bool participated =
          std::find(rec.participants.begin(), rec.participants.end(),
                    client) != rec.participants.end();
      out << label << ',' << client << ',' << rec.round << ','
          << bundle.world.assignment[static_cast<std::size_t>(client)] << ','
          << (participated ? 1 : 0) << ','
          << detail::fmt_double(m.neutral_test_mse) << ','
          << detail::fmt_double(m.expressive_test_mse) << ','
          << detail::fmt_double(m.identity_error) << ','
          << detail::fmt_double(m.style_error) << "\n";
    }
  }
}

inline void write_ledger_csv(const std::filesystem::path& path,
                             const ResultsBundle& bundle) {
  auto out = detail::open_out(path);
  out << "round,client,direction,param_count,bytes\n";
  const int bpp = bundle.config.cost.bytes_per_param;
  for (const auto& e : bundle.ledger.entries()) {
    out << e.round << ',' << e.client_id << ','
        << (e.direction == Direction::Upload ? "upload" : "download") << ','
        << e.param_count << ',' << e.param_count * bpp << "\n";
  }
}

inline void write_config_snapshot(const std::filesystem::path& path,
                                  const ResultsBundle& bundle) {
  auto out = detail::open_out(path);
  out << "# world_hash = " << hex_u64(bundle.world_hash) << "\n";
  out << emit_resolved(bundle.config);
}

/// The four per-run artifacts. The directory must already exist.
inline void write_bundle(const std::filesystem::path& dir,
                         const ResultsBundle& bundle) {
  write_rounds_jsonl(dir / "rounds.jsonl", bundle);
  write_summary_csv(dir / "summary.csv", bundle);
  write_ledger_csv(dir / "ledger.csv", bundle);
  write_config_snapshot(dir / "config.toml", bundle);
}

/// Mean over all clients of one final-round metric.
inline double final_mean(const ResultsBundle& bundle,
                         double MetricsRecord::*field) {
  const auto& rec = bundle.rounds.back();
  double acc = 0.0;
  for (const auto& [client, m] : rec.metrics) acc += m.*field;
  return acc / static_cast<double>(rec.metrics.size());
}

/// Mean within-cluster attention mass over every round that ran attention.
inline double mean_within_cluster_mass(const ResultsBundle& bundle) {
  double acc = 0.0;
  long n = 0;
  for (const auto& rec : bundle.rounds) {
    if (!rec.alpha.empty()) {
      acc += rec.within_cluster_alpha_mass;
      n += 1;
    }
  }
  return n == 0 ? 0.0 : acc / static_cast<double>(n);
}

}  // namespace fedpisa
