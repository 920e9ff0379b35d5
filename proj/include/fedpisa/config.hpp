// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "fedpisa/accounting.hpp"
#include "fedpisa/aggregation.hpp"
#include "fedpisa/client.hpp"
#include "fedpisa/error.hpp"
#include "fedpisa/rng.hpp"
#include "fedpisa/synth_data.hpp"

namespace fedpisa {

/// Flat view of a scalar-only TOML subset: `[section]` headers, `key = value`
/// lines, `#` comments. Values are integers, floats, booleans, or quoted
/// strings; arrays and nested tables are not part of the experiment schema.
/// Every diagnostic carries `file:line`. Keys are consumed as they are read
/// so leftovers can be rejected as unknown.
class FlatToml {
 public:
  static FlatToml parse_text(const std::string& text, const std::string& name) {
    FlatToml toml;
    toml.name_ = name;
    std::string section;
    int line_no = 0;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      line_no += 1;
      std::string_view s = trim(line);
      if (s.empty() || s.front() == '#') continue;
      if (s.front() == '[') {
        const auto hash = s.find('#');
        if (hash != std::string_view::npos) s = trim(s.substr(0, hash));
        if (s.back() != ']') toml.fail(line_no, "unterminated section header");
        const std::string_view name_sv = trim(s.substr(1, s.size() - 2));
        if (name_sv.empty() || !is_bare_key(name_sv)) {
          toml.fail(line_no, "invalid section name");
        }
        section = std::string(name_sv);
        continue;
      }
      const auto eq = s.find('=');
      if (eq == std::string_view::npos) {
        toml.fail(line_no, "expected 'key = value'");
      }
      const std::string_view key_sv = trim(s.substr(0, eq));
      if (key_sv.empty() || !is_bare_key(key_sv)) {
        toml.fail(line_no, "invalid key");
      }
      Entry entry;
      entry.line = line_no;
      std::string_view value_sv = trim(s.substr(eq + 1));
      if (value_sv.empty()) toml.fail(line_no, "missing value");
      if (value_sv.front() == '"') {
        std::string decoded;
        std::size_t i = 1;
        bool closed = false;
        for (; i < value_sv.size(); ++i) {
          const char c = value_sv[i];
          if (c == '\\') {
            if (i + 1 >= value_sv.size()) break;
            const char esc = value_sv[++i];
            if (esc == '"' || esc == '\\') {
              decoded.push_back(esc);
            } else {
              toml.fail(line_no, "unsupported escape in string");
            }
          } else if (c == '"') {
            closed = true;
            ++i;
            break;
          } else {
            decoded.push_back(c);
          }
        }
        if (!closed) toml.fail(line_no, "unterminated string");
        const std::string_view rest = trim(value_sv.substr(i));
        if (!rest.empty() && rest.front() != '#') {
          toml.fail(line_no, "trailing characters after string");
        }
        entry.raw = decoded;
        entry.quoted = true;
      } else {
        const auto hash = value_sv.find('#');
        if (hash != std::string_view::npos) value_sv = value_sv.substr(0, hash);
        value_sv = trim(value_sv);
        if (value_sv.empty()) toml.fail(line_no, "missing value");
        entry.raw = std::string(value_sv);
        entry.quoted = false;
      }
      const std::string full_key =
          section.empty() ? std::string(key_sv)
                          : section + "." + std::string(key_sv);
      if (toml.entries_.count(full_key) != 0) {
        toml.fail(line_no, "duplicate key '" + full_key + "'");
      }
      toml.entries_.emplace(full_key, std::move(entry));
    }
    return toml;
  }

  static FlatToml parse_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_text(buf.str(), path);
  }

  /// `key=value` from the command line; value is taken verbatim (no quoting
  /// needed) and may satisfy string-typed keys directly.
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("override must look like key=value: '" + assignment +
                        "'");
    }
    const std::string key = assignment.substr(0, eq);
    Entry entry;
    entry.raw = assignment.substr(eq + 1);
    entry.line = 0;
    entry.quoted = false;
    entry.from_override = true;
    entries_[key] = std::move(entry);  // overrides replace file values
  }

  bool contains(const std::string& key) const {
    return entries_.count(key) != 0;
  }

  std::int64_t take_int(const std::string& key, std::int64_t fallback) {
    const Entry* e = take(key);
    if (e == nullptr) return fallback;
    std::int64_t value = 0;
    if (!full_parse(e->raw, value)) {
      fail_entry(*e, key, "expected an integer, got '" + e->raw + "'");
    }
    return value;
  }

  std::uint64_t take_u64(const std::string& key, std::uint64_t fallback) {
    const Entry* e = take(key);
    if (e == nullptr) return fallback;
    std::uint64_t value = 0;
    if (!full_parse(e->raw, value)) {
      fail_entry(*e, key,
                 "expected a nonnegative integer, got '" + e->raw + "'");
    }
    return value;
  }

  double take_double(const std::string& key, double fallback) {
    const Entry* e = take(key);
    if (e == nullptr) return fallback;
    double value = 0.0;
    if (!full_parse(e->raw, value)) {
      fail_entry(*e, key, "expected a number, got '" + e->raw + "'");
    }
    return value;
  }

  std::string take_string(const std::string& key, const std::string& fallback) {
    const Entry* e = take(key);
    if (e == nullptr) return fallback;
    if (!e->quoted && !e->from_override) {
      fail_entry(*e, key, "expected a quoted string");
    }
    return e->raw;
  }

  /// Rejects everything that was never consumed; this is the unknown-key
  /// gate that catches typos in section or key names.
  void finish() const {
    for (const auto& [key, entry] : entries_) {
      if (!entry.consumed) {
        fail_entry(entry, key, "unknown key '" + key + "'");
      }
    }
  }

 private:
  struct Entry {
    std::string raw;
    int line = 0;
    bool quoted = false;
    bool consumed = false;
    bool from_override = false;
  };

  static std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' ||
                          s.front() == '\r')) {
      s.remove_prefix(1);
    }
    while (!s.empty() &&
           (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
      s.remove_suffix(1);
    }
    return s;
  }

  static bool is_bare_key(std::string_view s) {
    for (const char c : s) {
      const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                      (c >= '0' && c <= '9') || c == '_' || c == '-';
      if (!ok) return false;
    }
    return true;
  }

  template <typename T>
  static bool full_parse(const std::string& raw, T& value) {
    const char* first = raw.data();
    const char* last = raw.data() + raw.size();
    const auto res = std::from_chars(first, last, value);
    return res.ec == std::errc() && res.ptr == last;
  }

  Entry* take(const std::string& key) {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return nullptr;
    it->second.consumed = true;
    return &it->second;
  }

  [[noreturn]] void fail(int line, const std::string& message) const {
    throw ConfigError(name_ + ":" + std::to_string(line) + ": " + message);
  }

  [[noreturn]] void fail_entry(const Entry& entry, const std::string& key,
                               const std::string& message) const {
    if (entry.from_override) {
      throw ConfigError("override '" + key + "': " + message);
    }
    fail(entry.line, key + ": " + message);
  }

  std::map<std::string, Entry> entries_;
  std::string name_ = "<config>";
};

struct ExperimentConfig {
  std::uint64_t seed = 42;
  std::string output_dir;  // empty means: resolve from flags / environment
  WorldSpec world;
  AdapterConfig adapter;
  TrainSchedule schedule;
  FederationConfig federation;
  CostConfig cost;

  void validate() const {
    world.validate();
    adapter.validate();
    schedule.validate();
    federation.validate();
    if (cost.bytes_per_param < 1) {
      throw ConfigError("cost: bytes_per_param must be >= 1");
    }
  }
};

namespace detail {

template <typename Enum>
struct TokenPair {
  std::string_view token;
  Enum value;
};

template <typename Enum, std::size_t N>
Enum token_to_enum(const std::string& raw, const TokenPair<Enum> (&table)[N],
                   const std::string& what) {
  for (const auto& p : table) {
    if (raw == p.token) return p.value;
  }
  std::string options;
  for (const auto& p : table) {
    if (!options.empty()) options += ", ";
    options += p.token;
  }
  throw ConfigError(what + ": unknown value '" + raw + "' (expected one of: " +
                    options + ")");
}

template <typename Enum, std::size_t N>
std::string_view enum_to_token(Enum value, const TokenPair<Enum> (&table)[N]) {
  for (const auto& p : table) {
    if (value == p.value) return p.token;
  }
  return "?";
}

inline constexpr TokenPair<IdTraining> kIdTrainingTokens[] = {
    {"first_participation", IdTraining::FirstParticipation},
    {"every_round", IdTraining::EveryRound},
};
inline constexpr TokenPair<ScheduleScope> kScopeTokens[] = {
    {"phase", ScheduleScope::Phase},
    {"global", ScheduleScope::Global},
};
inline constexpr TokenPair<Strategy> kStrategyTokens[] = {
    {"fed_pisa", Strategy::FedPisa},
    {"fedavg", Strategy::FedAvg},
    {"local_only", Strategy::LocalOnly},
    {"no_id_lora", Strategy::NoIdLora},
    {"no_style_lora", Strategy::NoStyleLora},
};
inline constexpr TokenPair<SimilaritySource> kSimilarityTokens[] = {
    {"absolute", SimilaritySource::Absolute},
    {"delta", SimilaritySource::Delta},
};
inline constexpr TokenPair<FedAvgWeighting> kWeightingTokens[] = {
    {"uniform", FedAvgWeighting::Uniform},
    {"data_size", FedAvgWeighting::DataSize},
};
inline constexpr TokenPair<CostDirections> kDirectionsTokens[] = {
    {"both", CostDirections::Both},
    {"upload_only", CostDirections::UploadOnly},
};

}  // namespace detail

/// Display label used in summary rows and reports.
inline std::string strategy_label(Strategy s) {
  switch (s) {
    case Strategy::FedPisa: return "FedPisa";
    case Strategy::FedAvg: return "FedAvg";
    case Strategy::LocalOnly: return "LocalOnly";
    case Strategy::NoIdLora: return "NoIdLora";
    case Strategy::NoStyleLora: return "NoStyleLora";
  }
  return "?";
}

/// Builds the config from a parsed file plus overrides. Fields not present
/// fall back to the desk-scale defaults; the world seed, when omitted, is
/// derived from the master seed so one `seed` key steers the whole run.
inline ExperimentConfig config_from_toml(FlatToml& toml) {
  ExperimentConfig c;
  c.seed = toml.take_u64("seed", c.seed);
  c.output_dir = toml.take_string("output_dir", "");

  const bool world_seed_given = toml.contains("world.seed");
  auto& w = c.world;
  w.num_clients = static_cast<int>(toml.take_int("world.num_clients", w.num_clients));
  w.num_style_clusters = static_cast<int>(
      toml.take_int("world.num_style_clusters", w.num_style_clusters));
  w.d_in = static_cast<int>(toml.take_int("world.d_in", w.d_in));
  w.d_out = static_cast<int>(toml.take_int("world.d_out", w.d_out));
  w.sigma_id = toml.take_double("world.sigma_id", w.sigma_id);
  w.sigma_style = toml.take_double("world.sigma_style", w.sigma_style);
  w.sigma_noise = toml.take_double("world.sigma_noise", w.sigma_noise);
  auto& n = w.samples;
  n.neutral_train = static_cast<int>(toml.take_int("world.neutral_train", n.neutral_train));
  n.neutral_val = static_cast<int>(toml.take_int("world.neutral_val", n.neutral_val));
  n.neutral_test = static_cast<int>(toml.take_int("world.neutral_test", n.neutral_test));
  n.expressive_train = static_cast<int>(
      toml.take_int("world.expressive_train", n.expressive_train));
  n.expressive_val = static_cast<int>(toml.take_int("world.expressive_val", n.expressive_val));
  n.expressive_test = static_cast<int>(
      toml.take_int("world.expressive_test", n.expressive_test));
  w.seed = world_seed_given ? toml.take_u64("world.seed", 0)
                            : derive_seed(c.seed, "world");

  auto& a = c.adapter;
  a.rank = static_cast<int>(toml.take_int("adapter.rank", a.rank));
  a.alpha = toml.take_double("adapter.alpha", a.alpha);
  a.num_sites = static_cast<int>(toml.take_int("adapter.num_sites", a.num_sites));

  auto& s = c.schedule;
  s.timbre_steps = static_cast<int>(toml.take_int("schedule.timbre_steps", s.timbre_steps));
  s.style_steps = static_cast<int>(toml.take_int("schedule.style_steps", s.style_steps));
  s.batch_size = static_cast<int>(toml.take_int("schedule.batch_size", s.batch_size));
  s.peak_lr = toml.take_double("schedule.peak_lr", s.peak_lr);
  s.warmup_ratio = toml.take_double("schedule.warmup_ratio", s.warmup_ratio);
  s.weight_decay = toml.take_double("schedule.weight_decay", s.weight_decay);
  s.id_training = detail::token_to_enum(
      toml.take_string("schedule.id_training", "first_participation"),
      detail::kIdTrainingTokens, "schedule.id_training");
  s.schedule_scope = detail::token_to_enum(
      toml.take_string("schedule.schedule_scope", "phase"),
      detail::kScopeTokens, "schedule.schedule_scope");

  auto& f = c.federation;
  f.rounds = static_cast<int>(toml.take_int("federation.rounds", f.rounds));
  f.participation_rate =
      toml.take_double("federation.participation_rate", f.participation_rate);
  f.tau = toml.take_double("federation.tau", f.tau);
  f.strategy = detail::token_to_enum(
      toml.take_string("federation.strategy", "fed_pisa"),
      detail::kStrategyTokens, "federation.strategy");
  f.similarity = detail::token_to_enum(
      toml.take_string("federation.similarity", "absolute"),
      detail::kSimilarityTokens, "federation.similarity");
  f.fedavg_weighting = detail::token_to_enum(
      toml.take_string("federation.fedavg_weighting", "uniform"),
      detail::kWeightingTokens, "federation.fedavg_weighting");

  c.cost.bytes_per_param = static_cast<int>(
      toml.take_int("cost.bytes_per_param", c.cost.bytes_per_param));
  c.cost.directions =
      detail::token_to_enum(toml.take_string("cost.directions", "both"),
                            detail::kDirectionsTokens, "cost.directions");

  toml.finish();

  if (s.schedule_scope == ScheduleScope::Global) {
    s.global_total_steps =
        std::max<long>(1, static_cast<long>(f.rounds) *
                              (s.timbre_steps + s.style_steps));
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path,
                                    const std::vector<std::string>& overrides) {
  FlatToml toml = FlatToml::parse_file(path);
  for (const auto& o : overrides) toml.apply_override(o);
  return config_from_toml(toml);
}

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  const auto res =
      std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general);
  return std::string(buf, res.ptr);
}

}  // namespace detail

/// Canonical snapshot with every key explicit. Parsing it back yields the
/// same config, which reruns to byte-identical results.
inline std::string emit_resolved(const ExperimentConfig& c) {
  std::ostringstream out;
  out << "seed = " << c.seed << "\n";
  out << "output_dir = \"" << c.output_dir << "\"\n";
  out << "\n[world]\n";
  out << "num_clients = " << c.world.num_clients << "\n";
  out << "num_style_clusters = " << c.world.num_style_clusters << "\n";
  out << "d_in = " << c.world.d_in << "\n";
  out << "d_out = " << c.world.d_out << "\n";
  out << "sigma_id = " << detail::fmt_double(c.world.sigma_id) << "\n";
  out << "sigma_style = " << detail::fmt_double(c.world.sigma_style) << "\n";
  out << "sigma_noise = " << detail::fmt_double(c.world.sigma_noise) << "\n";
  out << "neutral_train = " << c.world.samples.neutral_train << "\n";
  out << "neutral_val = " << c.world.samples.neutral_val << "\n";
  out << "neutral_test = " << c.world.samples.neutral_test << "\n";
  out << "expressive_train = " << c.world.samples.expressive_train << "\n";
  out << "expressive_val = " << c.world.samples.expressive_val << "\n";
  out << "expressive_test = " << c.world.samples.expressive_test << "\n";
  out << "seed = " << c.world.seed << "\n";
  out << "\n[adapter]\n";
  out << "rank = " << c.adapter.rank << "\n";
  out << "alpha = " << detail::fmt_double(c.adapter.alpha) << "\n";
  out << "num_sites = " << c.adapter.num_sites << "\n";
  out << "\n[schedule]\n";
  out << "timbre_steps = " << c.schedule.timbre_steps << "\n";
  out << "style_steps = " << c.schedule.style_steps << "\n";
  out << "batch_size = " << c.schedule.batch_size << "\n";
  out << "peak_lr = " << detail::fmt_double(c.schedule.peak_lr) << "\n";
  out << "warmup_ratio = " << detail::fmt_double(c.schedule.warmup_ratio)
      << "\n";
  out << "weight_decay = " << detail::fmt_double(c.schedule.weight_decay)
      << "\n";
  out << "id_training = \""
      << detail::enum_to_token(c.schedule.id_training,
                               detail::kIdTrainingTokens)
      << "\"\n";
  out << "schedule_scope = \""
      << detail::enum_to_token(c.schedule.schedule_scope, detail::kScopeTokens)
      << "\"\n";
  out << "\n[federation]\n";
  out << "rounds = " << c.federation.rounds << "\n";
  out << "participation_rate = "
      << detail::fmt_double(c.federation.participation_rate) << "\n";
  out << "tau = " << detail::fmt_double(c.federation.tau) << "\n";
  out << "strategy = \""
      << detail::enum_to_token(c.federation.strategy, detail::kStrategyTokens)
      << "\"\n";
  out << "similarity = \""
      << detail::enum_to_token(c.federation.similarity,
                               detail::kSimilarityTokens)
      << "\"\n";
  out << "fedavg_weighting = \""
      << detail::enum_to_token(c.federation.fedavg_weighting,
                               detail::kWeightingTokens)
      << "\"\n";
  out << "\n[cost]\n";
  out << "bytes_per_param = " << c.cost.bytes_per_param << "\n";
  out << "directions = \""
      << detail::enum_to_token(c.cost.directions, detail::kDirectionsTokens)
      << "\"\n";
  return out.str();
}

}  // namespace fedpisa
