// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "fedpisa/error.hpp"
#include "fedpisa/lora.hpp"
#include "fedpisa/optimizer.hpp"
#include "fedpisa/synth_data.hpp"

namespace fedpisa {

enum class IdTraining { FirstParticipation, EveryRound };
enum class ScheduleScope { Phase, Global };

struct TrainSchedule {
  int timbre_steps = 80;
  int style_steps = 20;
  int batch_size = 16;
  double peak_lr = 2e-5;
  double warmup_ratio = 0.1;
  double weight_decay = 0.01;
  IdTraining id_training = IdTraining::FirstParticipation;
  ScheduleScope schedule_scope = ScheduleScope::Phase;
  long global_total_steps = 0;  // required when schedule_scope == Global

  void validate() const {
    if (timbre_steps < 0 || style_steps < 0) {
      throw ConfigError("schedule: step counts must be nonnegative");
    }
    if (batch_size < 1) throw ConfigError("schedule: batch_size must be >= 1");
    if (!(peak_lr > 0.0)) throw ConfigError("schedule: peak_lr must be > 0");
    if (warmup_ratio < 0.0 || warmup_ratio >= 1.0) {
      throw ConfigError("schedule: warmup_ratio must be in [0, 1)");
    }
    if (weight_decay < 0.0) {
      throw ConfigError("schedule: weight_decay must be nonnegative");
    }
    if (schedule_scope == ScheduleScope::Global && global_total_steps < 1) {
      throw ConfigError("schedule: global scope needs global_total_steps >= 1");
    }
  }
};

struct AdapterConfig {
  int rank = 4;
  double alpha = 16.0;
  int num_sites = 1;

  void validate() const {
    if (rank < 1) throw ConfigError("adapter: rank must be >= 1");
    if (!(alpha > 0.0)) throw ConfigError("adapter: alpha must be positive");
    if (num_sites < 1) throw ConfigError("adapter: num_sites must be >= 1");
  }
};

struct AdapterOptState {
  AdamWState a;
  AdamWState b;
};

struct ClientState {
  int client_id = -1;
  std::vector<LoraAdapter> id_sites;
  std::vector<LoraAdapter> style_sites;
  std::vector<AdapterOptState> id_opt;
  std::vector<AdapterOptState> style_opt;
  bool has_trained_id = false;
  long steps_taken = 0;  // cumulative local steps; drives the Global schedule
};

/// The only payload that ever crosses the client/server boundary.
struct StyleUpdate {
  int client_id = -1;
  int round = 0;
  std::vector<LoraAdapter> sites;

  std::int64_t param_count() const {
    std::int64_t n = 0;
    for (const auto& ad : sites) n += adapter_param_count(ad);
    return n;
  }
};

/// Byte-identity evidence for the gradient-isolation contract: the
/// non-trained role's hash must be unchanged across the phase.
struct PhaseReport {
  std::uint64_t id_hash_before = 0;
  std::uint64_t id_hash_after = 0;
  std::uint64_t style_hash_before = 0;
  std::uint64_t style_hash_after = 0;
  int steps_run = 0;
};

inline std::uint64_t hash_sites(const std::vector<LoraAdapter>& sites) {
  std::uint64_t h = kFnvOffset;
  for (const auto& ad : sites) h = hash_adapter(ad, h);
  return h;
}

inline ClientState make_client(int client_id, const World& world,
                               const AdapterConfig& cfg,
                               std::uint64_t master_seed,
                               const std::vector<LoraAdapter>& global_init) {
  cfg.validate();
  ClientState state;
  state.client_id = client_id;
  state.id_sites.reserve(cfg.num_sites);
  for (int site = 0; site < cfg.num_sites; ++site) {
    Rng rng(derive_seed(master_seed, "id_init",
                        static_cast<std::uint64_t>(client_id),
                        static_cast<std::uint64_t>(site)));
    state.id_sites.push_back(new_adapter(world.spec.d_out, world.spec.d_in,
                                         cfg.rank, cfg.alpha, rng));
  }
  state.style_sites = global_init;
  state.id_opt.resize(cfg.num_sites);
  state.style_opt.resize(cfg.num_sites);
  return state;
}

/// Replaces the style adapter with the incoming personalized one and resets
/// the style optimizer state; moments computed around a different parameter
/// point do not carry over. The identity adapter is untouched.
inline void install_style(ClientState& state,
                          const std::vector<LoraAdapter>& incoming) {
  if (incoming.size() != state.style_sites.size()) {
    throw ProtocolError("install_style: site count mismatch");
  }
  for (std::size_t i = 0; i < incoming.size(); ++i) {
    const auto& cur = state.style_sites[i];
    const auto& in = incoming[i];
    if (in.d_out() != cur.d_out() || in.d_in() != cur.d_in() ||
        in.rank != cur.rank) {
      throw ProtocolError("install_style: adapter shape mismatch");
    }
  }
  state.style_sites = incoming;
  for (auto& opt : state.style_opt) opt = AdapterOptState{};
}

/// Uniform-with-replacement rows of one split; the split's style label is
/// shared by the whole batch.
inline Batch sample_batch(const Batch& split, int batch_size, Rng& rng) {
  Batch out;
  out.style = split.style;
  out.inputs = Matrix(batch_size, split.inputs.cols());
  out.targets = Matrix(batch_size, split.targets.cols());
  const auto n = static_cast<std::size_t>(split.size());
  for (int i = 0; i < batch_size; ++i) {
    const auto idx = static_cast<long>(rng.uniform_index(n));
    out.inputs.row(i) = split.inputs.row(idx);
    out.targets.row(i) = split.targets.row(idx);
  }
  return out;
}

namespace detail {

inline ScheduleConfig phase_schedule(const TrainSchedule& schedule,
                                     int phase_steps) {
  ScheduleConfig cfg;
  cfg.peak_lr = schedule.peak_lr;
  cfg.warmup_ratio = schedule.warmup_ratio;
  cfg.total_steps = schedule.schedule_scope == ScheduleScope::Global
                        ? schedule.global_total_steps
                        : phase_steps;
  cfg.validate();
  return cfg;
}

/// Runs `steps` AdamW steps on batches from `split`, updating exactly the
/// adapters in `trained` and their optimizer states.
///
/// The style stack is engaged only for expressive inputs: neutral batches
/// forward through backbone + identity alone, which is what makes identity
/// and style separately recoverable from the two data pools.
inline void run_steps(ClientState& state, const World& world,
                      const TrainSchedule& schedule, const Batch& split,
                      AdapterRole which, int steps, Rng& rng) {
  if (steps == 0) return;
  if (split.size() == 0) {
    throw DataError("training phase: empty dataset");
  }
  const ScheduleConfig sched = detail::phase_schedule(schedule, steps);
  const AdamWConfig adamw{0.9, 0.999, 1e-8, schedule.weight_decay};
  const bool neutral = which == AdapterRole::Identity;
  auto& trained = neutral ? state.id_sites : state.style_sites;
  auto& opt = neutral ? state.id_opt : state.style_opt;
  for (int step = 0; step < steps; ++step) {
    const Batch batch = sample_batch(split, schedule.batch_size, rng);
    const auto grads =
        neutral ? grad_adapter(world.backbone, state.id_sites, {}, batch,
                               AdapterRole::Identity)
                : grad_adapter(world.backbone, state.id_sites,
                               state.style_sites, batch, AdapterRole::Style);
    const long index = schedule.schedule_scope == ScheduleScope::Global
                           ? state.steps_taken
                           : step;
    const double lr = lr_at(index, sched);
    for (std::size_t site = 0; site < trained.size(); ++site) {
      adamw_step(trained[site].a, grads[site].d_a, opt[site].a, lr, adamw);
      adamw_step(trained[site].b, grads[site].d_b, opt[site].b, lr, adamw);
    }
    state.steps_taken += 1;
  }
}

}  // namespace detail

/// Timbre phase: n steps on neutral data, identity adapter only. Skipped
/// entirely once the client has trained its identity under
/// IdTraining::FirstParticipation.
inline PhaseReport timbre_phase(ClientState& state, const World& world,
                                const TrainSchedule& schedule, Rng& rng) {
  PhaseReport rep;
  rep.id_hash_before = hash_sites(state.id_sites);
  rep.style_hash_before = hash_sites(state.style_sites);
  const bool skip = schedule.id_training == IdTraining::FirstParticipation &&
                    state.has_trained_id;
  if (!skip) {
    detail::run_steps(state, world, schedule,
                      world.data[state.client_id].neutral_train,
                      AdapterRole::Identity, schedule.timbre_steps, rng);
    state.has_trained_id = true;
    rep.steps_run = schedule.timbre_steps;
  }
  rep.id_hash_after = hash_sites(state.id_sites);
  rep.style_hash_after = hash_sites(state.style_sites);
  return rep;
}

/// Stylization phase: m steps on expressive data, style adapter only; emits
/// the StyleUpdate carrying the post-training factors.
inline std::pair<StyleUpdate, PhaseReport> style_phase(
    ClientState& state, const World& world, const TrainSchedule& schedule,
    int round, Rng& rng) {
  PhaseReport rep;
  rep.id_hash_before = hash_sites(state.id_sites);
  rep.style_hash_before = hash_sites(state.style_sites);
  detail::run_steps(state, world, schedule,
                    world.data[state.client_id].expressive_train,
                    AdapterRole::Style, schedule.style_steps, rng);
  rep.steps_run = schedule.style_steps;
  rep.id_hash_after = hash_sites(state.id_sites);
  rep.style_hash_after = hash_sites(state.style_sites);
  StyleUpdate update;
  update.client_id = state.client_id;
  update.round = round;
  update.sites = state.style_sites;
  return {std::move(update), rep};
}

// --- wire form -------------------------------------------------------------
//
// Upload: client_id u32, round u32, then one Style adapter block per site.
// Download: adapter blocks only. Either direction rejects Identity roles.

inline std::vector<std::uint8_t> serialize_update(const StyleUpdate& update) {
  std::vector<std::uint8_t> out;
  wire::put_u32(out, static_cast<std::uint32_t>(update.client_id));
  wire::put_u32(out, static_cast<std::uint32_t>(update.round));
  for (const auto& ad : update.sites) {
    append_adapter(out, ad, AdapterRole::Style);
  }
  return out;
}

inline StyleUpdate parse_update(std::span<const std::uint8_t> buf,
                                int expected_sites) {
  std::size_t off = 0;
  StyleUpdate update;
  update.client_id = static_cast<int>(wire::get_u32(buf, off));
  update.round = static_cast<int>(wire::get_u32(buf, off));
  for (int site = 0; site < expected_sites; ++site) {
    AdapterRole role;
    update.sites.push_back(read_adapter(buf, off, role));
    if (role != AdapterRole::Style) {
      throw ProtocolError("style update carries a non-style adapter");
    }
  }
  if (off != buf.size()) {
    throw ProtocolError("style update: trailing bytes");
  }
  return update;
}

inline std::vector<std::uint8_t> serialize_style_payload(
    const std::vector<LoraAdapter>& sites) {
  std::vector<std::uint8_t> out;
  for (const auto& ad : sites) append_adapter(out, ad, AdapterRole::Style);
  return out;
}

inline std::vector<LoraAdapter> parse_style_payload(
    std::span<const std::uint8_t> buf, int expected_sites) {
  std::size_t off = 0;
  std::vector<LoraAdapter> sites;
  for (int site = 0; site < expected_sites; ++site) {
    AdapterRole role;
    sites.push_back(read_adapter(buf, off, role));
    if (role != AdapterRole::Style) {
      throw ProtocolError("style payload carries a non-style adapter");
    }
  }
  if (off != buf.size()) throw ProtocolError("style payload: trailing bytes");
  return sites;
}

}  // namespace fedpisa
