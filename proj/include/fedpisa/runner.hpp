// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "fedpisa/accounting.hpp"
#include "fedpisa/aggregation.hpp"
#include "fedpisa/client.hpp"
#include "fedpisa/config.hpp"
#include "fedpisa/synth_data.hpp"
#include "fedpisa/world_io.hpp"

namespace fedpisa {

struct ResultsBundle {
  World world;
  std::uint64_t world_hash = 0;
  // rounds[0] is the initialization record (round 0, no participants);
  // rounds[t] the state after communication round t.
  std::vector<RoundRecord> rounds;
  CostLedger ledger;
  ExperimentConfig config;
};

struct RunOptions {
  int num_threads = 1;
  WireCapture* capture = nullptr;
  // When set, reuse this world instead of generating one; its spec must
  // match the config (sweeps share a single snapshot this way).
  const World* world = nullptr;
};

inline std::uint64_t world_hash_of(const World& world) {
  const auto bytes = serialize_world(world);
  return fnv1a64(bytes.data(), bytes.size());
}

/// Full experiment: world, initial client and server state, T rounds.
/// Deterministic in (config, thread count ignored): any num_threads yields
/// byte-identical bundles.
inline ResultsBundle run_experiment(const ExperimentConfig& config,
                                    const RunOptions& opts = {}) {
  config.validate();
  ResultsBundle bundle;
  bundle.config = config;
  if (opts.world != nullptr) {
    if (spec_hash(opts.world->spec) != spec_hash(config.world)) {
      throw ConfigError("run_experiment: supplied world does not match the "
                        "configured world spec");
    }
    bundle.world = *opts.world;
  } else {
    bundle.world = generate_world(config.world);
  }
  bundle.world_hash = world_hash_of(bundle.world);

  const World& world = bundle.world;
  ServerState server = make_server(world, config.adapter, config.seed);
  std::vector<ClientState> clients;
  clients.reserve(static_cast<std::size_t>(config.world.num_clients));
  for (int id = 0; id < config.world.num_clients; ++id) {
    clients.push_back(
        make_client(id, world, config.adapter, config.seed, server.global_init));
  }

  RoundRecord init;
  init.round = 0;
  for (int id = 0; id < config.world.num_clients; ++id) {
    init.metrics.emplace(
        id, evaluate_client(world, id, clients[static_cast<std::size_t>(id)].id_sites,
                            style_for_client(server, id)));
  }
  bundle.rounds.push_back(std::move(init));

  for (int t = 0; t < config.federation.rounds; ++t) {
    bundle.rounds.push_back(run_round(
        server, clients, world, config.schedule, config.adapter,
        config.federation, config.cost, config.seed, bundle.ledger,
        opts.num_threads, opts.capture));
  }
  return bundle;
}

}  // namespace fedpisa
