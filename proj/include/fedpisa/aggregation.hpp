// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <thread>
#include <utility>
#include <vector>

#include "fedpisa/accounting.hpp"
#include "fedpisa/client.hpp"
#include "fedpisa/error.hpp"
#include "fedpisa/lora.hpp"
#include "fedpisa/matrix.hpp"
#include "fedpisa/rng.hpp"
#include "fedpisa/synth_data.hpp"

namespace fedpisa {

enum class Strategy { FedPisa, FedAvg, LocalOnly, NoIdLora, NoStyleLora };
enum class FedAvgWeighting { Uniform, DataSize };

/// What the pairwise similarity is computed on: the uploaded factors
/// themselves, or their change relative to the adapter installed at the
/// start of the round.
enum class SimilaritySource { Absolute, Delta };

struct AttentionMatrix {
  Matrix weights;  // P x P, row-stochastic
  double tau = 0.5;
};

struct RoundPlan {
  int round_index = 0;
  std::vector<int> participant_ids;  // sorted ascending, unique
};

/// Uniform sample without replacement, deterministic under (seed, round).
inline RoundPlan sample_participants(int num_clients, double rate, int round,
                                     std::uint64_t seed) {
  if (num_clients < 1) {
    throw ConfigError("sample_participants: num_clients must be >= 1");
  }
  if (!(rate > 0.0) || rate > 1.0) {
    throw ConfigError("sample_participants: rate must be in (0, 1]");
  }
  const int count = std::max(
      1, static_cast<int>(std::lround(rate * static_cast<double>(num_clients))));
  std::vector<int> ids(static_cast<std::size_t>(num_clients));
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(derive_seed(seed, "sample", static_cast<std::uint64_t>(round)));
  // Fisher-Yates prefix: after k swaps the first k entries are a uniform
  // draw without replacement.
  for (int i = 0; i < count; ++i) {
    const auto j =
        i + static_cast<int>(rng.uniform_index(ids.size() - static_cast<std::size_t>(i)));
    std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(j)]);
  }
  RoundPlan plan;
  plan.round_index = round;
  plan.participant_ids.assign(ids.begin(), ids.begin() + count);
  std::sort(plan.participant_ids.begin(), plan.participant_ids.end());
  return plan;
}

/// Row-softmax of pairwise cosine similarities scaled by 1/tau, with
/// max-subtraction per row.
inline AttentionMatrix attention_weights(const std::vector<Matrix>& factors,
                                         double tau) {
  if (factors.empty()) {
    throw ShapeError("attention_weights: empty factor list");
  }
  if (!(tau > 0.0)) {
    throw ConfigError("attention_weights: tau must be positive");
  }
  const auto p = static_cast<long>(factors.size());
  for (const auto& f : factors) {
    if (f.rows() != factors[0].rows() || f.cols() != factors[0].cols()) {
      throw ShapeError("attention_weights: factor shape mismatch");
    }
  }
  std::vector<Vector> flats;
  flats.reserve(factors.size());
  for (const auto& f : factors) flats.push_back(flatten(f));

  AttentionMatrix out;
  out.tau = tau;
  out.weights = Matrix(p, p);
  Matrix scores(p, p);
  for (long i = 0; i < p; ++i) {
    for (long j = 0; j < p; ++j) {
      scores(i, j) = cosine_similarity(flats[static_cast<std::size_t>(i)],
                                       flats[static_cast<std::size_t>(j)]) /
                     tau;
    }
  }
  for (long i = 0; i < p; ++i) {
    const double row_max = scores.row(i).maxCoeff();
    double denom = 0.0;
    for (long j = 0; j < p; ++j) {
      const double e = std::exp(scores(i, j) - row_max);
      out.weights(i, j) = e;
      denom += e;
    }
    out.weights.row(i) /= denom;
  }
  return out;
}

namespace detail {

inline void check_homogeneous(const std::vector<StyleUpdate>& updates) {
  if (updates.empty()) {
    throw ShapeError("aggregate: no updates");
  }
  const auto& ref = updates[0].sites;
  for (const auto& u : updates) {
    if (u.sites.size() != ref.size()) {
      throw ShapeError("aggregate: site count mismatch");
    }
    for (std::size_t s = 0; s < ref.size(); ++s) {
      if (u.sites[s].d_out() != ref[s].d_out() ||
          u.sites[s].d_in() != ref[s].d_in() ||
          u.sites[s].rank != ref[s].rank) {
        throw ShapeError("aggregate: adapter shape mismatch");
      }
    }
  }
}

/// Index order that visits updates by ascending client id, making every
/// floating-point reduction independent of the caller's list order.
inline std::vector<std::size_t> id_order(const std::vector<StyleUpdate>& updates) {
  std::vector<std::size_t> order(updates.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return updates[x].client_id < updates[y].client_id;
  });
  return order;
}

}  // namespace detail

struct PersonalizedResult {
  // Aggregated adapters keyed by client id.
  std::map<int, std::vector<LoraAdapter>> per_client;
  // Attention per adapter site, rows/cols in ascending-client-id order.
  std::vector<AttentionMatrix> alpha;  // from the A factors
  std::vector<AttentionMatrix> beta;   // from the B factors
  std::vector<int> client_ids;         // ascending, aligned with the rows
};

/// Per-client aggregation with independent attention for the A and B factors.
/// Sums run in the difference form X_i + sum_j w_ij (X_j - X_i) over ascending
/// client ids, so identical uploads reproduce themselves exactly and the
/// result does not depend on the caller's list order.
///
/// `sim_source` supplies the factors the similarities are computed on; it
/// must be aligned index-for-index with `updates`.
inline PersonalizedResult personalized_aggregate(
    const std::vector<StyleUpdate>& updates,
    const std::vector<StyleUpdate>& sim_source, double tau) {
  detail::check_homogeneous(updates);
  detail::check_homogeneous(sim_source);
  if (sim_source.size() != updates.size()) {
    throw ShapeError("personalized_aggregate: similarity source mismatch");
  }
  const auto order = detail::id_order(updates);
  const std::size_t p = updates.size();
  const std::size_t num_sites = updates[0].sites.size();

  PersonalizedResult result;
  result.client_ids.reserve(p);
  for (auto k : order) result.client_ids.push_back(updates[k].client_id);

  for (std::size_t s = 0; s < num_sites; ++s) {
    std::vector<Matrix> a_factors, b_factors;
    a_factors.reserve(p);
    b_factors.reserve(p);
    for (auto k : order) {
      a_factors.push_back(sim_source[k].sites[s].a);
      b_factors.push_back(sim_source[k].sites[s].b);
    }
    result.alpha.push_back(attention_weights(a_factors, tau));
    result.beta.push_back(attention_weights(b_factors, tau));
  }

  for (std::size_t i = 0; i < p; ++i) {
    const auto& self = updates[order[i]];
    std::vector<LoraAdapter> sites;
    sites.reserve(num_sites);
    for (std::size_t s = 0; s < num_sites; ++s) {
      LoraAdapter agg = self.sites[s];
      Matrix a_acc = Matrix::Zero(agg.a.rows(), agg.a.cols());
      Matrix b_acc = Matrix::Zero(agg.b.rows(), agg.b.cols());
      for (std::size_t j = 0; j < p; ++j) {
        const auto& peer = updates[order[j]];
        a_acc += result.alpha[s].weights(static_cast<long>(i),
                                         static_cast<long>(j)) *
                 (peer.sites[s].a - agg.a);
        b_acc += result.beta[s].weights(static_cast<long>(i),
                                        static_cast<long>(j)) *
                 (peer.sites[s].b - agg.b);
      }
      agg.a += a_acc;
      agg.b += b_acc;
      sites.push_back(std::move(agg));
    }
    result.per_client.emplace(self.client_id, std::move(sites));
  }
  return result;
}

inline PersonalizedResult personalized_aggregate(
    const std::vector<StyleUpdate>& updates, double tau) {
  return personalized_aggregate(updates, updates, tau);
}

/// Single weighted mean of all updates. `data_sizes` is required for
/// DataSize weighting and must align with `updates`.
inline std::vector<LoraAdapter> fedavg_aggregate(
    const std::vector<StyleUpdate>& updates, FedAvgWeighting weighting,
    const std::vector<long>& data_sizes = {}) {
  detail::check_homogeneous(updates);
  const auto order = detail::id_order(updates);
  const std::size_t p = updates.size();
  std::vector<double> w(p, 1.0 / static_cast<double>(p));
  if (weighting == FedAvgWeighting::DataSize) {
    if (data_sizes.size() != p) {
      throw ConfigError("fedavg_aggregate: data_sizes must align with updates");
    }
    double total = 0.0;
    for (auto n : data_sizes) {
      if (n <= 0) throw ConfigError("fedavg_aggregate: data sizes must be > 0");
      total += static_cast<double>(n);
    }
    for (std::size_t k = 0; k < p; ++k) {
      w[k] = static_cast<double>(data_sizes[k]) / total;
    }
  }
  // Difference form around the lowest-id update: identical uploads (and a
  // single upload) come back exactly.
  const auto& base = updates[order[0]];
  std::vector<LoraAdapter> out = base.sites;
  for (std::size_t s = 0; s < out.size(); ++s) {
    Matrix a_acc = Matrix::Zero(out[s].a.rows(), out[s].a.cols());
    Matrix b_acc = Matrix::Zero(out[s].b.rows(), out[s].b.cols());
    for (std::size_t j = 0; j < p; ++j) {
      const auto& peer = updates[order[j]];
      a_acc += w[order[j]] * (peer.sites[s].a - base.sites[s].a);
      b_acc += w[order[j]] * (peer.sites[s].b - base.sites[s].b);
    }
    out[s].a += a_acc;
    out[s].b += b_acc;
  }
  return out;
}

struct FederationConfig {
  int rounds = 30;
  double participation_rate = 0.2;
  double tau = 0.5;
  Strategy strategy = Strategy::FedPisa;
  SimilaritySource similarity = SimilaritySource::Absolute;
  FedAvgWeighting fedavg_weighting = FedAvgWeighting::Uniform;

  void validate() const {
    if (rounds < 0) throw ConfigError("federation: rounds must be >= 0");
    if (!(participation_rate > 0.0) || participation_rate > 1.0) {
      throw ConfigError("federation: participation_rate must be in (0, 1]");
    }
    if (!(tau > 0.0)) throw ConfigError("federation: tau must be positive");
  }
};

struct ServerState {
  std::map<int, std::vector<LoraAdapter>> personalized_store;
  std::vector<LoraAdapter> global_init;
  int round = 0;  // rounds completed so far
};

/// The shared first-round style initialization every client starts from.
inline ServerState make_server(const World& world, const AdapterConfig& cfg,
                               std::uint64_t master_seed) {
  cfg.validate();
  ServerState server;
  server.global_init.reserve(static_cast<std::size_t>(cfg.num_sites));
  for (int site = 0; site < cfg.num_sites; ++site) {
    Rng rng(derive_seed(master_seed, "global_init",
                        static_cast<std::uint64_t>(site)));
    server.global_init.push_back(new_adapter(world.spec.d_out, world.spec.d_in,
                                             cfg.rank, cfg.alpha, rng));
  }
  return server;
}

/// The style adapter a client would install if sampled now: its stored
/// personalized model, or the global initialization before any participation.
inline const std::vector<LoraAdapter>& style_for_client(
    const ServerState& server, int client_id) {
  const auto it = server.personalized_store.find(client_id);
  return it == server.personalized_store.end() ? server.global_init
                                               : it->second;
}

struct RoundRecord {
  int round = 0;
  std::vector<int> participants;
  std::vector<AttentionMatrix> alpha;  // per site; empty unless attention ran
  std::vector<AttentionMatrix> beta;
  std::map<int, MetricsRecord> metrics;  // every client, participant or not
  std::vector<PhaseReport> timbre_reports;  // aligned with participants
  std::vector<PhaseReport> style_reports;
  double within_cluster_alpha_mass = 0.0;  // meaningful only with attention
  double cumulative_cost_gib = 0.0;
};

/// Serialized wire traffic of a round, kept only when a caller asks for it.
struct WireCapture {
  std::vector<std::vector<std::uint8_t>> uploads;
  std::vector<std::vector<std::uint8_t>> downloads;
};

namespace detail {

struct ParticipantWork {
  std::vector<std::uint8_t> download_bytes;
  std::vector<std::uint8_t> upload_bytes;
  StyleUpdate update;                   // parsed back from upload_bytes
  std::vector<LoraAdapter> installed;   // style stack after install
  PhaseReport timbre_report;
  PhaseReport style_report;
  bool has_update = false;
};

/// Mean over participants and sites of the attention mass a row places on
/// peers from its own style cluster (the row's own entry included).
inline double within_cluster_mass(const std::vector<AttentionMatrix>& alpha,
                                  const std::vector<int>& ids,
                                  const World& world) {
  if (alpha.empty() || ids.empty()) return 0.0;
  double acc = 0.0;
  long terms = 0;
  for (const auto& att : alpha) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      double mass = 0.0;
      for (std::size_t j = 0; j < ids.size(); ++j) {
        if (world.assignment[static_cast<std::size_t>(ids[i])] ==
            world.assignment[static_cast<std::size_t>(ids[j])]) {
          mass += att.weights(static_cast<long>(i), static_cast<long>(j));
        }
      }
      acc += mass;
      terms += 1;
    }
  }
  return acc / static_cast<double>(terms);
}

}  // namespace detail

/// One communication round: sample, install, local phases, aggregate, store,
/// account, evaluate. Local phases may run on `num_threads` workers; the
/// result is identical for any thread count because every client draws from
/// its own derived stream and the aggregation section is single-threaded
/// over ascending client ids.
inline RoundRecord run_round(ServerState& server,
                             std::vector<ClientState>& clients,
                             const World& world, const TrainSchedule& schedule,
                             const AdapterConfig& adapter_cfg,
                             const FederationConfig& fed,
                             const CostConfig& cost, std::uint64_t master_seed,
                             CostLedger& ledger, int num_threads = 1,
                             WireCapture* capture = nullptr) {
  fed.validate();
  if (num_threads < 1) {
    throw ConfigError("run_round: num_threads must be >= 1");
  }
  const int round = server.round + 1;
  const RoundPlan plan = sample_participants(
      world.spec.num_clients, fed.participation_rate, round, master_seed);
  const std::size_t p = plan.participant_ids.size();
  const bool style_federated = fed.strategy != Strategy::NoStyleLora;

  std::vector<detail::ParticipantWork> work(p);
  auto run_participant = [&](std::size_t k) {
    const int id = plan.participant_ids[k];
    ClientState& client = clients[static_cast<std::size_t>(id)];
    detail::ParticipantWork& w = work[k];
    if (style_federated) {
      const auto& payload = style_for_client(server, id);
      w.download_bytes = serialize_style_payload(payload);
      const auto incoming =
          parse_style_payload(w.download_bytes, adapter_cfg.num_sites);
      install_style(client, incoming);
      w.installed = client.style_sites;
    }
    if (fed.strategy != Strategy::NoIdLora) {
      Rng rng(derive_seed(master_seed, "batch", static_cast<std::uint64_t>(id),
                          static_cast<std::uint64_t>(round), 0));
      w.timbre_report = timbre_phase(client, world, schedule, rng);
    }
    if (style_federated) {
      Rng rng(derive_seed(master_seed, "batch", static_cast<std::uint64_t>(id),
                          static_cast<std::uint64_t>(round), 1));
      auto [update, report] = style_phase(client, world, schedule, round, rng);
      w.style_report = report;
      w.upload_bytes = serialize_update(update);
      w.update = parse_update(w.upload_bytes, adapter_cfg.num_sites);
      w.has_update = true;
    }
  };

  if (num_threads == 1 || p <= 1) {
    for (std::size_t k = 0; k < p; ++k) run_participant(k);
  } else {
    std::vector<std::thread> pool;
    const int workers = std::min<int>(num_threads, static_cast<int>(p));
    pool.reserve(static_cast<std::size_t>(workers));
    for (int t = 0; t < workers; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t k = static_cast<std::size_t>(t); k < p;
             k += static_cast<std::size_t>(workers)) {
          run_participant(k);
        }
      });
    }
    for (auto& th : pool) th.join();
  }

  // Aggregation barrier: everything below is single-threaded and walks
  // participants in ascending client id (the plan is sorted).
  RoundRecord record;
  record.round = round;
  record.participants = plan.participant_ids;

  std::vector<StyleUpdate> updates;
  if (style_federated) {
    updates.reserve(p);
    for (std::size_t k = 0; k < p; ++k) {
      const int id = plan.participant_ids[k];
      std::int64_t download_params = 0;
      for (const auto& ad : work[k].installed) {
        download_params += adapter_param_count(ad);
      }
      ledger.record_transfer(round, id, Direction::Download, download_params);
      ledger.record_transfer(round, id, Direction::Upload,
                             work[k].update.param_count());
      if (capture != nullptr) {
        capture->downloads.push_back(work[k].download_bytes);
        capture->uploads.push_back(work[k].upload_bytes);
      }
      updates.push_back(work[k].update);
    }
  }

  switch (fed.strategy) {
    case Strategy::FedPisa:
    case Strategy::NoIdLora: {
      std::vector<StyleUpdate> basis;
      if (fed.similarity == SimilaritySource::Delta) {
        basis = updates;
        for (std::size_t k = 0; k < p; ++k) {
          for (std::size_t s = 0; s < basis[k].sites.size(); ++s) {
            basis[k].sites[s].a -= work[k].installed[s].a;
            basis[k].sites[s].b -= work[k].installed[s].b;
          }
        }
      }
      auto result = fed.similarity == SimilaritySource::Delta
                        ? personalized_aggregate(updates, basis, fed.tau)
                        : personalized_aggregate(updates, fed.tau);
      for (auto& [id, sites] : result.per_client) {
        server.personalized_store[id] = std::move(sites);
      }
      record.within_cluster_alpha_mass =
          detail::within_cluster_mass(result.alpha, result.client_ids, world);
      record.alpha = std::move(result.alpha);
      record.beta = std::move(result.beta);
      break;
    }
    case Strategy::FedAvg: {
      std::vector<long> sizes;
      if (fed.fedavg_weighting == FedAvgWeighting::DataSize) {
        sizes.reserve(p);
        for (int id : plan.participant_ids) {
          sizes.push_back(
              world.data[static_cast<std::size_t>(id)].expressive_train.size());
        }
      }
      const auto mean = fedavg_aggregate(updates, fed.fedavg_weighting, sizes);
      for (int id : plan.participant_ids) {
        server.personalized_store[id] = mean;
      }
      break;
    }
    case Strategy::LocalOnly: {
      for (auto& u : updates) {
        server.personalized_store[u.client_id] = u.sites;
      }
      break;
    }
    case Strategy::NoStyleLora:
      break;  // nothing crosses the network, nothing to store
  }

  for (std::size_t k = 0; k < p; ++k) {
    record.timbre_reports.push_back(work[k].timbre_report);
    record.style_reports.push_back(work[k].style_report);
  }

  for (int id = 0; id < world.spec.num_clients; ++id) {
    const auto& client = clients[static_cast<std::size_t>(id)];
    record.metrics.emplace(
        id, evaluate_client(world, id, client.id_sites,
                            style_for_client(server, id)));
  }
  record.cumulative_cost_gib = cost.ledger_gib(ledger);

  server.round = round;
  return record;
}

}  // namespace fedpisa
