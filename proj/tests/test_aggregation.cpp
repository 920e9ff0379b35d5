// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "fedpisa/aggregation.hpp"

using namespace fedpisa;

namespace {

StyleUpdate one_site_update(int client_id, const Matrix& a, const Matrix& b,
                            int rank, double alpha) {
  StyleUpdate u;
  u.client_id = client_id;
  u.round = 1;
  LoraAdapter ad;
  ad.rank = rank;
  ad.alpha = alpha;
  ad.a = a;
  ad.b = b;
  u.sites.push_back(std::move(ad));
  return u;
}

StyleUpdate scalar_update(int client_id, double a, double b) {
  Matrix ma(1, 1), mb(1, 1);
  ma << a;
  mb << b;
  return one_site_update(client_id, ma, mb, 1, 1.0);
}

std::vector<StyleUpdate> random_updates(int count, int rank, int d, Rng& rng) {
  std::vector<StyleUpdate> updates;
  for (int i = 0; i < count; ++i) {
    Matrix a(rank, d), b(d, rank);
    for (int r = 0; r < rank; ++r) {
      for (int c = 0; c < d; ++c) a(r, c) = rng.gaussian();
    }
    for (int r = 0; r < d; ++r) {
      for (int c = 0; c < rank; ++c) b(r, c) = rng.gaussian();
    }
    updates.push_back(one_site_update(i, a, b, rank, 8.0));
  }
  return updates;
}

WorldSpec round_spec(std::uint64_t seed) {
  WorldSpec spec;
  spec.num_clients = 4;
  spec.num_style_clusters = 2;
  spec.d_in = 3;
  spec.d_out = 3;
  spec.samples.neutral_train = 32;
  spec.samples.neutral_val = 4;
  spec.samples.neutral_test = 8;
  spec.samples.expressive_train = 32;
  spec.samples.expressive_val = 4;
  spec.samples.expressive_test = 8;
  spec.seed = seed;
  return spec;
}

struct RoundFixture {
  World world;
  AdapterConfig adapter;
  TrainSchedule schedule;
  FederationConfig fed;
  CostConfig cost;
  ServerState server;
  std::vector<ClientState> clients;
  std::uint64_t seed;

  explicit RoundFixture(std::uint64_t master_seed, Strategy strategy)
      : world(generate_world(round_spec(master_seed))), seed(master_seed) {
    adapter.rank = 2;
    adapter.alpha = 4.0;
    schedule.timbre_steps = 4;
    schedule.style_steps = 3;
    schedule.batch_size = 8;
    schedule.peak_lr = 0.05;
    schedule.warmup_ratio = 0.0;
    fed.rounds = 1;
    fed.participation_rate = 0.5;
    fed.tau = 0.5;
    fed.strategy = strategy;
    server = make_server(world, adapter, seed);
    for (int id = 0; id < world.spec.num_clients; ++id) {
      clients.push_back(
          make_client(id, world, adapter, seed, server.global_init));
    }
  }
};

}  // namespace

TEST_CASE("sample_participants draws the configured fraction") {
  const RoundPlan plan = sample_participants(60, 0.2, 3, 99);
  REQUIRE(plan.participant_ids.size() == 12);
  REQUIRE(std::is_sorted(plan.participant_ids.begin(),
                         plan.participant_ids.end()));
  const std::set<int> unique(plan.participant_ids.begin(),
                             plan.participant_ids.end());
  REQUIRE(unique.size() == 12);
  for (int id : plan.participant_ids) {
    REQUIRE(id >= 0);
    REQUIRE(id < 60);
  }

  REQUIRE(sample_participants(12, 0.2, 1, 99).participant_ids.size() == 2);
  // Tiny rates still sample someone.
  REQUIRE(sample_participants(10, 0.01, 1, 99).participant_ids.size() == 1);

  const RoundPlan everyone = sample_participants(5, 1.0, 2, 7);
  REQUIRE(everyone.participant_ids == std::vector<int>{0, 1, 2, 3, 4});
}

TEST_CASE("sample_participants is deterministic and round-sensitive") {
  const RoundPlan a = sample_participants(60, 0.2, 5, 31);
  const RoundPlan b = sample_participants(60, 0.2, 5, 31);
  REQUIRE(a.participant_ids == b.participant_ids);

  bool any_differs = false;
  for (int round = 6; round < 11; ++round) {
    if (sample_participants(60, 0.2, round, 31).participant_ids !=
        a.participant_ids) {
      any_differs = true;
    }
  }
  REQUIRE(any_differs);
  REQUIRE_THROWS_AS(sample_participants(0, 0.2, 1, 3), ConfigError);
  REQUIRE_THROWS_AS(sample_participants(10, 0.0, 1, 3), ConfigError);
  REQUIRE_THROWS_AS(sample_participants(10, 1.5, 1, 3), ConfigError);
}

TEST_CASE("attention over a single participant is the identity row") {
  Matrix f(1, 2);
  f << 3.0, -1.0;
  const AttentionMatrix att = attention_weights({f}, 0.5);
  REQUIRE(att.weights.rows() == 1);
  REQUIRE(att.weights(0, 0) == 1.0);
}

TEST_CASE("identical factors attend uniformly") {
  Matrix f(2, 2);
  f << 1.0, 2.0, 3.0, 4.0;
  const AttentionMatrix att = attention_weights({f, f, f, f}, 0.5);
  for (long i = 0; i < 4; ++i) {
    for (long j = 0; j < 4; ++j) {
      REQUIRE_THAT(att.weights(i, j), Catch::Matchers::WithinAbs(0.25, 1e-15));
    }
  }
}

TEST_CASE("orthogonal factors give the logistic split at tau one half") {
  Matrix f1(1, 2), f2(1, 2);
  f1 << 1.0, 0.0;
  f2 << 0.0, 1.0;
  const AttentionMatrix att = attention_weights({f1, f2}, 0.5);
  // Row scores are {1/tau, 0/tau} = {2, 0}: softmax gives 1 / (1 + e^-2).
  const double big = 0.8807970779778823;
  REQUIRE_THAT(att.weights(0, 0), Catch::Matchers::WithinAbs(big, 1e-15));
  REQUIRE_THAT(att.weights(0, 1),
               Catch::Matchers::WithinAbs(1.0 - big, 1e-15));
  REQUIRE_THAT(att.weights(1, 1), Catch::Matchers::WithinAbs(big, 1e-15));
}

TEST_CASE("attention rows are stochastic for random factors") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Matrix> factors;
    const int p = 2 + static_cast<int>(rng.uniform_index(6));
    for (int i = 0; i < p; ++i) {
      Matrix f(2, 3);
      for (int r = 0; r < 2; ++r) {
        for (int c = 0; c < 3; ++c) f(r, c) = rng.gaussian();
      }
      factors.push_back(std::move(f));
    }
    const AttentionMatrix att = attention_weights(factors, 0.5);
    for (long i = 0; i < p; ++i) {
      double row = 0.0;
      for (long j = 0; j < p; ++j) {
        REQUIRE(att.weights(i, j) > 0.0);
        row += att.weights(i, j);
      }
      REQUIRE_THAT(row, Catch::Matchers::WithinAbs(1.0, 1e-9));
    }
  }
}

TEST_CASE("attention is invariant to a common factor rescaling") {
  Rng rng(19);
  std::vector<Matrix> factors, scaled;
  for (int i = 0; i < 4; ++i) {
    Matrix f(1, 4);
    for (int c = 0; c < 4; ++c) f(0, c) = rng.gaussian();
    scaled.push_back(3.0 * f);
    factors.push_back(std::move(f));
  }
  const AttentionMatrix a = attention_weights(factors, 0.7);
  const AttentionMatrix b = attention_weights(scaled, 0.7);
  REQUIRE((a.weights - b.weights).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("attention rejects degenerate input") {
  REQUIRE_THROWS_AS(attention_weights({}, 0.5), ShapeError);
  Matrix f(1, 2), g(2, 1);
  f.setOnes();
  g.setOnes();
  REQUIRE_THROWS_AS(attention_weights({f, g}, 0.5), ShapeError);
  REQUIRE_THROWS_AS(attention_weights({f}, 0.0), ConfigError);
}

TEST_CASE("small tau concentrates attention on the diagonal") {
  Rng rng(23);
  const auto updates = random_updates(4, 2, 3, rng);
  const PersonalizedResult res = personalized_aggregate(updates, 1e-3);
  for (long i = 0; i < 4; ++i) {
    REQUIRE(res.alpha[0].weights(i, i) > 0.999);
    REQUIRE(res.beta[0].weights(i, i) > 0.999);
  }
}

TEST_CASE("identical uploads are a fixed point of aggregation") {
  Matrix a(2, 3), b(3, 2);
  a << 0.1, -0.2, 0.3, 0.4, 0.5, -0.6;
  b << 1.0, 2.0, 3.0, 4.0, 5.0, 6.0;
  std::vector<StyleUpdate> updates;
  for (int i = 0; i < 3; ++i) {
    updates.push_back(one_site_update(i, a, b, 2, 8.0));
  }
  const PersonalizedResult res = personalized_aggregate(updates, 0.5);
  for (int i = 0; i < 3; ++i) {
    REQUIRE(res.per_client.at(i)[0].a == a);
    REQUIRE(res.per_client.at(i)[0].b == b);
  }
}

TEST_CASE("aggregation does not depend on the upload list order") {
  Rng rng(29);
  auto updates = random_updates(5, 2, 4, rng);
  const PersonalizedResult forward = personalized_aggregate(updates, 0.5);
  std::reverse(updates.begin(), updates.end());
  std::swap(updates[1], updates[3]);
  const PersonalizedResult shuffled = personalized_aggregate(updates, 0.5);
  REQUIRE(forward.client_ids == shuffled.client_ids);
  for (int i = 0; i < 5; ++i) {
    REQUIRE(forward.per_client.at(i)[0].a == shuffled.per_client.at(i)[0].a);
    REQUIRE(forward.per_client.at(i)[0].b == shuffled.per_client.at(i)[0].b);
  }
  REQUIRE(forward.alpha[0].weights == shuffled.alpha[0].weights);
}

TEST_CASE("huge tau reduces personalized aggregation to the uniform mean") {
  Rng rng(31);
  const auto updates = random_updates(4, 2, 3, rng);
  const PersonalizedResult res = personalized_aggregate(updates, 1e9);
  const auto mean = fedavg_aggregate(updates, FedAvgWeighting::Uniform);
  for (int i = 0; i < 4; ++i) {
    const auto& got = res.per_client.at(i)[0];
    REQUIRE((got.a - mean[0].a).cwiseAbs().maxCoeff() <
            1e-6 * mean[0].a.cwiseAbs().maxCoeff() + 1e-12);
    REQUIRE((got.b - mean[0].b).cwiseAbs().maxCoeff() <
            1e-6 * mean[0].b.cwiseAbs().maxCoeff() + 1e-12);
  }
}

TEST_CASE("aggregation validates the update set") {
  std::vector<StyleUpdate> empty;
  REQUIRE_THROWS_AS(personalized_aggregate(empty, 0.5), ShapeError);
  auto a = scalar_update(0, 1.0, 2.0);
  auto b = scalar_update(1, 3.0, 4.0);
  b.sites[0].a = Matrix::Zero(2, 1);  // rank mismatch against a
  b.sites[0].rank = 2;
  std::vector<StyleUpdate> bad = {a, b};
  REQUIRE_THROWS_AS(personalized_aggregate(bad, 0.5), ShapeError);
  REQUIRE_THROWS_AS(fedavg_aggregate(bad, FedAvgWeighting::Uniform),
                    ShapeError);
}

TEST_CASE("fedavg means the factors") {
  std::vector<StyleUpdate> updates = {scalar_update(0, 2.0, 10.0),
                                      scalar_update(1, 4.0, 30.0)};
  const auto mean = fedavg_aggregate(updates, FedAvgWeighting::Uniform);
  REQUIRE(mean.size() == 1);
  REQUIRE(mean[0].a(0, 0) == 3.0);
  REQUIRE(mean[0].b(0, 0) == 20.0);

  const auto weighted =
      fedavg_aggregate(updates, FedAvgWeighting::DataSize, {1, 3});
  REQUIRE(weighted[0].a(0, 0) == 3.5);
  REQUIRE(weighted[0].b(0, 0) == 25.0);

  REQUIRE_THROWS_AS(fedavg_aggregate(updates, FedAvgWeighting::DataSize, {1}),
                    ConfigError);
}

TEST_CASE("fedavg of identical uploads reproduces them") {
  Rng rng(37);
  Matrix a(2, 2), b(2, 2);
  for (int i = 0; i < 4; ++i) {
    a(i / 2, i % 2) = rng.gaussian();
    b(i / 2, i % 2) = rng.gaussian();
  }
  std::vector<StyleUpdate> updates;
  for (int i = 0; i < 4; ++i) updates.push_back(one_site_update(i, a, b, 2, 8.0));
  const auto mean = fedavg_aggregate(updates, FedAvgWeighting::Uniform);
  REQUIRE(mean[0].a == a);
  REQUIRE(mean[0].b == b);
}

TEST_CASE("federation config validation") {
  FederationConfig fed;
  REQUIRE_NOTHROW(fed.validate());
  fed.rounds = -1;
  REQUIRE_THROWS_AS(fed.validate(), ConfigError);
  fed = FederationConfig{};
  fed.participation_rate = 0.0;
  REQUIRE_THROWS_AS(fed.validate(), ConfigError);
  fed = FederationConfig{};
  fed.tau = 0.0;
  REQUIRE_THROWS_AS(fed.validate(), ConfigError);
}

TEST_CASE("a round updates only the sampled participants' store entries") {
  RoundFixture fx(51, Strategy::FedPisa);
  CostLedger ledger;
  WireCapture capture;
  const RoundRecord rec =
      run_round(fx.server, fx.clients, fx.world, fx.schedule, fx.adapter,
                fx.fed, fx.cost, fx.seed, ledger, 1, &capture);

  REQUIRE(rec.round == 1);
  REQUIRE(rec.participants.size() == 2);
  REQUIRE(fx.server.personalized_store.size() == 2);
  for (int id : rec.participants) {
    REQUIRE(fx.server.personalized_store.count(id) == 1);
  }
  REQUIRE(rec.metrics.size() == 4);
  REQUIRE(rec.alpha.size() == 1);
  REQUIRE(rec.alpha[0].weights.rows() == 2);
  REQUIRE(rec.timbre_reports.size() == 2);
  REQUIRE(rec.style_reports.size() == 2);

  // Wire traffic: one download and one upload per participant, and the
  // ledger prices exactly those parameter counts.
  REQUIRE(capture.downloads.size() == 2);
  REQUIRE(capture.uploads.size() == 2);
  REQUIRE(ledger.entries().size() == 4);
  const std::int64_t per_adapter = 2 * 3 + 3 * 2;  // rank 2, d 3
  REQUIRE(ledger.total_params() == 4 * per_adapter);
  REQUIRE(ledger.total_params(Direction::Upload) == 2 * per_adapter);
}

TEST_CASE("a solo participant has all its attention mass within cluster") {
  RoundFixture fx(52, Strategy::FedPisa);
  fx.fed.participation_rate = 0.25;  // one of four clients
  CostLedger ledger;
  const RoundRecord rec =
      run_round(fx.server, fx.clients, fx.world, fx.schedule, fx.adapter,
                fx.fed, fx.cost, fx.seed, ledger);
  REQUIRE(rec.participants.size() == 1);
  REQUIRE(rec.within_cluster_alpha_mass == 1.0);
}

TEST_CASE("local-only keeps each upload verbatim in the store") {
  RoundFixture fx(53, Strategy::LocalOnly);
  CostLedger ledger;
  const RoundRecord rec =
      run_round(fx.server, fx.clients, fx.world, fx.schedule, fx.adapter,
                fx.fed, fx.cost, fx.seed, ledger);
  REQUIRE(rec.alpha.empty());
  for (int id : rec.participants) {
    REQUIRE(hash_sites(fx.server.personalized_store.at(id)) ==
            hash_sites(fx.clients[static_cast<std::size_t>(id)].style_sites));
  }
  // The mailbox still pays for both directions.
  REQUIRE(ledger.entries().size() == 2 * rec.participants.size());
}

TEST_CASE("fedavg hands every participant the same aggregate") {
  RoundFixture fx(54, Strategy::FedAvg);
  CostLedger ledger;
  const RoundRecord rec =
      run_round(fx.server, fx.clients, fx.world, fx.schedule, fx.adapter,
                fx.fed, fx.cost, fx.seed, ledger);
  REQUIRE(rec.participants.size() == 2);
  const auto h0 =
      hash_sites(fx.server.personalized_store.at(rec.participants[0]));
  const auto h1 =
      hash_sites(fx.server.personalized_store.at(rec.participants[1]));
  REQUIRE(h0 == h1);
  REQUIRE(rec.alpha.empty());
}

TEST_CASE("without a style adapter nothing crosses the network") {
  RoundFixture fx(55, Strategy::NoStyleLora);
  CostLedger ledger;
  WireCapture capture;
  const auto global_before = hash_sites(fx.server.global_init);
  const RoundRecord rec =
      run_round(fx.server, fx.clients, fx.world, fx.schedule, fx.adapter,
                fx.fed, fx.cost, fx.seed, ledger, 1, &capture);
  REQUIRE(ledger.entries().empty());
  REQUIRE(capture.uploads.empty());
  REQUIRE(capture.downloads.empty());
  REQUIRE(fx.server.personalized_store.empty());
  REQUIRE(hash_sites(fx.server.global_init) == global_before);
  // Identity still trains.
  for (const auto& rep : rec.timbre_reports) {
    REQUIRE(rep.id_hash_before != rep.id_hash_after);
  }
  for (int id : rec.participants) {
    REQUIRE(hash_sites(fx.clients[static_cast<std::size_t>(id)].style_sites) ==
            global_before);
  }
}

TEST_CASE("without an identity adapter the timbre phase never runs") {
  RoundFixture fx(56, Strategy::NoIdLora);
  CostLedger ledger;
  const RoundRecord rec =
      run_round(fx.server, fx.clients, fx.world, fx.schedule, fx.adapter,
                fx.fed, fx.cost, fx.seed, ledger);
  for (const auto& rep : rec.timbre_reports) {
    REQUIRE(rep.steps_run == 0);
    REQUIRE(rep.id_hash_before == rep.id_hash_after);
  }
  // Style is still trained and federated with attention.
  REQUIRE(!rec.alpha.empty());
  REQUIRE(!ledger.entries().empty());
  for (int id : rec.participants) {
    REQUIRE(!fx.clients[static_cast<std::size_t>(id)].has_trained_id);
  }
}

TEST_CASE("thread counts do not change a round's outcome") {
  RoundFixture one(57, Strategy::FedPisa);
  RoundFixture many(57, Strategy::FedPisa);
  one.fed.participation_rate = 1.0;
  many.fed.participation_rate = 1.0;
  CostLedger ledger_one, ledger_many;
  const RoundRecord a = run_round(one.server, one.clients, one.world,
                                  one.schedule, one.adapter, one.fed, one.cost,
                                  one.seed, ledger_one, 1);
  const RoundRecord b = run_round(many.server, many.clients, many.world,
                                  many.schedule, many.adapter, many.fed,
                                  many.cost, many.seed, ledger_many, 4);
  REQUIRE(a.participants == b.participants);
  for (int id : a.participants) {
    REQUIRE(hash_sites(one.server.personalized_store.at(id)) ==
            hash_sites(many.server.personalized_store.at(id)));
    REQUIRE(a.metrics.at(id).expressive_test_mse ==
            b.metrics.at(id).expressive_test_mse);
  }
  REQUIRE(a.alpha[0].weights == b.alpha[0].weights);
}
