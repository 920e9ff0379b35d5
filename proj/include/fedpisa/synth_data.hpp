// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fedpisa/error.hpp"
#include "fedpisa/lora.hpp"
#include "fedpisa/matrix.hpp"
#include "fedpisa/rng.hpp"
#include "fedpisa/toy_model.hpp"

namespace fedpisa {

struct SampleCounts {
  int neutral_train = 128;
  int neutral_val = 32;
  int neutral_test = 32;
  int expressive_train = 128;
  int expressive_val = 32;
  int expressive_test = 32;
};

struct WorldSpec {
  int num_clients = 12;
  int num_style_clusters = 3;
  int d_in = 8;
  int d_out = 8;
  double sigma_id = 0.5;
  double sigma_style = 1.0;
  double sigma_noise = 0.05;
  SampleCounts samples;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_style_clusters < 1) {
      throw ConfigError("world: num_style_clusters must be >= 1");
    }
    if (num_clients < num_style_clusters) {
      throw ConfigError("world: num_clients must be >= num_style_clusters");
    }
    if (d_in < 1 || d_out < 1) {
      throw ConfigError("world: dimensions must be >= 1");
    }
    if (sigma_id < 0.0 || sigma_style < 0.0 || sigma_noise < 0.0) {
      throw ConfigError("world: sigmas must be nonnegative");
    }
    const int counts[] = {samples.neutral_train,    samples.neutral_val,
                          samples.neutral_test,     samples.expressive_train,
                          samples.expressive_val,   samples.expressive_test};
    for (int c : counts) {
      if (c < 0) throw ConfigError("world: sample counts must be nonnegative");
    }
  }
};

/// A client's six data splits. Expressive batches carry the client's style
/// cluster id; neutral batches carry no label.
struct ClientData {
  Batch neutral_train, neutral_val, neutral_test;
  Batch expressive_train, expressive_val, expressive_test;
};

/// Ground truth: neutral targets y = (w0 + D_i) x + eps and expressive
/// targets y = (w0 + D_i + S_c(i)) x + eps. Immutable after generation.
struct World {
  WorldSpec spec;
  Backbone backbone;
  std::vector<Matrix> id_truth;     // per client, d_out x d_in
  std::vector<Matrix> style_truth;  // per cluster, d_out x d_in
  std::vector<int> assignment;      // client -> cluster
  std::vector<ClientData> data;
};

struct MetricsRecord {
  double neutral_test_mse = 0.0;
  double expressive_test_mse = 0.0;
  double identity_error = 0.0;
  double style_error = 0.0;
};

namespace detail {

inline Matrix gaussian_matrix(int rows, int cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      m(r, c) = stddev * rng.gaussian();
    }
  }
  return m;
}

inline Batch make_split(const Matrix& weights, int count, int d_in,
                        double sigma_noise, std::optional<int> style,
                        Rng& rng) {
  Batch batch;
  batch.style = style;
  batch.inputs = gaussian_matrix(count, d_in, 1.0, rng);
  batch.targets = batch.inputs * weights.transpose();
  if (sigma_noise > 0.0) {
    batch.targets += gaussian_matrix(count, static_cast<int>(weights.rows()),
                                     sigma_noise, rng);
  }
  return batch;
}

}  // namespace detail

inline World generate_world(const WorldSpec& spec) {
  spec.validate();
  World world;
  world.spec = spec;

  Rng backbone_rng(derive_seed(spec.seed, "backbone"));
  world.backbone.w0 = detail::gaussian_matrix(
      spec.d_out, spec.d_in, 1.0 / std::sqrt(static_cast<double>(spec.d_in)),
      backbone_rng);

  world.style_truth.reserve(spec.num_style_clusters);
  for (int c = 0; c < spec.num_style_clusters; ++c) {
    Rng rng(derive_seed(spec.seed, "style", static_cast<std::uint64_t>(c)));
    world.style_truth.push_back(
        detail::gaussian_matrix(spec.d_out, spec.d_in, spec.sigma_style, rng));
  }

  world.id_truth.reserve(spec.num_clients);
  world.assignment.reserve(spec.num_clients);
  world.data.reserve(spec.num_clients);
  for (int i = 0; i < spec.num_clients; ++i) {
    // Round-robin assignment guarantees every cluster gets >= 1 client.
    const int cluster = i % spec.num_style_clusters;
    world.assignment.push_back(cluster);

    Rng id_rng(derive_seed(spec.seed, "id", static_cast<std::uint64_t>(i)));
    world.id_truth.push_back(
        detail::gaussian_matrix(spec.d_out, spec.d_in, spec.sigma_id, id_rng));

    const Matrix neutral_w = world.backbone.w0 + world.id_truth.back();
    const Matrix expressive_w = neutral_w + world.style_truth[cluster];

    Rng data_rng(derive_seed(spec.seed, "data", static_cast<std::uint64_t>(i)));
    ClientData cd;
    cd.neutral_train =
        detail::make_split(neutral_w, spec.samples.neutral_train, spec.d_in,
                           spec.sigma_noise, std::nullopt, data_rng);
    cd.neutral_val =
        detail::make_split(neutral_w, spec.samples.neutral_val, spec.d_in,
                           spec.sigma_noise, std::nullopt, data_rng);
    cd.neutral_test =
        detail::make_split(neutral_w, spec.samples.neutral_test, spec.d_in,
                           spec.sigma_noise, std::nullopt, data_rng);
    cd.expressive_train =
        detail::make_split(expressive_w, spec.samples.expressive_train,
                           spec.d_in, spec.sigma_noise, cluster, data_rng);
    cd.expressive_val =
        detail::make_split(expressive_w, spec.samples.expressive_val, spec.d_in,
                           spec.sigma_noise, cluster, data_rng);
    cd.expressive_test =
        detail::make_split(expressive_w, spec.samples.expressive_test,
                           spec.d_in, spec.sigma_noise, cluster, data_rng);
    world.data.push_back(std::move(cd));
  }
  return world;
}

/// Test-split MSEs plus parameter-space recovery errors in Frobenius norm.
/// Neutral speech is rendered with the identity adapter alone; expressive
/// speech with the full identity + style stack, matching how the targets
/// were generated.
inline MetricsRecord evaluate_client(const World& world, int client_id,
                                     std::span<const LoraAdapter> id_sites,
                                     std::span<const LoraAdapter> style_sites) {
  if (client_id < 0 || client_id >= world.spec.num_clients) {
    throw DataError("evaluate_client: unknown client id");
  }
  const ClientData& cd = world.data[client_id];
  MetricsRecord rec;
  if (cd.neutral_test.size() > 0) {
    rec.neutral_test_mse =
        mse_loss(forward(world.backbone, id_sites, {}, cd.neutral_test.inputs),
                 cd.neutral_test.targets);
  }
  if (cd.expressive_test.size() > 0) {
    rec.expressive_test_mse =
        mse_loss(forward(world.backbone, id_sites, style_sites,
                         cd.expressive_test.inputs),
                 cd.expressive_test.targets);
  }
  const Matrix id_delta =
      total_delta(id_sites, world.spec.d_out, world.spec.d_in);
  const Matrix style_delta =
      total_delta(style_sites, world.spec.d_out, world.spec.d_in);
  rec.identity_error = (id_delta - world.id_truth[client_id]).norm();
  rec.style_error =
      (style_delta - world.style_truth[world.assignment[client_id]]).norm();
  return rec;
}

inline MetricsRecord evaluate_client(const World& world, int client_id,
                                     const LoraAdapter& id_adapter,
                                     const LoraAdapter& style_adapter) {
  return evaluate_client(world, client_id,
                         std::span<const LoraAdapter>(&id_adapter, 1),
                         std::span<const LoraAdapter>(&style_adapter, 1));
}

}  // namespace fedpisa
