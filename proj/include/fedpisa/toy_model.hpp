// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <vector>

#include "fedpisa/error.hpp"
#include "fedpisa/lora.hpp"
#include "fedpisa/matrix.hpp"

namespace fedpisa {

/// Frozen base weights; both adapters perturb this single linear site.
struct Backbone {
  Matrix w0;  // d_out x d_in, never mutated after construction
};

/// One training batch. style is the cluster id for expressive data and
/// nullopt for neutral data; every sample in a batch shares it.
struct Batch {
  Matrix inputs;   // batch_size x d_in
  Matrix targets;  // batch_size x d_out
  std::optional<int> style;

  long size() const { return inputs.rows(); }
};

/// Sum of the injected deltas over all adapter sites.
inline Matrix total_delta(std::span<const LoraAdapter> sites, int d_out,
                          int d_in) {
  Matrix delta = Matrix::Zero(d_out, d_in);
  for (const auto& ad : sites) delta += merge_delta(ad);
  return delta;
}

/// y = x * (w0 + delta_id + delta_style)^T.
inline Matrix forward(const Backbone& backbone,
                      std::span<const LoraAdapter> id_sites,
                      std::span<const LoraAdapter> style_sites,
                      const Matrix& x) {
  const int d_out = static_cast<int>(backbone.w0.rows());
  const int d_in = static_cast<int>(backbone.w0.cols());
  if (x.cols() != d_in) {
    throw ShapeError("forward: input width does not match backbone d_in");
  }
  Matrix w = backbone.w0;
  for (const auto& ad : id_sites) {
    if (ad.d_out() != d_out || ad.d_in() != d_in) {
      throw ShapeError("forward: id adapter shape mismatch");
    }
    w += merge_delta(ad);
  }
  for (const auto& ad : style_sites) {
    if (ad.d_out() != d_out || ad.d_in() != d_in) {
      throw ShapeError("forward: style adapter shape mismatch");
    }
    w += merge_delta(ad);
  }
  return x * w.transpose();
}

inline Matrix forward(const Backbone& backbone, const LoraAdapter& id_adapter,
                      const LoraAdapter& style_adapter, const Matrix& x) {
  return forward(backbone, std::span<const LoraAdapter>(&id_adapter, 1),
                 std::span<const LoraAdapter>(&style_adapter, 1), x);
}

/// (1 / 2N) * sum of squared residuals; batch-size invariant in expectation.
inline double mse_loss(const Matrix& pred, const Matrix& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw ShapeError("mse_loss: shape mismatch");
  }
  const double n = static_cast<double>(pred.rows());
  return (pred - target).squaredNorm() / (2.0 * n);
}

struct AdapterGrad {
  Matrix d_a;  // rank x d_in
  Matrix d_b;  // d_out x rank
};

/// Gradient of the loss w.r.t. the merged delta:
/// G = (1/N) * residual^T * inputs, a d_out x d_in matrix.
inline Matrix delta_gradient(const Backbone& backbone,
                             std::span<const LoraAdapter> id_sites,
                             std::span<const LoraAdapter> style_sites,
                             const Batch& batch) {
  if (batch.inputs.rows() != batch.targets.rows()) {
    throw ShapeError("delta_gradient: inputs/targets row mismatch");
  }
  const Matrix pred = forward(backbone, id_sites, style_sites, batch.inputs);
  if (pred.cols() != batch.targets.cols()) {
    throw ShapeError("delta_gradient: target width mismatch");
  }
  const Matrix residual = pred - batch.targets;
  const double n = static_cast<double>(batch.size());
  return (residual.transpose() * batch.inputs) / n;
}

/// Closed-form gradients for the selected role only. The other role's
/// adapters contribute through the residual but receive no gradient, which
/// is the gradient-blocking contract of the two training phases.
inline std::vector<AdapterGrad> grad_adapter(
    const Backbone& backbone, std::span<const LoraAdapter> id_sites,
    std::span<const LoraAdapter> style_sites, const Batch& batch,
    AdapterRole which) {
  const Matrix g = delta_gradient(backbone, id_sites, style_sites, batch);
  const auto sites = (which == AdapterRole::Identity) ? id_sites : style_sites;
  std::vector<AdapterGrad> out;
  out.reserve(sites.size());
  for (const auto& ad : sites) {
    const double s = ad.scale();
    out.push_back({s * ad.b.transpose() * g, s * g * ad.a.transpose()});
  }
  return out;
}

inline AdapterGrad grad_adapter(const Backbone& backbone,
                                const LoraAdapter& id_adapter,
                                const LoraAdapter& style_adapter,
                                const Batch& batch, AdapterRole which) {
  auto grads =
      grad_adapter(backbone, std::span<const LoraAdapter>(&id_adapter, 1),
                   std::span<const LoraAdapter>(&style_adapter, 1), batch,
                   which);
  return grads.front();
}

}  // namespace fedpisa
