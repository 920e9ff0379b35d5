// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>

#include "fedpisa/error.hpp"
#include "fedpisa/matrix.hpp"

namespace fedpisa {

struct AdamWState {
  Matrix first_moment;
  Matrix second_moment;
  long step_count = 0;

  AdamWState() = default;
  AdamWState(long rows, long cols)
      : first_moment(Matrix::Zero(rows, cols)),
        second_moment(Matrix::Zero(rows, cols)) {}
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Linear warmup to peak_lr over floor(warmup_ratio * total_steps) steps,
/// then cosine decay to 0 over the remainder.
struct ScheduleConfig {
  double peak_lr = 0.0;
  long total_steps = 0;
  double warmup_ratio = 0.0;

  long warmup_steps() const {
    return static_cast<long>(
        std::floor(warmup_ratio * static_cast<double>(total_steps)));
  }

  void validate() const {
    if (!(peak_lr > 0.0)) throw ConfigError("schedule: peak_lr must be > 0");
    if (total_steps < 1) throw ConfigError("schedule: total_steps must be >= 1");
    if (warmup_ratio < 0.0 || warmup_ratio >= 1.0) {
      throw ConfigError("schedule: warmup_ratio must be in [0, 1)");
    }
  }
};

inline double lr_at(long step, const ScheduleConfig& cfg) {
  if (step < 0 || step >= cfg.total_steps) {
    throw ScheduleError("lr_at: step outside schedule");
  }
  const long warmup = cfg.warmup_steps();
  if (step < warmup) {
    return cfg.peak_lr * static_cast<double>(step) /
           static_cast<double>(warmup);
  }
  const double progress = static_cast<double>(step - warmup) /
                          static_cast<double>(cfg.total_steps - warmup);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

/// One AdamW step with decoupled weight decay:
///   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
///   theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd theta)
inline void adamw_step(Matrix& params, const Matrix& grads, AdamWState& state,
                       double lr, const AdamWConfig& cfg) {
  if (params.rows() != grads.rows() || params.cols() != grads.cols()) {
    throw ShapeError("adamw_step: param/grad shape mismatch");
  }
  if (state.first_moment.size() == 0) {
    state = AdamWState(params.rows(), params.cols());
  }
  if (state.first_moment.rows() != params.rows() ||
      state.first_moment.cols() != params.cols()) {
    throw ShapeError("adamw_step: state shape mismatch");
  }
  state.step_count += 1;
  state.first_moment =
      cfg.beta1 * state.first_moment + (1.0 - cfg.beta1) * grads;
  state.second_moment = cfg.beta2 * state.second_moment +
                        (1.0 - cfg.beta2) * grads.cwiseProduct(grads);
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const Matrix m_hat = state.first_moment / bc1;
  const Matrix v_hat = state.second_moment / bc2;
  const Matrix denom =
      v_hat.cwiseSqrt() +
      Matrix::Constant(params.rows(), params.cols(), cfg.eps);
  params -= lr * (m_hat.cwiseQuotient(denom) + cfg.weight_decay * params);
}

}  // namespace fedpisa
