// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>

#include "xmcde/batch.h"
#include "xmcde/collective.h"
#include "xmcde/common.h"
#include "xmcde/encoder.h"

namespace xmcde {

// SoftTop-k(x)_i = sigmoid(alpha * (x_i + t_x)) where t_x makes the outputs
// sum to k.
struct SoftTopkConfig {
  int k = 5;
  double alpha = 20.0;
  // Accepted |sum(z) - k|; a non-positive value means 1e-8 * k.
  double tol = 0.0;
  int max_iters = 128;

  double tolerance() const { return tol > 0.0 ? tol : 1e-8 * k; }
};

struct TopkResult {
  Vector z;
  double t = 0.0;
  // d z_i / d (x_i + t), i.e. alpha * z_i * (1 - z_i).
  Vector sigma_prime;
  int iterations = 0;
  double residual = 0.0;
};

// Indicator of the k largest entries; among equal values the lower index
// wins.
Vector hard_topk(std::span<const double> x, int k);

// Threshold t with |sum_i sigmoid(alpha (x_i + t)) - k| <= tol, by bisection
// on [-max(x) - 40/alpha, -min(x) + 40/alpha].
double find_threshold(std::span<const double> x, const SoftTopkConfig& config);

TopkResult soft_topk(std::span<const double> x, const SoftTopkConfig& config);

// u^T J for J = d SoftTop-k / d x, in O(n). When every sigma' underflows to
// zero the result is the zero vector and `*saturated` is set.
Vector soft_topk_vjp(const TopkResult& result, std::span<const double> upstream,
                     bool* saturated = nullptr);

// log SoftTop-k(x), computed as -softplus(-alpha (x_i + t)).
Vector log_soft_topk(std::span<const double> x, const SoftTopkConfig& config);

// Per row i of the batch: loss_i = -(1/m) sum_{j in P_i} log z_ij with
// z_i = SoftTop-k(scores_i); averaged over rows.
LossGrad soft_topk_loss(const ScoreBlock& scores, const BatchLabels& labels,
                        const SoftTopkConfig& config, bool want_sigma = false);

// Row-wise threshold search over column shards of the same rows. Each
// bisection step all-reduces the per-shard partial sums of sigmoid values.
struct ShardedThresholds {
  Vector row_max;      // global max of each row
  Vector centered_t;   // threshold for x - row_max
  int iterations = 0;
  Vector residual;
};
ShardedThresholds find_thresholds_sharded(std::span<const Matrix> slices,
                                          const SoftTopkConfig& config, Collective& comm);

ShardedLossGrad soft_topk_loss_sharded(std::span<const Matrix> slices,
                                       std::span<const BatchLabels> labels,
                                       const SoftTopkConfig& config, Collective& comm,
                                       bool want_sigma = false);

}  // namespace xmcde
