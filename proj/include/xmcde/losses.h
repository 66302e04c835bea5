// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string_view>

#include "xmcde/batch.h"
#include "xmcde/collective.h"
#include "xmcde/encoder.h"
#include "xmcde/softtopk.h"

namespace xmcde {

enum class LossKind { bce, softmax, infonce, decoupled, softtopk };

// Accepts "bce", "softmax", "infonce", "decoupled", "softtopk".
LossKind parse_loss_kind(std::string_view name);
std::string_view to_string(LossKind kind);

struct LossOptions {
  SoftTopkConfig topk;
  bool want_sigma = false;
};

// All losses are averaged over the queries of the batch and expect scores
// already divided by the temperature.

// One-vs-all binary cross-entropy summed over the pool.
LossGrad bce_ova(const ScoreBlock& scores, const BatchLabels& labels, bool want_sigma = false);

// Softmax cross-entropy over the whole pool, once per positive.
LossGrad softmax_ce(const ScoreBlock& scores, const BatchLabels& labels, bool want_sigma = false);

// Multi-label InfoNCE: the denominator of positive j holds e^{s_j} plus the
// query's negative set D^- without j. D^- comes from labels.negatives
// (the whole pool when absent).
LossGrad infonce(const ScoreBlock& scores, const BatchLabels& labels, bool want_sigma = false);

// Decoupled softmax: the denominator of positive j holds e^{s_j} plus every
// non-positive of the query; the query's other positives are excluded.
LossGrad decoupled_softmax(const ScoreBlock& scores, const BatchLabels& labels,
                           bool want_sigma = false);

LossGrad compute_loss(LossKind kind, const ScoreBlock& scores, const BatchLabels& labels,
                      const LossOptions& options = {});

// Two-phase forms over column shards of the pool. Every shard holds the full
// batch of rows; cross-shard terms (log-sum-exp denominators, positive
// counts, the loss sum) go through `comm`. With one shard these are the
// functions above.
ShardedLossGrad bce_ova_sharded(std::span<const Matrix> slices, std::span<const BatchLabels> labels,
                                Collective& comm, bool want_sigma = false);
ShardedLossGrad softmax_ce_sharded(std::span<const Matrix> slices,
                                   std::span<const BatchLabels> labels, Collective& comm,
                                   bool want_sigma = false);
ShardedLossGrad infonce_sharded(std::span<const Matrix> slices, std::span<const BatchLabels> labels,
                                Collective& comm, bool want_sigma = false);
ShardedLossGrad decoupled_softmax_sharded(std::span<const Matrix> slices,
                                          std::span<const BatchLabels> labels, Collective& comm,
                                          bool want_sigma = false);
ShardedLossGrad sharded_loss(LossKind kind, std::span<const Matrix> slices,
                             std::span<const BatchLabels> labels, Collective& comm,
                             const LossOptions& options = {});

// Gradients with respect to the query and label embeddings that produced
// `scores` (via score()).
ScoreGrads embedding_grads(const LossGrad& grad, const EmbeddingBlock& q, const EmbeddingBlock& l,
                           double temperature);

}  // namespace xmcde
