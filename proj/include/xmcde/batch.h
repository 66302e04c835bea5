// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <vector>

#include "xmcde/common.h"

namespace xmcde {

// Positive (and optionally negative) label sets of a batch, as column indices
// into the label pool the batch's scores were computed against.
struct BatchLabels {
  int pool_size = 0;
  // Per query, strictly increasing pool indices of its positives.
  std::vector<std::vector<int>> positives;
  // Per query, the explicit negative set D^- used by the InfoNCE loss.
  // nullopt means every pool label.
  std::optional<std::vector<std::vector<int>>> negatives;

  std::size_t batch_size() const { return positives.size(); }

  // Throws ConfigError on out-of-range or unsorted indices.
  void validate() const;
};

// Restricts `labels` to pool columns [begin, end), re-indexed from 0.
BatchLabels slice_labels(const BatchLabels& labels, int begin, int end);

// Loss value and its gradient with respect to the score matrix. Chain through
// score_backward() (see embedding_grads()) for embedding gradients.
struct LossGrad {
  double loss = 0.0;
  Matrix grad_scores;  // B x m
  // Per-entry softmax-style weights, materialized on request. For positives
  // this is the sigma of the loss's gradient formula; for negatives the
  // coefficient multiplying the query embedding.
  std::optional<Matrix> sigma;
  int degenerate_rows = 0;
  int saturated_rows = 0;
};

// Result of a loss evaluated over G column shards of the pool.
struct ShardedLossGrad {
  double loss = 0.0;
  std::vector<Matrix> grad_scores;  // one B x m_g block per shard
  std::vector<Matrix> sigma;        // empty unless requested
  int degenerate_rows = 0;
  int saturated_rows = 0;
};

// Concatenates shard blocks back into a single-pool LossGrad.
LossGrad merge_shards(ShardedLossGrad&& sharded);

}  // namespace xmcde
