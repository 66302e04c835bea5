// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xmcde/batch.h"
#include "xmcde/corpus.h"
#include "xmcde/encoder.h"
#include "xmcde/losses.h"
#include "xmcde/rng.h"

namespace xmcde {

enum class NegativeStrategy { all, inbatch, ance, embcache };

struct NegativeConfig {
  NegativeStrategy strategy = NegativeStrategy::all;
  int ance_m = 0;          // negatives sampled per query (ance)
  int cache_k = 0;         // mined labels per batch (embcache)
  int shortlist_size = 100;
  int refresh_steps = 250;
};

// Parses "all", "inbatch", "ance:M" or "embcache:K".
NegativeConfig parse_negatives(std::string_view spec);
std::string to_string(const NegativeConfig& config);

// Label pool of one batch. Label ids are corpus label indices.
struct NegativeSet {
  std::vector<std::int32_t> pool_label_ids;  // sorted, unique
  // Per batch query, its negatives D^- (label ids). nullopt: the whole pool.
  std::optional<std::vector<std::vector<std::int32_t>>> per_query_negatives;
  NegativeStrategy strategy = NegativeStrategy::all;
};

// Every label of the corpus; D^- is the whole pool.
NegativeSet build_full_pool(const Corpus& corpus);

// Union of the batch queries' positives. Each query's D^- is the pool minus
// its own positives.
NegativeSet build_inbatch_pool(std::span<const std::int64_t> batch, const Corpus& corpus);

// Pool indices of each batch query's positives (and negatives) for the loss.
// Throws DataError when a positive is missing from the pool.
BatchLabels batch_labels(const NegativeSet& set, std::span<const std::int64_t> batch,
                         const Corpus& corpus);

enum class ScorerKind { dual_encoder, classifier };

// Per query of `corpus`, the `size` highest-scoring labels with the query's
// positives removed. Exact scoring over every label; ties go to the lower
// label index.
std::vector<std::vector<std::int32_t>> refresh_shortlist(const ModelParams& params, const Corpus& corpus,
                                                         int size,
                                                         ScorerKind scorer = ScorerKind::dual_encoder);

// Hard-negative pool: per query, m labels drawn uniformly without
// replacement from its shortlist, plus every batch positive.
NegativeSet sample_ance_pool(std::span<const std::int64_t> batch, const Corpus& corpus,
                             const std::vector<std::vector<std::int32_t>>& shortlists, int m, Rng& rng);

struct LabelEmbeddingCache {
  Matrix cache;                          // num_labels x dim
  std::vector<std::int64_t> staleness;   // step at which each row was written
};

LabelEmbeddingCache init_label_cache(const ModelParams& params, const Corpus& corpus,
                                     std::int64_t step = 0);

// Refreshes the cache rows of the in-batch labels, then ranks every label
// outside the in-batch pool by the gradient its embedding would receive
// under `loss` over the full cache (sum over batch queries of
// |dS_il| * |q_i| / temperature) and adds the top K to the pool.
NegativeSet mine_cache_negatives(LabelEmbeddingCache& cache, const ModelParams& params,
                                 const Corpus& corpus, std::span<const std::int64_t> batch,
                                 const EmbeddingBlock& batch_queries, const NegativeSet& inbatch,
                                 int k, LossKind loss, const LossOptions& options,
                                 std::int64_t step);

// Per-label gradient magnitudes used by mine_cache_negatives(), over the
// whole cache.
Vector cache_gradient_magnitudes(const LabelEmbeddingCache& cache, const Corpus& corpus,
                                 std::span<const std::int64_t> batch, const EmbeddingBlock& batch_queries,
                                 double temperature, LossKind loss, const LossOptions& options);

}  // namespace xmcde
