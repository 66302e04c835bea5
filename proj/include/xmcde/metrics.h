// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "xmcde/corpus.h"
#include "xmcde/encoder.h"

namespace xmcde {

// Indices of the k largest scores, best first. Among equal scores the lower
// index ranks higher.
std::vector<std::int32_t> top_k_indices(std::span<const double> scores, std::size_t k);

// Top-K labels per query, best first.
struct PredictionSet {
  std::vector<std::vector<std::int32_t>> labels;
  std::vector<std::vector<double>> scores;
  std::size_t depth = 0;

  std::size_t num_queries() const { return labels.size(); }
};

// Ranks a dense score matrix (queries x labels).
PredictionSet rank_scores(const Matrix& scores, std::size_t depth);

// Scores every corpus label for every query with the dual encoder (or the
// classifier head) and keeps the top `depth`.
PredictionSet predict(const ModelParams& params, const Corpus& corpus, std::size_t depth,
                      bool use_classifier = false);

// Inverse-sigmoid frequency model of label propensities:
// p_l = 1 / (1 + C (N_l + B)^-A) with C = (ln N - 1)(B + 1)^A, where N_l is
// the label's train frequency and N the number of train queries.
struct PropensityModel {
  double a = 0.55;
  double b = 1.5;
  std::vector<double> propensity;

  static PropensityModel fit(const SparseBinaryMatrix& train_relevance, double a = 0.55, double b = 1.5);
  static PropensityModel uniform(std::size_t num_labels);
};

// Mean over queries of |top-k intersect P_i| / k.
double precision_at_k(const PredictionSet& preds, const SparseBinaryMatrix& truth, std::size_t k);

// Mean over queries with a non-empty P_i of |top-k intersect P_i| / |P_i|.
double recall_at_k(const PredictionSet& preds, const SparseBinaryMatrix& truth, std::size_t k);

// Binary-gain DCG@k over the ideal DCG@k, log2(rank + 1) discount. Queries
// with an empty P_i are skipped.
double ndcg_at_k(const PredictionSet& preds, const SparseBinaryMatrix& truth, std::size_t k);

// Propensity-scored precision, normalized per query by the best attainable
// value at k. Queries with an empty P_i are skipped.
double psp_at_k(const PredictionSet& preds, const SparseBinaryMatrix& truth,
                const PropensityModel& propensity, std::size_t k);

}  // namespace xmcde
