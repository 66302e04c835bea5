// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "xmcde/corpus.h"
#include "xmcde/encoder.h"
#include "xmcde/metrics.h"
#include "xmcde/trainer.h"

namespace xmcde {

// Positive-gradient coefficients of watched labels over training: at every
// step where label l is a positive of batch query i, the scalar c such that
// the loss gradient with respect to s_il is -c / B.
struct GradTracePoint {
  std::int64_t step = 0;
  std::int64_t query = 0;
  double coefficient = 0.0;
};

class GradTraceRecorder {
 public:
  explicit GradTraceRecorder(std::vector<std::int32_t> watched);

  // Suitable as TrainHooks::on_step.
  void record(const StepInfo& info);

  const std::map<std::int32_t, std::vector<GradTracePoint>>& traces() const { return traces_; }

 private:
  std::map<std::int32_t, std::vector<GradTracePoint>> traces_;
};

// Shared-edge histograms of positive and negative pair scores.
struct ScoreHistogram {
  std::vector<double> edges;  // bins + 1 entries
  std::vector<std::int64_t> positive;
  std::vector<std::int64_t> negative;
  double mean_positive = 0.0;
  double mean_negative = 0.0;

  double separation() const { return mean_positive - mean_negative; }
};

// Scores every (query, label) pair of the corpus. Throws DataError when the
// corpus has no queries.
ScoreHistogram score_distributions(const ModelParams& params, const Corpus& corpus, int bins = 50);

struct PrPoint {
  double threshold = 0.0;
  double precision = 0.0;  // 1 when nothing is predicted
  double recall = 0.0;
};

// Predicts every pair with score >= threshold; counts over all pairs.
std::vector<PrPoint> pr_curve(const ModelParams& params, const Corpus& corpus, std::span<const double> thresholds);

// Same over a precomputed score matrix.
std::vector<PrPoint> pr_curve(const Matrix& scores, const SparseBinaryMatrix& truth,
                              std::span<const double> thresholds);

// `count` evenly spaced thresholds over the observed score range, plus
// -inf and +inf.
std::vector<double> default_thresholds(const Matrix& scores, int count = 21);

// Labels ordered by train frequency (most frequent first, ties by lower
// index) and cut into `buckets` groups whose sizes differ by at most one.
std::vector<std::vector<std::int32_t>> frequency_buckets(std::span<const std::int64_t> frequencies, int buckets);

struct BucketReport {
  std::vector<std::vector<std::int32_t>> buckets;
  std::vector<double> contribution;  // share of P@k from each bucket's labels
  double total = 0.0;                // P@k
};

// Deciles by train frequency; decile 1 holds the most frequent labels.
BucketReport decile_report(const PredictionSet& preds, const SparseBinaryMatrix& truth,
                           std::span<const std::int64_t> train_frequencies, std::size_t k = 5);

// P@k contributions of arbitrary label groups.
BucketReport bucket_contributions(const PredictionSet& preds, const SparseBinaryMatrix& truth,
                                  std::vector<std::vector<std::int32_t>> buckets, std::size_t k);

struct SimilarityBins {
  std::vector<double> mean_neighbor_similarity;  // per label; NaN if filtered out
  BucketReport report;                           // bin 1 = most dissimilar
};

// Each label's mean cosine similarity to its `neighbors` nearest other
// labels; labels are then split into `bins` equal groups. With `tail_max`
// only labels with at most that many train examples are binned.
SimilarityBins label_similarity_bins(const ModelParams& params, const Corpus& corpus, const PredictionSet& preds,
                                     std::span<const std::int64_t> train_frequencies, int bins = 3,
                                     int neighbors = 10, std::optional<std::int64_t> tail_max = std::nullopt,
                                     std::size_t k = 5);

}  // namespace xmcde
