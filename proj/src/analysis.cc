// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

#include "xmcde/analysis.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "xmcde/parallel.h"

namespace xmcde {

namespace {

constexpr Eigen::Index kRowChunk = 512;
constexpr double kInf = std::numeric_limits<double>::infinity();

Matrix all_scores(const ModelParams& params, const Corpus& corpus) {
  const EmbeddingBlock q = encode(params, corpus.queries);
  const EmbeddingBlock l = encode(params, corpus.labels);
  return score(q, l, params.temperature).scores;
}

}  // namespace

GradTraceRecorder::GradTraceRecorder(std::vector<std::int32_t> watched) {
  for (auto l : watched) traces_[l];
}

void GradTraceRecorder::record(const StepInfo& info) {
  const auto& labels = info.grads->labels;
  const auto& grad = info.grads->scores.grad_scores;
  const double batch = static_cast<double>(labels.batch_size());
  for (std::size_t i = 0; i < labels.batch_size(); ++i) {
    for (int j : labels.positives[i]) {
      const auto label = info.pool->pool_label_ids[static_cast<std::size_t>(j)];
      auto it = traces_.find(label);
      if (it == traces_.end()) continue;
      it->second.push_back({info.step, info.batch[i], -batch * grad(static_cast<Eigen::Index>(i), j)});
    }
  }
}

ScoreHistogram score_distributions(const ModelParams& params, const Corpus& corpus, int bins) {
  if (corpus.num_queries() == 0) throw DataError("score distributions need at least one query");
  if (bins < 1) throw ConfigError("histogram needs at least one bin");
  const Matrix s = all_scores(params, corpus);
  const double lo = s.minCoeff();
  double hi = s.maxCoeff();
  if (hi <= lo) hi = lo + 1.0;
  ScoreHistogram h;
  h.edges.resize(static_cast<std::size_t>(bins) + 1);
  for (int b = 0; b <= bins; ++b) h.edges[static_cast<std::size_t>(b)] = lo + (hi - lo) * b / bins;
  h.positive.assign(static_cast<std::size_t>(bins), 0);
  h.negative.assign(static_cast<std::size_t>(bins), 0);
  double sum_pos = 0.0, sum_neg = 0.0;
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
      const double v = s(i, j);
      auto b = static_cast<int>((v - lo) / (hi - lo) * bins);
      b = std::clamp(b, 0, bins - 1);
      if (corpus.relevance.contains(static_cast<std::size_t>(i), static_cast<std::int32_t>(j))) {
        ++h.positive[static_cast<std::size_t>(b)];
        sum_pos += v;
      } else {
        ++h.negative[static_cast<std::size_t>(b)];
        sum_neg += v;
      }
    }
  }
  const auto npos = static_cast<double>(corpus.relevance.nnz());
  const double nneg = static_cast<double>(s.size()) - npos;
  h.mean_positive = npos > 0 ? sum_pos / npos : 0.0;
  h.mean_negative = nneg > 0 ? sum_neg / nneg : 0.0;
  return h;
}

std::vector<PrPoint> pr_curve(const Matrix& scores, const SparseBinaryMatrix& truth,
                              std::span<const double> thresholds) {
  if (static_cast<std::size_t>(scores.rows()) != truth.rows() || scores.cols() != truth.cols()) {
    throw ConfigError("pr_curve: score matrix does not match the relevance matrix");
  }
  std::vector<double> pos, neg;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    for (Eigen::Index j = 0; j < scores.cols(); ++j) {
      (truth.contains(static_cast<std::size_t>(i), static_cast<std::int32_t>(j)) ? pos : neg).push_back(scores(i, j));
    }
  }
  std::sort(pos.begin(), pos.end());
  std::sort(neg.begin(), neg.end());
  const auto at_least = [](const std::vector<double>& v, double t) {
    return static_cast<double>(v.end() - std::lower_bound(v.begin(), v.end(), t));
  };
  std::vector<PrPoint> out;
  for (double t : thresholds) {
    const double tp = at_least(pos, t), fp = at_least(neg, t);
    const double positives = static_cast<double>(pos.size());
    PrPoint p;
    p.threshold = t;
    p.precision = tp + fp > 0 ? tp / (tp + fp) : 1.0;
    p.recall = positives > 0 ? tp / positives : 0.0;
    out.push_back(p);
  }
  return out;
}

std::vector<PrPoint> pr_curve(const ModelParams& params, const Corpus& corpus, std::span<const double> thresholds) {
  return pr_curve(all_scores(params, corpus), corpus.relevance, thresholds);
}

std::vector<double> default_thresholds(const Matrix& scores, int count) {
  std::vector<double> t{-kInf};
  if (scores.size() > 0 && count > 0) {
    const double lo = scores.minCoeff(), hi = scores.maxCoeff();
    for (int c = 0; c < count; ++c) {
      t.push_back(count == 1 ? lo : lo + (hi - lo) * c / (count - 1));
    }
  }
  t.push_back(kInf);
  return t;
}

std::vector<std::vector<std::int32_t>> frequency_buckets(std::span<const std::int64_t> frequencies, int buckets) {
  if (buckets < 1) throw ConfigError("need at least one bucket");
  std::vector<std::int32_t> order(frequencies.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::int32_t a, std::int32_t b) {
    return frequencies[static_cast<std::size_t>(a)] > frequencies[static_cast<std::size_t>(b)];
  });
  std::vector<std::vector<std::int32_t>> out(static_cast<std::size_t>(buckets));
  const std::size_t n = order.size(), nb = static_cast<std::size_t>(buckets);
  std::size_t at = 0;
  for (std::size_t b = 0; b < nb; ++b) {
    const std::size_t size = n / nb + (b < n % nb ? 1 : 0);
    out[b].assign(order.begin() + static_cast<std::ptrdiff_t>(at), order.begin() + static_cast<std::ptrdiff_t>(at + size));
    at += size;
  }
  return out;
}

BucketReport bucket_contributions(const PredictionSet& preds, const SparseBinaryMatrix& truth,
                                  std::vector<std::vector<std::int32_t>> buckets, std::size_t k) {
  if (k < 1) throw ConfigError("metric cutoff k must be >= 1");
  if (preds.num_queries() != truth.rows()) throw ConfigError("predictions do not match the relevance matrix");
  std::vector<int> bucket_of(static_cast<std::size_t>(truth.cols()), -1);
  for (std::size_t b = 0; b < buckets.size(); ++b) {
    for (auto l : buckets[b]) bucket_of.at(static_cast<std::size_t>(l)) = static_cast<int>(b);
  }
  BucketReport report;
  report.contribution.assign(buckets.size(), 0.0);
  const double denom = static_cast<double>(k) * static_cast<double>(std::max<std::size_t>(truth.rows(), 1));
  for (std::size_t i = 0; i < truth.rows(); ++i) {
    const auto& ranked = preds.labels[i];
    for (std::size_t r = 0; r < std::min(k, ranked.size()); ++r) {
      if (!truth.contains(i, ranked[r])) continue;
      const int b = bucket_of[static_cast<std::size_t>(ranked[r])];
      if (b >= 0) report.contribution[static_cast<std::size_t>(b)] += 1.0;
    }
  }
  for (auto& c : report.contribution) c /= denom;
  report.total = precision_at_k(preds, truth, k);
  report.buckets = std::move(buckets);
  return report;
}

BucketReport decile_report(const PredictionSet& preds, const SparseBinaryMatrix& truth,
                           std::span<const std::int64_t> train_frequencies, std::size_t k) {
  if (train_frequencies.size() != static_cast<std::size_t>(truth.cols())) {
    throw ConfigError("train frequencies do not cover every label");
  }
  return bucket_contributions(preds, truth, frequency_buckets(train_frequencies, 10), k);
}

SimilarityBins label_similarity_bins(const ModelParams& params, const Corpus& corpus, const PredictionSet& preds,
                                     std::span<const std::int64_t> train_frequencies, int bins, int neighbors,
                                     std::optional<std::int64_t> tail_max, std::size_t k) {
  if (bins < 1) throw ConfigError("need at least one similarity bin");
  if (neighbors < 1) throw ConfigError("need at least one neighbor");
  if (train_frequencies.size() != corpus.num_labels()) throw ConfigError("train frequencies do not cover every label");
  Matrix emb = encode(params, corpus.labels).rows;
  for (Eigen::Index r = 0; r < emb.rows(); ++r) {
    const double n = emb.row(r).norm();
    if (n > 0.0) emb.row(r) /= n;
  }
  const auto nl = emb.rows();
  SimilarityBins out;
  out.mean_neighbor_similarity.assign(static_cast<std::size_t>(nl), std::numeric_limits<double>::quiet_NaN());
  const Eigen::Index chunks = (nl + kRowChunk - 1) / kRowChunk;
  parallel_for(static_cast<std::size_t>(chunks), [&](std::size_t c) {
    const Eigen::Index begin = static_cast<Eigen::Index>(c) * kRowChunk;
    const Eigen::Index end = std::min(nl, begin + kRowChunk);
    Matrix sim;
    sim.noalias() = emb.middleRows(begin, end - begin) * emb.transpose();
    for (Eigen::Index r = 0; r < sim.rows(); ++r) {
      const Eigen::Index self = begin + r;
      sim(r, self) = -kInf;
      const auto top = top_k_indices(std::span<const double>(sim.row(r).data(), static_cast<std::size_t>(nl)),
                                     static_cast<std::size_t>(std::min<Eigen::Index>(neighbors, nl - 1)));
      double sum = 0.0;
      for (auto j : top) sum += sim(r, j);
      out.mean_neighbor_similarity[static_cast<std::size_t>(self)] = top.empty() ? 0.0 : sum / static_cast<double>(top.size());
    }
  });

  std::vector<std::int32_t> order;
  for (std::int32_t l = 0; l < static_cast<std::int32_t>(nl); ++l) {
    if (!tail_max || train_frequencies[static_cast<std::size_t>(l)] <= *tail_max) order.push_back(l);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::int32_t a, std::int32_t b) {
    return out.mean_neighbor_similarity[static_cast<std::size_t>(a)] <
           out.mean_neighbor_similarity[static_cast<std::size_t>(b)];
  });
  std::vector<std::vector<std::int32_t>> groups(static_cast<std::size_t>(bins));
  const std::size_t n = order.size(), nb = static_cast<std::size_t>(bins);
  std::size_t at = 0;
  for (std::size_t b = 0; b < nb; ++b) {
    const std::size_t size = n / nb + (b < n % nb ? 1 : 0);
    groups[b].assign(order.begin() + static_cast<std::ptrdiff_t>(at), order.begin() + static_cast<std::ptrdiff_t>(at + size));
    at += size;
  }
  for (std::int32_t l = 0; l < static_cast<std::int32_t>(nl); ++l) {
    if (tail_max && train_frequencies[static_cast<std::size_t>(l)] > *tail_max) {
      out.mean_neighbor_similarity[static_cast<std::size_t>(l)] = std::numeric_limits<double>::quiet_NaN();
    }
  }
  out.report = bucket_contributions(preds, corpus.relevance, std::move(groups), k);
  return out;
}

}  // namespace xmcde
