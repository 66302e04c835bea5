// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

#include "xmcde/metrics.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include <spdlog/spdlog.h>

#include "xmcde/parallel.h"

namespace xmcde {

namespace {

constexpr Eigen::Index kQueryChunk = 512;

void check_k(std::size_t k) {
  if (k < 1) throw ConfigError("metric cutoff k must be >= 1");
}

void check_shape(const PredictionSet& preds, const SparseBinaryMatrix& truth) {
  if (preds.num_queries() != truth.rows()) {
    throw ConfigError("predictions cover " + std::to_string(preds.num_queries()) + " queries, truth " +
                      std::to_string(truth.rows()));
  }
}

std::size_t hits(const PredictionSet& preds, const SparseBinaryMatrix& truth, std::size_t i, std::size_t k) {
  const auto& ranked = preds.labels[i];
  const std::size_t n = std::min(k, ranked.size());
  std::size_t h = 0;
  for (std::size_t r = 0; r < n; ++r) h += truth.contains(i, ranked[r]) ? 1 : 0;
  return h;
}

void warn_skipped(const char* metric, std::size_t skipped) {
  if (skipped > 0) spdlog::warn("{}: skipped {} quer(ies) with no positives", metric, skipped);
}

}  // namespace

std::vector<std::int32_t> top_k_indices(std::span<const double> scores, std::size_t k) {
  std::vector<std::int32_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, idx.size());
  const auto better = [&](std::int32_t a, std::int32_t b) {
    const double sa = scores[static_cast<std::size_t>(a)];
    const double sb = scores[static_cast<std::size_t>(b)];
    return sa > sb || (sa == sb && a < b);
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
  idx.resize(k);
  return idx;
}

PredictionSet rank_scores(const Matrix& scores, std::size_t depth) {
  PredictionSet preds;
  preds.depth = std::min<std::size_t>(depth, static_cast<std::size_t>(scores.cols()));
  preds.labels.resize(static_cast<std::size_t>(scores.rows()));
  preds.scores.resize(static_cast<std::size_t>(scores.rows()));
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    const std::span<const double> row(scores.row(i).data(), static_cast<std::size_t>(scores.cols()));
    auto& lab = preds.labels[static_cast<std::size_t>(i)];
    lab = top_k_indices(row, preds.depth);
    auto& sc = preds.scores[static_cast<std::size_t>(i)];
    sc.reserve(lab.size());
    for (auto j : lab) sc.push_back(row[static_cast<std::size_t>(j)]);
  }
  return preds;
}

PredictionSet predict(const ModelParams& params, const Corpus& corpus, std::size_t depth,
                      bool use_classifier) {
  EmbeddingBlock lab;
  if (!use_classifier) lab = encode(params, corpus.labels);
  const auto nq = static_cast<Eigen::Index>(corpus.num_queries());
  const Eigen::Index chunks = (nq + kQueryChunk - 1) / kQueryChunk;
  std::vector<PredictionSet> parts(static_cast<std::size_t>(chunks));
  parallel_for(static_cast<std::size_t>(chunks), [&](std::size_t c) {
    const Eigen::Index begin = static_cast<Eigen::Index>(c) * kQueryChunk;
    const Eigen::Index end = std::min(nq, begin + kQueryChunk);
    const std::span<const TextRecord> qs(corpus.queries.data() + begin, static_cast<std::size_t>(end - begin));
    const EmbeddingBlock q = encode(params, qs);
    const ScoreBlock s = use_classifier ? classifier_scores(params, q) : score(q, lab, params.temperature);
    parts[c] = rank_scores(s.scores, depth);
  });
  PredictionSet preds;
  preds.depth = std::min<std::size_t>(depth, use_classifier && params.classifier_w
                                                 ? static_cast<std::size_t>(params.classifier_w->rows())
                                                 : corpus.num_labels());
  for (auto& p : parts) {
    for (auto& l : p.labels) preds.labels.push_back(std::move(l));
    for (auto& s : p.scores) preds.scores.push_back(std::move(s));
  }
  return preds;
}

PropensityModel PropensityModel::fit(const SparseBinaryMatrix& train_relevance, double a, double b) {
  PropensityModel model;
  model.a = a;
  model.b = b;
  const double n = static_cast<double>(train_relevance.rows());
  if (n < 1.0) throw DataError("propensity model needs at least one train query");
  const double c = (std::log(n) - 1.0) * std::pow(b + 1.0, a);
  const auto counts = train_relevance.column_counts();
  model.propensity.reserve(counts.size());
  for (auto nl : counts) {
    const double p = 1.0 / (1.0 + c * std::exp(-a * std::log(static_cast<double>(nl) + b)));
    // Very small train sets give C < 0; clamp into (0, 1].
    model.propensity.push_back(std::min(1.0, p));
  }
  return model;
}

PropensityModel PropensityModel::uniform(std::size_t num_labels) {
  PropensityModel model;
  model.propensity.assign(num_labels, 1.0);
  return model;
}

double precision_at_k(const PredictionSet& preds, const SparseBinaryMatrix& truth, std::size_t k) {
  check_k(k);
  check_shape(preds, truth);
  if (truth.rows() == 0) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < truth.rows(); ++i) {
    total += static_cast<double>(hits(preds, truth, i, k)) / static_cast<double>(k);
  }
  return total / static_cast<double>(truth.rows());
}

double recall_at_k(const PredictionSet& preds, const SparseBinaryMatrix& truth, std::size_t k) {
  check_k(k);
  check_shape(preds, truth);
  double total = 0.0;
  std::size_t counted = 0, skipped = 0;
  for (std::size_t i = 0; i < truth.rows(); ++i) {
    const auto npos = truth.row(i).size();
    if (npos == 0) {
      ++skipped;
      continue;
    }
    total += static_cast<double>(hits(preds, truth, i, k)) / static_cast<double>(npos);
    ++counted;
  }
  warn_skipped("recall", skipped);
  return counted ? total / static_cast<double>(counted) : 0.0;
}

double ndcg_at_k(const PredictionSet& preds, const SparseBinaryMatrix& truth, std::size_t k) {
  check_k(k);
  check_shape(preds, truth);
  double total = 0.0;
  std::size_t counted = 0, skipped = 0;
  for (std::size_t i = 0; i < truth.rows(); ++i) {
    const auto npos = truth.row(i).size();
    if (npos == 0) {
      ++skipped;
      continue;
    }
    const auto& ranked = preds.labels[i];
    double dcg = 0.0, ideal = 0.0;
    for (std::size_t r = 0; r < std::min(k, ranked.size()); ++r) {
      if (truth.contains(i, ranked[r])) dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
    }
    for (std::size_t r = 0; r < std::min(k, npos); ++r) ideal += 1.0 / std::log2(static_cast<double>(r) + 2.0);
    total += dcg / ideal;
    ++counted;
  }
  warn_skipped("ndcg", skipped);
  return counted ? total / static_cast<double>(counted) : 0.0;
}

double psp_at_k(const PredictionSet& preds, const SparseBinaryMatrix& truth,
                const PropensityModel& propensity, std::size_t k) {
  check_k(k);
  check_shape(preds, truth);
  if (propensity.propensity.size() < static_cast<std::size_t>(truth.cols())) {
    throw ConfigError("psp: no propensity for " +
                      std::to_string(static_cast<std::size_t>(truth.cols()) - propensity.propensity.size()) +
                      " label(s)");
  }
  const auto inv = [&](std::int32_t l) { return 1.0 / propensity.propensity[static_cast<std::size_t>(l)]; };
  double total = 0.0;
  std::size_t counted = 0, skipped = 0;
  std::vector<double> best;
  for (std::size_t i = 0; i < truth.rows(); ++i) {
    const auto pos = truth.row(i);
    if (pos.empty()) {
      ++skipped;
      continue;
    }
    double got = 0.0;
    const auto& ranked = preds.labels[i];
    for (std::size_t r = 0; r < std::min(k, ranked.size()); ++r) {
      if (truth.contains(i, ranked[r])) got += inv(ranked[r]);
    }
    best.clear();
    for (auto l : pos) best.push_back(inv(l));
    const std::size_t n = std::min(k, best.size());
    std::partial_sort(best.begin(), best.begin() + static_cast<std::ptrdiff_t>(n), best.end(),
                      std::greater<>());
    const double ideal = std::accumulate(best.begin(), best.begin() + static_cast<std::ptrdiff_t>(n), 0.0);
    total += got / ideal;
    ++counted;
  }
  warn_skipped("psp", skipped);
  return counted ? total / static_cast<double>(counted) : 0.0;
}

}  // namespace xmcde
