// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

#include "xmcde/negatives.h"

#include <algorithm>
#include <charconv>
#include <numeric>
#include <string>
#include <unordered_map>

#include <spdlog/spdlog.h>

#include "xmcde/metrics.h"
#include "xmcde/parallel.h"

namespace xmcde {

namespace {

constexpr Eigen::Index kQueryChunk = 256;

int parse_count(std::string_view spec, std::string_view text) {
  int value = -1;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size() || value < 0) {
    throw ConfigError("bad count in negatives spec '" + std::string(spec) + "'");
  }
  return value;
}

void check_batch(std::span<const std::int64_t> batch, const Corpus& corpus) {
  if (batch.empty()) throw ConfigError("empty batch");
  for (auto q : batch) {
    if (q < 0 || static_cast<std::size_t>(q) >= corpus.num_queries()) {
      throw ConfigError("batch query " + std::to_string(q) + " out of range");
    }
  }
}

std::vector<std::int32_t> sorted_unique(std::vector<std::int32_t> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

// Pool minus the query's positives, for every batch query.
std::vector<std::vector<std::int32_t>> pool_minus_positives(const std::vector<std::int32_t>& pool,
                                                            std::span<const std::int64_t> batch,
                                                            const Corpus& corpus) {
  std::vector<std::vector<std::int32_t>> out(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto pos = corpus.relevance.row(static_cast<std::size_t>(batch[i]));
    std::set_difference(pool.begin(), pool.end(), pos.begin(), pos.end(), std::back_inserter(out[i]));
  }
  return out;
}

std::vector<std::int32_t> batch_positives(std::span<const std::int64_t> batch, const Corpus& corpus) {
  std::vector<std::int32_t> pool;
  for (auto q : batch) {
    const auto pos = corpus.relevance.row(static_cast<std::size_t>(q));
    pool.insert(pool.end(), pos.begin(), pos.end());
  }
  return sorted_unique(std::move(pool));
}

}  // namespace

NegativeConfig parse_negatives(std::string_view spec) {
  NegativeConfig config;
  const auto colon = spec.find(':');
  const std::string_view head = spec.substr(0, colon);
  const std::string_view arg = colon == std::string_view::npos ? std::string_view{} : spec.substr(colon + 1);
  if (head == "all" || head == "inbatch") {
    if (colon != std::string_view::npos) throw ConfigError("negatives '" + std::string(head) + "' takes no count");
    config.strategy = head == "all" ? NegativeStrategy::all : NegativeStrategy::inbatch;
  } else if (head == "ance") {
    config.strategy = NegativeStrategy::ance;
    config.ance_m = parse_count(spec, arg);
  } else if (head == "embcache") {
    config.strategy = NegativeStrategy::embcache;
    config.cache_k = parse_count(spec, arg);
  } else {
    throw ConfigError("unknown negatives '" + std::string(spec) +
                      "' (expected one of: all | inbatch | ance:M | embcache:K)");
  }
  return config;
}

std::string to_string(const NegativeConfig& config) {
  switch (config.strategy) {
    case NegativeStrategy::all: return "all";
    case NegativeStrategy::inbatch: return "inbatch";
    case NegativeStrategy::ance: return "ance:" + std::to_string(config.ance_m);
    case NegativeStrategy::embcache: return "embcache:" + std::to_string(config.cache_k);
  }
  return "?";
}

NegativeSet build_full_pool(const Corpus& corpus) {
  NegativeSet set;
  set.pool_label_ids.resize(corpus.num_labels());
  std::iota(set.pool_label_ids.begin(), set.pool_label_ids.end(), 0);
  set.strategy = NegativeStrategy::all;
  return set;
}

NegativeSet build_inbatch_pool(std::span<const std::int64_t> batch, const Corpus& corpus) {
  check_batch(batch, corpus);
  NegativeSet set;
  set.strategy = NegativeStrategy::inbatch;
  set.pool_label_ids = batch_positives(batch, corpus);
  set.per_query_negatives = pool_minus_positives(set.pool_label_ids, batch, corpus);
  return set;
}

BatchLabels batch_labels(const NegativeSet& set, std::span<const std::int64_t> batch, const Corpus& corpus) {
  check_batch(batch, corpus);
  const auto& pool = set.pool_label_ids;
  const auto index_of = [&](std::int32_t label) -> int {
    const auto it = std::lower_bound(pool.begin(), pool.end(), label);
    if (it == pool.end() || *it != label) return -1;
    return static_cast<int>(it - pool.begin());
  };
  BatchLabels out;
  out.pool_size = static_cast<int>(pool.size());
  out.positives.resize(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    for (auto l : corpus.relevance.row(static_cast<std::size_t>(batch[i]))) {
      const int j = index_of(l);
      if (j < 0) {
        throw DataError("label " + std::to_string(l) + " of query " + std::to_string(batch[i]) +
                        " missing from the batch pool");
      }
      out.positives[i].push_back(j);
    }
  }
  if (set.per_query_negatives) {
    if (set.per_query_negatives->size() != batch.size()) throw ConfigError("negative sets do not match the batch");
    out.negatives.emplace(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      for (auto l : (*set.per_query_negatives)[i]) {
        const int j = index_of(l);
        if (j < 0) throw ConfigError("negative label " + std::to_string(l) + " missing from the batch pool");
        (*out.negatives)[i].push_back(j);
      }
    }
  }
  return out;
}

std::vector<std::vector<std::int32_t>> refresh_shortlist(const ModelParams& params, const Corpus& corpus,
                                                         int size, ScorerKind scorer) {
  if (size < 1) throw ConfigError("shortlist size must be >= 1");
  const bool use_classifier = scorer == ScorerKind::classifier;
  EmbeddingBlock lab;
  if (!use_classifier) lab = encode(params, corpus.labels);
  const auto nq = static_cast<Eigen::Index>(corpus.num_queries());
  std::vector<std::vector<std::int32_t>> lists(corpus.num_queries());
  const Eigen::Index chunks = (nq + kQueryChunk - 1) / kQueryChunk;
  parallel_for(static_cast<std::size_t>(chunks), [&](std::size_t c) {
    const Eigen::Index begin = static_cast<Eigen::Index>(c) * kQueryChunk;
    const Eigen::Index end = std::min(nq, begin + kQueryChunk);
    const std::span<const TextRecord> qs(corpus.queries.data() + begin, static_cast<std::size_t>(end - begin));
    const EmbeddingBlock q = encode(params, qs);
    const ScoreBlock s = use_classifier ? classifier_scores(params, q) : score(q, lab, params.temperature);
    for (Eigen::Index r = 0; r < s.scores.rows(); ++r) {
      const auto qi = static_cast<std::size_t>(begin + r);
      const auto pos = corpus.relevance.row(qi);
      const std::span<const double> row(s.scores.row(r).data(), static_cast<std::size_t>(s.scores.cols()));
      auto top = top_k_indices(row, static_cast<std::size_t>(size) + pos.size());
      auto& out = lists[qi];
      for (auto l : top) {
        if (out.size() == static_cast<std::size_t>(size)) break;
        if (!std::binary_search(pos.begin(), pos.end(), l)) out.push_back(l);
      }
    }
  });
  return lists;
}

NegativeSet sample_ance_pool(std::span<const std::int64_t> batch, const Corpus& corpus,
                             const std::vector<std::vector<std::int32_t>>& shortlists, int m, Rng& rng) {
  check_batch(batch, corpus);
  if (m < 0) throw ConfigError("ance: m must be >= 0");
  if (shortlists.size() != corpus.num_queries()) throw ConfigError("ance: shortlists do not cover the corpus");
  NegativeSet set;
  set.strategy = NegativeStrategy::ance;
  std::vector<std::int32_t> pool = batch_positives(batch, corpus);
  std::vector<std::int32_t> draw;
  for (auto q : batch) {
    draw = shortlists[static_cast<std::size_t>(q)];
    const auto take = std::min<std::size_t>(static_cast<std::size_t>(m), draw.size());
    if (take < static_cast<std::size_t>(m)) {
      spdlog::warn("ance: shortlist of query {} has {} label(s), fewer than m={}", q, draw.size(), m);
    }
    // Partial Fisher-Yates: the first `take` entries become the sample.
    for (std::size_t i = 0; i < take; ++i) {
      std::swap(draw[i], draw[i + rng.uniform_below(draw.size() - i)]);
    }
    pool.insert(pool.end(), draw.begin(), draw.begin() + static_cast<std::ptrdiff_t>(take));
  }
  set.pool_label_ids = sorted_unique(std::move(pool));
  set.per_query_negatives = pool_minus_positives(set.pool_label_ids, batch, corpus);
  return set;
}

LabelEmbeddingCache init_label_cache(const ModelParams& params, const Corpus& corpus, std::int64_t step) {
  LabelEmbeddingCache cache;
  cache.cache = encode(params, corpus.labels).rows;
  cache.staleness.assign(corpus.num_labels(), step);
  return cache;
}

Vector cache_gradient_magnitudes(const LabelEmbeddingCache& cache, const Corpus& corpus,
                                 std::span<const std::int64_t> batch, const EmbeddingBlock& batch_queries,
                                 double temperature, LossKind loss, const LossOptions& options) {
  check_batch(batch, corpus);
  if (batch_queries.rows.rows() != static_cast<Eigen::Index>(batch.size())) {
    throw ConfigError("cache mining: query embeddings do not match the batch");
  }
  ScoreBlock s;
  s.scores.noalias() = batch_queries.rows * cache.cache.transpose();
  s.scores /= temperature;
  s.scale_applied = true;
  s.temperature = temperature;
  NegativeSet full = build_full_pool(corpus);
  // Same D^- convention as the training pools: everything but the query's
  // own positives.
  full.per_query_negatives = pool_minus_positives(full.pool_label_ids, batch, corpus);
  const LossGrad g = compute_loss(loss, s, batch_labels(full, batch, corpus), options);
  // d loss / d l_j = sum_i dS_ij q_i / tau; bound its norm per query.
  const Vector qnorm = batch_queries.rows.rowwise().norm();
  return (g.grad_scores.cwiseAbs().transpose() * qnorm) / temperature;
}

NegativeSet mine_cache_negatives(LabelEmbeddingCache& cache, const ModelParams& params,
                                 const Corpus& corpus, std::span<const std::int64_t> batch,
                                 const EmbeddingBlock& batch_queries, const NegativeSet& inbatch,
                                 int k, LossKind loss, const LossOptions& options,
                                 std::int64_t step) {
  if (k < 0) throw ConfigError("embcache: K must be >= 0");
  if (cache.cache.rows() != static_cast<Eigen::Index>(corpus.num_labels())) {
    throw ConfigError("label cache does not cover the corpus");
  }
  std::vector<TextRecord> fresh;
  fresh.reserve(inbatch.pool_label_ids.size());
  for (auto l : inbatch.pool_label_ids) fresh.push_back(corpus.labels[static_cast<std::size_t>(l)]);
  const Matrix rows = encode(params, fresh).rows;
  for (std::size_t r = 0; r < inbatch.pool_label_ids.size(); ++r) {
    const auto l = inbatch.pool_label_ids[r];
    cache.cache.row(l) = rows.row(static_cast<Eigen::Index>(r));
    cache.staleness[static_cast<std::size_t>(l)] = step;
  }

  NegativeSet set;
  set.strategy = NegativeStrategy::embcache;
  std::vector<std::int32_t> pool = inbatch.pool_label_ids;
  if (k > 0) {
    Vector mag = cache_gradient_magnitudes(cache, corpus, batch, batch_queries, params.temperature, loss, options);
    for (auto l : inbatch.pool_label_ids) mag[l] = -1.0;
    const std::size_t room = corpus.num_labels() - inbatch.pool_label_ids.size();
    const auto top = top_k_indices(std::span<const double>(mag.data(), static_cast<std::size_t>(mag.size())),
                                   std::min<std::size_t>(static_cast<std::size_t>(k), room));
    pool.insert(pool.end(), top.begin(), top.end());
  }
  set.pool_label_ids = sorted_unique(std::move(pool));
  set.per_query_negatives = pool_minus_positives(set.pool_label_ids, batch, corpus);
  return set;
}

}  // namespace xmcde
