// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

#include "xmcde/losses.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

namespace xmcde {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_indices(const std::vector<int>& idx, int pool, const char* what) {
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= pool) {
      throw ConfigError(std::string(what) + " index " + std::to_string(idx[k]) + " outside pool of " +
                        std::to_string(pool));
    }
    if (k > 0 && idx[k] <= idx[k - 1]) throw ConfigError(std::string(what) + " indices must be strictly increasing");
  }
}

std::vector<int> slice_indices(const std::vector<int>& idx, int begin, int end) {
  std::vector<int> out;
  for (int v : idx) {
    if (v >= begin && v < end) out.push_back(v - begin);
  }
  return out;
}

double softplus(double a) { return std::max(a, 0.0) + std::log1p(std::exp(-std::abs(a))); }

double sigmoid(double a) {
  if (a >= 0.0) return 1.0 / (1.0 + std::exp(-a));
  const double e = std::exp(a);
  return e / (1.0 + e);
}

// Shared shape checks; returns the batch size.
Eigen::Index check_shards(std::span<const Matrix> slices, std::span<const BatchLabels> labels) {
  if (slices.empty() || slices.size() != labels.size()) {
    throw ConfigError("loss: need one label block per score shard");
  }
  const Eigen::Index rows = slices.front().rows();
  for (std::size_t g = 0; g < slices.size(); ++g) {
    if (slices[g].rows() != rows) throw ConfigError("loss: shards disagree on batch size");
    if (labels[g].batch_size() != static_cast<std::size_t>(rows)) {
      throw ConfigError("loss: labels do not match the batch size");
    }
    if (labels[g].pool_size != slices[g].cols()) throw ConfigError("loss: labels do not match the pool size");
    if (!slices[g].allFinite()) throw NumericalError("loss: non-finite scores");
  }
  return rows;
}

// Global positive count per row; throws when a row has none.
Vector positive_counts(std::span<const BatchLabels> labels, Eigen::Index rows, Collective& comm,
                       const char* loss_name, bool require) {
  std::vector<Vector> part(labels.size());
  for (std::size_t g = 0; g < labels.size(); ++g) {
    part[g].resize(rows);
    for (Eigen::Index i = 0; i < rows; ++i) {
      part[g][i] = static_cast<double>(labels[g].positives[static_cast<std::size_t>(i)].size());
    }
  }
  Vector counts = comm.all_reduce(part, ReduceOp::sum);
  if (require) {
    for (Eigen::Index i = 0; i < rows; ++i) {
      if (counts[i] == 0.0) {
        throw DataError(std::string(loss_name) + ": empty positive set for batch row " + std::to_string(i));
      }
    }
  }
  return counts;
}

// Row mask of the positives of row i in a shard.
void mark(std::vector<char>& mask, const std::vector<int>& idx) {
  for (int j : idx) mask[static_cast<std::size_t>(j)] = 1;
}

double row_logsumexp(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  if (row.size() == 0) return kNegInf;
  const double hi = row.maxCoeff();
  return hi + std::log((row.array() - hi).exp().sum());
}

}  // namespace

void BatchLabels::validate() const {
  for (const auto& p : positives) check_indices(p, pool_size, "positive");
  if (negatives) {
    if (negatives->size() != positives.size()) throw ConfigError("negative sets do not match the batch size");
    for (const auto& n : *negatives) check_indices(n, pool_size, "negative");
  }
}

BatchLabels slice_labels(const BatchLabels& labels, int begin, int end) {
  BatchLabels out;
  out.pool_size = end - begin;
  out.positives.reserve(labels.positives.size());
  for (const auto& p : labels.positives) out.positives.push_back(slice_indices(p, begin, end));
  if (labels.negatives) {
    out.negatives.emplace();
    for (const auto& n : *labels.negatives) out.negatives->push_back(slice_indices(n, begin, end));
  }
  return out;
}

LossGrad merge_shards(ShardedLossGrad&& sharded) {
  LossGrad out;
  out.loss = sharded.loss;
  out.degenerate_rows = sharded.degenerate_rows;
  out.saturated_rows = sharded.saturated_rows;
  const auto concat = [](std::vector<Matrix>& blocks) {
    if (blocks.size() == 1) return std::move(blocks.front());
    Eigen::Index cols = 0;
    for (const auto& b : blocks) cols += b.cols();
    Matrix m(blocks.front().rows(), cols);
    Eigen::Index at = 0;
    for (const auto& b : blocks) {
      m.middleCols(at, b.cols()) = b;
      at += b.cols();
    }
    return m;
  };
  out.grad_scores = concat(sharded.grad_scores);
  if (!sharded.sigma.empty()) out.sigma = concat(sharded.sigma);
  return out;
}

LossKind parse_loss_kind(std::string_view name) {
  if (name == "bce") return LossKind::bce;
  if (name == "softmax") return LossKind::softmax;
  if (name == "infonce") return LossKind::infonce;
  if (name == "decoupled") return LossKind::decoupled;
  if (name == "softtopk") return LossKind::softtopk;
  throw ConfigError("unknown loss '" + std::string(name) +
                    "' (expected one of: bce | softmax | infonce | decoupled | softtopk)");
}

std::string_view to_string(LossKind kind) {
  switch (kind) {
    case LossKind::bce: return "bce";
    case LossKind::softmax: return "softmax";
    case LossKind::infonce: return "infonce";
    case LossKind::decoupled: return "decoupled";
    case LossKind::softtopk: return "softtopk";
  }
  return "?";
}

ShardedLossGrad bce_ova_sharded(std::span<const Matrix> slices, std::span<const BatchLabels> labels,
                                Collective& comm, bool want_sigma) {
  const Eigen::Index rows = check_shards(slices, labels);
  const double batch = static_cast<double>(rows);
  ShardedLossGrad out;
  std::vector<double> part_loss(slices.size(), 0.0);
  for (std::size_t g = 0; g < slices.size(); ++g) {
    const Matrix& s = slices[g];
    Matrix grad(rows, s.cols());
    Matrix sig;
    if (want_sigma) sig.resize(rows, s.cols());
    std::vector<char> pos(static_cast<std::size_t>(s.cols()));
    for (Eigen::Index i = 0; i < rows; ++i) {
      std::fill(pos.begin(), pos.end(), 0);
      mark(pos, labels[g].positives[static_cast<std::size_t>(i)]);
      for (Eigen::Index j = 0; j < s.cols(); ++j) {
        const double x = s(i, j);
        const bool y = pos[static_cast<std::size_t>(j)] != 0;
        part_loss[g] += y ? softplus(-x) : softplus(x);
        const double p = sigmoid(x);
        grad(i, j) = (p - (y ? 1.0 : 0.0)) / batch;
        if (want_sigma) sig(i, j) = p;
      }
    }
    out.grad_scores.push_back(std::move(grad));
    if (want_sigma) out.sigma.push_back(std::move(sig));
  }
  out.loss = comm.all_reduce_scalar(part_loss, ReduceOp::sum) / batch;
  return out;
}

ShardedLossGrad softmax_ce_sharded(std::span<const Matrix> slices, std::span<const BatchLabels> labels,
                                   Collective& comm, bool want_sigma) {
  const Eigen::Index rows = check_shards(slices, labels);
  const double batch = static_cast<double>(rows);
  const Vector npos = positive_counts(labels, rows, comm, "softmax_ce", true);

  std::vector<Vector> part_lse(slices.size());
  for (std::size_t g = 0; g < slices.size(); ++g) {
    part_lse[g].resize(rows);
    for (Eigen::Index i = 0; i < rows; ++i) part_lse[g][i] = row_logsumexp(slices[g].row(i));
  }
  const Vector lse = comm.all_reduce(part_lse, ReduceOp::logsumexp);

  ShardedLossGrad out;
  std::vector<double> part_loss(slices.size(), 0.0);
  for (std::size_t g = 0; g < slices.size(); ++g) {
    const Matrix& s = slices[g];
    Matrix sig(rows, s.cols());
    for (Eigen::Index i = 0; i < rows; ++i) sig.row(i) = (s.row(i).array() - lse[i]).exp();
    Matrix grad(rows, s.cols());
    for (Eigen::Index i = 0; i < rows; ++i) {
      grad.row(i) = sig.row(i) * npos[i];
      for (int j : labels[g].positives[static_cast<std::size_t>(i)]) {
        part_loss[g] += lse[i] - s(i, j);
        grad(i, j) -= 1.0;
      }
    }
    grad /= batch;
    out.grad_scores.push_back(std::move(grad));
    if (want_sigma) out.sigma.push_back(std::move(sig));
  }
  out.loss = comm.all_reduce_scalar(part_loss, ReduceOp::sum) / batch;
  return out;
}

ShardedLossGrad decoupled_softmax_sharded(std::span<const Matrix> slices,
                                          std::span<const BatchLabels> labels, Collective& comm,
                                          bool want_sigma) {
  const Eigen::Index rows = check_shards(slices, labels);
  const double batch = static_cast<double>(rows);
  positive_counts(labels, rows, comm, "decoupled_softmax", true);

  // Phase 1: log of the per-query negative mass sum_{k not in P_i} e^{s_ik}.
  std::vector<Vector> part_neg(slices.size());
  for (std::size_t g = 0; g < slices.size(); ++g) {
    const Matrix& s = slices[g];
    part_neg[g].resize(rows);
    std::vector<char> pos(static_cast<std::size_t>(s.cols()));
    for (Eigen::Index i = 0; i < rows; ++i) {
      std::fill(pos.begin(), pos.end(), 0);
      mark(pos, labels[g].positives[static_cast<std::size_t>(i)]);
      double hi = kNegInf;
      for (Eigen::Index j = 0; j < s.cols(); ++j) {
        if (!pos[static_cast<std::size_t>(j)]) hi = std::max(hi, s(i, j));
      }
      double acc = 0.0;
      if (hi > kNegInf) {
        for (Eigen::Index j = 0; j < s.cols(); ++j) {
          if (!pos[static_cast<std::size_t>(j)]) acc += std::exp(s(i, j) - hi);
        }
      }
      part_neg[g][i] = hi > kNegInf ? hi + std::log(acc) : kNegInf;
    }
  }
  const Vector log_neg = comm.all_reduce(part_neg, ReduceOp::logsumexp);

  // Phase 2: per-positive terms, and log sum_{j in P_i} 1 / (e^{s_ij} + N_i)
  // which scales every negative's gradient.
  std::vector<Vector> part_inv(slices.size());
  std::vector<double> part_loss(slices.size(), 0.0);
  std::vector<Matrix> log_denom(slices.size());
  for (std::size_t g = 0; g < slices.size(); ++g) {
    const Matrix& s = slices[g];
    part_inv[g] = Vector::Constant(rows, kNegInf);
    log_denom[g] = Matrix::Constant(rows, s.cols(), kNegInf);
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (int j : labels[g].positives[static_cast<std::size_t>(i)]) {
        const double la = log_add_exp(s(i, j), log_neg[i]);
        log_denom[g](i, j) = la;
        part_loss[g] += la - s(i, j);
        part_inv[g][i] = log_add_exp(part_inv[g][i], -la);
      }
    }
  }
  const Vector log_inv = comm.all_reduce(part_inv, ReduceOp::logsumexp);

  ShardedLossGrad out;
  for (Eigen::Index i = 0; i < rows; ++i) {
    if (log_neg[i] == kNegInf) ++out.degenerate_rows;
  }
  for (std::size_t g = 0; g < slices.size(); ++g) {
    const Matrix& s = slices[g];
    Matrix grad(rows, s.cols());
    Matrix sig;
    if (want_sigma) sig.resize(rows, s.cols());
    std::vector<char> pos(static_cast<std::size_t>(s.cols()));
    for (Eigen::Index i = 0; i < rows; ++i) {
      std::fill(pos.begin(), pos.end(), 0);
      mark(pos, labels[g].positives[static_cast<std::size_t>(i)]);
      for (Eigen::Index j = 0; j < s.cols(); ++j) {
        if (pos[static_cast<std::size_t>(j)]) {
          // d/ds_ij = sigma_ij - 1 = -N_i / (e^{s_ij} + N_i).
          grad(i, j) = -std::exp(log_neg[i] - log_denom[g](i, j)) / batch;
          if (want_sigma) sig(i, j) = std::exp(s(i, j) - log_denom[g](i, j));
        } else {
          const double coef = std::exp(s(i, j) + log_inv[i]);
          grad(i, j) = coef / batch;
          if (want_sigma) sig(i, j) = coef;
        }
      }
    }
    out.grad_scores.push_back(std::move(grad));
    if (want_sigma) out.sigma.push_back(std::move(sig));
  }
  out.loss = comm.all_reduce_scalar(part_loss, ReduceOp::sum) / batch;
  return out;
}

ShardedLossGrad infonce_sharded(std::span<const Matrix> slices, std::span<const BatchLabels> labels,
                                Collective& comm, bool want_sigma) {
  const Eigen::Index rows = check_shards(slices, labels);
  const double batch = static_cast<double>(rows);
  const Vector npos = positive_counts(labels, rows, comm, "infonce", false);

  // Per shard and row, membership of D^-.
  const auto negative_mask = [&](std::size_t g, Eigen::Index i, std::vector<char>& mask) {
    if (!labels[g].negatives) {
      std::fill(mask.begin(), mask.end(), 1);
      return;
    }
    std::fill(mask.begin(), mask.end(), 0);
    mark(mask, (*labels[g].negatives)[static_cast<std::size_t>(i)]);
  };

  std::vector<Vector> part_neg(slices.size()), part_size(slices.size());
  for (std::size_t g = 0; g < slices.size(); ++g) {
    const Matrix& s = slices[g];
    part_neg[g] = Vector::Constant(rows, kNegInf);
    part_size[g] = Vector::Zero(rows);
    std::vector<char> neg(static_cast<std::size_t>(s.cols()));
    for (Eigen::Index i = 0; i < rows; ++i) {
      negative_mask(g, i, neg);
      double hi = kNegInf;
      double count = 0.0;
      for (Eigen::Index j = 0; j < s.cols(); ++j) {
        if (neg[static_cast<std::size_t>(j)]) {
          hi = std::max(hi, s(i, j));
          count += 1.0;
        }
      }
      if (count > 0.0) {
        double acc = 0.0;
        for (Eigen::Index j = 0; j < s.cols(); ++j) {
          if (neg[static_cast<std::size_t>(j)]) acc += std::exp(s(i, j) - hi);
        }
        part_neg[g][i] = hi + std::log(acc);
      }
      part_size[g][i] = count;
    }
  }
  const Vector log_neg = comm.all_reduce(part_neg, ReduceOp::logsumexp);
  const Vector neg_size = comm.all_reduce(part_size, ReduceOp::sum);

  std::vector<Vector> part_inv(slices.size());
  std::vector<double> part_loss(slices.size(), 0.0);
  std::vector<Matrix> log_denom(slices.size());
  for (std::size_t g = 0; g < slices.size(); ++g) {
    const Matrix& s = slices[g];
    part_inv[g] = Vector::Constant(rows, kNegInf);
    log_denom[g] = Matrix::Constant(rows, s.cols(), kNegInf);
    std::vector<char> neg(static_cast<std::size_t>(s.cols()));
    for (Eigen::Index i = 0; i < rows; ++i) {
      negative_mask(g, i, neg);
      for (int j : labels[g].positives[static_cast<std::size_t>(i)]) {
        // With j in D^-, e^{s_ij} + sum_{D^- \ j} is exactly the D^- mass.
        const double ld = neg[static_cast<std::size_t>(j)] ? log_neg[i] : log_add_exp(s(i, j), log_neg[i]);
        log_denom[g](i, j) = ld;
        part_loss[g] += ld - s(i, j);
        part_inv[g][i] = log_add_exp(part_inv[g][i], -ld);
      }
    }
  }
  const Vector log_inv = comm.all_reduce(part_inv, ReduceOp::logsumexp);

  ShardedLossGrad out;
  for (Eigen::Index i = 0; i < rows; ++i) {
    if (neg_size[i] == 0.0 && npos[i] > 1.0) ++out.degenerate_rows;
  }
  if (out.degenerate_rows > 0) {
    spdlog::warn("infonce: {} row(s) with several positives and an empty negative set (loss 0)",
                 out.degenerate_rows);
  }
  for (std::size_t g = 0; g < slices.size(); ++g) {
    const Matrix& s = slices[g];
    Matrix grad = Matrix::Zero(rows, s.cols());
    Matrix sig;
    if (want_sigma) sig = Matrix::Zero(rows, s.cols());
    std::vector<char> pos(static_cast<std::size_t>(s.cols())), neg(static_cast<std::size_t>(s.cols()));
    for (Eigen::Index i = 0; i < rows; ++i) {
      std::fill(pos.begin(), pos.end(), 0);
      mark(pos, labels[g].positives[static_cast<std::size_t>(i)]);
      negative_mask(g, i, neg);
      for (Eigen::Index j = 0; j < s.cols(); ++j) {
        const bool p = pos[static_cast<std::size_t>(j)] != 0;
        const bool n = neg[static_cast<std::size_t>(j)] != 0;
        double d = 0.0;
        if (n) d += std::exp(s(i, j) + log_inv[i]);
        if (p && !n) d += std::exp(s(i, j) - log_denom[g](i, j));
        if (p) d -= 1.0;
        grad(i, j) = d / batch;
        if (want_sigma) {
          if (p) {
            sig(i, j) = std::exp(s(i, j) - log_denom[g](i, j));
          } else if (n) {
            sig(i, j) = std::exp(s(i, j) + log_inv[i]);
          }
        }
      }
    }
    out.grad_scores.push_back(std::move(grad));
    if (want_sigma) out.sigma.push_back(std::move(sig));
  }
  out.loss = comm.all_reduce_scalar(part_loss, ReduceOp::sum) / batch;
  return out;
}

ShardedLossGrad sharded_loss(LossKind kind, std::span<const Matrix> slices,
                             std::span<const BatchLabels> labels, Collective& comm,
                             const LossOptions& options) {
  switch (kind) {
    case LossKind::bce: return bce_ova_sharded(slices, labels, comm, options.want_sigma);
    case LossKind::softmax: return softmax_ce_sharded(slices, labels, comm, options.want_sigma);
    case LossKind::infonce: return infonce_sharded(slices, labels, comm, options.want_sigma);
    case LossKind::decoupled: return decoupled_softmax_sharded(slices, labels, comm, options.want_sigma);
    case LossKind::softtopk:
      return soft_topk_loss_sharded(slices, labels, options.topk, comm, options.want_sigma);
  }
  throw ConfigError("unknown loss kind");
}

namespace {

LossGrad single_shard(LossKind kind, const ScoreBlock& scores, const BatchLabels& labels,
                      const LossOptions& options) {
  labels.validate();
  Collective local(1);
  return merge_shards(sharded_loss(kind, std::span<const Matrix>(&scores.scores, 1),
                                   std::span<const BatchLabels>(&labels, 1), local, options));
}

}  // namespace

LossGrad bce_ova(const ScoreBlock& scores, const BatchLabels& labels, bool want_sigma) {
  return single_shard(LossKind::bce, scores, labels, {.topk = {}, .want_sigma = want_sigma});
}

LossGrad softmax_ce(const ScoreBlock& scores, const BatchLabels& labels, bool want_sigma) {
  return single_shard(LossKind::softmax, scores, labels, {.topk = {}, .want_sigma = want_sigma});
}

LossGrad infonce(const ScoreBlock& scores, const BatchLabels& labels, bool want_sigma) {
  return single_shard(LossKind::infonce, scores, labels, {.topk = {}, .want_sigma = want_sigma});
}

LossGrad decoupled_softmax(const ScoreBlock& scores, const BatchLabels& labels, bool want_sigma) {
  return single_shard(LossKind::decoupled, scores, labels, {.topk = {}, .want_sigma = want_sigma});
}

LossGrad compute_loss(LossKind kind, const ScoreBlock& scores, const BatchLabels& labels,
                      const LossOptions& options) {
  return single_shard(kind, scores, labels, options);
}

ScoreGrads embedding_grads(const LossGrad& grad, const EmbeddingBlock& q, const EmbeddingBlock& l,
                           double temperature) {
  return score_backward(grad.grad_scores, q.rows, l.rows, temperature);
}

}  // namespace xmcde
