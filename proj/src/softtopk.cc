// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

#include "xmcde/softtopk.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

namespace xmcde {

namespace {

// Sigmoid saturates to 0 or 1 in double precision beyond |40|.
constexpr double kSaturation = 40.0;
constexpr double kInf = std::numeric_limits<double>::infinity();

double sigmoid(double a) {
  if (a >= 0.0) return 1.0 / (1.0 + std::exp(-a));
  const double e = std::exp(a);
  return e / (1.0 + e);
}

double softplus(double a) { return std::max(a, 0.0) + std::log1p(std::exp(-std::abs(a))); }

// z (1 - z) for z = sigmoid(a), accurate for large |a|.
double sigmoid_slope(double a) { return std::exp(-softplus(a) - softplus(-a)); }

Matrix row_matrix(std::span<const double> x) {
  Matrix m(1, static_cast<Eigen::Index>(x.size()));
  std::copy(x.begin(), x.end(), m.data());
  return m;
}

void check_config(const SoftTopkConfig& config, Eigen::Index n) {
  if (config.k < 1 || config.k >= n) {
    throw ConfigError("SoftTop-k needs 0 < k < n (k=" + std::to_string(config.k) +
                      ", n=" + std::to_string(n) + ")");
  }
  if (!(config.alpha > 0.0)) throw ConfigError("SoftTop-k alpha must be > 0");
  if (!(config.tolerance() > 0.0)) throw ConfigError("SoftTop-k tol must be > 0");
  if (config.max_iters < 1) throw ConfigError("SoftTop-k max_iters must be >= 1");
}

}  // namespace

Vector hard_topk(std::span<const double> x, int k) {
  const auto n = static_cast<int>(x.size());
  if (k < 1 || k > n) {
    throw ConfigError("hard_topk needs 1 <= k <= n (k=" + std::to_string(k) + ", n=" + std::to_string(n) + ")");
  }
  std::vector<int> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return x[a] > x[b]; });
  Vector out = Vector::Zero(n);
  for (int i = 0; i < k; ++i) out[order[static_cast<std::size_t>(i)]] = 1.0;
  return out;
}

ShardedThresholds find_thresholds_sharded(std::span<const Matrix> slices,
                                          const SoftTopkConfig& config, Collective& comm) {
  if (slices.empty()) throw ConfigError("find_thresholds_sharded: no shards");
  const Eigen::Index rows = slices.front().rows();
  std::vector<Vector> part_max, part_min;
  std::vector<double> widths;
  for (const auto& s : slices) {
    if (s.rows() != rows) throw ConfigError("find_thresholds_sharded: shard row mismatch");
    if (!s.allFinite()) throw NumericalError("SoftTop-k input has non-finite scores");
    Vector mx = Vector::Constant(rows, -kInf), mn = Vector::Constant(rows, kInf);
    if (s.cols() > 0) {
      mx = s.rowwise().maxCoeff();
      mn = s.rowwise().minCoeff();
    }
    part_max.push_back(std::move(mx));
    part_min.push_back(std::move(mn));
    widths.push_back(static_cast<double>(s.cols()));
  }
  const auto n = static_cast<Eigen::Index>(comm.all_reduce_scalar(widths, ReduceOp::sum));
  check_config(config, n);

  ShardedThresholds out;
  out.row_max = comm.all_reduce(part_max, ReduceOp::max);
  const Vector row_min = comm.all_reduce(part_min, ReduceOp::min);
  const double margin = kSaturation / config.alpha;
  const double k = config.k;
  const double tol = config.tolerance();

  // Bisection in centered coordinates y = x - max(x): the bracket is
  // [-40/alpha, (max - min) + 40/alpha].
  Vector lo = Vector::Constant(rows, -margin);
  Vector hi = (out.row_max - row_min).array() + margin;
  out.centered_t = Vector::Zero(rows);
  out.residual = Vector::Constant(rows, kInf);
  std::vector<char> done(static_cast<std::size_t>(rows), 0);
  Eigen::Index remaining = rows;

  // sum(z) - k is accumulated as (#{a >= 0} - k) plus the fractional parts
  // sigmoid(a) - [a >= 0], so that entries close to 1 do not cancel the
  // residual away when the row is nearly saturated. A row converges once
  // the residual is within tol and so is the threshold error it implies,
  // residual / sum(sigma'); near saturation the latter is the binding one.
  std::vector<Vector> partial(slices.size()), partial_count(slices.size()), partial_slope(slices.size());
  for (int iter = 1; iter <= config.max_iters && remaining > 0; ++iter) {
    out.iterations = iter;
    const Vector mid = 0.5 * (lo + hi);
    for (std::size_t g = 0; g < slices.size(); ++g) {
      const Matrix& s = slices[g];
      Vector sums = Vector::Zero(rows), counts = Vector::Zero(rows), slopes = Vector::Zero(rows);
      for (Eigen::Index i = 0; i < rows; ++i) {
        if (done[static_cast<std::size_t>(i)]) continue;
        const double shift = mid[i] - out.row_max[i];
        double acc = 0.0, above = 0.0, slope = 0.0;
        for (Eigen::Index j = 0; j < s.cols(); ++j) {
          const double a = config.alpha * (s(i, j) + shift);
          const double small = sigmoid(-std::abs(a));
          slope += small * (1.0 - small);
          if (a >= 0.0) {
            acc -= small;
            above += 1.0;
          } else {
            acc += small;
          }
        }
        sums[i] = acc;
        counts[i] = above;
        slopes[i] = config.alpha * slope;
      }
      partial[g] = std::move(sums);
      partial_count[g] = std::move(counts);
      partial_slope[g] = std::move(slopes);
    }
    const Vector fraction = comm.all_reduce(partial, ReduceOp::sum);
    const Vector above = comm.all_reduce(partial_count, ReduceOp::sum);
    const Vector slope = comm.all_reduce(partial_slope, ReduceOp::sum);
    for (Eigen::Index i = 0; i < rows; ++i) {
      auto& flag = done[static_cast<std::size_t>(i)];
      if (flag) continue;
      const double r = (above[i] - k) + fraction[i];
      out.residual[i] = std::abs(r);
      out.centered_t[i] = mid[i];
      const bool stalled = mid[i] == lo[i] || mid[i] == hi[i];
      if (std::abs(r) <= tol && (std::abs(r) <= tol * slope[i] || stalled)) {
        flag = 1;
        --remaining;
      } else if (stalled) {
        throw NumericalError("SoftTop-k bisection stalled at residual " + std::to_string(std::abs(r)) +
                             " (tol " + std::to_string(tol) + ")");
      } else if (r < 0.0) {
        lo[i] = mid[i];
      } else {
        hi[i] = mid[i];
      }
    }
  }
  if (remaining > 0) {
    throw NumericalError("SoftTop-k bisection did not converge in " + std::to_string(config.max_iters) +
                         " iterations (max residual " + std::to_string(out.residual.maxCoeff()) + ")");
  }
  return out;
}

double find_threshold(std::span<const double> x, const SoftTopkConfig& config) {
  Collective local(1);
  const Matrix m = row_matrix(x);
  const auto th = find_thresholds_sharded(std::span<const Matrix>(&m, 1), config, local);
  return th.centered_t[0] - th.row_max[0];
}

TopkResult soft_topk(std::span<const double> x, const SoftTopkConfig& config) {
  Collective local(1);
  const Matrix m = row_matrix(x);
  const auto th = find_thresholds_sharded(std::span<const Matrix>(&m, 1), config, local);
  TopkResult res;
  res.t = th.centered_t[0] - th.row_max[0];
  res.iterations = th.iterations;
  res.residual = th.residual[0];
  const auto n = static_cast<Eigen::Index>(x.size());
  res.z.resize(n);
  res.sigma_prime.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double a = config.alpha * (x[static_cast<std::size_t>(i)] - th.row_max[0] + th.centered_t[0]);
    res.z[i] = sigmoid(a);
    res.sigma_prime[i] = config.alpha * sigmoid_slope(a);
  }
  return res;
}

Vector log_soft_topk(std::span<const double> x, const SoftTopkConfig& config) {
  Collective local(1);
  const Matrix m = row_matrix(x);
  const auto th = find_thresholds_sharded(std::span<const Matrix>(&m, 1), config, local);
  const auto n = static_cast<Eigen::Index>(x.size());
  Vector out(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double a = config.alpha * (x[static_cast<std::size_t>(i)] - th.row_max[0] + th.centered_t[0]);
    out[i] = -softplus(-a);
  }
  return out;
}

Vector soft_topk_vjp(const TopkResult& result, std::span<const double> upstream, bool* saturated) {
  const Eigen::Index n = result.sigma_prime.size();
  if (static_cast<Eigen::Index>(upstream.size()) != n) throw ConfigError("soft_topk_vjp: shape mismatch");
  if (saturated) *saturated = false;
  const double denom = result.sigma_prime.sum();
  if (!(denom > 0.0)) {
    spdlog::warn("SoftTop-k: all sigma' terms are zero, gradient set to 0");
    if (saturated) *saturated = true;
    return Vector::Zero(n);
  }
  const Eigen::Map<const Vector> u(upstream.data(), n);
  const double weighted = u.dot(result.sigma_prime);
  return result.sigma_prime.cwiseProduct(u) - result.sigma_prime * (weighted / denom);
}

ShardedLossGrad soft_topk_loss_sharded(std::span<const Matrix> slices,
                                       std::span<const BatchLabels> labels,
                                       const SoftTopkConfig& config, Collective& comm,
                                       bool want_sigma) {
  if (slices.size() != labels.size()) throw ConfigError("soft_topk_loss: shard/label count mismatch");
  const auto th = find_thresholds_sharded(slices, config, comm);
  const Eigen::Index rows = slices.front().rows();
  double pool = 0.0;
  for (const auto& s : slices) pool += static_cast<double>(s.cols());
  const double alpha = config.alpha;

  // Upstream of the loss w.r.t. z_j is -y_j / (m z_j); multiplied by
  // sigma'_j = alpha z_j (1 - z_j) it becomes -alpha y_j (1 - z_j) / m,
  // which stays finite when z_j underflows.
  std::vector<Matrix> weighted(slices.size()), slope(slices.size());
  std::vector<Vector> part_slope(slices.size()), part_weighted(slices.size());
  std::vector<double> part_loss(slices.size(), 0.0);
  ShardedLossGrad out;
  for (std::size_t g = 0; g < slices.size(); ++g) {
    const Matrix& s = slices[g];
    if (labels[g].batch_size() != static_cast<std::size_t>(rows)) {
      throw ConfigError("soft_topk_loss: labels do not match the batch");
    }
    slope[g].resize(rows, s.cols());
    weighted[g] = Matrix::Zero(rows, s.cols());
    Matrix z;
    if (want_sigma) z.resize(rows, s.cols());
    for (Eigen::Index i = 0; i < rows; ++i) {
      const double shift = th.centered_t[i] - th.row_max[i];
      for (Eigen::Index j = 0; j < s.cols(); ++j) {
        const double a = alpha * (s(i, j) + shift);
        slope[g](i, j) = alpha * sigmoid_slope(a);
        if (want_sigma) z(i, j) = sigmoid(a);
      }
      for (int j : labels[g].positives[static_cast<std::size_t>(i)]) {
        const double a = alpha * (s(i, j) + shift);
        part_loss[g] += softplus(-a) / pool;
        weighted[g](i, j) = -alpha * sigmoid(-a) / pool;
      }
    }
    part_slope[g] = slope[g].rowwise().sum();
    part_weighted[g] = weighted[g].rowwise().sum();
    if (want_sigma) out.sigma.push_back(std::move(z));
  }
  const Vector slope_sum = comm.all_reduce(part_slope, ReduceOp::sum);
  const Vector weighted_sum = comm.all_reduce(part_weighted, ReduceOp::sum);
  const double batch = static_cast<double>(rows);
  out.loss = comm.all_reduce_scalar(part_loss, ReduceOp::sum) / batch;

  for (Eigen::Index i = 0; i < rows; ++i) {
    if (!(slope_sum[i] > 0.0)) ++out.saturated_rows;
  }
  if (out.saturated_rows > 0) {
    spdlog::warn("SoftTop-k loss: {} saturated row(s), gradient set to 0", out.saturated_rows);
  }
  for (std::size_t g = 0; g < slices.size(); ++g) {
    Matrix grad(rows, slices[g].cols());
    for (Eigen::Index i = 0; i < rows; ++i) {
      if (!(slope_sum[i] > 0.0)) {
        grad.row(i).setZero();
        continue;
      }
      const double ratio = weighted_sum[i] / slope_sum[i];
      grad.row(i) = (weighted[g].row(i) - slope[g].row(i) * ratio) / batch;
    }
    out.grad_scores.push_back(std::move(grad));
  }
  return out;
}

LossGrad soft_topk_loss(const ScoreBlock& scores, const BatchLabels& labels,
                        const SoftTopkConfig& config, bool want_sigma) {
  labels.validate();
  if (labels.pool_size != scores.scores.cols()) throw ConfigError("soft_topk_loss: pool size mismatch");
  Collective local(1);
  return merge_shards(soft_topk_loss_sharded(std::span<const Matrix>(&scores.scores, 1),
                                             std::span<const BatchLabels>(&labels, 1), config, local,
                                             want_sigma));
}

}  // namespace xmcde
