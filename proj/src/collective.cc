// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

#include "xmcde/collective.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace xmcde {

double log_add_exp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

Collective::Collective(int world_size) : world_size_(world_size) {
  if (world_size < 1) throw ConfigError("collective world size must be >= 1");
}

void Collective::check_ranks(std::size_t n) const {
  if (n != static_cast<std::size_t>(world_size_)) {
    throw ConfigError("collective expected " + std::to_string(world_size_) + " buffers, got " +
                      std::to_string(n));
  }
}

Matrix Collective::all_gather_rows(std::span<const Matrix> per_rank) {
  check_ranks(per_rank.size());
  ++stats_.all_gather_calls;
  Eigen::Index rows = 0;
  const Eigen::Index cols = per_rank.front().cols();
  for (const auto& m : per_rank) {
    if (m.cols() != cols) throw ConfigError("all_gather: column mismatch");
    rows += m.rows();
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& m : per_rank) {
    out.middleRows(at, m.rows()) = m;
    at += m.rows();
  }
  stats_.elements_moved += static_cast<std::size_t>(out.size());
  return out;
}

Vector Collective::all_reduce(std::span<const Vector> per_rank, ReduceOp op) {
  check_ranks(per_rank.size());
  ++stats_.all_reduce_calls;
  Vector out = per_rank.front();
  for (std::size_t r = 1; r < per_rank.size(); ++r) {
    const Vector& v = per_rank[r];
    if (v.size() != out.size()) throw ConfigError("all_reduce: size mismatch");
    for (Eigen::Index i = 0; i < out.size(); ++i) {
      switch (op) {
        case ReduceOp::sum: out[i] += v[i]; break;
        case ReduceOp::max: out[i] = std::max(out[i], v[i]); break;
        case ReduceOp::min: out[i] = std::min(out[i], v[i]); break;
        case ReduceOp::logsumexp: out[i] = log_add_exp(out[i], v[i]); break;
      }
    }
  }
  stats_.elements_moved += static_cast<std::size_t>(out.size()) * per_rank.size();
  return out;
}

Matrix Collective::all_reduce_sum(std::span<const Matrix> per_rank) {
  check_ranks(per_rank.size());
  ++stats_.all_reduce_calls;
  Matrix out = per_rank.front();
  for (std::size_t r = 1; r < per_rank.size(); ++r) {
    if (per_rank[r].rows() != out.rows() || per_rank[r].cols() != out.cols()) {
      throw ConfigError("all_reduce_sum: shape mismatch");
    }
    out += per_rank[r];
  }
  stats_.elements_moved += static_cast<std::size_t>(out.size()) * per_rank.size();
  return out;
}

Matrix Collective::all_reduce_sum(std::vector<Matrix>&& per_rank) {
  check_ranks(per_rank.size());
  ++stats_.all_reduce_calls;
  Matrix out = std::move(per_rank.front());
  for (std::size_t r = 1; r < per_rank.size(); ++r) {
    if (per_rank[r].rows() != out.rows() || per_rank[r].cols() != out.cols()) {
      throw ConfigError("all_reduce_sum: shape mismatch");
    }
    out += per_rank[r];
  }
  stats_.elements_moved += static_cast<std::size_t>(out.size()) * per_rank.size();
  per_rank.clear();
  return out;
}

double Collective::all_reduce_scalar(std::span<const double> per_rank, ReduceOp op) {
  std::vector<Vector> wrapped;
  wrapped.reserve(per_rank.size());
  for (double v : per_rank) wrapped.push_back(Vector::Constant(1, v));
  return all_reduce(wrapped, op)[0];
}

}  // namespace xmcde
