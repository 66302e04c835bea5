// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>

#include "xmcde/common.h"

namespace xmcde {

enum class ReduceOp { sum, max, min, logsumexp };

// log(exp(a) + exp(b)) without overflow; -inf is the identity.
double log_add_exp(double a, double b);

// In-process stand-in for a collective communicator over `world_size`
// logical ranks. Each call takes one buffer per rank and returns the result
// every rank would receive. Reductions run in rank order, so results do not
// depend on scheduling.
class Collective {
 public:
  struct Stats {
    std::size_t all_gather_calls = 0;
    std::size_t all_reduce_calls = 0;
    std::size_t elements_moved = 0;
  };

  explicit Collective(int world_size);

  int world_size() const { return world_size_; }

  // Concatenates the ranks' row blocks in rank order.
  Matrix all_gather_rows(std::span<const Matrix> per_rank);

  // Elementwise reduction of equally sized vectors.
  Vector all_reduce(std::span<const Vector> per_rank, ReduceOp op);

  // Elementwise sum of equally sized matrices.
  Matrix all_reduce_sum(std::span<const Matrix> per_rank);
  // Same, reusing rank 0's buffer for the result.
  Matrix all_reduce_sum(std::vector<Matrix>&& per_rank);

  double all_reduce_scalar(std::span<const double> per_rank, ReduceOp op);

  const Stats& stats() const { return stats_; }

 private:
  void check_ranks(std::size_t n) const;

  int world_size_;
  Stats stats_;
};

}  // namespace xmcde
