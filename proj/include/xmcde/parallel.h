// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>

namespace xmcde {

// Worker count: hardware concurrency, capped by the XMC_DE_THREADS
// environment variable when set.
std::size_t worker_count();

// Runs fn(0) .. fn(n-1) on up to worker_count() threads. Callers only write
// to per-index outputs, so results match a sequential run.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace xmcde
