// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "xmcde/trainer.h"

namespace xmcde {

// Training run description as stored in config files and run manifests.
struct RunConfig {
  TrainConfig train;
  std::string data;       // training corpus directory
  std::string eval_data;  // evaluated once per epoch; empty means none
  std::size_t max_len = 32;
};

// Flat JSON object; every key is optional and unknown keys are rejected:
// data, eval_data, max_len, batch_size, epochs, lr, weight_decay, warmup,
// shards, microbatch, loss, topk_k, topk_alpha, topk_tol, negatives,
// shortlist_size, refresh_steps, shortlist_scorer, seed, dim, temperature,
// normalize, dropout, early_stop, eval_every.
void apply_config(const nlohmann::json& j, RunConfig& config);
nlohmann::json to_json(const RunConfig& config);

// Reads a config file. A run manifest is accepted too (its "config" entry
// is used).
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});

}  // namespace xmcde
