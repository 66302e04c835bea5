// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "xmcde/collective.h"
#include "xmcde/corpus.h"
#include "xmcde/encoder.h"
#include "xmcde/losses.h"
#include "xmcde/negatives.h"

namespace xmcde {

struct TrainConfig {
  int batch_size = 32;
  int epochs = 100;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double warmup = 0.1;  // fraction of all steps spent warming up
  int shards = 1;       // G
  int microbatch = 0;   // eta; 0 encodes a whole label slice at once
  LossKind loss = LossKind::decoupled;
  SoftTopkConfig topk;
  NegativeConfig negatives;
  std::uint64_t seed = 0;
  EncoderConfig encoder;  // used when the trainer initializes parameters
  double dropout = 0.0;
  // Stop after an evaluation that reaches P@1 = 1.
  bool early_stop = true;
  int eval_every = 1;  // epochs between evaluations; 0 disables them
  ScorerKind shortlist_scorer = ScorerKind::dual_encoder;

  // Throws ConfigError on out-of-range values.
  void validate() const;
};

struct Range {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

// Contiguous split of a batch and a label pool over G shards. Each shard gets
// floor(n / G) items and the last one also takes the remainder.
struct ShardPlan {
  std::vector<Range> queries;
  std::vector<Range> labels;

  static ShardPlan make(std::size_t batch, std::size_t pool, int shards);
};

struct StepOptions {
  int shards = 1;
  int microbatch = 0;
  LossKind loss = LossKind::decoupled;
  LossOptions loss_options;
  DropoutSpec dropout;
};

struct StepGrads {
  double loss = 0.0;
  Matrix grad_table;  // d loss / d embed_table
  LossGrad scores;    // merged over shards, for diagnostics
  BatchLabels labels;
  std::size_t peak_label_rows = 0;  // most label activations held at once
  Collective::Stats comm;
};

// Loss and parameter gradient of one batch, computed as G logical shards:
// each shard encodes its query and label slices, query embeddings are
// all-gathered, loss denominators are all-reduced, and label gradients are
// pushed through the encoder in micro-batches of `microbatch` labels.
StepGrads sharded_loss_grad(const ModelParams& params, const Corpus& corpus,
                            std::span<const std::int64_t> batch, const NegativeSet& pool,
                            const StepOptions& options);

// Two-pass label backward: re-encodes `labels` in chunks of `microbatch`
// rows, keeping activations for one chunk at a time, and accumulates
// d loss / d embed_table from the cached embedding gradients `upstream`.
void gradcache_label_grads(const ModelParams& params, std::span<const TextRecord> labels,
                           const Matrix& upstream, int microbatch, Matrix& grad_table,
                           ActivationMeter* meter = nullptr, const DropoutSpec& dropout = {});

// Adam with decoupled weight decay.
class AdamW {
 public:
  AdamW(Eigen::Index rows, Eigen::Index cols, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step(Matrix& param, const Matrix& grad, double lr, double weight_decay);
  std::int64_t steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  Matrix m_, v_;
};

// Linear warmup over ceil(warmup * total) steps, then linear decay to 0.
double scheduled_lr(double base_lr, double warmup, std::int64_t step, std::int64_t total_steps);

// One optimizer step on one batch. Returns the gradients that were applied.
StepGrads train_step(ModelParams& params, AdamW& optimizer, const Corpus& corpus,
                     std::span<const std::int64_t> batch, const NegativeSet& pool,
                     const StepOptions& options, double lr, double weight_decay);

struct StepInfo {
  std::int64_t step = 0;
  int epoch = 0;
  std::span<const std::int64_t> batch;
  const NegativeSet* pool = nullptr;
  const StepGrads* grads = nullptr;
  double lr = 0.0;
};

struct TrainHooks {
  const Corpus* eval = nullptr;        // evaluated every cfg.eval_every epochs
  std::ostream* log = nullptr;         // JSONL metrics log
  std::function<void(const StepInfo&)> on_step;
  bool want_sigma = false;             // materialize sigma for on_step
  std::optional<std::filesystem::path> diagnostic_dir;  // where a NaN dump goes
};

struct TrainResult {
  ModelParams params;
  int epochs_run = 0;
  std::int64_t steps = 0;
  bool early_stopped = false;
  std::optional<double> last_p1;
  std::optional<double> last_p5;
};

// Shuffled mini-batch training with the configured loss and negatives.
// Throws NumericalError on a non-finite loss.
TrainResult train(const Corpus& corpus, ModelParams params, const TrainConfig& config,
                  const TrainHooks& hooks = {});

// Abstract memory/compute cost of one step with and without gradient caching.
struct CostInputs {
  double batch = 0, labels = 0, shards = 1, microbatch = 0, dim = 0;
  double mem_query = 0, mem_label = 0;  // encoder activation memory per record
  double t_query_fwd = 0, t_query_bwd = 0, t_label_fwd = 0, t_label_bwd = 0;
};

struct CostEstimate {
  double memory_with_cache = 0;
  double memory_without_cache = 0;
  double compute_with_cache = 0;
  double compute_without_cache = 0;
};

// Throws ConfigError unless every input is positive.
CostEstimate estimate_cost(const CostInputs& in);

}  // namespace xmcde
