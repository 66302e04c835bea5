// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

#include "xmcde/trainer.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <string>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "xmcde/metrics.h"
#include "xmcde/parallel.h"
#include "xmcde/rng.h"

namespace xmcde {

namespace {

using json = nlohmann::json;

std::vector<Range> split_range(std::size_t n, int shards) {
  std::vector<Range> out(static_cast<std::size_t>(shards));
  const std::size_t base = n / static_cast<std::size_t>(shards);
  for (std::size_t g = 0; g < out.size(); ++g) {
    out[g].begin = g * base;
    out[g].end = g + 1 == out.size() ? n : (g + 1) * base;
  }
  return out;
}

std::size_t chunk_size(int microbatch, std::size_t n) {
  return microbatch <= 0 ? std::max<std::size_t>(n, 1) : static_cast<std::size_t>(microbatch);
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
  if (!(warmup >= 0.0 && warmup <= 1.0)) throw ConfigError("warmup fraction must be in [0, 1]");
  if (shards < 1) throw ConfigError("shards must be >= 1");
  if (shards > batch_size) throw ConfigError("shards must not exceed the batch size");
  if (microbatch < 0) throw ConfigError("microbatch must be >= 0 (0 = whole slice)");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
  if (eval_every < 0) throw ConfigError("eval cadence must be >= 0");
  if (negatives.shortlist_size < 1) throw ConfigError("shortlist size must be >= 1");
  if (negatives.refresh_steps < 1) throw ConfigError("refresh steps must be >= 1");
  if (loss == LossKind::softtopk) {
    if (topk.k < 1) throw ConfigError("SoftTop-k needs k >= 1");
    if (!(topk.alpha > 0.0)) throw ConfigError("SoftTop-k alpha must be > 0");
    if (!(topk.tol >= 0.0)) throw ConfigError("SoftTop-k tolerance must be >= 0");
    if (topk.max_iters < 1) throw ConfigError("SoftTop-k needs at least one bisection step");
  }
}

ShardPlan ShardPlan::make(std::size_t batch, std::size_t pool, int shards) {
  if (shards < 1) throw ConfigError("shards must be >= 1");
  if (batch < static_cast<std::size_t>(shards)) {
    throw ConfigError("batch of " + std::to_string(batch) + " cannot be split over " + std::to_string(shards) +
                      " shards");
  }
  if (pool < static_cast<std::size_t>(shards)) {
    throw ConfigError("label pool of " + std::to_string(pool) + " cannot be split over " +
                      std::to_string(shards) + " shards");
  }
  return {split_range(batch, shards), split_range(pool, shards)};
}

void gradcache_label_grads(const ModelParams& params, std::span<const TextRecord> labels,
                           const Matrix& upstream, int microbatch, Matrix& grad_table,
                           ActivationMeter* meter, const DropoutSpec& dropout) {
  if (microbatch < 0) throw ConfigError("microbatch must be >= 0");
  if (upstream.rows() != static_cast<Eigen::Index>(labels.size())) {
    throw ConfigError("gradcache: upstream gradient rows do not match the labels");
  }
  const std::size_t eta = chunk_size(microbatch, labels.size());
  for (std::size_t begin = 0; begin < labels.size(); begin += eta) {
    const std::size_t n = std::min(eta, labels.size() - begin);
    auto [emb, tape] = encode_retaining(params, labels.subspan(begin, n), meter, dropout);
    encoder_backward(params, tape, upstream.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(n)),
                     grad_table);
  }
}

StepGrads sharded_loss_grad(const ModelParams& params, const Corpus& corpus,
                            std::span<const std::int64_t> batch, const NegativeSet& pool,
                            const StepOptions& options) {
  const ShardPlan plan = ShardPlan::make(batch.size(), pool.pool_label_ids.size(), options.shards);
  const auto shards = static_cast<std::size_t>(options.shards);
  Collective comm(options.shards);
  ActivationMeter meter;
  StepGrads out;
  out.labels = batch_labels(pool, batch, corpus);
  out.labels.validate();

  DropoutSpec query_drop = options.dropout;
  DropoutSpec label_drop = options.dropout;
  label_drop.mask_seed = mix64(options.dropout.mask_seed ^ 0x6c6162656c73ULL);

  std::vector<std::vector<TextRecord>> query_recs(shards), label_recs(shards);
  for (std::size_t g = 0; g < shards; ++g) {
    for (std::size_t i = plan.queries[g].begin; i < plan.queries[g].end; ++i) {
      query_recs[g].push_back(corpus.queries[static_cast<std::size_t>(batch[i])]);
    }
    for (std::size_t j = plan.labels[g].begin; j < plan.labels[g].end; ++j) {
      label_recs[g].push_back(corpus.labels[static_cast<std::size_t>(pool.pool_label_ids[j])]);
    }
  }

  // Query slices keep their tapes until the end of the step.
  std::vector<EncoderTape> query_tapes(shards);
  std::vector<Matrix> query_rows(shards), label_rows(shards);
  parallel_for(shards, [&](std::size_t g) {
    auto [emb, tape] = encode_retaining(params, query_recs[g], nullptr, query_drop);
    query_rows[g] = std::move(emb.rows);
    query_tapes[g] = std::move(tape);
    // Pass 1 over the label slice: embeddings only, no activations kept.
    const std::size_t eta = chunk_size(options.microbatch, label_recs[g].size());
    label_rows[g].resize(static_cast<Eigen::Index>(label_recs[g].size()), params.dim);
    for (std::size_t b = 0; b < label_recs[g].size(); b += eta) {
      const std::size_t n = std::min(eta, label_recs[g].size() - b);
      label_rows[g].middleRows(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(n)) =
          encode(params, std::span<const TextRecord>(label_recs[g]).subspan(b, n), label_drop).rows;
    }
  });
  const Matrix q_all = comm.all_gather_rows(query_rows);

  std::vector<Matrix> slices(shards);
  std::vector<BatchLabels> slice_lab(shards);
  for (std::size_t g = 0; g < shards; ++g) {
    slices[g].noalias() = q_all * label_rows[g].transpose();
    slices[g] /= params.temperature;
    slice_lab[g] = slice_labels(out.labels, static_cast<int>(plan.labels[g].begin),
                                static_cast<int>(plan.labels[g].end));
  }
  ShardedLossGrad sg = sharded_loss(options.loss, slices, slice_lab, comm, options.loss_options);
  out.loss = sg.loss;

  // Each shard's partial d loss / d Q, summed across shards.
  std::vector<Matrix> dq_part(shards);
  for (std::size_t g = 0; g < shards; ++g) {
    dq_part[g].noalias() = sg.grad_scores[g] * label_rows[g];
    dq_part[g] /= params.temperature;
  }
  const Matrix dq = comm.all_reduce_sum(dq_part);

  std::vector<Matrix> table_grads(shards);
  std::vector<ActivationMeter> meters(shards);
  parallel_for(shards, [&](std::size_t g) {
    table_grads[g] = Matrix::Zero(params.embed_table.rows(), params.dim);
    encoder_backward(params, query_tapes[g],
                     dq.middleRows(static_cast<Eigen::Index>(plan.queries[g].begin),
                                   static_cast<Eigen::Index>(plan.queries[g].size())),
                     table_grads[g]);
    Matrix dl;
    dl.noalias() = sg.grad_scores[g].transpose() * q_all;
    dl /= params.temperature;
    gradcache_label_grads(params, label_recs[g], dl, options.microbatch, table_grads[g], &meters[g], label_drop);
  });
  out.grad_table = comm.all_reduce_sum(std::move(table_grads));
  for (const auto& m : meters) out.peak_label_rows = std::max(out.peak_label_rows, m.peak());
  out.comm = comm.stats();
  out.scores = merge_shards(std::move(sg));
  return out;
}

AdamW::AdamW(Eigen::Index rows, Eigen::Index cols, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps), m_(Matrix::Zero(rows, cols)), v_(Matrix::Zero(rows, cols)) {}

void AdamW::step(Matrix& param, const Matrix& grad, double lr, double weight_decay) {
  if (param.rows() != m_.rows() || param.cols() != m_.cols() || grad.rows() != m_.rows() ||
      grad.cols() != m_.cols()) {
    throw ConfigError("AdamW: parameter shape changed");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  double* p = param.data();
  double* m = m_.data();
  double* v = v_.data();
  const double* g = grad.data();
  const Eigen::Index n = param.size();
  const double b1 = beta1_, b2 = beta2_, eps = eps_;
  for (Eigen::Index i = 0; i < n; ++i) {
    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
  }
  if (lr == 0.0) return;
  const double inv_c1 = 1.0 / c1, inv_c2 = 1.0 / c2;
  for (Eigen::Index i = 0; i < n; ++i) {
    p[i] -= lr * ((m[i] * inv_c1) / (std::sqrt(v[i] * inv_c2) + eps) + weight_decay * p[i]);
  }
}

double scheduled_lr(double base_lr, double warmup, std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 0) return base_lr;
  const auto warm = static_cast<std::int64_t>(std::ceil(warmup * static_cast<double>(total_steps)));
  if (step < warm) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warm);
  const auto rest = total_steps - warm;
  if (rest <= 0) return base_lr;
  return base_lr * std::max(0.0, static_cast<double>(total_steps - step) / static_cast<double>(rest));
}

StepGrads train_step(ModelParams& params, AdamW& optimizer, const Corpus& corpus,
                     std::span<const std::int64_t> batch, const NegativeSet& pool,
                     const StepOptions& options, double lr, double weight_decay) {
  StepGrads grads = sharded_loss_grad(params, corpus, batch, pool, options);
  if (!std::isfinite(grads.loss) || !grads.grad_table.allFinite()) {
    throw NumericalError("non-finite loss or gradient (loss " + std::to_string(grads.loss) + ")");
  }
  optimizer.step(params.embed_table, grads.grad_table, lr, weight_decay);
  return grads;
}

namespace {

void write_diagnostic(const std::filesystem::path& dir, std::int64_t step, int epoch,
                      std::span<const std::int64_t> batch, const NegativeSet& pool, const ModelParams& params,
                      const std::string& what) {
  json dump;
  dump["step"] = step;
  dump["epoch"] = epoch;
  dump["error"] = what;
  dump["batch_queries"] = std::vector<std::int64_t>(batch.begin(), batch.end());
  dump["pool_labels"] = pool.pool_label_ids;
  dump["embed_table_finite"] = params.embed_table.allFinite();
  dump["embed_table_max_abs"] = params.embed_table.cwiseAbs().maxCoeff();
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "nan_dump.json");
  out << dump.dump(2) << '\n';
}

}  // namespace

TrainResult train(const Corpus& corpus, ModelParams params, const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  validate_params(params);
  if (corpus.num_queries() == 0) throw DataError("training corpus has no queries");

  TrainResult result;
  Rng rng(config.seed);
  std::vector<std::int64_t> order(corpus.num_queries());
  std::iota(order.begin(), order.end(), 0);
  const auto bsz = static_cast<std::size_t>(config.batch_size);
  std::size_t batches = (order.size() + bsz - 1) / bsz;
  // A trailing batch too small to shard is dropped.
  if (order.size() % bsz != 0 && order.size() % bsz < static_cast<std::size_t>(config.shards)) --batches;
  if (batches == 0) throw ConfigError("corpus is smaller than one shardable batch");
  const auto total_steps = static_cast<std::int64_t>(batches) * config.epochs;

  AdamW optimizer(params.embed_table.rows(), params.embed_table.cols());
  StepOptions opts;
  opts.shards = config.shards;
  opts.microbatch = config.microbatch;
  opts.loss = config.loss;
  opts.loss_options.topk = config.topk;
  opts.loss_options.want_sigma = hooks.want_sigma;
  opts.dropout.rate = config.dropout;

  std::vector<std::vector<std::int32_t>> shortlists;
  std::int64_t shortlist_step = 0;
  LabelEmbeddingCache cache;
  if (config.negatives.strategy == NegativeStrategy::embcache) cache = init_label_cache(params, corpus, 0);
  const NegativeSet full_pool = config.negatives.strategy == NegativeStrategy::all ? build_full_pool(corpus)
                                                                                   : NegativeSet{};

  std::int64_t step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(std::span<std::int64_t>(order));
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t begin = b * bsz;
      const std::span<const std::int64_t> batch(order.data() + begin, std::min(bsz, order.size() - begin));
      NegativeSet pool;
      switch (config.negatives.strategy) {
        case NegativeStrategy::all: pool = full_pool; break;
        case NegativeStrategy::inbatch: pool = build_inbatch_pool(batch, corpus); break;
        case NegativeStrategy::ance:
          if (shortlists.empty() || step - shortlist_step >= config.negatives.refresh_steps) {
            shortlists = refresh_shortlist(params, corpus, config.negatives.shortlist_size, config.shortlist_scorer);
            shortlist_step = step;
          }
          pool = sample_ance_pool(batch, corpus, shortlists, config.negatives.ance_m, rng);
          break;
        case NegativeStrategy::embcache: {
          std::vector<TextRecord> recs;
          for (auto q : batch) recs.push_back(corpus.queries[static_cast<std::size_t>(q)]);
          pool = mine_cache_negatives(cache, params, corpus, batch, encode(params, recs),
                                      build_inbatch_pool(batch, corpus), config.negatives.cache_k, config.loss,
                                      opts.loss_options, step);
          break;
        }
      }
      const double lr = scheduled_lr(config.lr, config.warmup, step, total_steps);
      opts.dropout.mask_seed = mix64(config.seed ^ mix64(static_cast<std::uint64_t>(step)));
      StepGrads grads;
      try {
        grads = train_step(params, optimizer, corpus, batch, pool, opts, lr, config.weight_decay);
      } catch (const NumericalError& e) {
        spdlog::error("step {} (epoch {}): {}", step, epoch, e.what());
        if (hooks.diagnostic_dir) write_diagnostic(*hooks.diagnostic_dir, step, epoch, batch, pool, params, e.what());
        throw NumericalError("training aborted at step " + std::to_string(step) + ": " + e.what());
      }
      epoch_loss += grads.loss;
      if (hooks.log) {
        *hooks.log << json{{"step", step}, {"epoch", epoch}, {"loss", grads.loss}, {"lr", lr}}.dump() << '\n';
      }
      if (hooks.on_step) hooks.on_step(StepInfo{step, epoch, batch, &pool, &grads, lr});
      ++step;
    }
    result.epochs_run = epoch + 1;
    const bool eval_now = hooks.eval && config.eval_every > 0 &&
                          ((epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs);
    json line{{"step", step}, {"epoch", epoch}, {"loss", epoch_loss / static_cast<double>(batches)},
              {"lr", scheduled_lr(config.lr, config.warmup, std::max<std::int64_t>(step - 1, 0), total_steps)}};
    if (eval_now) {
      const PredictionSet preds = predict(params, *hooks.eval, 5);
      result.last_p1 = precision_at_k(preds, hooks.eval->relevance, 1);
      result.last_p5 = precision_at_k(preds, hooks.eval->relevance, 5);
      line["metrics"] = {{"P@1", *result.last_p1}, {"P@5", *result.last_p5}};
      spdlog::info("epoch {}: loss {:.5f} P@1 {:.4f}", epoch, epoch_loss / static_cast<double>(batches),
                   *result.last_p1);
    }
    if (hooks.log) *hooks.log << line.dump() << '\n';
    if (eval_now && config.early_stop && *result.last_p1 >= 1.0) {
      result.early_stopped = true;
      break;
    }
  }
  result.steps = step;
  result.params = std::move(params);
  return result;
}

CostEstimate estimate_cost(const CostInputs& in) {
  const double fields[] = {in.batch,     in.labels,      in.shards,      in.microbatch,
                           in.dim,       in.mem_query,   in.mem_label,   in.t_query_fwd,
                           in.t_query_bwd, in.t_label_fwd, in.t_label_bwd};
  for (double f : fields) {
    if (!(f > 0.0) || !std::isfinite(f)) throw ConfigError("cost model inputs must be positive and finite");
  }
  const double b = in.batch, l = in.labels, g = in.shards, d = in.dim;
  const double query_mem = b * (in.mem_query + d);
  const double query_time = b * (in.t_query_fwd + in.t_query_bwd + d);
  CostEstimate est;
  est.memory_without_cache = (query_mem + l * (in.mem_label + d) + b * l) / g;
  est.memory_with_cache = (query_mem + l * d + in.microbatch * in.mem_label + b * l) / g;
  est.compute_without_cache = (query_time + l * (in.t_label_fwd + in.t_label_bwd + d) + b * l) / g;
  est.compute_with_cache = (query_time + l * (2.0 * in.t_label_fwd + in.t_label_bwd + d) + b * l) / g;
  return est;
}

}  // namespace xmcde
