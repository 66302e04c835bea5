// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

#include "xmcde/trainer.h"

#include <cmath>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "oracles.h"
#include "temp_dir.h"

namespace xmcde {
namespace {

double rel_norm(const Matrix& a, const Matrix& b) {
  return (a - b).norm() / std::max({a.norm(), b.norm(), 1e-300});
}

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

TEST(TrainConfig, Validation) {
  TrainConfig ok;
  EXPECT_NO_THROW(ok.validate());
  const auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    return c;
  };
  EXPECT_THROW(bad([](TrainConfig& c) { c.batch_size = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](TrainConfig& c) { c.shards = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](TrainConfig& c) { c.shards = 64; }).validate(), ConfigError);
  EXPECT_THROW(bad([](TrainConfig& c) { c.microbatch = -1; }).validate(), ConfigError);
  EXPECT_THROW(bad([](TrainConfig& c) { c.lr = -1; }).validate(), ConfigError);
  EXPECT_THROW(bad([](TrainConfig& c) { c.warmup = 1.5; }).validate(), ConfigError);
  EXPECT_THROW(bad([](TrainConfig& c) { c.lr = std::nan(""); }).validate(), ConfigError);
  EXPECT_THROW(bad([](TrainConfig& c) {
                 c.loss = LossKind::softtopk;
                 c.topk.alpha = 0;
               }).validate(),
               ConfigError);
}

TEST(ShardPlan, PartitionsWithRemainderOnLastShard) {
  const ShardPlan p = ShardPlan::make(10, 7, 3);
  ASSERT_EQ(p.queries.size(), 3u);
  EXPECT_EQ(p.queries[0].size(), 3u);
  EXPECT_EQ(p.queries[2].begin, 6u);
  EXPECT_EQ(p.queries[2].end, 10u);
  EXPECT_EQ(p.labels[0].size(), 2u);
  EXPECT_EQ(p.labels[2].size(), 3u);
  for (std::size_t g = 1; g < 3; ++g) {
    EXPECT_EQ(p.queries[g].begin, p.queries[g - 1].end);
    EXPECT_EQ(p.labels[g].begin, p.labels[g - 1].end);
  }
  EXPECT_THROW(ShardPlan::make(2, 8, 3), ConfigError);
  EXPECT_THROW(ShardPlan::make(8, 2, 3), ConfigError);
  EXPECT_THROW(ShardPlan::make(8, 8, 0), ConfigError);
}

TEST(Collective, ReductionsAndLogSumExp) {
  Collective comm(3);
  const std::vector<Vector> parts{vec({1.0, -2.0}), vec({0.5, 4.0}), vec({-3.0, 0.0})};
  EXPECT_EQ(comm.all_reduce(parts, ReduceOp::sum), vec({-1.5, 2.0}));
  EXPECT_EQ(comm.all_reduce(parts, ReduceOp::max), vec({1.0, 4.0}));
  EXPECT_EQ(comm.all_reduce(parts, ReduceOp::min), vec({-3.0, -2.0}));
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    // Global logsumexp of a vector split into 4 random pieces.
    std::vector<double> xs;
    for (int i = 0; i < 40; ++i) xs.push_back(rng.uniform(-300.0, 300.0));
    const double mx = *std::max_element(xs.begin(), xs.end());
    double s = 0.0;
    for (double x : xs) s += std::exp(x - mx);
    const double global = mx + std::log(s);
    std::vector<double> shard_lse;
    for (int g = 0; g < 4; ++g) {
      double m = -INFINITY, t = 0.0;
      for (int i = 10 * g; i < 10 * g + 10; ++i) m = std::max(m, xs[static_cast<std::size_t>(i)]);
      for (int i = 10 * g; i < 10 * g + 10; ++i) t += std::exp(xs[static_cast<std::size_t>(i)] - m);
      shard_lse.push_back(m + std::log(t));
    }
    Collective c4(4);
    EXPECT_LE(oracle::rel_error(c4.all_reduce_scalar(shard_lse, ReduceOp::logsumexp), global), 1e-12);
  }
  EXPECT_EQ(log_add_exp(-INFINITY, 2.0), 2.0);
  EXPECT_THROW(comm.all_reduce(std::vector<Vector>{vec({1.0})}, ReduceOp::sum), ConfigError);
  const Matrix gathered = comm.all_gather_rows(std::vector<Matrix>{Matrix::Ones(1, 2), Matrix::Zero(2, 2), Matrix::Ones(1, 2)});
  EXPECT_EQ(gathered.rows(), 4);
  EXPECT_EQ(gathered(3, 0), 1.0);
  EXPECT_GT(comm.stats().all_gather_calls, 0u);
}

class StepTest : public ::testing::Test {
 protected:
  Corpus c = oracle::random_corpus(21, 16, 24, 60, 6, 3);
  ModelParams p = init_params(c.vocab.size(), {.dim = 16, .temperature = 0.1}, 5);
  std::vector<std::int64_t> batch{0, 2, 3, 5, 7, 8, 11, 13};
  NegativeSet pool = build_full_pool(c);

  StepGrads grads(LossKind kind, int shards, int eta) const {
    StepOptions o;
    o.loss = kind;
    o.shards = shards;
    o.microbatch = eta;
    o.loss_options.topk.k = 4;
    return sharded_loss_grad(p, c, batch, pool, o);
  }
};

TEST_F(StepTest, GradientMatchesFiniteDifferencesThroughTheTable) {
  // Differences of the SoftTop-k loss need the threshold solved well below h,
  // which a moderate alpha keeps well conditioned.
  const StepOptions fd_opts{.loss_options = {.topk = {.k = 4, .alpha = 1.0, .tol = 1e-12}}};
  for (auto kind : {LossKind::softmax, LossKind::decoupled, LossKind::softtopk}) {
    StepOptions opts = fd_opts;
    opts.loss = kind;
    opts.shards = 2;
    opts.microbatch = 3;
    const StepGrads g = sharded_loss_grad(p, c, batch, pool, opts);
    opts.shards = 1;
    // Spot check a handful of table entries.
    Rng rng(3);
    for (int t = 0; t < 12; ++t) {
      const auto r = static_cast<Eigen::Index>(1 + rng.uniform_below(static_cast<std::uint64_t>(p.embed_table.rows() - 1)));
      const auto col = static_cast<Eigen::Index>(rng.uniform_below(16));
      ModelParams q = p;
      const double h = 1e-5;
      q.embed_table(r, col) += h;
      const double up = sharded_loss_grad(q, c, batch, pool, opts).loss;
      q.embed_table(r, col) -= 2 * h;
      const double down = sharded_loss_grad(q, c, batch, pool, opts).loss;
      const double fd = (up - down) / (2 * h);
      EXPECT_LE(oracle::rel_error(g.grad_table(r, col), fd, 1e-4), 1e-5) << to_string(kind);
    }
  }
}

TEST_F(StepTest, ShardsAndMicrobatchesAgreeWithSingleShard) {
  for (auto kind : {LossKind::bce, LossKind::softmax, LossKind::infonce, LossKind::decoupled, LossKind::softtopk}) {
    const StepGrads base = grads(kind, 1, 0);
    for (auto [g, eta] : std::vector<std::pair<int, int>>{{2, 4}, {4, 1}, {3, 5}, {1, 1}}) {
      const StepGrads s = grads(kind, g, eta);
      EXPECT_LE(oracle::rel_error(s.loss, base.loss), 1e-10) << to_string(kind) << " G=" << g;
      EXPECT_LE(rel_norm(s.grad_table, base.grad_table), 1e-10) << to_string(kind) << " G=" << g;
      EXPECT_LE(rel_norm(s.scores.grad_scores, base.scores.grad_scores), 1e-10);
    }
  }
}

TEST_F(StepTest, SingleShardIsTheDirectLossCall) {
  const StepGrads s = grads(LossKind::decoupled, 1, 0);
  const EmbeddingBlock q = encode(p, [&] {
    std::vector<TextRecord> r;
    for (auto i : batch) r.push_back(c.queries[static_cast<std::size_t>(i)]);
    return r;
  }());
  const ScoreBlock sc = score(q, encode(p, c.labels), p.temperature);
  const LossGrad direct = compute_loss(LossKind::decoupled, sc, s.labels);
  EXPECT_EQ(s.loss, direct.loss);
  EXPECT_EQ(s.scores.grad_scores, direct.grad_scores);
}

TEST_F(StepTest, GradCacheMatchesNaiveBackward) {
  const Matrix up = oracle::random_matrix(*std::make_unique<Rng>(4), 24, 16);
  const std::span<const TextRecord> labels(c.labels);
  Matrix naive = Matrix::Zero(p.embed_table.rows(), 16);
  {
    auto [emb, tape] = encode_retaining(p, labels);
    encoder_backward(p, tape, up, naive);
  }
  for (int eta : {0, 1, 5, 24, 100}) {
    Matrix g = Matrix::Zero(p.embed_table.rows(), 16);
    ActivationMeter meter;
    gradcache_label_grads(p, labels, up, eta, g, &meter);
    if (eta == 0 || eta >= 24) {
      EXPECT_EQ(g, naive) << eta;
    } else {
      EXPECT_LE(rel_norm(g, naive), 1e-12) << eta;
    }
    EXPECT_EQ(meter.peak(), eta == 0 ? 24u : std::min<std::size_t>(static_cast<std::size_t>(eta), 24u));
    EXPECT_EQ(meter.live(), 0u);
  }
  Matrix g;
  EXPECT_THROW(gradcache_label_grads(p, labels, up, -1, g), ConfigError);
  EXPECT_THROW(gradcache_label_grads(p, labels, up.topRows(3), 2, g), ConfigError);
}

TEST_F(StepTest, PeakLabelActivationsFollowMicrobatchNotSlice) {
  EXPECT_EQ(grads(LossKind::decoupled, 1, 0).peak_label_rows, 24u);
  EXPECT_EQ(grads(LossKind::decoupled, 2, 0).peak_label_rows, 12u);
  EXPECT_EQ(grads(LossKind::decoupled, 1, 4).peak_label_rows, 4u);
  EXPECT_EQ(grads(LossKind::decoupled, 2, 4).peak_label_rows, 4u);
  EXPECT_EQ(grads(LossKind::decoupled, 4, 1).peak_label_rows, 1u);
}

TEST_F(StepTest, OptimizerStepsAgreeAcrossShardPlans) {
  const auto run = [&](int g, int eta) {
    ModelParams q = p;
    AdamW opt(q.embed_table.rows(), q.embed_table.cols());
    StepOptions o;
    o.shards = g;
    o.microbatch = eta;
    for (int s = 0; s < 3; ++s) train_step(q, opt, c, batch, pool, o, 1e-2, 0.01);
    return Matrix(q.embed_table - p.embed_table);
  };
  const Matrix base = run(1, 0);
  EXPECT_LE(rel_norm(run(2, 4), base), 1e-8);
  EXPECT_LE(rel_norm(run(4, 1), base), 1e-8);
  EXPECT_EQ(run(1, 0), base);
}

TEST(AdamW, ZeroLearningRateKeepsParameters) {
  Rng rng(1);
  Matrix w = oracle::random_matrix(rng, 5, 3);
  const Matrix before = w;
  AdamW opt(5, 3);
  for (int i = 0; i < 4; ++i) opt.step(w, oracle::random_matrix(rng, 5, 3), 0.0, 0.01);
  EXPECT_EQ(w, before);
  EXPECT_EQ(opt.steps(), 4);
  EXPECT_THROW(opt.step(w, Matrix::Zero(2, 2), 0.1, 0.0), ConfigError);
}

TEST(AdamW, FirstStepIsSignedLrAndDecayIsDecoupled) {
  Matrix w{{1.0, -2.0}};
  const Matrix g{{0.3, -5.0}};
  AdamW opt(1, 2);
  opt.step(w, g, 0.1, 0.0);
  EXPECT_NEAR(w(0, 0), 1.0 - 0.1, 1e-7);
  EXPECT_NEAR(w(0, 1), -2.0 + 0.1, 1e-7);
  // Zero gradient: only the decay term moves the weights.
  Matrix v{{2.0, -4.0}};
  AdamW o2(1, 2);
  o2.step(v, Matrix::Zero(1, 2), 0.1, 0.5);
  EXPECT_DOUBLE_EQ(v(0, 0), 2.0 - 0.1 * 0.5 * 2.0);
  EXPECT_DOUBLE_EQ(v(0, 1), -4.0 + 0.1 * 0.5 * 4.0);
}

TEST(Schedule, WarmupThenLinearDecay) {
  EXPECT_DOUBLE_EQ(scheduled_lr(1.0, 0.1, 0, 100), 0.1);
  EXPECT_DOUBLE_EQ(scheduled_lr(1.0, 0.1, 9, 100), 1.0);
  EXPECT_DOUBLE_EQ(scheduled_lr(1.0, 0.1, 10, 100), 1.0);
  EXPECT_DOUBLE_EQ(scheduled_lr(1.0, 0.1, 55, 100), 0.5);
  EXPECT_DOUBLE_EQ(scheduled_lr(1.0, 0.1, 100, 100), 0.0);
  EXPECT_DOUBLE_EQ(scheduled_lr(2.0, 0.0, 0, 4), 2.0);
  EXPECT_DOUBLE_EQ(scheduled_lr(2.0, 0.0, 3, 4), 0.5);
  EXPECT_DOUBLE_EQ(scheduled_lr(2.0, 1.0, 3, 4), 2.0);
}

TEST(Cost, IdentitiesAtRandomIntegerPoints) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    CostInputs in;
    const auto draw = [&](int lo, int hi) { return static_cast<double>(lo + static_cast<int>(rng.uniform_below(hi - lo + 1))); };
    in.shards = std::pow(2.0, draw(0, 4));
    in.labels = in.shards * draw(4, 1000);
    in.batch = in.shards * draw(1, 64);
    in.dim = draw(8, 256);
    in.microbatch = draw(1, static_cast<int>(in.labels / in.shards) - 1);
    in.mem_query = draw(1, 5000);
    in.mem_label = in.dim + draw(1, 5000);
    in.t_query_fwd = draw(1, 100);
    in.t_query_bwd = draw(1, 200);
    in.t_label_fwd = draw(1, 100);
    in.t_label_bwd = draw(1, 200);
    const CostEstimate e = estimate_cost(in);
    EXPECT_EQ(e.compute_with_cache - e.compute_without_cache, in.labels * in.t_label_fwd / in.shards);
    EXPECT_LT(e.memory_with_cache, e.memory_without_cache);
    CostInputs twice = in;
    twice.shards *= 2;
    const CostEstimate h = estimate_cost(twice);
    EXPECT_EQ(h.memory_with_cache, e.memory_with_cache / 2);
    EXPECT_EQ(h.compute_without_cache, e.compute_without_cache / 2);
    // eta = L/G leaves only the L*d embedding term apart.
    CostInputs full = in;
    full.microbatch = in.labels / in.shards;
    const CostEstimate f = estimate_cost(full);
    EXPECT_EQ(f.memory_without_cache - f.memory_with_cache,
              (in.labels * in.mem_label - full.microbatch * in.mem_label) / in.shards);
  }
}

TEST(Cost, HandValuesAndValidation) {
  CostInputs in{.batch = 2, .labels = 8, .shards = 2, .microbatch = 1, .dim = 3, .mem_query = 10, .mem_label = 20,
                .t_query_fwd = 1, .t_query_bwd = 2, .t_label_fwd = 4, .t_label_bwd = 8};
  const CostEstimate e = estimate_cost(in);
  EXPECT_EQ(e.memory_without_cache, (2 * 13 + 8 * 23 + 16) / 2.0);
  EXPECT_EQ(e.memory_with_cache, (2 * 13 + 8 * 3 + 20 + 16) / 2.0);
  EXPECT_EQ(e.compute_without_cache, (2 * 6 + 8 * 15 + 16) / 2.0);
  EXPECT_EQ(e.compute_with_cache, (2 * 6 + 8 * 19 + 16) / 2.0);
  in.mem_label = 0;
  EXPECT_THROW(estimate_cost(in), ConfigError);
  in.mem_label = -1;
  EXPECT_THROW(estimate_cost(in), ConfigError);
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 2;
  cfg.lr = 0.01;
  cfg.seed = 3;
  cfg.early_stop = false;
  return cfg;
}

TEST(Train, ZeroEpochsReturnsParamsUnchanged) {
  const Corpus c = oracle::random_corpus(1, 12, 10, 20, 3);
  const ModelParams p = init_params(c.vocab.size(), {.dim = 8}, 1);
  TrainConfig cfg = small_config();
  cfg.epochs = 0;
  const TrainResult r = train(c, p, cfg);
  EXPECT_EQ(r.params.embed_table, p.embed_table);
  EXPECT_EQ(r.steps, 0);
  EXPECT_EQ(r.epochs_run, 0);
}

TEST(Train, DeterministicLogsForEveryStrategy) {
  const Corpus c = oracle::random_corpus(2, 20, 30, 40, 4, 2);
  const ModelParams p = init_params(c.vocab.size(), {.dim = 8}, 2);
  for (const char* neg : {"all", "inbatch", "ance:3", "embcache:4"}) {
    TrainConfig cfg = small_config();
    cfg.negatives = parse_negatives(neg);
    cfg.negatives.shortlist_size = 6;
    cfg.negatives.refresh_steps = 3;
    std::ostringstream a, b;
    const TrainResult ra = train(c, p, cfg, {.eval = &c, .log = &a});
    const TrainResult rb = train(c, p, cfg, {.eval = &c, .log = &b});
    EXPECT_EQ(a.str(), b.str()) << neg;
    EXPECT_EQ(ra.params.embed_table, rb.params.embed_table) << neg;
    EXPECT_EQ(ra.steps, 10) << neg;
    EXPECT_TRUE(ra.last_p1) << neg;
    // One line per step plus one per epoch, all JSON.
    std::istringstream in(a.str());
    int lines = 0;
    for (std::string line; std::getline(in, line); ++lines) EXPECT_TRUE(nlohmann::json::accept(line)) << line;
    EXPECT_EQ(lines, 12) << neg;
  }
}

TEST(Train, LossDecreasesOnASmallCorpus) {
  const Corpus c = oracle::random_corpus(3, 32, 32, 100, 5);
  TrainConfig cfg = small_config();
  cfg.epochs = 30;
  cfg.batch_size = 8;
  cfg.lr = 0.05;
  std::vector<double> losses;
  train(c, init_params(c.vocab.size(), {.dim = 16}, 1), cfg,
        {.on_step = [&](const StepInfo& s) { losses.push_back(s.grads->loss); }});
  ASSERT_EQ(losses.size(), 120u);
  EXPECT_LT(losses.back() + losses[losses.size() - 2], 0.5 * (losses[0] + losses[1]));
}

TEST(Train, EarlyStopAtPerfectPrecision) {
  const Corpus c = gen_memorization_dataset(64, 1);
  TrainConfig cfg = small_config();
  cfg.batch_size = 16;
  cfg.epochs = 200;
  cfg.lr = 0.05;
  cfg.early_stop = true;
  const TrainResult r = train(c, init_params(c.vocab.size(), {.dim = 32}, 1), cfg, {.eval = &c});
  EXPECT_TRUE(r.early_stopped);
  EXPECT_LT(r.epochs_run, 200);
  EXPECT_EQ(*r.last_p1, 1.0);
}

TEST(Train, NonFiniteLossAbortsWithDump) {
  const Corpus c = oracle::random_corpus(4, 8, 8, 10, 3);
  ModelParams p = init_params(c.vocab.size(), {.dim = 4, .temperature = 1.0, .normalize = false}, 1);
  p.embed_table *= 1e200;
  testing::TempDir dir;
  TrainConfig cfg = small_config();
  cfg.loss = LossKind::bce;
  EXPECT_THROW(train(c, p, cfg, {.diagnostic_dir = dir.path()}), NumericalError);
  const auto dump = nlohmann::json::parse(testing::read_file(dir / "nan_dump.json"));
  EXPECT_EQ(dump["step"], 0);
  EXPECT_EQ(dump["batch_queries"].size(), 4u);
  EXPECT_EQ(dump["pool_labels"].size(), 8u);
}

TEST(Train, RejectsEmptyCorpusAndBadParams) {
  Corpus empty;
  empty.vocab.add("x");
  empty.relevance = SparseBinaryMatrix(1);
  empty.labels.push_back({0, {1}});
  EXPECT_THROW(train(empty, init_params(2, {.dim = 4}, 1), small_config()), DataError);
  const Corpus c = oracle::random_corpus(5, 8, 8, 10, 3);
  ModelParams p = init_params(c.vocab.size(), {.dim = 4}, 1);
  p.embed_table(1, 1) = std::nan("");
  EXPECT_THROW(train(c, p, small_config()), ConfigError);
}

}  // namespace
}  // namespace xmcde
