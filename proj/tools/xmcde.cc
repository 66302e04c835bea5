// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end: synth | train | eval | analyze | cost.

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "xmcde/analysis.h"
#include "xmcde/checkpoint.h"
#include "xmcde/config.h"
#include "xmcde/corpus.h"
#include "xmcde/metrics.h"
#include "xmcde/trainer.h"

#ifndef XMCDE_GIT_DESCRIBE
#define XMCDE_GIT_DESCRIBE "unknown"
#endif

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace xmcde;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kData = 3, kNumerical = 4 };

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

// Training flags; each one overrides the config file only when given.
struct TrainFlags {
  std::string config, data, eval_data, loss, negatives, scorer;
  int batch_size = 0, epochs = 0, shards = 0, microbatch = 0, topk_k = 0, shortlist_size = 0,
      refresh_steps = 0, dim = 0, eval_every = 0;
  double lr = 0, weight_decay = 0, warmup = 0, topk_alpha = 0, topk_tol = 0, temperature = 0, dropout = 0;
  std::uint64_t seed = 0;
  std::size_t max_len = 0;
  bool no_normalize = false, no_early_stop = false;
  std::vector<CLI::Option*> opts;
  CLI::App* app = nullptr;
};

void add_train_flags(CLI::App* app, TrainFlags& f) {
  const RunConfig d;
  const TrainConfig& t = d.train;
  f.app = app;
  app->add_option("--config", f.config, "JSON config file or run manifest");
  app->add_option("--data", f.data, "training corpus directory");
  app->add_option("--eval-data", f.eval_data, "corpus evaluated after every epoch");
  app->add_option("--max-len", f.max_len, "tokens kept per record")->default_val(d.max_len);
  app->add_option("--loss", f.loss, "bce | softmax | infonce | decoupled | softtopk")->default_str("decoupled");
  app->add_option("--negatives", f.negatives, "all | inbatch | ance:M | embcache:K")->default_str("all");
  app->add_option("--batch-size", f.batch_size, "queries per batch")->default_val(t.batch_size);
  app->add_option("--epochs", f.epochs, "training epochs")->default_val(t.epochs);
  app->add_option("--lr", f.lr, "peak learning rate")->default_val(t.lr);
  app->add_option("--weight-decay", f.weight_decay, "decoupled weight decay")->default_val(t.weight_decay);
  app->add_option("--warmup", f.warmup, "fraction of steps used for linear warmup")->default_val(t.warmup);
  app->add_option("--shards", f.shards, "logical shards G")->default_val(t.shards);
  app->add_option("--microbatch", f.microbatch, "label micro-batch size (0 = whole slice)")
      ->default_val(t.microbatch);
  app->add_option("--topk-k", f.topk_k, "k of the SoftTop-k loss")->default_val(t.topk.k);
  app->add_option("--topk-alpha", f.topk_alpha, "sigmoid sharpness of the SoftTop-k loss")
      ->default_val(t.topk.alpha);
  app->add_option("--topk-tol", f.topk_tol, "accepted |sum(z) - k| of the threshold search (0 = 1e-8 * k)")
      ->default_val(t.topk.tol);
  app->add_option("--shortlist-size", f.shortlist_size, "hard-negative shortlist length")
      ->default_val(t.negatives.shortlist_size);
  app->add_option("--refresh-steps", f.refresh_steps, "steps between shortlist refreshes")
      ->default_val(t.negatives.refresh_steps);
  app->add_option("--shortlist-scorer", f.scorer, "de | classifier")->default_str("de");
  app->add_option("--seed", f.seed, "random seed")->default_val(t.seed);
  app->add_option("--dim", f.dim, "embedding dimension")->default_val(t.encoder.dim);
  app->add_option("--temperature", f.temperature, "score temperature")->default_val(t.encoder.temperature);
  app->add_flag("--no-normalize", f.no_normalize, "skip L2 normalization of embeddings");
  app->add_option("--dropout", f.dropout, "dropout rate on pooled embeddings")->default_val(t.dropout);
  app->add_flag("--no-early-stop", f.no_early_stop, "keep training after eval P@1 reaches 1");
  app->add_option("--eval-every", f.eval_every, "epochs between evaluations (0 = never)")
      ->default_val(t.eval_every);
}

RunConfig resolve_config(const TrainFlags& f) {
  RunConfig cfg;
  if (!f.config.empty()) cfg = load_run_config(f.config, cfg);
  json over = json::object();
  const auto given = [&](const char* name) { return f.app->count(name) > 0; };
  if (given("--data")) over["data"] = f.data;
  if (given("--eval-data")) over["eval_data"] = f.eval_data;
  if (given("--max-len")) over["max_len"] = f.max_len;
  if (given("--loss")) over["loss"] = f.loss;
  if (given("--negatives")) over["negatives"] = f.negatives;
  if (given("--batch-size")) over["batch_size"] = f.batch_size;
  if (given("--epochs")) over["epochs"] = f.epochs;
  if (given("--lr")) over["lr"] = f.lr;
  if (given("--weight-decay")) over["weight_decay"] = f.weight_decay;
  if (given("--warmup")) over["warmup"] = f.warmup;
  if (given("--shards")) over["shards"] = f.shards;
  if (given("--microbatch")) over["microbatch"] = f.microbatch;
  if (given("--topk-k")) over["topk_k"] = f.topk_k;
  if (given("--topk-alpha")) over["topk_alpha"] = f.topk_alpha;
  if (given("--topk-tol")) over["topk_tol"] = f.topk_tol;
  if (given("--shortlist-size")) over["shortlist_size"] = f.shortlist_size;
  if (given("--refresh-steps")) over["refresh_steps"] = f.refresh_steps;
  if (given("--shortlist-scorer")) over["shortlist_scorer"] = f.scorer;
  if (given("--seed")) over["seed"] = f.seed;
  if (given("--dim")) over["dim"] = f.dim;
  if (given("--temperature")) over["temperature"] = f.temperature;
  if (given("--no-normalize")) over["normalize"] = false;
  if (given("--dropout")) over["dropout"] = f.dropout;
  if (given("--no-early-stop")) over["early_stop"] = false;
  if (given("--eval-every")) over["eval_every"] = f.eval_every;
  apply_config(over, cfg);
  if (cfg.data.empty()) throw ConfigError("no training data: pass --data or set \"data\" in the config");
  cfg.train.validate();
  return cfg;
}

struct LoadedRun {
  Corpus train;
  std::optional<Corpus> eval;
  ModelParams params;
};

// Loads the corpora and initializes parameters. The training vocabulary is
// saved as `vocab_out` and used for the eval corpus too.
LoadedRun prepare_run(const RunConfig& cfg, const fs::path& vocab_out) {
  LoadedRun run;
  LoadOptions opts;
  opts.max_len = cfg.max_len;
  run.train = load_corpus(cfg.data, Split::train, opts);
  run.train.vocab.save(vocab_out);
  if (!cfg.eval_data.empty()) {
    LoadOptions eval_opts = opts;
    eval_opts.vocab_file = vocab_out;
    run.eval = load_corpus(cfg.eval_data, Split::test, eval_opts);
  }
  run.params = init_params(run.train.vocab.size(), cfg.train.encoder, cfg.train.seed);
  run.params.vocab_fingerprint = run.train.vocab.fingerprint();
  return run;
}

json manifest_json(const RunConfig& cfg, const std::vector<std::string>& argv) {
  json m;
  m["config"] = to_json(cfg);
  m["seed"] = cfg.train.seed;
  m["corpus_fingerprints"] = {{"data", hex64(corpus_dir_fingerprint(cfg.data))}};
  if (!cfg.eval_data.empty()) m["corpus_fingerprints"]["eval_data"] = hex64(corpus_dir_fingerprint(cfg.eval_data));
  m["git_describe"] = XMCDE_GIT_DESCRIBE;
  m["started_at"] = utc_now();
  m["argv"] = argv;
  return m;
}

void cmd_synth(const std::string& kind, std::uint64_t seed, std::size_t n, const fs::path& out) {
  if (kind == "tstar") {
    const TStarDataset ds = gen_tstar_dataset(seed);
    write_corpus(ds.train, out / "train");
    write_corpus(ds.test, out / "test");
    spdlog::info("wrote {} train and {} test queries over {} labels to {}", ds.train.num_queries(),
                 ds.test.num_queries(), ds.train.num_labels(), out.string());
  } else {
    const Corpus c = gen_memorization_dataset(n, seed);
    write_corpus(c, out / "train");
    spdlog::info("wrote {} query-label pairs to {}", c.num_queries(), (out / "train").string());
  }
}

void cmd_train(const TrainFlags& flags, const fs::path& out, const std::vector<std::string>& argv) {
  const RunConfig cfg = resolve_config(flags);
  fs::create_directories(out);
  // The manifest is written once, before any training happens.
  const json manifest = manifest_json(cfg, argv);
  write_json(out / "manifest.json", manifest);
  LoadedRun run = prepare_run(cfg, out / "vocab.tsv");

  std::ofstream log(out / "metrics.jsonl");
  TrainHooks hooks;
  hooks.eval = run.eval ? &*run.eval : nullptr;
  hooks.log = &log;
  hooks.diagnostic_dir = out;
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult result = train(run.train, std::move(run.params), cfg.train, hooks);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_checkpoint(result.params, out / "checkpoint.bin");

  json summary{{"epochs_run", result.epochs_run},
               {"steps", result.steps},
               {"early_stopped", result.early_stopped},
               {"train_seconds", seconds},
               {"finished_at", utc_now()}};
  if (result.last_p1) summary["eval"] = {{"P@1", *result.last_p1}, {"P@5", *result.last_p5}};
  write_json(out / "run_summary.json", summary);
  std::cout << summary.dump(2) << '\n';
}

struct EvalInputs {
  std::string checkpoint, data, train_data, vocab;
  std::size_t max_len = 32;
};

void add_eval_inputs(CLI::App* app, EvalInputs& in, bool need_train) {
  app->add_option("--checkpoint", in.checkpoint, "checkpoint.bin from a training run")->required();
  app->add_option("--data", in.data, "corpus directory to evaluate")->required();
  auto* t = app->add_option("--train-data", in.train_data, "training corpus (label frequencies)");
  if (need_train) t->required();
  app->add_option("--vocab", in.vocab, "vocabulary file (default: the corpus or checkpoint directory's)");
  app->add_option("--max-len", in.max_len, "tokens kept per record")->default_val(32);
}

std::optional<fs::path> find_vocab(const EvalInputs& in, const fs::path& data_dir) {
  if (!in.vocab.empty()) return fs::path(in.vocab);
  if (fs::exists(data_dir / "vocab.tsv")) return std::nullopt;  // load_corpus picks it up
  const fs::path beside = fs::path(in.checkpoint).parent_path() / "vocab.tsv";
  if (fs::exists(beside)) return beside;
  return std::nullopt;
}

Corpus load_for_model(const EvalInputs& in, const fs::path& dir, Split split, const ModelParams& params) {
  LoadOptions opts;
  opts.max_len = in.max_len;
  opts.vocab_file = find_vocab(in, dir);
  opts.grow_vocab = false;
  Corpus c = load_corpus(dir, split, opts);
  if (c.vocab.fingerprint() != params.vocab_fingerprint) {
    throw DataError("vocabulary of " + dir.string() + " does not match the checkpoint (fingerprint " +
                    hex64(c.vocab.fingerprint()) + " vs " + hex64(params.vocab_fingerprint) + ")");
  }
  if (c.vocab.size() != params.vocab_size()) throw DataError("vocabulary size does not match the checkpoint");
  return c;
}

void cmd_eval(const EvalInputs& in, const std::string& out) {
  const ModelParams params = load_checkpoint(in.checkpoint);
  const Corpus corpus = load_for_model(in, in.data, Split::test, params);
  PropensityModel prop;
  if (!in.train_data.empty()) {
    prop = PropensityModel::fit(load_for_model(in, in.train_data, Split::train, params).relevance);
  } else {
    spdlog::warn("no --train-data: propensities are fitted on the evaluated corpus");
    prop = PropensityModel::fit(corpus.relevance);
  }
  const PredictionSet preds = predict(params, corpus, 100);
  json j{{"P@1", precision_at_k(preds, corpus.relevance, 1)},
         {"P@5", precision_at_k(preds, corpus.relevance, 5)},
         {"PSP@5", psp_at_k(preds, corpus.relevance, prop, 5)},
         {"nDCG@5", ndcg_at_k(preds, corpus.relevance, 5)},
         {"R@10", recall_at_k(preds, corpus.relevance, 10)},
         {"R@100", recall_at_k(preds, corpus.relevance, 100)},
         {"num_queries", corpus.num_queries()},
         {"num_labels", corpus.num_labels()}};
  if (!out.empty()) write_json(out, j);
  std::cout << j.dump(2) << '\n';
}

std::vector<std::int64_t> frequencies(const EvalInputs& in, const ModelParams& params, const Corpus& fallback) {
  if (in.train_data.empty()) return fallback.relevance.column_counts();
  return load_for_model(in, in.train_data, Split::train, params).relevance.column_counts();
}

json bucket_json(const BucketReport& r) {
  json buckets = json::array();
  for (std::size_t b = 0; b < r.buckets.size(); ++b) {
    buckets.push_back({{"bucket", b + 1}, {"labels", r.buckets[b].size()}, {"contribution", r.contribution[b]}});
  }
  return {{"total", r.total}, {"buckets", buckets}};
}

std::vector<double> parse_doubles(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item == "inf" || item == "+inf") {
      out.push_back(INFINITY);
    } else if (item == "-inf") {
      out.push_back(-INFINITY);
    } else {
      try {
        out.push_back(std::stod(item));
      } catch (const std::exception&) {
        throw ConfigError("not a number: '" + item + "'");
      }
    }
  }
  return out;
}

void cmd_grad_trace(const TrainFlags& flags, const std::vector<std::int32_t>& labels, const fs::path& out,
                    const std::vector<std::string>& argv) {
  const RunConfig cfg = resolve_config(flags);
  fs::create_directories(out);
  write_json(out / "manifest.json", manifest_json(cfg, argv));
  LoadedRun run = prepare_run(cfg, out / "vocab.tsv");
  for (auto l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= run.train.num_labels()) {
      throw ConfigError("watched label " + std::to_string(l) + " does not exist");
    }
  }
  GradTraceRecorder recorder(labels);
  TrainHooks hooks;
  hooks.eval = run.eval ? &*run.eval : nullptr;
  hooks.on_step = [&](const StepInfo& info) { recorder.record(info); };
  train(run.train, std::move(run.params), cfg.train, hooks);

  std::ostringstream csv;
  csv << "label,step,query,coefficient\n" << std::setprecision(17);
  json summary = json::object();
  for (const auto& [label, points] : recorder.traces()) {
    double lo = INFINITY, hi = -INFINITY;
    std::size_t inside = 0;
    for (const auto& p : points) {
      csv << label << ',' << p.step << ',' << p.query << ',' << p.coefficient << '\n';
      lo = std::min(lo, p.coefficient);
      hi = std::max(hi, p.coefficient);
      inside += p.coefficient > 0.0 && p.coefficient < 1.0;
    }
    json s{{"points", points.size()}, {"in_unit_interval", inside}};
    if (!points.empty()) {
      s["min"] = lo;
      s["max"] = hi;
    }
    summary[std::to_string(label)] = s;
  }
  write_text(out / "grad_trace.csv", csv.str());
  write_json(out / "grad_trace_summary.json", summary);
  std::cout << summary.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("xmcde"));
  const std::vector<std::string> args(argv, argv + argc);

  CLI::App app{"Dual-encoder training and evaluation for extreme multi-label retrieval"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace | debug | info | warn | error | off")->default_val("info");
  std::function<void()> run;

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  std::string synth_kind, synth_out;
  std::uint64_t synth_seed = 0;
  std::size_t synth_n = 10000;
  synth->add_option("kind", synth_kind, "tstar | memorize")->required()->check(CLI::IsMember({"tstar", "memorize"}));
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--seed", synth_seed, "random seed")->default_val(0);
  synth->add_option("--n", synth_n, "pairs in the memorization set")->default_val(10000);
  synth->callback([&] { run = [&] { cmd_synth(synth_kind, synth_seed, synth_n, synth_out); }; });

  // train
  auto* train_cmd = app.add_subcommand("train", "train a dual encoder");
  TrainFlags train_flags;
  std::string train_out;
  add_train_flags(train_cmd, train_flags);
  train_cmd->add_option("--out", train_out, "run directory (checkpoint, metrics log, manifest)")->required();
  train_cmd->callback([&] { run = [&] { cmd_train(train_flags, train_out, args); }; });

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  EvalInputs eval_in;
  std::string eval_out;
  add_eval_inputs(eval_cmd, eval_in, false);
  eval_cmd->add_option("--out", eval_out, "also write the metrics JSON here");
  eval_cmd->callback([&] { run = [&] { cmd_eval(eval_in, eval_out); }; });

  // analyze
  auto* analyze = app.add_subcommand("analyze", "diagnostics of training runs and checkpoints");
  analyze->require_subcommand(1);

  auto* trace_cmd = analyze->add_subcommand("grad-trace", "train while recording positive-gradient coefficients");
  TrainFlags trace_flags;
  std::vector<std::int32_t> trace_labels;
  std::string trace_out;
  add_train_flags(trace_cmd, trace_flags);
  trace_cmd->add_option("--labels", trace_labels, "label indices to watch")->required()->delimiter(',');
  trace_cmd->add_option("--out", trace_out, "output directory")->required();
  trace_cmd->callback([&] { run = [&] { cmd_grad_trace(trace_flags, trace_labels, trace_out, args); }; });

  auto* dist_cmd = analyze->add_subcommand("score-dist", "histograms of positive and negative pair scores");
  EvalInputs dist_in;
  std::string dist_out;
  int dist_bins = 50;
  add_eval_inputs(dist_cmd, dist_in, false);
  dist_cmd->add_option("--bins", dist_bins, "histogram bins")->default_val(50);
  dist_cmd->add_option("--out", dist_out, "output directory")->required();
  dist_cmd->callback([&] {
    run = [&] {
      const ModelParams params = load_checkpoint(dist_in.checkpoint);
      const ScoreHistogram h =
          score_distributions(params, load_for_model(dist_in, dist_in.data, Split::test, params), dist_bins);
      const json j{{"edges", h.edges},
                   {"positive", h.positive},
                   {"negative", h.negative},
                   {"mean_positive", h.mean_positive},
                   {"mean_negative", h.mean_negative},
                   {"separation", h.separation()}};
      write_json(fs::path(dist_out) / "score_dist.json", j);
      std::cout << json{{"separation", h.separation()}}.dump() << '\n';
    };
  });

  auto* pr_cmd = analyze->add_subcommand("pr-curve", "precision and recall over score thresholds");
  EvalInputs pr_in;
  std::string pr_out, pr_thresholds;
  add_eval_inputs(pr_cmd, pr_in, false);
  pr_cmd->add_option("--thresholds", pr_thresholds, "comma-separated thresholds (default: 21 over the score range)");
  pr_cmd->add_option("--out", pr_out, "output directory")->required();
  pr_cmd->callback([&] {
    run = [&] {
      const ModelParams params = load_checkpoint(pr_in.checkpoint);
      const Corpus corpus = load_for_model(pr_in, pr_in.data, Split::test, params);
      const Matrix s = score(encode(params, corpus.queries), encode(params, corpus.labels), params.temperature).scores;
      const std::vector<double> t = pr_thresholds.empty() ? default_thresholds(s) : parse_doubles(pr_thresholds);
      std::ostringstream csv;
      csv << "threshold,precision,recall\n" << std::setprecision(17);
      for (const auto& p : pr_curve(s, corpus.relevance, t)) {
        csv << p.threshold << ',' << p.precision << ',' << p.recall << '\n';
      }
      write_text(fs::path(pr_out) / "pr_curve.csv", csv.str());
    };
  });

  auto* dec_cmd = analyze->add_subcommand("deciles", "P@5 contribution of label-frequency deciles");
  EvalInputs dec_in;
  std::string dec_out;
  add_eval_inputs(dec_cmd, dec_in, true);
  dec_cmd->add_option("--out", dec_out, "output directory")->required();
  dec_cmd->callback([&] {
    run = [&] {
      const ModelParams params = load_checkpoint(dec_in.checkpoint);
      const Corpus corpus = load_for_model(dec_in, dec_in.data, Split::test, params);
      const auto freq = frequencies(dec_in, params, corpus);
      const BucketReport r = decile_report(predict(params, corpus, 5), corpus.relevance, freq, 5);
      write_json(fs::path(dec_out) / "deciles.json", bucket_json(r));
      std::cout << bucket_json(r).dump(2) << '\n';
    };
  });

  auto* sim_cmd = analyze->add_subcommand("label-sim", "P@5 contribution by label-neighborhood similarity");
  EvalInputs sim_in;
  std::string sim_out;
  int sim_bins = 3, sim_neighbors = 10;
  std::int64_t tail_max = -1;
  add_eval_inputs(sim_cmd, sim_in, true);
  sim_cmd->add_option("--bins", sim_bins, "similarity bins")->default_val(3);
  sim_cmd->add_option("--neighbors", sim_neighbors, "nearest labels averaged per label")->default_val(10);
  sim_cmd->add_option("--tail-max", tail_max, "only bin labels with at most this many training examples");
  sim_cmd->add_option("--out", sim_out, "output directory")->required();
  sim_cmd->callback([&] {
    run = [&] {
      const ModelParams params = load_checkpoint(sim_in.checkpoint);
      const Corpus corpus = load_for_model(sim_in, sim_in.data, Split::test, params);
      const auto freq = frequencies(sim_in, params, corpus);
      const SimilarityBins bins = label_similarity_bins(
          params, corpus, predict(params, corpus, 5), freq, sim_bins, sim_neighbors,
          tail_max >= 0 ? std::optional<std::int64_t>(tail_max) : std::nullopt, 5);
      json j = bucket_json(bins.report);
      json sims = json::array();
      for (double s : bins.mean_neighbor_similarity) sims.push_back(std::isnan(s) ? json(nullptr) : json(s));
      j["mean_neighbor_similarity"] = sims;
      write_json(fs::path(sim_out) / "label_sim.json", j);
      std::cout << bucket_json(bins.report).dump(2) << '\n';
    };
  });

  // cost
  auto* cost_cmd = app.add_subcommand("cost", "memory and compute estimate with and without gradient caching");
  CostInputs ci{256, 100000, 1, 256, 768, 2e5, 2e5, 1e6, 2e6, 1e6, 2e6};
  std::vector<double> sweep;
  cost_cmd->add_option("--batch", ci.batch, "queries per batch B")->capture_default_str();
  cost_cmd->add_option("--labels", ci.labels, "label pool L")->capture_default_str();
  cost_cmd->add_option("--shards", ci.shards, "shards G")->capture_default_str();
  cost_cmd->add_option("--microbatch", ci.microbatch, "label micro-batch eta")->capture_default_str();
  cost_cmd->add_option("--dim", ci.dim, "embedding dimension d")->capture_default_str();
  cost_cmd->add_option("--mem-query", ci.mem_query, "query encoder activation memory per record")
      ->capture_default_str();
  cost_cmd->add_option("--mem-label", ci.mem_label, "label encoder activation memory per record")
      ->capture_default_str();
  cost_cmd->add_option("--t-query-fwd", ci.t_query_fwd, "query forward time")->capture_default_str();
  cost_cmd->add_option("--t-query-bwd", ci.t_query_bwd, "query backward time")->capture_default_str();
  cost_cmd->add_option("--t-label-fwd", ci.t_label_fwd, "label forward time")->capture_default_str();
  cost_cmd->add_option("--t-label-bwd", ci.t_label_bwd, "label backward time")->capture_default_str();
  cost_cmd->add_option("--sweep-eta", sweep, "table mode: one row per micro-batch size")->delimiter(',');
  cost_cmd->callback([&] {
    run = [&] {
      const auto row = [](const CostInputs& in) {
        const CostEstimate e = estimate_cost(in);
        return json{{"microbatch", in.microbatch},
                    {"memory_with_cache", e.memory_with_cache},
                    {"memory_without_cache", e.memory_without_cache},
                    {"compute_with_cache", e.compute_with_cache},
                    {"compute_without_cache", e.compute_without_cache},
                    {"memory_ratio", e.memory_with_cache / e.memory_without_cache},
                    {"compute_ratio", e.compute_with_cache / e.compute_without_cache}};
      };
      if (sweep.empty()) {
        std::cout << row(ci).dump(2) << '\n';
        return;
      }
      json table = json::array();
      for (double eta : sweep) {
        CostInputs in = ci;
        in.microbatch = eta;
        table.push_back(row(in));
      }
      std::cout << table.dump(2) << '\n';
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    run();
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return kUsage;
  } catch (const DataError& e) {
    spdlog::error("{}", e.what());
    return kData;
  } catch (const NumericalError& e) {
    spdlog::error("{}", e.what());
    return kNumerical;
  } catch (const fs::filesystem_error& e) {
    spdlog::error("{}", e.what());
    return kData;
  } catch (const json::exception& e) {
    spdlog::error("{}", e.what());
    return kData;
  }
  return kOk;
}
