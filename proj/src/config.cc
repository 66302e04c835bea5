// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

#include "xmcde/config.h"

#include <fstream>
#include <set>

namespace xmcde {

using json = nlohmann::json;

namespace {

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

}  // namespace

void apply_config(const json& j, RunConfig& config) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> known = {
      "data", "eval_data", "max_len", "batch_size", "epochs", "lr", "weight_decay", "warmup", "shards",
      "microbatch", "loss", "topk_k", "topk_alpha", "topk_tol", "negatives", "shortlist_size", "refresh_steps",
      "shortlist_scorer", "seed", "dim", "temperature", "normalize", "dropout", "early_stop", "eval_every"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  TrainConfig& t = config.train;
  read(j, "data", config.data);
  read(j, "eval_data", config.eval_data);
  read(j, "max_len", config.max_len);
  read(j, "batch_size", t.batch_size);
  read(j, "epochs", t.epochs);
  read(j, "lr", t.lr);
  read(j, "weight_decay", t.weight_decay);
  read(j, "warmup", t.warmup);
  read(j, "shards", t.shards);
  read(j, "microbatch", t.microbatch);
  if (j.contains("loss")) {
    std::string name;
    read(j, "loss", name);
    t.loss = parse_loss_kind(name);
  }
  read(j, "topk_k", t.topk.k);
  read(j, "topk_alpha", t.topk.alpha);
  read(j, "topk_tol", t.topk.tol);
  if (j.contains("negatives")) {
    std::string spec;
    read(j, "negatives", spec);
    const int size = t.negatives.shortlist_size, refresh = t.negatives.refresh_steps;
    t.negatives = parse_negatives(spec);
    t.negatives.shortlist_size = size;
    t.negatives.refresh_steps = refresh;
  }
  read(j, "shortlist_size", t.negatives.shortlist_size);
  read(j, "refresh_steps", t.negatives.refresh_steps);
  if (j.contains("shortlist_scorer")) {
    std::string s;
    read(j, "shortlist_scorer", s);
    if (s == "de") {
      t.shortlist_scorer = ScorerKind::dual_encoder;
    } else if (s == "classifier") {
      t.shortlist_scorer = ScorerKind::classifier;
    } else {
      throw ConfigError("unknown shortlist scorer '" + s + "' (expected de | classifier)");
    }
  }
  read(j, "seed", t.seed);
  read(j, "dim", t.encoder.dim);
  read(j, "temperature", t.encoder.temperature);
  read(j, "normalize", t.encoder.normalize);
  read(j, "dropout", t.dropout);
  read(j, "early_stop", t.early_stop);
  read(j, "eval_every", t.eval_every);
}

json to_json(const RunConfig& config) {
  const TrainConfig& t = config.train;
  return json{{"data", config.data},
              {"eval_data", config.eval_data},
              {"max_len", config.max_len},
              {"batch_size", t.batch_size},
              {"epochs", t.epochs},
              {"lr", t.lr},
              {"weight_decay", t.weight_decay},
              {"warmup", t.warmup},
              {"shards", t.shards},
              {"microbatch", t.microbatch},
              {"loss", std::string(to_string(t.loss))},
              {"topk_k", t.topk.k},
              {"topk_alpha", t.topk.alpha},
              {"topk_tol", t.topk.tol},
              {"negatives", to_string(t.negatives)},
              {"shortlist_size", t.negatives.shortlist_size},
              {"refresh_steps", t.negatives.refresh_steps},
              {"shortlist_scorer", t.shortlist_scorer == ScorerKind::classifier ? "classifier" : "de"},
              {"seed", t.seed},
              {"dim", t.encoder.dim},
              {"temperature", t.encoder.temperature},
              {"normalize", t.encoder.normalize},
              {"dropout", t.dropout},
              {"early_stop", t.early_stop},
              {"eval_every", t.eval_every}};
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  if (j.is_object() && j.contains("config") && j.contains("git_describe")) j = j.at("config");
  apply_config(j, base);
  return base;
}

}  // namespace xmcde
