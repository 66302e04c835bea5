// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

#include "xmcde/corpus.h"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "xmcde/common.h"
#include "xmcde/rng.h"

namespace xmcde {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!current.empty()) out.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

Vocabulary::Vocabulary() { add(kUnkToken); }

std::int32_t Vocabulary::add(std::string_view token) {
  std::string key(token);
  if (auto it = ids_.find(key); it != ids_.end()) return it->second;
  const auto id = static_cast<std::int32_t>(tokens_.size());
  tokens_.push_back(key);
  ids_.emplace(std::move(key), id);
  return id;
}

std::optional<std::int32_t> Vocabulary::find(std::string_view token) const {
  if (auto it = ids_.find(std::string(token)); it != ids_.end()) return it->second;
  return std::nullopt;
}

std::int32_t Vocabulary::lookup(std::string_view token) const {
  return find(token).value_or(kUnkId);
}

void Vocabulary::save(const fs::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write vocabulary " + path.string());
  for (std::size_t i = 0; i < tokens_.size(); ++i) out << tokens_[i] << '\t' << i << '\n';
}

Vocabulary Vocabulary::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read vocabulary " + path.string());
  Vocabulary vocab;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected token<TAB>id");
    }
    const std::string token = line.substr(0, tab);
    std::int64_t id = -1;
    try {
      id = std::stoll(line.substr(tab + 1));
    } catch (const std::exception&) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": bad id");
    }
    if (id == kUnkId) {
      if (token != kUnkToken) {
        throw DataError(path.string() + ": id 0 must be the " + std::string(kUnkToken) + " token");
      }
      continue;
    }
    if (id != static_cast<std::int64_t>(vocab.size()) || vocab.find(token)) {
      throw DataError(path.string() + ":" + std::to_string(lineno) +
                      ": ids must be sequential and tokens unique");
    }
    vocab.add(token);
  }
  return vocab;
}

std::uint64_t Vocabulary::fingerprint() const {
  std::uint64_t h = fnv1a(nullptr, 0);
  for (const auto& t : tokens_) {
    h = fnv1a(t, h);
    h = fnv1a("\n", 1, h);
  }
  return h;
}

std::size_t SparseBinaryMatrix::append_row(std::vector<std::int32_t> cols) {
  for (auto c : cols) {
    if (c < 0 || c >= cols_) {
      throw DataError("relevance column " + std::to_string(c) + " outside [0, " +
                      std::to_string(cols_) + ")");
    }
  }
  std::sort(cols.begin(), cols.end());
  const auto before = cols.size();
  cols.erase(std::unique(cols.begin(), cols.end()), cols.end());
  col_indices_.insert(col_indices_.end(), cols.begin(), cols.end());
  row_offsets_.push_back(col_indices_.size());
  return before - cols.size();
}

bool SparseBinaryMatrix::contains(std::size_t i, std::int32_t col) const {
  const auto r = row(i);
  return std::binary_search(r.begin(), r.end(), col);
}

std::vector<std::int64_t> SparseBinaryMatrix::column_counts() const {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(cols_), 0);
  for (auto c : col_indices_) ++counts[static_cast<std::size_t>(c)];
  return counts;
}

std::string_view to_string(Split split) { return split == Split::train ? "train" : "test"; }

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "test") return Split::test;
  throw ConfigError("unknown split '" + std::string(name) + "' (expected train|test)");
}

JsonlRecords load_jsonl(const fs::path& path, RecordRole role, Vocabulary& vocab,
                        const LoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  JsonlRecords out;
  std::string line;
  std::size_t lineno = 0;
  const auto where = [&] { return path.string() + ":" + std::to_string(lineno) + ": "; };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(where() + "malformed JSON: " + e.what());
    }
    if (!obj.is_object() || !obj.contains("id") || !obj["id"].is_number_integer() ||
        !obj.contains("text") || !obj["text"].is_string()) {
      throw DataError(where() + "expected an object with integer 'id' and string 'text'");
    }
    TextRecord rec;
    rec.id = obj["id"].get<std::int64_t>();
    for (const auto& tok : tokenize(obj["text"].get<std::string>())) {
      if (rec.tokens.size() == options.max_len) break;
      rec.tokens.push_back(options.grow_vocab ? vocab.add(tok) : vocab.lookup(tok));
    }
    if (role == RecordRole::queries) {
      if (!obj.contains("labels") || !obj["labels"].is_array()) {
        throw DataError(where() + "query record needs a 'labels' array");
      }
      std::vector<std::int64_t> ids;
      for (const auto& v : obj["labels"]) {
        if (!v.is_number_integer()) throw DataError(where() + "label ids must be integers");
        ids.push_back(v.get<std::int64_t>());
      }
      out.label_ids.push_back(std::move(ids));
    }
    out.records.push_back(std::move(rec));
  }
  return out;
}

Corpus load_corpus(const fs::path& dir, Split split, const LoadOptions& options,
                   LoadReport* report) {
  LoadReport local;
  LoadReport& rep = report ? *report : local;
  Corpus corpus;
  corpus.split = split;
  LoadOptions opts = options;
  if (options.vocab_file) {
    corpus.vocab = Vocabulary::load(*options.vocab_file);
    opts.grow_vocab = false;
  } else if (fs::exists(dir / "vocab.tsv")) {
    corpus.vocab = Vocabulary::load(dir / "vocab.tsv");
    opts.grow_vocab = false;
  } else {
    opts.grow_vocab = true;
    rep.vocab_created = true;
  }

  auto labels = load_jsonl(dir / "labels.jsonl", RecordRole::labels, corpus.vocab, opts);
  auto queries = load_jsonl(dir / "queries.jsonl", RecordRole::queries, corpus.vocab, opts);

  std::unordered_map<std::int64_t, std::int32_t> column_of;
  for (std::size_t j = 0; j < labels.records.size(); ++j) {
    if (!column_of.emplace(labels.records[j].id, static_cast<std::int32_t>(j)).second) {
      throw DataError("duplicate label id " + std::to_string(labels.records[j].id));
    }
  }
  corpus.labels = std::move(labels.records);
  corpus.relevance = SparseBinaryMatrix(static_cast<std::int32_t>(corpus.labels.size()));
  for (std::size_t i = 0; i < queries.records.size(); ++i) {
    const auto qid = queries.records[i].id;
    std::vector<std::int32_t> cols;
    for (auto lid : queries.label_ids[i]) {
      auto it = column_of.find(lid);
      if (it == column_of.end()) {
        throw DataError("query " + std::to_string(qid) + " references unknown label id " +
                        std::to_string(lid));
      }
      cols.push_back(it->second);
    }
    if (cols.empty() && split == Split::train) {
      throw DataError("query " + std::to_string(qid) + " has no positives");
    }
    if (const auto dropped = corpus.relevance.append_row(std::move(cols)); dropped > 0) {
      rep.warnings.push_back("query " + std::to_string(qid) + ": dropped " +
                             std::to_string(dropped) + " duplicate label id(s)");
      spdlog::warn("{}", rep.warnings.back());
    }
  }
  corpus.queries = std::move(queries.records);
  return corpus;
}

namespace {

std::string record_text(const TextRecord& rec, const Vocabulary& vocab) {
  std::string text;
  for (std::size_t i = 0; i < rec.tokens.size(); ++i) {
    if (i) text.push_back(' ');
    text += vocab.token(rec.tokens[i]);
  }
  return text;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void write_corpus(const Corpus& corpus, const fs::path& dir) {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "labels.jsonl");
    if (!out) throw DataError("cannot write " + (dir / "labels.jsonl").string());
    for (const auto& rec : corpus.labels) {
      out << json{{"id", rec.id}, {"text", record_text(rec, corpus.vocab)}}.dump() << '\n';
    }
  }
  {
    std::ofstream out(dir / "queries.jsonl");
    if (!out) throw DataError("cannot write " + (dir / "queries.jsonl").string());
    for (std::size_t i = 0; i < corpus.queries.size(); ++i) {
      const auto& rec = corpus.queries[i];
      json ids = json::array();
      for (auto col : corpus.relevance.row(i)) ids.push_back(corpus.labels[static_cast<std::size_t>(col)].id);
      out << json{{"id", rec.id}, {"text", record_text(rec, corpus.vocab)}, {"labels", ids}}.dump()
          << '\n';
    }
  }
  corpus.vocab.save(dir / "vocab.tsv");
}

std::uint64_t corpus_dir_fingerprint(const fs::path& dir) {
  std::uint64_t h = fnv1a(nullptr, 0);
  for (const char* name : {"queries.jsonl", "labels.jsonl", "vocab.tsv"}) {
    if (fs::exists(dir / name)) h = fnv1a(read_file(dir / name), h);
    h = fnv1a(name, std::char_traits<char>::length(name), h);
  }
  return h;
}

Vocabulary synthetic_vocabulary() {
  Vocabulary vocab;
  vocab.add(kTStarToken);
  for (std::size_t i = 0; i < kSyntheticVocabSize; ++i) vocab.add("w" + std::to_string(i));
  return vocab;
}

std::int32_t synthetic_tstar_id() { return 1; }

namespace {

constexpr std::int32_t kFirstWordId = 2;

TextRecord random_text(std::int64_t id, Rng& rng) {
  TextRecord rec;
  rec.id = id;
  rec.tokens.resize(kSyntheticTextLength);
  for (auto& t : rec.tokens) {
    t = kFirstWordId + static_cast<std::int32_t>(rng.uniform_below(kSyntheticVocabSize));
  }
  return rec;
}

}  // namespace

TStarDataset gen_tstar_dataset(std::uint64_t seed) {
  constexpr std::size_t kTrainQueries = 1000;
  constexpr std::size_t kLabels = 5000;
  constexpr std::size_t kTaggedQueries = 100;
  constexpr std::int32_t kSharedLabels = 5;
  constexpr std::size_t kTestQueries = 1000;

  Rng rng(seed);
  const std::int32_t tstar = synthetic_tstar_id();
  TStarDataset ds;
  ds.train.vocab = synthetic_vocabulary();
  ds.train.split = Split::train;

  for (std::size_t j = 0; j < kLabels; ++j) {
    ds.train.labels.push_back(random_text(static_cast<std::int64_t>(j), rng));
  }
  ds.train.labels[0].tokens.push_back(tstar);

  ds.train.relevance = SparseBinaryMatrix(static_cast<std::int32_t>(kLabels));
  for (std::size_t i = 0; i < kTrainQueries; ++i) {
    auto rec = random_text(static_cast<std::int64_t>(i), rng);
    if (i < kTaggedQueries) {
      rec.tokens[0] = tstar;
      ds.train.relevance.append_row({0, 1, 2, 3, 4});
    } else {
      const auto label = kSharedLabels +
          static_cast<std::int32_t>(rng.uniform_below(kLabels - kSharedLabels));
      ds.train.relevance.append_row({label});
    }
    ds.train.queries.push_back(std::move(rec));
  }

  ds.test.vocab = ds.train.vocab;
  ds.test.split = Split::test;
  ds.test.labels = ds.train.labels;
  ds.test.relevance = SparseBinaryMatrix(static_cast<std::int32_t>(kLabels));
  for (std::size_t i = 0; i < kTestQueries; ++i) {
    auto rec = random_text(static_cast<std::int64_t>(i), rng);
    rec.tokens[0] = tstar;
    ds.test.queries.push_back(std::move(rec));
    ds.test.relevance.append_row({0});
  }
  return ds;
}

Corpus gen_memorization_dataset(std::size_t n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("memorization dataset needs n >= 1");
  Rng rng(seed);
  Corpus corpus;
  corpus.vocab = synthetic_vocabulary();
  corpus.split = Split::train;
  for (std::size_t i = 0; i < n; ++i) corpus.queries.push_back(random_text(static_cast<std::int64_t>(i), rng));
  for (std::size_t i = 0; i < n; ++i) corpus.labels.push_back(random_text(static_cast<std::int64_t>(i), rng));
  corpus.relevance = SparseBinaryMatrix(static_cast<std::int32_t>(n));
  for (std::size_t i = 0; i < n; ++i) corpus.relevance.append_row({static_cast<std::int32_t>(i)});
  return corpus;
}

}  // namespace xmcde
