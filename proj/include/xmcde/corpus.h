// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace xmcde {

// Lowercases and splits on ASCII whitespace.
std::vector<std::string> tokenize(std::string_view text);

// Sequential token vocabulary. Id 0 is always the UNK token.
class Vocabulary {
 public:
  static constexpr std::int32_t kUnkId = 0;
  static constexpr std::string_view kUnkToken = "[unk]";

  Vocabulary();

  // Returns the id of `token`, assigning the next free id if it is new.
  std::int32_t add(std::string_view token);
  // Returns the id of `token`, or kUnkId when unknown.
  std::int32_t lookup(std::string_view token) const;
  std::optional<std::int32_t> find(std::string_view token) const;

  const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }

  // Persisted as one "token\tid" line per entry, in id order.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  std::uint64_t fingerprint() const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> ids_;
};

struct TextRecord {
  std::int64_t id = 0;
  std::vector<std::int32_t> tokens;

  bool operator==(const TextRecord&) const = default;
};

// Binary relevance matrix in CSR layout. Columns within a row are strictly
// increasing.
class SparseBinaryMatrix {
 public:
  explicit SparseBinaryMatrix(std::int32_t cols = 0) : cols_(cols), row_offsets_{0} {}

  // Sorts and deduplicates `cols`; returns the number of duplicates dropped.
  // Throws DataError for a column outside [0, cols()).
  std::size_t append_row(std::vector<std::int32_t> cols);

  std::span<const std::int32_t> row(std::size_t i) const {
    return {col_indices_.data() + row_offsets_[i], col_indices_.data() + row_offsets_[i + 1]};
  }
  bool contains(std::size_t i, std::int32_t col) const;

  std::size_t rows() const { return row_offsets_.size() - 1; }
  std::int32_t cols() const { return cols_; }
  std::size_t nnz() const { return col_indices_.size(); }

  // Number of rows in which each column appears.
  std::vector<std::int64_t> column_counts() const;

  bool operator==(const SparseBinaryMatrix&) const = default;

 private:
  std::int32_t cols_;
  std::vector<std::size_t> row_offsets_;
  std::vector<std::int32_t> col_indices_;
};

enum class Split { train, test };
std::string_view to_string(Split split);
Split parse_split(std::string_view name);

struct Corpus {
  std::vector<TextRecord> queries;
  std::vector<TextRecord> labels;
  SparseBinaryMatrix relevance;
  Split split = Split::train;
  Vocabulary vocab;

  std::size_t num_queries() const { return queries.size(); }
  std::size_t num_labels() const { return labels.size(); }
};

enum class RecordRole { queries, labels };

struct LoadOptions {
  std::size_t max_len = 32;
  // When false, tokens missing from the vocabulary map to UNK instead of
  // being added.
  bool grow_vocab = true;
  // load_corpus(): read the (frozen) vocabulary from this file instead of
  // the corpus directory.
  std::optional<std::filesystem::path> vocab_file;
};

struct JsonlRecords {
  std::vector<TextRecord> records;
  // Raw `labels` arrays (queries only), in file order.
  std::vector<std::vector<std::int64_t>> label_ids;
};

// Reads one record per line: {"id": int, "text": str[, "labels": [int...]]}.
// Throws DataError naming the 1-based line number on malformed input.
JsonlRecords load_jsonl(const std::filesystem::path& path, RecordRole role, Vocabulary& vocab,
                        const LoadOptions& options = {});

struct LoadReport {
  std::vector<std::string> warnings;
  bool vocab_created = false;
};

// Loads a corpus directory holding queries.jsonl, labels.jsonl and
// (optionally) vocab.tsv. options.vocab_file takes precedence over the
// directory's vocab.tsv. Without either, the vocabulary is built from the
// data (labels first, then queries); the caller decides whether to persist it.
Corpus load_corpus(const std::filesystem::path& dir, Split split, const LoadOptions& options = {},
                   LoadReport* report = nullptr);

// Writes queries.jsonl, labels.jsonl and vocab.tsv into `dir` (created if
// needed).
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);

// Content hash of a corpus directory's three files.
std::uint64_t corpus_dir_fingerprint(const std::filesystem::path& dir);

// Synthetic datasets -------------------------------------------------------

inline constexpr std::size_t kSyntheticVocabSize = 30000;
inline constexpr std::size_t kSyntheticTextLength = 16;
inline constexpr std::string_view kTStarToken = "t*";

// Vocabulary of the synthetic generators: UNK, the reserved t* token, then
// "w0" .. "w29999".
Vocabulary synthetic_vocabulary();
std::int32_t synthetic_tstar_id();

struct TStarDataset {
  Corpus train;
  Corpus test;
};

// 1000 train queries and 5000 labels of random text. Queries 0..99 start with
// t* and are tagged with labels {0..4}; label 0's text ends with t*. The other
// train queries carry one random label from 5..4999. The test split holds 1000
// fresh t*-prefixed queries, each tagged only with label 0.
TStarDataset gen_tstar_dataset(std::uint64_t seed);

// n random queries and n random labels, 16 tokens each, query i paired with
// label i. Train and evaluation use this same corpus.
Corpus gen_memorization_dataset(std::size_t n, std::uint64_t seed);

}  // namespace xmcde
