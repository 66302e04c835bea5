// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "xmcde/common.h"
#include "xmcde/corpus.h"

namespace xmcde {

struct EncoderConfig {
  int dim = 64;
  double temperature = 0.05;
  bool normalize = true;
};

// Shared dual-encoder parameters: one token-embedding table used for both
// queries and labels, plus an optional one-vs-all classifier head.
struct ModelParams {
  int dim = 0;
  double temperature = 1.0;
  bool normalize = true;
  Matrix embed_table;                  // vocab_size x dim
  std::optional<Matrix> classifier_w;  // num_labels x dim
  std::uint64_t vocab_fingerprint = 0;

  std::size_t vocab_size() const { return static_cast<std::size_t>(embed_table.rows()); }
};

// Table entries uniform in (-1/sqrt(d), 1/sqrt(d)); classifier rows zero.
// `num_classifier_labels` > 0 attaches a classifier head.
ModelParams init_params(std::size_t vocab_size, const EncoderConfig& config, std::uint64_t seed,
                        std::size_t num_classifier_labels = 0);

// Throws ConfigError unless every entry is finite and temperature > 0.
void validate_params(const ModelParams& params);

struct EmbeddingBlock {
  Matrix rows;
  std::vector<std::int64_t> ids;
};

struct ScoreBlock {
  Matrix scores;
  std::vector<std::int64_t> query_ids;
  std::vector<std::int64_t> label_ids;
  bool scale_applied = false;
  double temperature = 1.0;
};

// Inverted dropout on pooled embeddings. The mask of element (id, c) is a
// pure function of (mask_seed, id, c), so a re-encode reproduces it.
struct DropoutSpec {
  double rate = 0.0;
  std::uint64_t mask_seed = 0;
};

// Counts embedding rows whose activations are held for a backward pass.
class ActivationMeter {
 public:
  void acquire(std::size_t rows) {
    live_ += rows;
    if (live_ > peak_) peak_ = live_;
  }
  void release(std::size_t rows) { live_ -= rows; }
  std::size_t live() const { return live_; }
  std::size_t peak() const { return peak_; }
  void reset_peak() { peak_ = live_; }

 private:
  std::size_t live_ = 0;
  std::size_t peak_ = 0;
};

// Activations retained by encode_retaining(). Releases its rows from the
// meter when destroyed.
class EncoderTape {
 public:
  EncoderTape() = default;
  EncoderTape(const EncoderTape&) = delete;
  EncoderTape& operator=(const EncoderTape&) = delete;
  EncoderTape(EncoderTape&& other) noexcept { *this = std::move(other); }
  EncoderTape& operator=(EncoderTape&& other) noexcept;
  ~EncoderTape();

  std::size_t rows() const { return tokens_.size(); }

 private:
  friend std::pair<EmbeddingBlock, EncoderTape> encode_retaining(
      const ModelParams&, std::span<const TextRecord>, ActivationMeter*, const DropoutSpec&);
  friend void encoder_backward(const ModelParams&, const EncoderTape&, const Matrix&, Matrix&);

  std::vector<std::vector<std::int32_t>> tokens_;
  std::vector<std::int64_t> ids_;
  Matrix pooled_;
  Vector norms_;
  DropoutSpec dropout_;
  ActivationMeter* meter_ = nullptr;
};

// Mean of the token embeddings of each record, L2-normalized when
// params.normalize is set. No activations are retained.
EmbeddingBlock encode(const ModelParams& params, std::span<const TextRecord> records,
                      const DropoutSpec& dropout = {});

// Same forward pass, keeping what encoder_backward() needs.
std::pair<EmbeddingBlock, EncoderTape> encode_retaining(const ModelParams& params,
                                                        std::span<const TextRecord> records,
                                                        ActivationMeter* meter = nullptr,
                                                        const DropoutSpec& dropout = {});

// Accumulates d(loss)/d(embed_table) into `grad_table` given d(loss)/d(rows).
void encoder_backward(const ModelParams& params, const EncoderTape& tape, const Matrix& grad_rows,
                      Matrix& grad_table);

// scores[i][j] = <q_i, l_j> / temperature.
ScoreBlock score(const EmbeddingBlock& q, const EmbeddingBlock& l, double temperature);

// scores[i][d] = <q_i, w_d> over every classifier row (label text is ignored).
ScoreBlock classifier_scores(const ModelParams& params, const EmbeddingBlock& q);

struct ScoreGrads {
  Matrix grad_q;
  Matrix grad_l;
};

// Backward of score(): given d(loss)/d(scores), returns gradients for both
// embedding blocks.
ScoreGrads score_backward(const Matrix& grad_scores, const Matrix& q, const Matrix& l,
                          double temperature);

}  // namespace xmcde
