// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

#include "xmcde/encoder.h"

#include <cmath>
#include <string>

#include "xmcde/rng.h"

namespace xmcde {

ModelParams init_params(std::size_t vocab_size, const EncoderConfig& config, std::uint64_t seed,
                        std::size_t num_classifier_labels) {
  if (config.dim < 1) throw ConfigError("embedding dimension must be >= 1");
  if (!(config.temperature > 0.0)) throw ConfigError("temperature must be > 0");
  ModelParams params;
  params.dim = config.dim;
  params.temperature = config.temperature;
  params.normalize = config.normalize;
  params.embed_table.resize(static_cast<Eigen::Index>(vocab_size), config.dim);
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(config.dim));
  for (Eigen::Index i = 0; i < params.embed_table.size(); ++i) {
    params.embed_table.data()[i] = rng.uniform(-bound, bound);
  }
  if (num_classifier_labels > 0) {
    params.classifier_w = Matrix::Zero(static_cast<Eigen::Index>(num_classifier_labels), config.dim);
  }
  return params;
}

void validate_params(const ModelParams& params) {
  if (!(params.temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (params.embed_table.cols() != params.dim) throw ConfigError("embedding table width != dim");
  if (!params.embed_table.allFinite()) throw ConfigError("embedding table has non-finite entries");
  if (params.classifier_w) {
    if (params.classifier_w->cols() != params.dim) throw ConfigError("classifier width != dim");
    if (!params.classifier_w->allFinite()) throw ConfigError("classifier has non-finite entries");
  }
}

namespace {

double dropout_scale(const DropoutSpec& dropout, std::int64_t id, Eigen::Index c, int dim) {
  const std::uint64_t h =
      mix64(dropout.mask_seed ^ mix64(static_cast<std::uint64_t>(id) * static_cast<std::uint64_t>(dim) +
                                      static_cast<std::uint64_t>(c)));
  const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
  return u < dropout.rate ? 0.0 : 1.0 / (1.0 - dropout.rate);
}

void apply_dropout(const DropoutSpec& dropout, std::int64_t id, int dim,
                   Eigen::Ref<Eigen::RowVectorXd> row) {
  if (dropout.rate <= 0.0) return;
  for (Eigen::Index c = 0; c < row.size(); ++c) row[c] *= dropout_scale(dropout, id, c, dim);
}

// Mean-pools one record into `out`.
void pool_record(const ModelParams& params, const TextRecord& rec,
                 Eigen::Ref<Eigen::RowVectorXd> out) {
  if (rec.tokens.empty()) throw DataError("cannot encode empty record (id " + std::to_string(rec.id) + ")");
  out.setZero();
  const auto vocab = static_cast<std::int64_t>(params.embed_table.rows());
  for (auto tok : rec.tokens) {
    if (tok < 0 || tok >= vocab) {
      throw DataError("token id " + std::to_string(tok) + " outside embedding table of size " +
                      std::to_string(vocab));
    }
    out += params.embed_table.row(tok);
  }
  out /= static_cast<double>(rec.tokens.size());
}

double row_norm_checked(const ModelParams& params, const TextRecord& rec,
                        const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  const double n = row.norm();
  if (params.normalize && !(n > 0.0)) {
    throw NumericalError("zero-norm embedding for record " + std::to_string(rec.id));
  }
  return n;
}

}  // namespace

EmbeddingBlock encode(const ModelParams& params, std::span<const TextRecord> records,
                      const DropoutSpec& dropout) {
  EmbeddingBlock block;
  block.rows.resize(static_cast<Eigen::Index>(records.size()), params.dim);
  block.ids.reserve(records.size());
  for (std::size_t r = 0; r < records.size(); ++r) {
    auto row = block.rows.row(static_cast<Eigen::Index>(r));
    pool_record(params, records[r], row);
    if (params.normalize) row /= row_norm_checked(params, records[r], row);
    apply_dropout(dropout, records[r].id, params.dim, row);
    block.ids.push_back(records[r].id);
  }
  return block;
}

EncoderTape& EncoderTape::operator=(EncoderTape&& other) noexcept {
  if (this != &other) {
    if (meter_) meter_->release(rows());
    tokens_ = std::move(other.tokens_);
    ids_ = std::move(other.ids_);
    pooled_ = std::move(other.pooled_);
    norms_ = std::move(other.norms_);
    dropout_ = other.dropout_;
    meter_ = other.meter_;
    other.tokens_.clear();
    other.meter_ = nullptr;
  }
  return *this;
}

EncoderTape::~EncoderTape() {
  if (meter_) meter_->release(rows());
}

std::pair<EmbeddingBlock, EncoderTape> encode_retaining(const ModelParams& params,
                                                        std::span<const TextRecord> records,
                                                        ActivationMeter* meter,
                                                        const DropoutSpec& dropout) {
  EncoderTape tape;
  tape.pooled_.resize(static_cast<Eigen::Index>(records.size()), params.dim);
  tape.norms_.resize(static_cast<Eigen::Index>(records.size()));
  tape.dropout_ = dropout;
  EmbeddingBlock block;
  block.rows.resize(static_cast<Eigen::Index>(records.size()), params.dim);
  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto ri = static_cast<Eigen::Index>(r);
    auto pooled = tape.pooled_.row(ri);
    pool_record(params, records[r], pooled);
    tape.norms_[ri] = row_norm_checked(params, records[r], pooled);
    block.rows.row(ri) = params.normalize ? Eigen::RowVectorXd(pooled / tape.norms_[ri])
                                          : Eigen::RowVectorXd(pooled);
    apply_dropout(dropout, records[r].id, params.dim, block.rows.row(ri));
    block.ids.push_back(records[r].id);
    tape.tokens_.push_back(records[r].tokens);
    tape.ids_.push_back(records[r].id);
  }
  tape.meter_ = meter;
  if (meter) meter->acquire(tape.rows());
  return {std::move(block), std::move(tape)};
}

void encoder_backward(const ModelParams& params, const EncoderTape& tape, const Matrix& grad_rows,
                      Matrix& grad_table) {
  if (grad_rows.rows() != static_cast<Eigen::Index>(tape.rows()) || grad_rows.cols() != params.dim) {
    throw ConfigError("encoder_backward: gradient shape does not match the tape");
  }
  if (grad_table.rows() != params.embed_table.rows() || grad_table.cols() != params.dim) {
    throw ConfigError("encoder_backward: gradient table shape does not match the parameters");
  }
  Eigen::RowVectorXd g(params.dim);
  for (std::size_t r = 0; r < tape.rows(); ++r) {
    const auto ri = static_cast<Eigen::Index>(r);
    g = grad_rows.row(ri);
    apply_dropout(tape.dropout_, tape.ids_[r], params.dim, g);
    if (params.normalize) {
      const double n = tape.norms_[ri];
      const Eigen::RowVectorXd y = tape.pooled_.row(ri) / n;
      g = (g - y * y.dot(g)) / n;
    }
    g /= static_cast<double>(tape.tokens_[r].size());
    for (auto tok : tape.tokens_[r]) grad_table.row(tok) += g;
  }
}

ScoreBlock score(const EmbeddingBlock& q, const EmbeddingBlock& l, double temperature) {
  if (q.rows.cols() != l.rows.cols()) {
    throw ConfigError("score: dimension mismatch (" + std::to_string(q.rows.cols()) + " vs " +
                      std::to_string(l.rows.cols()) + ")");
  }
  if (!(temperature > 0.0)) throw ConfigError("score: temperature must be > 0");
  ScoreBlock block;
  block.scores.noalias() = q.rows * l.rows.transpose();
  block.scores /= temperature;
  block.query_ids = q.ids;
  block.label_ids = l.ids;
  block.scale_applied = true;
  block.temperature = temperature;
  return block;
}

ScoreBlock classifier_scores(const ModelParams& params, const EmbeddingBlock& q) {
  if (!params.classifier_w) throw ConfigError("classifier head absent");
  if (q.rows.cols() != params.classifier_w->cols()) throw ConfigError("classifier_scores: dimension mismatch");
  ScoreBlock block;
  block.scores.noalias() = q.rows * params.classifier_w->transpose();
  block.query_ids = q.ids;
  block.label_ids.resize(static_cast<std::size_t>(params.classifier_w->rows()));
  for (std::size_t j = 0; j < block.label_ids.size(); ++j) block.label_ids[j] = static_cast<std::int64_t>(j);
  block.scale_applied = false;
  block.temperature = 1.0;
  return block;
}

ScoreGrads score_backward(const Matrix& grad_scores, const Matrix& q, const Matrix& l,
                          double temperature) {
  ScoreGrads g;
  g.grad_q.noalias() = grad_scores * l;
  g.grad_q /= temperature;
  g.grad_l.noalias() = grad_scores.transpose() * q;
  g.grad_l /= temperature;
  return g;
}

}  // namespace xmcde
