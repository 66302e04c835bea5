// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

#include "xmcde/checkpoint.h"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace xmcde {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr std::array<char, 8> kMagic = {'X', 'M', 'C', 'D', 'E', 'C', 'K', '\0'};

template <typename T>
void put(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const std::filesystem::path& path) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw DataError("truncated checkpoint " + path.string());
  }
  return value;
}

void read_matrix(std::ifstream& in, Matrix& m, const std::filesystem::path& path) {
  const auto bytes = static_cast<std::streamsize>(m.size() * static_cast<Eigen::Index>(sizeof(double)));
  if (!in.read(reinterpret_cast<char*>(m.data()), bytes)) {
    throw DataError("truncated checkpoint " + path.string());
  }
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  validate_params(params);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, (params.normalize ? 1u : 0u) | (params.classifier_w ? 2u : 0u));
  put<std::uint64_t>(out, params.vocab_size());
  put<std::uint64_t>(out, static_cast<std::uint64_t>(params.dim));
  put<std::uint64_t>(out, params.classifier_w ? static_cast<std::uint64_t>(params.classifier_w->rows()) : 0);
  put<double>(out, params.temperature);
  put<std::uint64_t>(out, params.vocab_fingerprint);
  out.write(reinterpret_cast<const char*>(params.embed_table.data()),
            static_cast<std::streamsize>(params.embed_table.size() * static_cast<Eigen::Index>(sizeof(double))));
  if (params.classifier_w) {
    out.write(reinterpret_cast<const char*>(params.classifier_w->data()),
              static_cast<std::streamsize>(params.classifier_w->size() * static_cast<Eigen::Index>(sizeof(double))));
  }
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path.string());
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw DataError(path.string() + " is not an xmcde checkpoint");
  }
  const auto version = get<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto flags = get<std::uint32_t>(in, path);
  const auto vocab = get<std::uint64_t>(in, path);
  const auto dim = get<std::uint64_t>(in, path);
  const auto labels = get<std::uint64_t>(in, path);
  ModelParams params;
  params.temperature = get<double>(in, path);
  params.vocab_fingerprint = get<std::uint64_t>(in, path);
  params.normalize = (flags & 1u) != 0;
  params.dim = static_cast<int>(dim);
  params.embed_table.resize(static_cast<Eigen::Index>(vocab), static_cast<Eigen::Index>(dim));
  read_matrix(in, params.embed_table, path);
  if (flags & 2u) {
    params.classifier_w = Matrix(static_cast<Eigen::Index>(labels), static_cast<Eigen::Index>(dim));
    read_matrix(in, *params.classifier_w, path);
  }
  validate_params(params);
  return params;
}

}  // namespace xmcde
