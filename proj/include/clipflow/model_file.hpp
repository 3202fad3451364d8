#pragma once

// Single-artifact model: adapter + flow + training metadata + optional
// decision threshold.
//
// Layout (little-endian):
//   magic "CLIPFLOW", version u32
//   C u32, D_raw u32, K u32, H u32, clamp f64
//   normalize u8, frozen_adapter u8, mode u8, paper_eq7_signs u8
//   adapter_seed u64, flow_seed u64, train_seed u64
//   has_threshold u8, threshold f64
//   K permutations of C u32 each
//   f32 payload: W (C x D_raw, row-major), then per block w1, b1, w2, b2
//   FNV-1a 64 checksum of everything above

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "clipflow/detail/binary_io.hpp"
#include "clipflow/error.hpp"
#include "clipflow/feature_adapter.hpp"
#include "clipflow/flow_model.hpp"

namespace clipflow {

enum class TrainMode : std::uint8_t { none = 0, natural = 1, proxy = 2, both = 3 };

inline std::string_view to_string(TrainMode m) {
  switch (m) {
    case TrainMode::none: return "none";
    case TrainMode::natural: return "N";
    case TrainMode::proxy: return "P";
    case TrainMode::both: return "N+P";
  }
  return "?";
}

inline TrainMode parse_train_mode(std::string_view s) {
  if (s == "N") return TrainMode::natural;
  if (s == "P") return TrainMode::proxy;
  if (s == "N+P" || s == "NP") return TrainMode::both;
  throw ConfigError("unknown training mode \"" + std::string(s) + "\" (expected N, P or N+P)");
}

struct ModelMeta {
  TrainMode mode = TrainMode::none;
  bool frozen_adapter = false;
  bool paper_eq7_signs = false;
  std::uint64_t adapter_seed = 0;
  std::uint64_t flow_seed = 0;
  std::uint64_t train_seed = 0;
  std::optional<double> threshold;
};

struct Model {
  AdapterParams adapter;
  FlowParams flow;
  ModelMeta meta;
};

inline constexpr std::string_view kModelMagic = "CLIPFLOW";
inline constexpr std::uint32_t kModelVersion = 1;

/// Rounds every trainable value to float precision, i.e. to exactly what the
/// model file can hold.
inline void round_to_file_precision(Model& m) {
  auto round = [](auto& x) { x = x.unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); }); };
  round(m.adapter.weight);
  for (auto& b : m.flow.blocks) {
    round(b.net.w1);
    round(b.net.b1);
    round(b.net.w2);
    round(b.net.b2);
  }
}

namespace detail {

template <typename Derived>
void put_f32(ByteWriter& w, const Eigen::DenseBase<Derived>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) w.put<float>(static_cast<float>(m(r, c)));
}

template <typename Derived>
void get_f32(ByteReader& rd, Eigen::DenseBase<Derived>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rd.get<float>();
}

}  // namespace detail

inline std::string encode_model(const Model& m) {
  const auto& f = m.flow;
  if (m.adapter.out_dim() != f.dim) throw ConfigError("adapter output dim does not match flow dim");
  detail::ByteWriter w;
  w.bytes(kModelMagic);
  w.put<std::uint32_t>(kModelVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(f.dim));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.adapter.in_dim()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(f.blocks.size()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(f.hidden));
  w.put<double>(f.clamp);
  w.put<std::uint8_t>(m.adapter.normalize ? 1 : 0);
  w.put<std::uint8_t>(m.meta.frozen_adapter ? 1 : 0);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(m.meta.mode));
  w.put<std::uint8_t>(m.meta.paper_eq7_signs ? 1 : 0);
  w.put<std::uint64_t>(m.meta.adapter_seed);
  w.put<std::uint64_t>(m.meta.flow_seed);
  w.put<std::uint64_t>(m.meta.train_seed);
  w.put<std::uint8_t>(m.meta.threshold ? 1 : 0);
  w.put<double>(m.meta.threshold.value_or(0.0));
  for (const auto& b : f.blocks)
    for (auto p : b.permutation) w.put<std::uint32_t>(p);
  detail::put_f32(w, m.adapter.weight);
  for (const auto& b : f.blocks) {
    detail::put_f32(w, b.net.w1);
    detail::put_f32(w, b.net.b1);
    detail::put_f32(w, b.net.w2);
    detail::put_f32(w, b.net.b2);
  }
  w.put<std::uint64_t>(detail::fnv1a64(w.data()));
  return std::move(w.data());
}

inline Model decode_model(std::string_view data) {
  if (data.size() < kModelMagic.size() || data.substr(0, kModelMagic.size()) != kModelMagic)
    throw FormatError("not a model file");
  detail::ByteReader head(data.substr(kModelMagic.size()), "model checksum failure: file truncated");
  const auto version = head.get<std::uint32_t>();
  if (version > kModelVersion)
    throw FormatError("model file version " + std::to_string(version) + " is newer than supported version " +
                      std::to_string(kModelVersion));
  if (version != kModelVersion) throw FormatError("unsupported model file version " + std::to_string(version));

  if (data.size() < kModelMagic.size() + 4 + 8) throw FormatError("model checksum failure: file truncated");
  const auto body = data.substr(0, data.size() - 8);
  detail::ByteReader tail(data.substr(data.size() - 8), "model checksum failure");
  if (tail.get<std::uint64_t>() != detail::fnv1a64(body)) throw FormatError("model checksum failure");

  detail::ByteReader r(body.substr(kModelMagic.size() + 4), "model file is inconsistent with its header");
  Model m;
  const auto dim = r.get<std::uint32_t>();
  const auto in_dim = r.get<std::uint32_t>();
  const auto blocks = r.get<std::uint32_t>();
  const auto hidden = r.get<std::uint32_t>();
  m.flow.dim = dim;
  m.flow.hidden = hidden;
  m.flow.clamp = r.get<double>();
  m.adapter.normalize = r.get<std::uint8_t>() != 0;
  m.meta.frozen_adapter = r.get<std::uint8_t>() != 0;
  const auto mode = r.get<std::uint8_t>();
  if (mode > 3) throw FormatError("unknown training mode tag " + std::to_string(mode));
  m.meta.mode = static_cast<TrainMode>(mode);
  m.meta.paper_eq7_signs = r.get<std::uint8_t>() != 0;
  m.meta.adapter_seed = r.get<std::uint64_t>();
  m.meta.flow_seed = r.get<std::uint64_t>();
  m.meta.train_seed = r.get<std::uint64_t>();
  const bool has_threshold = r.get<std::uint8_t>() != 0;
  const double threshold = r.get<double>();
  if (has_threshold) m.meta.threshold = threshold;

  if (dim < 2 || dim % 2 != 0 || in_dim < 1 || blocks < 1 || hidden < 1)
    throw FormatError("model header has invalid dimensions");
  // Guard against absurd allocations before trusting the header.
  const std::uint64_t need = std::uint64_t{blocks} * dim * 4 +
                             4 * (std::uint64_t{dim} * in_dim +
                                  std::uint64_t{blocks} * (std::uint64_t{hidden} * (dim / 2 + 1) + std::uint64_t{dim} * (hidden + 1)));
  if (need != r.remaining()) throw FormatError("model file is inconsistent with its header");

  m.flow.blocks.resize(blocks);
  for (auto& b : m.flow.blocks) {
    b.permutation.resize(dim);
    for (auto& p : b.permutation) p = r.get<std::uint32_t>();
  }
  m.adapter.weight.resize(dim, in_dim);
  detail::get_f32(r, m.adapter.weight);
  for (auto& b : m.flow.blocks) {
    b.net = SubnetWeights::zeros(dim, hidden);
    detail::get_f32(r, b.net.w1);
    detail::get_f32(r, b.net.b1);
    detail::get_f32(r, b.net.w2);
    detail::get_f32(r, b.net.b2);
  }
  validate_flow(m.flow);
  if (!m.adapter.weight.allFinite()) throw NumericError("non-finite adapter parameter");
  return m;
}

inline void save_model(const Model& m, const std::filesystem::path& path) {
  detail::write_file_bytes(path, encode_model(m));
}

inline Model load_model(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("model file not found: " + path.string());
  return decode_model(detail::read_file_bytes(path));
}

}  // namespace clipflow
