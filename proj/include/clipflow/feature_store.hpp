#pragma once

// Feature matrices on disk and the dataset manifests that reference them.
//
// FeatureFile layout (all little-endian):
//   [0, 8)    magic "CLIPFEAT"
//   [8, 12)   version (u32, currently 1)
//   [12, 20)  row count N (u64)
//   [20, 24)  dim D (u32)
//   [24, 28)  reserved (u32, zero)
//   [28, ...) N*D float32, row-major

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "clipflow/detail/binary_io.hpp"
#include "clipflow/error.hpp"

namespace clipflow {

using FeatureMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr std::string_view kFeatureMagic = "CLIPFEAT";
inline constexpr std::uint32_t kFeatureVersion = 1;
inline constexpr std::size_t kFeatureHeaderBytes = 28;

struct FeatureHeader {
  std::uint32_t version = kFeatureVersion;
  std::uint64_t count = 0;
  std::uint32_t dim = 0;
};

inline void write_feature_file(const FeatureMatrix& features, const std::filesystem::path& path) {
  if (features.rows() < 1 || features.cols() < 1) throw ConfigError("feature matrix must be non-empty");
  if (!features.allFinite()) throw NumericError("non-finite feature");

  detail::ByteWriter w;
  w.bytes(kFeatureMagic);
  w.put<std::uint32_t>(kFeatureVersion);
  w.put<std::uint64_t>(static_cast<std::uint64_t>(features.rows()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(features.cols()));
  w.put<std::uint32_t>(0);
  for (Eigen::Index i = 0; i < features.size(); ++i) w.put<float>(features.data()[i]);
  detail::write_file_bytes(path, w.data());
}

namespace detail {

inline FeatureHeader parse_feature_header(ByteReader& r) {
  if (r.remaining() < kFeatureMagic.size() || r.bytes(kFeatureMagic.size()) != kFeatureMagic)
    throw FormatError("not a feature file");
  FeatureHeader h;
  h.version = r.get<std::uint32_t>();
  if (h.version != kFeatureVersion)
    throw FormatError("unsupported feature file version " + std::to_string(h.version));
  h.count = r.get<std::uint64_t>();
  h.dim = r.get<std::uint32_t>();
  r.get<std::uint32_t>();  // reserved
  if (h.dim == 0) throw FormatError("corrupt feature file: zero dimension");
  return h;
}

}  // namespace detail

/// Reads only the header; used to check an extractor's output cheaply.
inline FeatureHeader read_feature_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string head(kFeatureHeaderBytes, '\0');
  in.read(head.data(), static_cast<std::streamsize>(head.size()));
  head.resize(static_cast<std::size_t>(in.gcount()));
  detail::ByteReader r(head, "corrupt feature file: truncated header");
  return detail::parse_feature_header(r);
}

inline FeatureMatrix read_feature_file(const std::filesystem::path& path) {
  const std::string data = detail::read_file_bytes(path);
  detail::ByteReader r(data, "corrupt feature file: truncated header");
  const FeatureHeader h = detail::parse_feature_header(r);

  const std::uint64_t expected = h.count * h.dim * sizeof(float);
  if (h.count != 0 && expected / h.count / sizeof(float) != h.dim)
    throw FormatError("corrupt feature file: shape overflow");
  if (r.remaining() != expected) {
    throw FormatError("corrupt feature file: header declares " + std::to_string(h.count) + "x" +
                      std::to_string(h.dim) + " but payload has " + std::to_string(r.remaining()) + " bytes");
  }
  FeatureMatrix m(static_cast<Eigen::Index>(h.count), static_cast<Eigen::Index>(h.dim));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.get<float>();
  if (!m.allFinite()) throw FormatError("corrupt feature file: non-finite value");
  return m;
}

// ---------------------------------------------------------------------------
// Manifests

enum class Label : int { natural = 0, generated = 1 };
enum class Role { train, val, test };

inline std::string_view to_string(Role role) {
  switch (role) {
    case Role::train: return "train";
    case Role::val: return "val";
    case Role::test: return "test";
  }
  return "?";
}

struct ManifestEntry {
  std::filesystem::path path;
  Label label = Label::natural;
  std::string dataset;
  Role role = Role::train;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  std::vector<ManifestEntry> with_role(Role role) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
      if (e.role == role) out.push_back(e);
    return out;
  }
};

namespace detail {

inline Label parse_label(std::string_view tok) {
  if (tok == "0" || tok == "natural") return Label::natural;
  if (tok == "1" || tok == "generated" || tok == "proxy") return Label::generated;
  bool numeric = !tok.empty();
  for (char c : tok) numeric = numeric && ((c >= '0' && c <= '9') || c == '-' || c == '.');
  if (numeric) throw FormatError("labels are binary (got \"" + std::string(tok) + "\")");
  throw FormatError("unknown label token \"" + std::string(tok) + "\"");
}

inline Role parse_role(std::string_view tok) {
  if (tok == "train") return Role::train;
  if (tok == "val") return Role::val;
  if (tok == "test") return Role::test;
  throw FormatError("unknown role \"" + std::string(tok) + "\"");
}

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find('\t', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace detail

/// Parses `path<TAB>label<TAB>dataset<TAB>role` lines. Blank lines and lines
/// starting with '#' are ignored. Relative paths resolve against the
/// manifest's directory.
inline DatasetManifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir) {
  DatasetManifest manifest;
  std::set<std::tuple<Role, std::string, Label>> seen;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    std::string_view line = text.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start);
    start = end == std::string_view::npos ? text.size() + 1 : end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty() || line.front() == '#') continue;

    const auto where = [&] { return "manifest line " + std::to_string(line_no) + ": "; };
    auto fields = detail::split_tabs(line);
    if (fields.size() != 4) throw FormatError(where() + "expected 4 tab-separated fields");

    ManifestEntry e;
    try {
      e.label = detail::parse_label(fields[1]);
      e.role = detail::parse_role(fields[3]);
    } catch (const FormatError& err) {
      throw FormatError(where() + err.what());
    }
    e.dataset = std::string(fields[2]);
    if (e.dataset.empty()) throw FormatError(where() + "dataset name is empty");
    std::filesystem::path p{std::string(fields[0])};
    e.path = p.is_absolute() ? p : base_dir / p;
    if (!std::filesystem::exists(e.path)) throw IoError(where() + "missing file " + e.path.string());
    if (!seen.emplace(e.role, e.dataset, e.label).second) {
      throw FormatError(where() + "duplicate dataset \"" + e.dataset + "\" for role " +
                        std::string(to_string(e.role)) + " and label " +
                        std::to_string(static_cast<int>(e.label)));
    }
    manifest.entries.push_back(std::move(e));
  }
  return manifest;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  const std::string text = detail::read_file_bytes(path);
  return parse_manifest(text, path.parent_path());
}

/// Row-concatenation of every feature file in `entries` carrying `label`.
/// Returns an empty matrix when none match.
inline FeatureMatrix load_features(const std::vector<ManifestEntry>& entries, Label label) {
  std::vector<FeatureMatrix> parts;
  Eigen::Index rows = 0;
  Eigen::Index dim = -1;
  for (const auto& e : entries) {
    if (e.label != label) continue;
    parts.push_back(read_feature_file(e.path));
    if (dim >= 0 && parts.back().cols() != dim)
      throw FormatError("feature dimension mismatch in " + e.path.string());
    dim = parts.back().cols();
    rows += parts.back().rows();
  }
  if (parts.empty()) return {};
  FeatureMatrix out(rows, dim);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p;
    r += p.rows();
  }
  return out;
}

}  // namespace clipflow
