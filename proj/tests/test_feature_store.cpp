#include <gtest/gtest.h>

#include <cstring>
#include <fstream>
#include <limits>
#include <random>

#include "clipflow/feature_store.hpp"
#include "test_util.hpp"

using namespace clipflow;
using clipflow::testing::TempDir;

namespace {

void expect_error_containing(const std::function<void()>& fn, const std::string& needle) {
  try {
    fn();
    FAIL() << "expected an error containing \"" << needle << "\"";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
  }
}

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream(p) << s;
}

}  // namespace

TEST(FeatureFile, OneByThreeLayoutIsHeaderPlusPayload) {
  TempDir dir;
  FeatureMatrix m(1, 3);
  m << 1.0f, 2.5f, -3.0f;
  write_feature_file(m, dir / "a.feat");
  const std::string bytes = detail::read_file_bytes(dir / "a.feat");
  ASSERT_EQ(bytes.size(), 28u + 12u);
  EXPECT_EQ(bytes.substr(0, 8), "CLIPFEAT");
  float last;
  std::memcpy(&last, bytes.data() + 36, 4);
  EXPECT_EQ(last, -3.0f);
  std::uint64_t count;
  std::memcpy(&count, bytes.data() + 12, 8);
  EXPECT_EQ(count, 1u);
}

TEST(FeatureFile, RoundTripIsBitExact) {
  TempDir dir;
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<float> u(-1e6f, 1e6f);
  for (int trial = 0; trial < 20; ++trial) {
    const int rows = 1 + trial % 7, cols = 1 + (trial * 3) % 11;
    FeatureMatrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = trial % 2 ? u(rng) : std::ldexp(u(rng), -140);
    write_feature_file(m, dir / "r.feat");
    const FeatureMatrix back = read_feature_file(dir / "r.feat");
    ASSERT_EQ(back.rows(), rows);
    ASSERT_EQ(back.cols(), cols);
    EXPECT_EQ(std::memcmp(back.data(), m.data(), sizeof(float) * m.size()), 0);
  }
}

TEST(FeatureFile, NonFiniteIsRejectedBeforeWriting) {
  TempDir dir;
  FeatureMatrix m = FeatureMatrix::Ones(2, 2);
  m(1, 0) = std::numeric_limits<float>::quiet_NaN();
  expect_error_containing([&] { write_feature_file(m, dir / "nan.feat"); }, "non-finite feature");
  EXPECT_FALSE(std::filesystem::exists(dir / "nan.feat"));
}

TEST(FeatureFile, ZeroedMagicIsNotAFeatureFile) {
  TempDir dir;
  write_feature_file(FeatureMatrix::Ones(2, 3), dir / "m.feat");
  std::string bytes = detail::read_file_bytes(dir / "m.feat");
  std::fill(bytes.begin(), bytes.begin() + 8, '\0');
  detail::write_file_bytes(dir / "m.feat", bytes);
  expect_error_containing([&] { read_feature_file(dir / "m.feat"); }, "not a feature file");
}

TEST(FeatureFile, ShortenedPayloadIsCorrupt) {
  TempDir dir;
  write_feature_file(FeatureMatrix::Ones(5, 4), dir / "t.feat");
  std::string bytes = detail::read_file_bytes(dir / "t.feat");
  bytes.resize(bytes.size() - 4);
  detail::write_file_bytes(dir / "t.feat", bytes);
  expect_error_containing([&] { read_feature_file(dir / "t.feat"); }, "corrupt feature file");
}

TEST(FeatureFile, TrailingBytesAreCorrupt) {
  TempDir dir;
  write_feature_file(FeatureMatrix::Ones(2, 2), dir / "x.feat");
  std::string bytes = detail::read_file_bytes(dir / "x.feat") + "junk";
  detail::write_file_bytes(dir / "x.feat", bytes);
  expect_error_containing([&] { read_feature_file(dir / "x.feat"); }, "corrupt feature file");
}

TEST(FeatureFile, HeaderOnlyRead) {
  TempDir dir;
  write_feature_file(FeatureMatrix::Zero(3, 7), dir / "h.feat");
  const auto h = read_feature_header(dir / "h.feat");
  EXPECT_EQ(h.count, 3u);
  EXPECT_EQ(h.dim, 7u);
}

TEST(Manifest, ParsesTrainEntries) {
  TempDir dir;
  write_feature_file(FeatureMatrix::Ones(2, 3), dir / "nat.feat");
  write_feature_file(FeatureMatrix::Ones(2, 3), dir / "prx.feat");
  write_text(dir / "m.tsv", "# comment\nnat.feat\t0\tlsun\ttrain\nprx.feat\t1\tlsun\ttrain\n\n");
  const auto m = load_manifest(dir / "m.tsv");
  ASSERT_EQ(m.entries.size(), 2u);
  EXPECT_EQ(m.entries[0].label, Label::natural);
  EXPECT_EQ(m.entries[1].label, Label::generated);
  EXPECT_EQ(m.entries[1].path, dir / "prx.feat");
  EXPECT_EQ(m.with_role(Role::train).size(), 2u);
  EXPECT_EQ(load_features(m.entries, Label::generated).rows(), 2);
}

TEST(Manifest, LabelTwoIsRejected) {
  TempDir dir;
  write_feature_file(FeatureMatrix::Ones(1, 1), dir / "a.feat");
  write_text(dir / "m.tsv", "a.feat\t2\tset\ttrain\n");
  expect_error_containing([&] { load_manifest(dir / "m.tsv"); }, "labels are binary");
}

TEST(Manifest, UnknownLabelToken) {
  TempDir dir;
  write_feature_file(FeatureMatrix::Ones(1, 1), dir / "a.feat");
  write_text(dir / "m.tsv", "a.feat\tmaybe\tset\ttrain\n");
  expect_error_containing([&] { load_manifest(dir / "m.tsv"); }, "unknown label token");
}

TEST(Manifest, MissingFileIsNamed) {
  TempDir dir;
  write_text(dir / "m.tsv", "absent.feat\t0\tset\ttest\n");
  expect_error_containing([&] { load_manifest(dir / "m.tsv"); }, "absent.feat");
}

TEST(Manifest, DuplicateDatasetWithinRole) {
  TempDir dir;
  write_feature_file(FeatureMatrix::Ones(1, 1), dir / "a.feat");
  write_text(dir / "m.tsv", "a.feat\t0\tset\ttest\na.feat\t0\tset\ttest\n");
  expect_error_containing([&] { load_manifest(dir / "m.tsv"); }, "duplicate dataset");
  // Same dataset in another role, or with the other label, is fine.
  write_text(dir / "ok.tsv", "a.feat\t0\tset\ttest\na.feat\t1\tset\ttest\na.feat\t0\tset\tval\n");
  EXPECT_EQ(load_manifest(dir / "ok.tsv").entries.size(), 3u);
}

TEST(Manifest, EmptyDatasetNameAndBadFieldCount) {
  TempDir dir;
  write_feature_file(FeatureMatrix::Ones(1, 1), dir / "a.feat");
  write_text(dir / "m.tsv", "a.feat\t0\t\ttest\n");
  expect_error_containing([&] { load_manifest(dir / "m.tsv"); }, "dataset name is empty");
  write_text(dir / "n.tsv", "a.feat 0 set test\n");
  expect_error_containing([&] { load_manifest(dir / "n.tsv"); }, "4 tab-separated fields");
}
