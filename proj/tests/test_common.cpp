#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "tbfm/common.hpp"
#include "tbfm/keyvalue.hpp"
#include "tbfm/matrix_io.hpp"
#include "tbfm/parallel.hpp"
#include "tbfm/rng.hpp"

namespace fs = std::filesystem;
using namespace tbfm;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("tbfm_common_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST(CompensatedSum, RecoversCancelledTerms) {
  CompensatedSum s;
  s.add(1e16);
  s.add(1.0);
  s.add(-1e16);
  EXPECT_EQ(s.value(), 1.0);
}

TEST(FormatDouble, RoundTripsExactly) {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0}) {
    EXPECT_EQ(std::stod(format_double(v)), v);
  }
  EXPECT_EQ(format_double(std::nan("")), "nan");
}

TEST(MeanStd, MatchesHandComputation) {
  const std::vector<double> xs{2, 4, 4, 4, 5, 5, 7, 9};
  const auto ms = mean_std(xs);
  EXPECT_DOUBLE_EQ(ms.mean, 5.0);
  EXPECT_DOUBLE_EQ(ms.std, std::sqrt(32.0 / 7.0));
}

TEST(Rng, SplitmixReferenceValue) {
  // First output of the reference SplitMix64 generator seeded with 0.
  EXPECT_EQ(splitmix64(0), 0xE220A8397B1DCDAFULL);
}

TEST(Rng, DerivedSeedsAreDistinctAndStable) {
  EXPECT_EQ(derive_seed(7, {1, 2}), derive_seed(7, {1, 2}));
  EXPECT_NE(derive_seed(7, {1, 2}), derive_seed(7, {2, 1}));
  EXPECT_NE(derive_seed(7, {0}), derive_seed(8, {0}));
  Rng a(derive_seed(3, {0})), b(derive_seed(3, {0}));
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.normal(), b.normal());
}

TEST(Parallel, ChunkPlanCoversRangeOnce) {
  const ChunkPlan plan{1000, 256};
  EXPECT_EQ(plan.count(), 4u);
  EXPECT_EQ(plan.begin(3), 768u);
  EXPECT_EQ(plan.end(3), 1000u);
  EXPECT_EQ(ChunkPlan({0, 256}).count(), 0u);
}

TEST(Parallel, RunsEveryTaskAndRethrows) {
  std::vector<int> hits(100, 0);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
  for (int h : hits) EXPECT_EQ(h, 1);
  EXPECT_THROW(parallel_for(10, 3,
                            [](std::size_t i) {
                              if (i == 5) throw std::runtime_error("boom");
                            }),
               std::runtime_error);
}

TEST(KeyValue, RoundTripsAndOverwrites) {
  KeyValueDoc doc;
  doc.set("a", 1.5).set("b", std::size_t{3}).set("a", "x");
  EXPECT_EQ(doc.str(), "a=x\nb=3\n");
  std::istringstream in("k=v=w\n\nz=1\n");
  const auto parsed = KeyValueDoc::parse(in);
  EXPECT_EQ(parsed.require_value("k"), "v=w");
  EXPECT_DOUBLE_EQ(parsed.require_double("z"), 1.0);
  EXPECT_THROW(parsed.require_value("missing"), IoError);
  std::istringstream bad("novalue\n");
  EXPECT_THROW(KeyValueDoc::parse(bad), IoError);
}

TEST(MatrixIo, SpkdRoundTripIsBitExact) {
  const auto dir = scratch("spkd");
  RowMatrix m(3, 2);
  m << 0.1, -2.0, 1e-300, 3.5, 1.0 / 3.0, 7.0;
  write_spkd(dir / "m.spkd", m);
  const RowMatrix back = read_spkd(dir / "m.spkd");
  ASSERT_EQ(back.rows(), 3);
  ASSERT_EQ(back.cols(), 2);
  for (Eigen::Index i = 0; i < m.size(); ++i) EXPECT_EQ(back.data()[i], m.data()[i]);
  EXPECT_EQ(fs::file_size(dir / "m.spkd"), 12u + 6u * 8u);
}

TEST(MatrixIo, TruncatedSpkdNamesBothLengths) {
  const auto dir = scratch("trunc");
  RowMatrix m = RowMatrix::Ones(4, 3);
  write_spkd(dir / "m.spkd", m);
  fs::resize_file(dir / "m.spkd", 12 + 90);
  try {
    read_spkd(dir / "m.spkd");
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("expected 96"), std::string::npos) << msg;
    EXPECT_NE(msg.find("got 90"), std::string::npos) << msg;
  }
}

TEST(MatrixIo, BadMagicIsRejected) {
  std::vector<char> bytes{'N', 'O', 'P', 'E', 0, 0, 0, 0, 0, 0, 0, 0};
  EXPECT_THROW(parse_spkd(bytes), IoError);
}

TEST(MatrixIo, CsvParsesAndRejectsRaggedRows) {
  std::istringstream good("1,2,3\n4,5,6\r\n\n");
  const RowMatrix m = parse_csv_matrix(good);
  EXPECT_EQ(m.rows(), 2);
  EXPECT_EQ(m(1, 2), 6.0);
  std::istringstream ragged("1,2,3\n4,5\n");
  try {
    parse_csv_matrix(ragged, "data.csv");
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("data.csv:2"), std::string::npos);
  }
  std::istringstream junk("1,abc\n");
  EXPECT_THROW(parse_csv_matrix(junk), IoError);
}

TEST(MatrixIo, ReadMatrixDetectsFormat) {
  const auto dir = scratch("detect");
  RowMatrix m(2, 2);
  m << 1, 2, 3, 4;
  write_spkd(dir / "a.bin", m);
  write_csv_matrix(dir / "a.csv", m);
  EXPECT_EQ(read_matrix(dir / "a.bin"), m);
  EXPECT_EQ(read_matrix(dir / "a.csv"), m);
}
