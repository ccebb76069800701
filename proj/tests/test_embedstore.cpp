#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <set>

#include "fixtures.hpp"
#include "sparsepat/core/error.hpp"
#include "sparsepat/core/rng.hpp"
#include "sparsepat/embedstore.hpp"

using namespace sparsepat;
using namespace sparsepat::embedstore;
using testsupport::TempDir;

namespace {

EmbeddingRecord make_record(std::size_t i, std::size_t patients, std::size_t d, Rng& rng) {
  EmbeddingRecord r;
  r.record_id = "rec" + std::to_string(i);
  r.patient_id = "pat" + std::to_string(i % patients);
  for (std::size_t j = 0; j < d; ++j) {
    r.image_embedding.push_back(static_cast<float>(rng.normal()));
    r.text_embedding.push_back(static_cast<float>(rng.normal()));
  }
  r.labels = {Label::positive, Label::negative, Label::unknown};
  r.report_excerpt = "finding " + std::to_string(i);
  return r;
}

std::vector<EmbeddingRecord> make_records(std::size_t n, std::size_t patients, std::size_t d,
                                          std::uint64_t seed = 1) {
  Rng rng(seed);
  std::vector<EmbeddingRecord> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_record(i, patients, d, rng));
  return out;
}

DatasetManifest manifest(std::size_t d) {
  return DatasetManifest::with_dims(d, d, {"a", "b", "c"});
}

void write_lines(const std::filesystem::path& p, const std::vector<std::string>& lines) {
  std::ofstream out(p);
  for (const auto& l : lines) out << l << "\n";
}

}  // namespace

TEST(Ingest, ThreeValidRecords) {
  TempDir dir("ingest");
  write_jsonl(dir.path() / "r.jsonl", make_records(3, 3, 4));
  const auto ds = ingest_records(dir.path() / "r.jsonl", manifest(4));
  EXPECT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.manifest().counts.total(), 3u);
  EXPECT_EQ(ds.manifest().digest.size(), 64u);
}

TEST(Ingest, DimensionMismatchNamesRecordAndLine) {
  TempDir dir("ingest");
  auto recs = make_records(3, 3, 4);
  recs[1].image_embedding.push_back(0.5f);
  write_jsonl(dir.path() / "r.jsonl", recs);
  try {
    ingest_records(dir.path() / "r.jsonl", manifest(4));
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("rec1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
  }
}

TEST(Ingest, RejectsNonFiniteAndDuplicates) {
  TempDir dir("ingest");
  auto recs = make_records(2, 2, 4);
  auto j = record_to_json(recs[0]);
  j["text_embedding"][2] = 1e300;  // overflows float
  write_lines(dir.path() / "inf.jsonl", {j.dump()});
  EXPECT_THROW(ingest_records(dir.path() / "inf.jsonl", manifest(4)), ValidationError);

  recs[1].record_id = recs[0].record_id;
  write_jsonl(dir.path() / "dup.jsonl", recs);
  EXPECT_THROW(ingest_records(dir.path() / "dup.jsonl", manifest(4)), ValidationError);
}

TEST(Ingest, DigestStableAcrossIngestsAndRoundTrip) {
  TempDir dir("ingest");
  write_jsonl(dir.path() / "r.jsonl", make_records(1000, 250, 8));
  const auto a = ingest_records(dir.path() / "r.jsonl", manifest(8));
  const auto b = ingest_records(dir.path() / "r.jsonl", manifest(8));
  EXPECT_EQ(a.manifest().digest, b.manifest().digest);

  save_dataset({dir.path() / "store"}, a);
  const auto c = load_dataset({dir.path() / "store"});
  EXPECT_EQ(c.records(), a.records());
  EXPECT_EQ(c.manifest().digest, a.manifest().digest);

  auto m = a.manifest();
  const auto packed = pack_records(a.records(), m, true);
  EXPECT_EQ(unpack_records(packed, m), a.records());
}

TEST(Ingest, DigestIgnoresSplits) {
  auto recs = make_records(10, 5, 4);
  const auto m = manifest(4);
  const auto before = dataset_digest(recs, m);
  for (auto& r : recs) r.split = Split::test;
  EXPECT_EQ(dataset_digest(recs, m), before);
}

TEST(Truncate, Examples) {
  EXPECT_EQ(truncate_excerpt("a b c", 256), "a b c");
  EXPECT_EQ(truncate_excerpt("", 256), "");
  std::string in, want;
  for (int i = 0; i < 300; ++i) {
    in += (i ? " " : "") + std::string(1, static_cast<char>('a' + i % 26));
    if (i < 256) want += (i ? " " : "") + std::string(1, static_cast<char>('a' + i % 26));
  }
  EXPECT_EQ(truncate_excerpt(in, 256), want);
}

TEST(Truncate, UnicodeWhitespaceAndSpacingPreserved) {
  EXPECT_EQ(truncate_excerpt("one two  three\tfour", 2), "one two");
  EXPECT_EQ(truncate_excerpt("  lead  gap   x", 2), "  lead  gap");
  EXPECT_THROW(truncate_excerpt("x", 0), ConfigError);
}

TEST(Splits, PatientRecordsShareOneSplit) {
  auto recs = make_records(50, 10, 2);  // 5 records per patient
  Dataset ds(manifest(2), recs);
  const auto s = assign_splits(ds, {}, 4);
  std::map<std::string, Split> seen;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    auto [it, fresh] = seen.emplace(recs[i].patient_id, s[i]);
    if (!fresh) {
      EXPECT_EQ(it->second, s[i]) << recs[i].patient_id;
    }
  }
}

TEST(Splits, DeterministicAndOrderIndependent) {
  auto recs = make_records(400, 100, 2);
  Dataset ds(manifest(2), recs);
  const auto a = assign_splits(ds, {}, 9);
  EXPECT_EQ(a, assign_splits(ds, {}, 9));

  std::vector<EmbeddingRecord> rev(recs.rbegin(), recs.rend());
  Dataset dr(manifest(2), rev);
  const auto b = assign_splits(dr, {}, 9);
  for (std::size_t i = 0; i < recs.size(); ++i) EXPECT_EQ(a[i], b[recs.size() - 1 - i]);
}

TEST(Splits, FractionsWithinThreePointsForThousandPatients) {
  auto recs = make_records(5000, 1000, 1);
  Dataset ds(manifest(1), recs);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto s = assign_splits(ds, {0.8, 0.1, 0.1}, seed);
    std::map<Split, double> frac;
    std::map<std::string, std::set<Split>> per_patient;
    for (std::size_t i = 0; i < s.size(); ++i) {
      frac[s[i]] += 1.0 / static_cast<double>(s.size());
      per_patient[recs[i].patient_id].insert(s[i]);
    }
    EXPECT_NEAR(frac[Split::train], 0.8, 0.03);
    EXPECT_NEAR(frac[Split::val], 0.1, 0.03);
    EXPECT_NEAR(frac[Split::test], 0.1, 0.03);
    for (const auto& [_, set] : per_patient) EXPECT_EQ(set.size(), 1u);
  }
}

TEST(Splits, Errors) {
  Dataset empty(manifest(1), {});
  EXPECT_THROW(assign_splits(empty, {}, 1), ConfigError);
  Dataset ds(manifest(1), make_records(4, 2, 1));
  EXPECT_THROW(assign_splits(ds, {0.5, 0.5, 0.1}, 1), ConfigError);
  EXPECT_THROW(assign_splits(ds, {1.0, 0.0, 0.0}, 1), ConfigError);
}
