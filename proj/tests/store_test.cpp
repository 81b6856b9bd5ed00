#include <gtest/gtest.h>

#include <fstream>
#include <sstream>
#include <thread>

#include "fleetlens/store.hpp"
#include "support.hpp"

namespace fleetlens {
namespace {

using testing::plate_ids;
using testing::populate_fixture_store;
using testing::TempDir;
using testing::ts;
using Ids = std::vector<std::string>;

Query labels(std::map<Task, std::set<std::string>> l, bool include_unknown = false) {
  Query q;
  q.labels = std::move(l);
  q.include_unknown = include_unknown;
  return q;
}

class StoreTest : public ::testing::Test {
 protected:
  void SetUp() override { populate_fixture_store(store); }
  TempDir dir;
  Store store{dir / "store"};
};

TEST_F(StoreTest, SearchByLabelOrdersByLastSeen) {
  auto page = store.search(labels({{Task::make, {"Ford"}}}));
  EXPECT_EQ(page.total, 5u);
  EXPECT_EQ(plate_ids(page), (Ids{"P9", "P6", "P3", "P1", "P0"}));
  EXPECT_EQ(page.items[0]["last_seen"], "2024-05-02T19:00:00Z");
}

TEST_F(StoreTest, FiltersAcrossTasksAreConjunctive) {
  EXPECT_EQ(plate_ids(store.search(labels({{Task::make, {"Ford"}}, {Task::colour, {"Red"}}}))),
            (Ids{"P9", "P6", "P0"}));
  EXPECT_EQ(plate_ids(store.search(
                labels({{Task::make, {"Ford", "Toyota"}}, {Task::colour, {"Blue"}}}))),
            (Ids{"P7", "P1"}));
}

TEST_F(StoreTest, IncludeUnknownAdmitsNoDetectionWinners) {
  EXPECT_EQ(plate_ids(store.search(
                labels({{Task::make, {"Ford"}}, {Task::colour, {"Red"}}}, true))),
            (Ids{"P9", "P6", "P4", "P3", "P0"}));
  EXPECT_EQ(plate_ids(store.search(labels({{Task::make, {"Ford"}}}, true))),
            (Ids{"P9", "P6", "P4", "P3", "P1", "P0"}));
  EXPECT_EQ(plate_ids(store.search(labels({{Task::make, {"NO_DETECTION"}}}))), (Ids{"P4"}));
}

TEST_F(StoreTest, AliasesInQueriesAreCanonicalized) {
  EXPECT_EQ(store.search(labels({{Task::colour, {"Maroon"}}})).total, 6u);
  EXPECT_THROW(store.search(labels({{Task::colour, {"Teal"}}})), InvalidQuery);
}

TEST_F(StoreTest, TimeAndPlaceMustHoldForTheSameSighting) {
  Query q;
  q.from = ts("2024-05-02T00:00:00Z");
  EXPECT_EQ(store.search(q).total, 10u);
  q.lat_min = -28.0;
  q.lat_max = -26.0;
  EXPECT_EQ(store.search(q).total, 0u);

  Query day1;
  day1.to = ts("2024-05-01T23:59:59Z");
  day1.lat_min = -27.35;
  day1.lat_max = -26.0;
  day1.lon_min = 153.0;
  day1.lon_max = 153.25;
  EXPECT_EQ(plate_ids(store.search(day1)), (Ids{"P2", "P1", "P0"}));

  Query window;
  window.from = ts("2024-05-02T15:00:00Z");
  window.to = ts("2024-05-02T17:00:00Z");
  EXPECT_EQ(plate_ids(store.search(window)), (Ids{"P7", "P6", "P5"}));
}

TEST_F(StoreTest, PagingAndValidation) {
  auto q = labels({{Task::colour, {"Red"}}});
  q.limit = 2;
  q.offset = 1;
  auto page = store.search(q);
  EXPECT_EQ(page.total, 6u);
  EXPECT_EQ(plate_ids(page), (Ids{"P8", "P6"}));
  q.offset = 10;
  EXPECT_TRUE(store.search(q).items.empty());

  EXPECT_THROW(store.search(Query{}), InvalidQuery);
  q.limit = 0;
  EXPECT_THROW(store.search(q), InvalidQuery);
  q.limit = 501;
  EXPECT_THROW(store.search(q), InvalidQuery);
  Query rev;
  rev.from = ts("2024-05-03T00:00:00Z");
  rev.to = ts("2024-05-01T00:00:00Z");
  EXPECT_THROW(store.search(rev), InvalidQuery);
}

TEST_F(StoreTest, PlateProfileCarriesTallyAndEvidence) {
  auto p = store.get_plate("p 3");
  EXPECT_EQ(p["plate_id"], "P3");
  EXPECT_EQ(p["sightings"].size(), 2u);
  const auto& make = p["tasks"]["make"];
  EXPECT_EQ(make["winner"], "Ford");
  EXPECT_EQ(make["effective_label"], "Ford");
  EXPECT_EQ(make["counts"]["Ford"], 2);
  EXPECT_EQ(make["evidence"], (json{"P3-a", "P3-b"}));
  EXPECT_EQ(p["tasks"]["colour"]["winner"], "NO_DETECTION");
  EXPECT_EQ(p["evidence"].size(), 4u);
  EXPECT_THROW(store.get_plate("NOPE"), NotFound);
}

TEST_F(StoreTest, CorrectionsOverrideAndKeepHistory) {
  auto before = store.get_plate("P1");
  store.submit_correction("P1", Task::make, "Mazda", "alice", ts("2024-06-01T00:00:00Z"));
  auto after = store.submit_correction("P1", Task::make, "Mazda", "bob",
                                       ts("2024-06-02T00:00:00Z"));
  const auto& make = after["tasks"]["make"];
  EXPECT_EQ(make["effective_label"], "Mazda");
  EXPECT_EQ(make["winner"], "Ford");
  EXPECT_TRUE(make["corrected"].get<bool>());
  EXPECT_EQ(make["correction"]["author"], "bob");
  ASSERT_EQ(make["correction_history"].size(), 2u);
  EXPECT_EQ(make["correction_history"][1]["author"], "alice");
  EXPECT_EQ(make["evidence"], before["tasks"]["make"]["evidence"]);

  EXPECT_EQ(plate_ids(store.search(labels({{Task::make, {"Mazda"}}}))), (Ids{"P5", "P1"}));
  EXPECT_THROW(store.submit_correction("P1", Task::make, "Lada", "x", {}), UnknownLabel);
  EXPECT_THROW(store.submit_correction("ZZ9", Task::make, "Ford", "x", {}), NotFound);
  EXPECT_THROW(store.submit_correction("P1", Task::make, "Ford", "", {}), InvalidArgument);
}

TEST_F(StoreTest, UpsertIsIdempotent) {
  auto seq = store.last_seq();
  auto snapshot = store.snapshot_text();
  auto log = read_file_bytes((dir / "store/events.jsonl").string());
  auto ps = testing::store_fixture_predictions();
  auto report = store.upsert_results(run_mvi(ps), ps);
  EXPECT_EQ(report.applied, 0u);
  EXPECT_EQ(report.unchanged, 20u);
  EXPECT_EQ(store.last_seq(), seq);
  EXPECT_EQ(store.snapshot_text(), snapshot);
  EXPECT_EQ(read_file_bytes((dir / "store/events.jsonl").string()), log);
}

TEST_F(StoreTest, DanglingEvidenceIsAWarning) {
  auto ps = testing::store_fixture_predictions("sim:b");
  auto tallies = run_mvi(ps);
  ps.erase(ps.begin());
  auto report = store.upsert_results(tallies, ps);
  EXPECT_EQ(report.applied, 20u);
  ASSERT_EQ(report.warnings.size(), 1u);
  EXPECT_NE(report.warnings[0].find("dangling evidence"), std::string::npos);
}

TEST_F(StoreTest, SeveralBackendsNeedAnActiveOne) {
  auto ps = testing::store_fixture_predictions("sim:b");
  for (auto& p : ps)
    if (p.task == Task::make && !is_no_detection(p.label)) p.label = "Holden";
  store.upsert_results(run_mvi(ps), ps);
  EXPECT_THROW(store.search(labels({{Task::make, {"Ford"}}})), InvalidQuery);
  store.set_active_backend(Task::make, "sim:b");
  EXPECT_EQ(store.search(labels({{Task::make, {"Holden"}}})).total, 9u);
  EXPECT_EQ(store.get_plate("P0")["tasks"]["make"]["active_backend"], "sim:b");
  store.set_active_backend(Task::make, "mock:test");
  EXPECT_EQ(store.search(labels({{Task::make, {"Ford"}}})).total, 5u);
  EXPECT_EQ(store.snapshot_text(), store.stored_snapshot_text());
}

TEST_F(StoreTest, ReplayReproducesSnapshot) {
  store.submit_correction("P2", Task::colour, "Maroon", "carol", ts("2024-06-01T00:00:00Z"));
  auto snap = store.snapshot_text();
  EXPECT_EQ(store.rebuild_snapshot_from_log(), snap);
  EXPECT_EQ(store.stored_snapshot_text(), snap);
  Store reopened(dir / "store");
  EXPECT_EQ(reopened.snapshot_text(), snap);
  EXPECT_EQ(reopened.taxonomies().size(), 2u);
  EXPECT_EQ(reopened.records().size(), 20u);
}

TEST_F(StoreTest, TamperedLogIsRejected) {
  auto path = dir / "store/events.jsonl";
  auto text = read_file_bytes(path.string());
  auto pos = text.find("\"Ford\"");
  ASSERT_NE(pos, std::string::npos);
  text.replace(pos, 6, "\"Opel\"");
  std::ofstream(path, std::ios::trunc) << text;
  EXPECT_THROW(Store{dir / "store"}, StoreCorrupt);
}

TEST_F(StoreTest, OutOfOrderSequenceIsRejected) {
  std::istringstream in(event_row({2, "tally", json::object(), event_checksum(2, "tally", {})}));
  EXPECT_THROW(replay_event_log(in), StoreCorrupt);
}

TEST_F(StoreTest, ReadersRunAlongsideWriter) {
  std::atomic<bool> done{false};
  std::atomic<int> failures{0};
  std::vector<std::thread> readers;
  for (int r = 0; r < 4; ++r)
    readers.emplace_back([&] {
      while (!done) {
        try {
          auto page = store.search(labels({{Task::make, {"Ford", "Mazda"}}}));
          if (page.total < 5) ++failures;
          store.get_plate("P1");
        } catch (const std::exception&) {
          ++failures;
        }
      }
    });
  for (int i = 0; i < 30; ++i)
    store.submit_correction("P0", Task::colour, i % 2 ? "Red" : "Blue", "w",
                            ts("2024-06-01T00:00:00Z"));
  done = true;
  for (auto& t : readers) t.join();
  EXPECT_EQ(failures.load(), 0);
  EXPECT_EQ(store.rebuild_snapshot_from_log(), store.snapshot_text());
}

TEST(StoreEmptyTest, ReingestingSameRecordsChangesNothing) {
  TempDir dir;
  Store s(dir / "s");
  auto rs = testing::store_fixture_records();
  EXPECT_EQ(s.ingest_records(rs), 20u);
  EXPECT_EQ(s.ingest_records(rs), 0u);
  rs[0].image_ref = "/elsewhere.jpg";
  EXPECT_EQ(s.ingest_records(rs), 1u);
  EXPECT_EQ(s.plate_count(), 10u);
}

}  // namespace
}  // namespace fleetlens
