#pragma once

#include <unistd.h>

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "fleetlens/fleetlens.hpp"

namespace fleetlens::testing {

// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("fleetlens-test-" + std::to_string(::getpid()) + "-" +
             std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& p) const { return path_ / p; }

 private:
  std::filesystem::path path_;
};

inline Taxonomy colour_taxonomy(int min_plate_frequency = 0) {
  return Taxonomy(Task::colour,
                  {"Beige", "Black", "Blue", "Green", "Grey", "Red", "Silver",
                   "White", "Yellow"},
                  {{"Maroon", "Red"}, {"Gold", "Beige"}}, min_plate_frequency);
}

inline Taxonomy colour_binary_taxonomy() {
  return Taxonomy(Task::colour_binary, {"bright", "dark"}, {}, 0,
                  {{"Beige", "bright"},
                   {"Black", "dark"},
                   {"Blue", "dark"},
                   {"Green", "dark"},
                   {"Grey", "dark"},
                   {"Red", "dark"},
                   {"Maroon", "dark"},
                   {"Gold", "bright"},
                   {"Silver", "bright"},
                   {"White", "bright"},
                   {"Yellow", "bright"}});
}

inline Taxonomy make_taxonomy(int min_plate_frequency = 0) {
  return Taxonomy(Task::make,
                  {"BMW", "Ford", "Holden", "Hyundai", "Mazda", "Mercedes",
                   "Toyota"},
                  {}, min_plate_frequency);
}

inline Timestamp ts(const std::string& s) { return parse_rfc3339(s); }

inline ImageRecord record(const std::string& id, const std::string& plate,
                          std::map<Task, std::string> truth = {},
                          const std::string& captured_at = "2024-05-01T10:00:00Z",
                          std::optional<GeoPoint> where = std::nullopt) {
  ImageRecord r;
  r.record_id = id;
  r.plate_id = PlateId(plate);
  r.image_ref = "/images/" + id + ".jpg";
  r.captured_at = ts(captured_at);
  r.location = where;
  r.ground_truth = std::move(truth);
  return r;
}

inline Prediction prediction(const std::string& record_id, const std::string& plate,
                             const std::string& label, double confidence,
                             Task task = Task::make,
                             const std::string& backend = "mock:test") {
  Prediction p;
  p.record_id = record_id;
  p.plate_id = PlateId(plate);
  p.task = task;
  p.backend_id = backend;
  p.label = label;
  p.confidence = is_no_detection(label) ? 0.0 : confidence;
  p.produced_at = ts("2024-06-01T00:00:00Z");
  return p;
}

inline Detection detection(const std::string& name, double confidence,
                           double w = 0.4, double h = 0.4, int class_id = 0) {
  return {class_id, name, confidence, BoundingBox(0.5, 0.5, w, h)};
}

// Ten plates with two sightings each. The first sighting is near Brisbane on
// 1 May, the second far away (10, 10) on 2 May, so a query combining the
// May 2 window with the Brisbane box matches nothing.
struct StoreFixturePlate {
  const char* plate;
  const char* make;
  const char* colour;
};

inline constexpr StoreFixturePlate kStoreFixture[] = {
    {"P0", "Ford", "Red"},    {"P1", "Ford", "Blue"},
    {"P2", "Toyota", "Red"},  {"P3", "Ford", "NO_DETECTION"},
    {"P4", "NO_DETECTION", "Red"}, {"P5", "Mazda", "White"},
    {"P6", "Ford", "Red"},    {"P7", "Toyota", "Blue"},
    {"P8", "BMW", "Red"},     {"P9", "Ford", "Red"},
};

inline std::vector<ImageRecord> store_fixture_records() {
  std::vector<ImageRecord> rs;
  int i = 0;
  for (const auto& f : kStoreFixture) {
    char a[32], b[32];
    std::snprintf(a, sizeof a, "2024-05-01T%02d:00:00Z", 10 + i);
    std::snprintf(b, sizeof b, "2024-05-02T%02d:00:00Z", 10 + i);
    rs.push_back(record(std::string(f.plate) + "-a", f.plate, {}, a,
                        GeoPoint::make(-27.0 - 0.1 * i, 153.0 + 0.1 * i)));
    rs.push_back(record(std::string(f.plate) + "-b", f.plate, {}, b,
                        GeoPoint::make(10.0, 10.0)));
    ++i;
  }
  return rs;
}

inline std::vector<Prediction> store_fixture_predictions(
    const std::string& backend = "mock:test") {
  std::vector<Prediction> ps;
  for (const auto& f : kStoreFixture)
    for (const char* view : {"-a", "-b"}) {
      auto id = std::string(f.plate) + view;
      ps.push_back(prediction(id, f.plate, f.make, 0.8, Task::make, backend));
      ps.push_back(prediction(id, f.plate, f.colour, 0.8, Task::colour, backend));
    }
  return ps;
}

inline void populate_fixture_store(Store& store) {
  store.set_taxonomy(make_taxonomy());
  store.set_taxonomy(colour_taxonomy());
  store.ingest_records(store_fixture_records());
  auto ps = store_fixture_predictions();
  auto report = store.upsert_results(run_mvi(ps), ps);
  if (report.applied != 20) throw InvariantViolation("fixture store did not load");
}

inline std::vector<std::string> plate_ids(const SearchPage& page) {
  std::vector<std::string> out;
  for (const auto& item : page.items) out.push_back(item.at("plate_id").get<std::string>());
  return out;
}

}  // namespace fleetlens::testing
