#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fleetlens/domain.hpp"
#include "fleetlens/errors.hpp"

namespace fleetlens {

using json = nlohmann::json;

// JSON mappings for the domain types. Field names are part of the on-disk and
// wire formats; do not rename.

inline void to_json(json& j, const PlateId& p) { j = p.value(); }
inline void from_json(const json& j, PlateId& p) {
  p = PlateId(j.get<std::string>());
}

inline void to_json(json& j, Task t) { j = std::string(to_string(t)); }
inline void from_json(const json& j, Task& t) {
  t = parse_task(j.get<std::string>());
}

inline void to_json(json& j, Partition p) { j = std::string(to_string(p)); }
inline void from_json(const json& j, Partition& p) {
  p = parse_partition(j.get<std::string>());
}

inline void to_json(json& j, const BoundingBox& b) {
  j = json{{"cx", b.cx()}, {"cy", b.cy()}, {"w", b.w()}, {"h", b.h()}};
}
inline void from_json(const json& j, BoundingBox& b) {
  b = BoundingBox(j.at("cx").get<double>(), j.at("cy").get<double>(),
                  j.at("w").get<double>(), j.at("h").get<double>());
}

inline void to_json(json& j, const Detection& d) {
  j = json{{"class_id", d.class_id},
           {"class_name", d.class_name},
           {"confidence", d.confidence},
           {"bbox", d.bbox}};
}
inline void from_json(const json& j, Detection& d) {
  d.class_id = j.at("class_id").get<int>();
  d.class_name = j.at("class_name").get<std::string>();
  d.confidence = j.at("confidence").get<double>();
  d.bbox = j.at("bbox").get<BoundingBox>();
  validate(d);
}

inline void to_json(json& j, const RankedLabel& r) {
  j = json{{"class_name", r.label}, {"confidence", r.confidence}};
}
inline void from_json(const json& j, RankedLabel& r) {
  r.label = j.at("class_name").get<std::string>();
  r.confidence = j.at("confidence").get<double>();
  validate_confidence(r.confidence);
}

inline void to_json(json& j, const Taxonomy& t) {
  j = json{{"task", t.task()},
           {"labels", t.labels()},
           {"merge_map", t.merge_map()},
           {"min_plate_frequency", t.min_plate_frequency()},
           {"binary_map", t.binary_map()}};
}
inline void from_json(const json& j, Taxonomy& t) {
  t = Taxonomy(j.at("task").get<Task>(),
               j.at("labels").get<std::vector<std::string>>(),
               j.value("merge_map", std::map<std::string, std::string>{}),
               j.value("min_plate_frequency", 0),
               j.value("binary_map", std::map<std::string, std::string>{}));
}

inline void to_json(json& j, const ImageRecord& r) {
  json truth = json::object();
  for (const auto& [task, label] : r.ground_truth)
    truth[std::string(to_string(task))] = label;
  j = json{{"record_id", r.record_id},
           {"plate_id", r.plate_id},
           {"image_ref", r.image_ref},
           {"label_path", r.label_path ? json(*r.label_path) : json(nullptr)},
           {"captured_at", format_rfc3339(r.captured_at)},
           {"location", r.location ? json{{"lat", r.location->lat},
                                          {"lon", r.location->lon}}
                                   : json(nullptr)},
           {"ground_truth", truth}};
}
inline void from_json(const json& j, ImageRecord& r) {
  r.record_id = j.at("record_id").get<std::string>();
  r.plate_id = j.at("plate_id").get<PlateId>();
  r.image_ref = j.at("image_ref").get<std::string>();
  r.label_path.reset();
  if (j.contains("label_path") && !j["label_path"].is_null())
    r.label_path = j["label_path"].get<std::string>();
  r.captured_at = parse_rfc3339(j.at("captured_at").get<std::string>());
  r.location.reset();
  if (j.contains("location") && !j["location"].is_null())
    r.location = GeoPoint::make(j["location"].at("lat").get<double>(),
                                j["location"].at("lon").get<double>());
  r.ground_truth.clear();
  if (j.contains("ground_truth"))
    for (const auto& [task, label] : j["ground_truth"].items())
      r.ground_truth[parse_task(task)] = label.get<std::string>();
  validate(r);
}

inline void to_json(json& j, const Prediction& p) {
  j = json{{"record_id", p.record_id},
           {"plate_id", p.plate_id},
           {"task", p.task},
           {"backend_id", p.backend_id},
           {"label", p.label},
           {"confidence", p.confidence},
           {"no_detection", p.no_detection()},
           {"error", p.error ? json(*p.error) : json(nullptr)},
           {"produced_at", format_rfc3339(p.produced_at)}};
}
inline void from_json(const json& j, Prediction& p) {
  p.record_id = j.at("record_id").get<std::string>();
  p.plate_id = j.at("plate_id").get<PlateId>();
  p.task = j.at("task").get<Task>();
  p.backend_id = j.at("backend_id").get<std::string>();
  p.label = j.at("label").get<std::string>();
  p.confidence = j.at("confidence").get<double>();
  p.produced_at = parse_rfc3339(j.at("produced_at").get<std::string>());
  p.error.reset();
  if (j.contains("error") && !j["error"].is_null())
    p.error = j["error"].get<std::string>();
  validate(p);
  if (j.contains("no_detection") &&
      j["no_detection"].get<bool>() != p.no_detection())
    throw InvariantViolation("no_detection flag disagrees with label");
}

inline void to_json(json& j, const VoteTally& t) {
  j = json{{"plate_id", t.plate_id},     {"task", t.task},
           {"backend_id", t.backend_id}, {"counts", t.counts},
           {"winner", t.winner},         {"tie_broken", t.tie_broken},
           {"evidence", t.evidence}};
}
inline void from_json(const json& j, VoteTally& t) {
  t.plate_id = j.at("plate_id").get<PlateId>();
  t.task = j.at("task").get<Task>();
  t.backend_id = j.at("backend_id").get<std::string>();
  t.counts = j.at("counts").get<std::map<std::string, int>>();
  t.winner = j.at("winner").get<std::string>();
  t.tie_broken = j.at("tie_broken").get<bool>();
  t.evidence = j.at("evidence").get<std::vector<std::string>>();
  validate(t);
}

inline void to_json(json& j, const SplitManifest& s) {
  json assignment = json::object();
  for (const auto& [plate, part] : s.assignment) assignment[plate] = part;
  j = json{{"seed", s.seed},
           {"test_fraction", s.test_fraction},
           {"val_fraction_of_remainder", s.val_fraction_of_remainder},
           {"assignment", assignment}};
}
inline void from_json(const json& j, SplitManifest& s) {
  s.seed = j.at("seed").get<std::uint64_t>();
  s.test_fraction = j.at("test_fraction").get<double>();
  s.val_fraction_of_remainder = j.at("val_fraction_of_remainder").get<double>();
  s.assignment.clear();
  for (const auto& [plate, part] : j.at("assignment").items())
    s.assignment[PlateId::normalize(plate)] = part.get<Partition>();
}

inline void to_json(json& j, const ConfusionMatrix& m) {
  j = json{{"labels", m.labels}, {"cells", m.cells}};
}
inline void from_json(const json& j, ConfusionMatrix& m) {
  m.labels = j.at("labels").get<std::vector<std::string>>();
  m.cells = j.at("cells").get<std::vector<std::vector<std::size_t>>>();
}

inline void to_json(json& j, const EvalReport& r) {
  j = json{{"task", r.task},
           {"backend_id", r.backend_id},
           {"svi_accuracy", r.svi_accuracy},
           {"mvi_accuracy", r.mvi_accuracy},
           {"unknown_rate_svi", r.unknown_rate_svi},
           {"unknown_rate_mvi", r.unknown_rate_mvi},
           {"confusion_svi", r.confusion_svi},
           {"confusion_mvi", r.confusion_mvi},
           {"per_class_accuracy", r.per_class_accuracy},
           {"images_evaluated", r.images_evaluated},
           {"plates_evaluated", r.plates_evaluated}};
}
inline void from_json(const json& j, EvalReport& r) {
  r.task = j.at("task").get<Task>();
  r.backend_id = j.at("backend_id").get<std::string>();
  r.svi_accuracy = j.at("svi_accuracy").get<double>();
  r.mvi_accuracy = j.at("mvi_accuracy").get<double>();
  r.unknown_rate_svi = j.at("unknown_rate_svi").get<double>();
  r.unknown_rate_mvi = j.at("unknown_rate_mvi").get<double>();
  r.confusion_svi = j.at("confusion_svi").get<ConfusionMatrix>();
  r.confusion_mvi = j.at("confusion_mvi").get<ConfusionMatrix>();
  r.per_class_accuracy = j.at("per_class_accuracy").get<std::map<std::string, double>>();
  r.images_evaluated = j.at("images_evaluated").get<std::size_t>();
  r.plates_evaluated = j.at("plates_evaluated").get<std::size_t>();
}

// ---------------------------------------------------------------------------
// File helpers

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(0, "", path.string() + ": " + e.what());
  }
}

inline void write_text_file(const std::filesystem::path& path,
                            const std::string& text) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline void write_json_file(const std::filesystem::path& path, const json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

template <typename T>
std::string to_jsonl(const std::vector<T>& rows) {
  std::string out;
  for (const auto& row : rows) {
    out += json(row).dump();
    out += '\n';
  }
  return out;
}

template <typename T>
std::vector<T> parse_jsonl(std::istream& in, const std::string& source) {
  std::vector<T> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      rows.push_back(json::parse(line).get<T>());
    } catch (const json::exception& e) {
      throw ParseError(lineno, "", source + ": " + e.what());
    } catch (const ParseError&) {
      throw;
    } catch (const Error& e) {
      throw ParseError(lineno, "", source + ": " + e.what());
    }
  }
  return rows;
}

template <typename T>
std::vector<T> read_jsonl_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return parse_jsonl<T>(in, path.string());
}

inline Taxonomy load_taxonomy(const std::filesystem::path& path) {
  try {
    return read_json_file(path).get<Taxonomy>();
  } catch (const json::exception& e) {
    throw ParseError(0, "", path.string() + ": " + e.what());
  }
}

}  // namespace fleetlens
