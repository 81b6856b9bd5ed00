#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fleetlens/digest.hpp"
#include "fleetlens/domain.hpp"
#include "fleetlens/errors.hpp"
#include "fleetlens/ingestion.hpp"
#include "fleetlens/random.hpp"
#include "fleetlens/serialize.hpp"

namespace fleetlens {

// ---------------------------------------------------------------------------
// Primary detection

// Largest box wins; equal areas fall back to higher confidence, then lower
// class_id.
inline const Detection& select_primary_detection(
    std::span<const Detection> detections) {
  if (detections.empty()) throw EmptyInput("no detections to select from");
  const Detection* best = &detections.front();
  for (const auto& d : detections.subspan(1)) {
    double a = d.bbox.area(), b = best->bbox.area();
    if (a > b || (a == b && (d.confidence > best->confidence ||
                             (d.confidence == best->confidence &&
                              d.class_id < best->class_id))))
      best = &d;
  }
  return *best;
}

// ---------------------------------------------------------------------------
// Ground truth under a taxonomy

// The raw (not yet canonical) truth label of a record for the taxonomy's task.
// colour_binary falls back to mapping the record's colour label.
inline std::optional<std::string> raw_truth(const ImageRecord& r,
                                            const Taxonomy& taxonomy) {
  if (auto it = r.ground_truth.find(taxonomy.task()); it != r.ground_truth.end())
    return it->second;
  if (taxonomy.task() == Task::colour_binary) {
    if (auto c = r.ground_truth.find(Task::colour); c != r.ground_truth.end()) {
      auto m = taxonomy.binary_map().find(c->second);
      return m != taxonomy.binary_map().end() ? m->second : c->second;
    }
  }
  return std::nullopt;
}

inline std::optional<std::string> canonical_truth(const ImageRecord& r,
                                                  const Taxonomy& taxonomy) {
  auto raw = raw_truth(r, taxonomy);
  if (!raw) return std::nullopt;
  return taxonomy.try_canonicalize(*raw);
}

// Plates whose records disagree on the canonical label. Labels outside the
// taxonomy are compared verbatim.
inline std::vector<PlateId> detect_plate_conflicts(
    const std::vector<PlateGroup>& groups, const Taxonomy& taxonomy) {
  std::vector<PlateId> flagged;
  for (const auto& g : groups) {
    std::set<std::string> labels;
    for (const auto& r : g.records) {
      auto raw = raw_truth(r, taxonomy);
      if (!raw) continue;
      labels.insert(taxonomy.try_canonicalize(*raw).value_or(*raw));
    }
    if (labels.size() >= 2) flagged.push_back(g.plate_id);
  }
  return flagged;
}

// ---------------------------------------------------------------------------
// Frequency filter

struct FrequencyFilterResult {
  std::map<std::string, std::string> kept;  // plate -> label
  std::set<std::string> kept_labels;
  std::set<std::string> dropped_labels;
  std::vector<std::string> dropped_plates;
  std::vector<Finding> findings;
};

// Frequency is counted in plates, not images.
inline FrequencyFilterResult filter_low_frequency(
    const std::map<std::string, std::string>& plate_labels,
    int min_plate_frequency) {
  std::map<std::string, int> support;
  for (const auto& [plate, label] : plate_labels) ++support[label];

  FrequencyFilterResult out;
  for (const auto& [label, n] : support)
    (n >= min_plate_frequency ? out.kept_labels : out.dropped_labels)
        .insert(label);
  for (const auto& [plate, label] : plate_labels) {
    if (out.kept_labels.count(label))
      out.kept.emplace(plate, label);
    else
      out.dropped_plates.push_back(plate);
  }
  if (out.kept.empty() && !plate_labels.empty())
    out.findings.push_back(
        {"", "frequency threshold " + std::to_string(min_plate_frequency) +
                 " removed every label"});
  return out;
}

// ---------------------------------------------------------------------------
// Splitting

namespace detail {

// Nearest integer; exact halves round up (towards the earlier partition).
inline std::size_t round_half_up(double x) {
  return static_cast<std::size_t>(std::floor(x + 0.5 + 1e-9));
}

}  // namespace detail

struct SplitOptions {
  // With fewer than 3 plates, assign everything to train instead of throwing.
  bool allow_degenerate_fallback = false;
};

inline SplitManifest make_split(std::vector<PlateId> plates, std::uint64_t seed,
                                double test_fraction = 0.30,
                                double val_fraction_of_remainder = 0.20,
                                SplitOptions options = {}) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw InvalidArgument("test_fraction must be in (0,1)");
  if (!(val_fraction_of_remainder > 0.0 && val_fraction_of_remainder < 1.0))
    throw InvalidArgument("val_fraction_of_remainder must be in (0,1)");

  std::sort(plates.begin(), plates.end());
  if (std::adjacent_find(plates.begin(), plates.end()) != plates.end())
    throw InvalidArgument("duplicate plate in split input");

  const std::size_t n = plates.size();
  const std::size_t n_test = detail::round_half_up(n * test_fraction);
  const std::size_t rest = n - n_test;
  const std::size_t n_val = detail::round_half_up(rest * val_fraction_of_remainder);
  const std::size_t n_train = rest - n_val;

  SplitManifest m;
  m.seed = seed;
  m.test_fraction = test_fraction;
  m.val_fraction_of_remainder = val_fraction_of_remainder;

  if (n_test == 0 || n_val == 0 || n_train == 0) {
    if (n >= 3 || !options.allow_degenerate_fallback)
      throw DegenerateSplit(std::to_string(n) + " plates leave a partition empty (test " +
                            std::to_string(n_test) + ", val " +
                            std::to_string(n_val) + ", train " +
                            std::to_string(n_train) + ")");
    for (const auto& p : plates) m.assignment[p.value()] = Partition::train;
    return m;
  }

  Rng rng(seed);
  rng.shuffle(plates);
  for (std::size_t i = 0; i < n; ++i) {
    Partition part = i < n_test           ? Partition::test
                     : i < n_test + n_val ? Partition::val
                                          : Partition::train;
    m.assignment[plates[i].value()] = part;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Built datasets and leakage

struct DatasetEntry {
  std::string record_id;
  PlateId plate_id;
  Partition partition = Partition::train;
  std::string label;

  bool operator==(const DatasetEntry&) const = default;
};

inline void to_json(json& j, const DatasetEntry& e) {
  j = json{{"record_id", e.record_id},
           {"plate_id", e.plate_id},
           {"partition", e.partition},
           {"label", e.label}};
}
inline void from_json(const json& j, DatasetEntry& e) {
  e.record_id = j.at("record_id").get<std::string>();
  e.plate_id = j.at("plate_id").get<PlateId>();
  e.partition = j.at("partition").get<Partition>();
  e.label = j.at("label").get<std::string>();
}

struct PartitionSummary {
  std::size_t images = 0;
  std::size_t plates = 0;
  std::size_t classes = 0;
};

// Mirrors the dataset summary table: classes, plates, images per partition.
struct DatasetSummary {
  Task task = Task::make;
  std::size_t classes = 0;
  std::size_t total_plates = 0;
  std::size_t total_images = 0;
  std::map<Partition, PartitionSummary> partitions;
};

inline void to_json(json& j, const DatasetSummary& s) {
  json parts = json::object();
  for (const auto& [p, v] : s.partitions)
    parts[std::string(to_string(p))] = {
        {"images", v.images}, {"plates", v.plates}, {"classes", v.classes}};
  j = json{{"task", s.task},
           {"classes", s.classes},
           {"total_plates", s.total_plates},
           {"total_images", s.total_images},
           {"partitions", parts}};
}

struct DatasetPlan {
  Task task = Task::make;
  std::vector<std::string> classes;   // line index == class_id
  std::vector<DatasetEntry> entries;  // sorted by (partition, record_id)
  DatasetSummary summary;
  std::vector<Finding> findings;
  std::vector<std::string> conflict_plates;
  std::vector<std::string> low_frequency_plates;
};

struct LeakageFinding {
  std::string plate_id;
  std::set<Partition> partitions;

  bool operator==(const LeakageFinding&) const = default;
};

// A plate leaks when it is seen in more than one partition, counting the
// split's own assignment and every dataset entry.
inline std::vector<LeakageFinding> check_leakage(
    const SplitManifest& split,
    const std::vector<std::vector<DatasetEntry>>& datasets) {
  std::map<std::string, std::set<Partition>> seen;
  for (const auto& entries : datasets)
    for (const auto& e : entries) {
      auto& parts = seen[e.plate_id.value()];
      parts.insert(e.partition);
      if (auto it = split.assignment.find(e.plate_id.value());
          it != split.assignment.end())
        parts.insert(it->second);
    }
  std::vector<LeakageFinding> findings;
  for (auto& [plate, parts] : seen)
    if (parts.size() > 1) findings.push_back({plate, std::move(parts)});
  return findings;
}

// Applies every filter (merge, conflicts, frequency, train coverage) the same
// way to all partitions. Pure: no files are touched.
inline DatasetPlan plan_task_dataset(const std::vector<ImageRecord>& records,
                                     const Taxonomy& taxonomy,
                                     const SplitManifest& split) {
  DatasetPlan plan;
  plan.task = taxonomy.task();

  std::vector<ImageRecord> labelled;
  for (const auto& r : records) {
    auto raw = raw_truth(r, taxonomy);
    if (!raw) continue;
    if (!taxonomy.try_canonicalize(*raw)) {
      plan.findings.push_back({r.record_id, "unknown label '" + *raw + "'"});
      continue;
    }
    labelled.push_back(r);
  }

  auto groups = group_by_plate(std::move(labelled));
  std::set<PlateId> conflicts;
  for (auto& p : detect_plate_conflicts(groups, taxonomy)) {
    plan.findings.push_back({p.value(), "plate conflict"});
    plan.conflict_plates.push_back(p.value());
    conflicts.insert(std::move(p));
  }

  std::map<std::string, std::string> plate_labels;
  for (const auto& g : groups)
    if (!conflicts.count(g.plate_id))
      plate_labels[g.plate_id.value()] =
          *canonical_truth(g.records.front(), taxonomy);

  auto freq = filter_low_frequency(plate_labels, taxonomy.min_plate_frequency());
  for (const auto& f : freq.findings) plan.findings.push_back(f);
  for (const auto& p : freq.dropped_plates) {
    plan.findings.push_back({p, "low-frequency class '" + plate_labels[p] + "'"});
    plan.low_frequency_plates.push_back(p);
  }

  std::map<std::string, Partition> plate_part;
  for (const auto& [plate, label] : freq.kept) {
    auto it = split.assignment.find(plate);
    if (it == split.assignment.end()) {
      plan.findings.push_back({plate, "unassigned plate"});
      continue;
    }
    plate_part[plate] = it->second;
  }

  std::set<std::string> train_labels;
  for (const auto& [plate, part] : plate_part)
    if (part == Partition::train) train_labels.insert(freq.kept.at(plate));
  for (auto it = plate_part.begin(); it != plate_part.end();) {
    const auto& label = freq.kept.at(it->first);
    if (it->second != Partition::train && !train_labels.count(label)) {
      plan.findings.push_back(
          {it->first, "class '" + label + "' absent from train"});
      it = plate_part.erase(it);
    } else {
      ++it;
    }
  }

  for (const auto& l : taxonomy.labels())
    if (train_labels.count(l)) plan.classes.push_back(l);

  for (const auto& g : groups) {
    auto pp = plate_part.find(g.plate_id.value());
    if (pp == plate_part.end()) continue;
    for (const auto& r : g.records)
      plan.entries.push_back(
          {r.record_id, r.plate_id, pp->second, freq.kept.at(pp->first)});
  }
  std::sort(plan.entries.begin(), plan.entries.end(),
            [](const auto& a, const auto& b) {
              return std::tie(a.partition, a.record_id) <
                     std::tie(b.partition, b.record_id);
            });

  auto& s = plan.summary;
  s.task = plan.task;
  s.classes = plan.classes.size();
  std::map<Partition, std::set<std::string>> plates, labels;
  for (const auto& e : plan.entries) {
    ++s.partitions[e.partition].images;
    plates[e.partition].insert(e.plate_id.value());
    labels[e.partition].insert(e.label);
  }
  for (Partition p : kAllPartitions) {
    auto& ps = s.partitions[p];
    ps.plates = plates[p].size();
    ps.classes = labels[p].size();
    s.total_plates += ps.plates;
    s.total_images += ps.images;
  }
  return plan;
}

namespace detail {

inline std::string file_stem_for(const std::string& record_id) {
  std::string out;
  for (char c : record_id) {
    bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
              (c >= '0' && c <= '9') || c == '-' || c == '_' || c == '.';
    out.push_back(ok ? c : '_');
  }
  return out;
}

}  // namespace detail

// Box stored for a record: the largest annotated box when a label file is
// present, otherwise the full frame.
inline BoundingBox primary_box(const ImageRecord& r) {
  if (!r.label_path) return BoundingBox::full_frame();
  auto boxes = parse_yolo_label(read_file_bytes(*r.label_path));
  if (boxes.empty()) return BoundingBox::full_frame();
  std::vector<Detection> dets;
  for (const auto& b : boxes) dets.push_back({b.class_id, "", 1.0, b.bbox});
  return select_primary_detection(dets).bbox;
}

// Writes the YOLO layout for a plan. Images are copied byte for byte.
inline void write_task_dataset(const DatasetPlan& plan,
                               const std::vector<ImageRecord>& records,
                               const SplitManifest& split,
                               const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  for (Partition p : kAllPartitions)
    if (plan.summary.partitions.at(p).images == 0)
      throw EmptyPartition(std::string(to_string(p)) + " partition is empty for " +
                           std::string(to_string(plan.task)));

  std::map<std::string, const ImageRecord*> by_id;
  for (const auto& r : records) by_id[r.record_id] = &r;

  std::error_code ec;
  for (Partition p : kAllPartitions) {
    fs::create_directories(out_dir / "images" / std::string(to_string(p)), ec);
    if (ec) throw IoError("cannot create dataset directories: " + ec.message());
    fs::create_directories(out_dir / "labels" / std::string(to_string(p)), ec);
    if (ec) throw IoError("cannot create dataset directories: " + ec.message());
  }

  std::string classes;
  for (const auto& c : plan.classes) classes += c + "\n";
  write_text_file(out_dir / "classes.txt", classes);

  std::map<std::string, int> class_ids;
  for (std::size_t i = 0; i < plan.classes.size(); ++i)
    class_ids[plan.classes[i]] = static_cast<int>(i);

  for (const auto& e : plan.entries) {
    const ImageRecord& r = *by_id.at(e.record_id);
    const std::string part(to_string(e.partition));
    const std::string stem = detail::file_stem_for(r.record_id);
    fs::path src(r.image_ref);
    fs::path img = out_dir / "images" / part / (stem + src.extension().string());
    fs::copy_file(src, img, fs::copy_options::overwrite_existing, ec);
    if (ec)
      throw IoError("cannot copy image '" + r.image_ref + "': " + ec.message());
    write_text_file(out_dir / "labels" / part / (stem + ".txt"),
                    format_yolo_label({{class_ids.at(e.label), primary_box(r)}}));
  }

  write_json_file(out_dir / "split.json", split);
  write_json_file(out_dir / "summary.json", plan.summary);
  write_text_file(out_dir / "provenance.jsonl", to_jsonl(plan.entries));
}

inline DatasetPlan build_task_dataset(const std::vector<ImageRecord>& records,
                                      const Taxonomy& taxonomy,
                                      const SplitManifest& split,
                                      const std::filesystem::path& out_dir) {
  auto plan = plan_task_dataset(records, taxonomy, split);
  write_task_dataset(plan, records, split, out_dir);
  return plan;
}

inline std::vector<DatasetEntry> load_dataset_provenance(
    const std::filesystem::path& dataset_dir) {
  return read_jsonl_file<DatasetEntry>(dataset_dir / "provenance.jsonl");
}

}  // namespace fleetlens
