#pragma once

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fleetlens/domain.hpp"
#include "fleetlens/errors.hpp"
#include "fleetlens/serialize.hpp"

namespace fleetlens {

inline constexpr std::string_view kManifestHeader =
    "record_id,plate_id,image_path,label_path,captured_at,lat,lon";
inline constexpr std::string_view kTruthHeader = "record_id,task,label";

namespace detail {

// Splits one CSV line. Double-quoted fields may contain commas and "" escapes.
inline std::vector<std::string> split_csv_line(std::string_view line,
                                               std::size_t row) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"' && cur.empty()) {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (quoted) throw ParseError(row, "", "unterminated quoted field");
  fields.push_back(std::move(cur));
  return fields;
}

inline std::string_view chomp(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == '\n')) s.remove_suffix(1);
  return s;
}

inline std::optional<double> parse_double(std::string_view s) {
  if (s.empty()) return std::nullopt;
  std::string tmp(s);
  char* end = nullptr;
  errno = 0;
  double v = std::strtod(tmp.c_str(), &end);
  if (end != tmp.c_str() + tmp.size() || errno == ERANGE || !std::isfinite(v))
    return std::nullopt;
  return v;
}

inline std::optional<long long> parse_integer(std::string_view s) {
  long long v = 0;
  const char* first = s.data();
  if (!s.empty() && s.front() == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || first == ptr)
    return std::nullopt;
  return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Manifest

// Parses manifest CSV text. Relative image/label paths are resolved against
// base_dir. Rows are returned sorted by record_id.
inline std::vector<ImageRecord> parse_manifest(
    std::istream& in, const std::filesystem::path& base_dir = {}) {
  std::string line;
  if (!std::getline(in, line) || detail::chomp(line) != kManifestHeader)
    throw ParseError(1, "", "manifest header must be '" +
                                std::string(kManifestHeader) + "'");

  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    if (path.is_relative() && !base_dir.empty())
      return (base_dir / path).lexically_normal().string();
    return p;
  };

  std::map<std::string, ImageRecord> by_id;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    auto text = detail::chomp(line);
    if (text.empty()) continue;
    auto f = detail::split_csv_line(text, row);
    if (f.size() != 7)
      throw ParseError(row, "", "expected 7 fields, found " +
                                    std::to_string(f.size()));

    ImageRecord r;
    r.record_id = f[0];
    if (r.record_id.empty()) throw ParseError(row, "record_id", "empty");
    try {
      r.plate_id = PlateId(f[1]);
    } catch (const InvalidArgument& e) {
      throw ParseError(row, "plate_id", e.what());
    }
    if (f[2].empty()) throw ParseError(row, "image_path", "empty");
    r.image_ref = resolve(f[2]);
    if (!f[3].empty()) r.label_path = resolve(f[3]);
    auto ts = try_parse_rfc3339(f[4]);
    if (!ts)
      throw ParseError(row, "captured_at",
                       "'" + f[4] + "' is not an RFC 3339 timestamp");
    r.captured_at = *ts;

    if (!f[5].empty() || !f[6].empty()) {
      auto lat = detail::parse_double(f[5]);
      if (!lat) throw ParseError(row, "lat", "'" + f[5] + "' is not a number");
      auto lon = detail::parse_double(f[6]);
      if (!lon) throw ParseError(row, "lon", "'" + f[6] + "' is not a number");
      try {
        r.location = GeoPoint::make(*lat, *lon);
      } catch (const InvalidArgument& e) {
        throw ParseError(row, *lat < -90 || *lat > 90 ? "lat" : "lon",
                         e.what());
      }
    }

    auto id = r.record_id;
    if (!by_id.emplace(id, std::move(r)).second)
      throw DuplicateRecordId("record_id '" + id + "' repeated at row " +
                              std::to_string(row));
  }

  std::vector<ImageRecord> out;
  out.reserve(by_id.size());
  for (auto& [id, r] : by_id) out.push_back(std::move(r));
  return out;
}

inline std::vector<ImageRecord> load_manifest(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  return parse_manifest(in, path.parent_path());
}

// Ground-truth sidecar: `record_id,task,label`, one label per (record, task).
using TruthTable = std::map<std::string, std::map<Task, std::string>>;

inline TruthTable parse_truth_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || detail::chomp(line) != kTruthHeader)
    throw ParseError(1, "", "truth header must be '" +
                                std::string(kTruthHeader) + "'");
  TruthTable table;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    auto text = detail::chomp(line);
    if (text.empty()) continue;
    auto f = detail::split_csv_line(text, row);
    if (f.size() != 3) throw ParseError(row, "", "expected 3 fields");
    auto task = try_parse_task(f[1]);
    if (!task) throw ParseError(row, "task", "unknown task '" + f[1] + "'");
    if (f[2].empty()) throw ParseError(row, "label", "empty");
    if (!table[f[0]].emplace(*task, f[2]).second)
      throw ParseError(row, "", "duplicate truth for '" + f[0] + "'");
  }
  return table;
}

inline TruthTable load_truth_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open truth file '" + path.string() + "'");
  return parse_truth_csv(in);
}

// Attaches truth labels. Truth rows for unknown record ids are ignored and
// counted in the return value.
inline std::size_t apply_truth(std::vector<ImageRecord>& records,
                               const TruthTable& truth) {
  std::size_t matched = 0;
  for (auto& r : records) {
    auto it = truth.find(r.record_id);
    if (it == truth.end()) continue;
    ++matched;
    for (const auto& [task, label] : it->second) r.ground_truth[task] = label;
  }
  return truth.size() - matched;
}

// ---------------------------------------------------------------------------
// YOLO label files

struct LabelBox {
  int class_id = 0;
  BoundingBox bbox;

  bool operator==(const LabelBox&) const = default;
};

inline std::vector<LabelBox> parse_yolo_label(std::string_view text) {
  std::vector<LabelBox> out;
  std::size_t row = 0;
  while (!text.empty()) {
    ++row;
    auto nl = text.find('\n');
    auto line = detail::chomp(text.substr(0, nl));
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);

    std::vector<std::string_view> tokens;
    std::size_t pos = 0;
    while (pos < line.size()) {
      while (pos < line.size() && (line[pos] == ' ' || line[pos] == '\t')) ++pos;
      std::size_t start = pos;
      while (pos < line.size() && line[pos] != ' ' && line[pos] != '\t') ++pos;
      if (pos > start) tokens.push_back(line.substr(start, pos - start));
    }
    if (tokens.empty()) continue;
    if (tokens.size() != 5)
      throw ParseError(row, "", "expected 5 tokens 'class_id cx cy w h', found " +
                                    std::to_string(tokens.size()));

    auto cls = detail::parse_integer(tokens[0]);
    if (!cls) throw ParseError(row, "class_id", "not an integer");
    if (*cls < 0) throw ParseError(row, "class_id", "negative class id");
    if (*cls > INT32_MAX) throw ParseError(row, "class_id", "class id too large");

    static constexpr const char* kNames[] = {"cx", "cy", "w", "h"};
    double v[4];
    for (int i = 0; i < 4; ++i) {
      auto d = detail::parse_double(tokens[static_cast<std::size_t>(i) + 1]);
      if (!d) throw ParseError(row, kNames[i], "not a number");
      v[i] = *d;
    }
    if (auto why = BoundingBox::violation(v[0], v[1], v[2], v[3]))
      throw ParseError(row, "bbox", *why);
    out.push_back({static_cast<int>(*cls), BoundingBox(v[0], v[1], v[2], v[3])});
  }
  return out;
}

// Canonical writer: single spaces, 6 decimals, LF endings.
inline std::string format_yolo_label(const std::vector<LabelBox>& boxes) {
  std::string out;
  char buf[128];
  for (const auto& b : boxes) {
    int n = std::snprintf(buf, sizeof buf, "%d %.6f %.6f %.6f %.6f\n",
                          b.class_id, b.bbox.cx(), b.bbox.cy(), b.bbox.w(),
                          b.bbox.h());
    out.append(buf, static_cast<std::size_t>(n));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grouping

struct PlateGroup {
  PlateId plate_id;
  std::vector<ImageRecord> records;  // sorted by (captured_at, record_id)
};

inline std::vector<PlateGroup> group_by_plate(std::vector<ImageRecord> records) {
  std::map<PlateId, std::vector<ImageRecord>> buckets;
  for (auto& r : records) buckets[r.plate_id].push_back(std::move(r));

  std::vector<PlateGroup> groups;
  groups.reserve(buckets.size());
  for (auto& [plate, rs] : buckets) {
    std::sort(rs.begin(), rs.end(), [](const auto& a, const auto& b) {
      return std::tie(a.captured_at, a.record_id) <
             std::tie(b.captured_at, b.record_id);
    });
    groups.push_back({plate, std::move(rs)});
  }
  return groups;
}

// ---------------------------------------------------------------------------
// Dataset directory validation

struct Finding {
  std::string path;
  std::string message;

  bool operator==(const Finding&) const = default;
};

struct ValidationReport {
  std::vector<Finding> findings;

  bool ok() const { return findings.empty(); }
  std::size_t count(std::string_view message) const {
    return static_cast<std::size_t>(
        std::count_if(findings.begin(), findings.end(),
                      [&](const Finding& f) { return f.message == message; }));
  }
};

inline std::vector<std::string> read_classes_file(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<std::string> classes;
  std::string line;
  while (std::getline(in, line)) {
    auto l = detail::chomp(line);
    if (!l.empty()) classes.emplace_back(l);
  }
  return classes;
}

// Checks the YOLO layout under root. Every violation becomes a finding; only
// filesystem failures throw.
inline ValidationReport validate_dataset_dir(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  ValidationReport report;
  auto add = [&](const fs::path& p, std::string msg) {
    report.findings.push_back({p.lexically_relative(root).generic_string(),
                               std::move(msg)});
  };

  std::error_code ec;
  if (!fs::is_directory(root, ec))
    throw IoError("dataset root '" + root.string() + "' is not a directory");

  std::optional<std::size_t> num_classes;
  if (fs::exists(root / "classes.txt")) {
    num_classes = read_classes_file(root / "classes.txt").size();
  } else {
    add(root / "classes.txt", "missing classes file");
  }

  for (Partition part : kAllPartitions) {
    const std::string name(to_string(part));
    fs::path img_dir = root / "images" / name;
    fs::path lbl_dir = root / "labels" / name;
    std::map<std::string, fs::path> images, labels;

    if (!fs::is_directory(img_dir)) {
      add(img_dir, "missing directory");
    } else {
      for (const auto& e : fs::directory_iterator(img_dir))
        if (e.is_regular_file()) images[e.path().stem().string()] = e.path();
    }
    if (!fs::is_directory(lbl_dir)) {
      add(lbl_dir, "missing directory");
    } else {
      for (const auto& e : fs::directory_iterator(lbl_dir)) {
        if (!e.is_regular_file()) continue;
        if (e.path().extension() != ".txt") {
          add(e.path(), "unexpected file in labels");
          continue;
        }
        labels[e.path().stem().string()] = e.path();
      }
    }

    for (const auto& [stem, path] : images)
      if (!labels.count(stem)) add(path, "missing label");
    for (const auto& [stem, path] : labels) {
      if (!images.count(stem)) add(path, "missing image");
      std::vector<LabelBox> boxes;
      try {
        boxes = parse_yolo_label(read_file_bytes(path.string()));
      } catch (const ParseError& e) {
        add(path, std::string("unparseable label: ") + e.what());
        continue;
      }
      if (num_classes)
        for (const auto& b : boxes)
          if (static_cast<std::size_t>(b.class_id) >= *num_classes) {
            add(path, "class out of range");
            break;
          }
    }
  }
  return report;
}

}  // namespace fleetlens
