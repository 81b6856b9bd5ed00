#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fleetlens/errors.hpp"
#include "fleetlens/timeutil.hpp"

namespace fleetlens {

// Reserved outcome for "no usable hypothesis". Never part of a taxonomy.
inline constexpr std::string_view kNoDetection = "NO_DETECTION";

inline bool is_no_detection(std::string_view label) {
  return label == kNoDetection;
}

// ---------------------------------------------------------------------------
// Task

enum class Task { make, shape, colour, colour_binary };

inline constexpr std::array<Task, 4> kAllTasks = {
    Task::make, Task::shape, Task::colour, Task::colour_binary};

constexpr std::string_view to_string(Task t) {
  switch (t) {
    case Task::make:
      return "make";
    case Task::shape:
      return "shape";
    case Task::colour:
      return "colour";
    case Task::colour_binary:
      return "colour_binary";
  }
  return "?";
}

inline std::optional<Task> try_parse_task(std::string_view s) {
  for (Task t : kAllTasks)
    if (to_string(t) == s) return t;
  return std::nullopt;
}

inline Task parse_task(std::string_view s) {
  if (auto t = try_parse_task(s)) return *t;
  throw InvalidArgument("unknown task '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// PlateId

class PlateId {
 public:
  PlateId() = default;
  explicit PlateId(std::string_view raw) : value_(normalize(raw)) {}

  // Uppercase, all whitespace removed, hyphens kept. Throws InvalidArgument on
  // an empty result or any character outside [A-Z0-9-].
  static std::string normalize(std::string_view raw) {
    std::string out;
    out.reserve(raw.size());
    for (unsigned char c : raw) {
      if (std::isspace(c)) continue;
      if (std::isalnum(c)) {
        out.push_back(static_cast<char>(std::toupper(c)));
      } else if (c == '-') {
        out.push_back('-');
      } else {
        throw InvalidArgument("invalid character in plate id '" +
                              std::string(raw) + "'");
      }
    }
    if (out.empty()) throw InvalidArgument("empty plate id");
    return out;
  }

  const std::string& value() const noexcept { return value_; }
  auto operator<=>(const PlateId&) const = default;

 private:
  std::string value_;
};

// ---------------------------------------------------------------------------
// Geometry

struct GeoPoint {
  double lat = 0.0;
  double lon = 0.0;

  static GeoPoint make(double lat, double lon) {
    if (!(lat >= -90.0 && lat <= 90.0))
      throw InvalidArgument("latitude out of range");
    if (!(lon >= -180.0 && lon <= 180.0))
      throw InvalidArgument("longitude out of range");
    return {lat, lon};
  }

  bool operator==(const GeoPoint&) const = default;
};

// YOLO-normalized box: centre and extent as fractions of the image.
class BoundingBox {
 public:
  static constexpr double kEpsilon = 1e-6;

  BoundingBox() = default;
  BoundingBox(double cx, double cy, double w, double h)
      : cx_(cx), cy_(cy), w_(w), h_(h) {
    if (auto why = violation(cx, cy, w, h)) throw InvalidArgument(*why);
  }

  // Reason the box is invalid, or nullopt when it satisfies containment.
  static std::optional<std::string> violation(double cx, double cy, double w,
                                              double h) {
    for (double v : {cx, cy, w, h})
      if (!std::isfinite(v)) return "non-finite box coordinate";
    if (!(w > 0.0)) return "non-positive width";
    if (!(h > 0.0)) return "non-positive height";
    if (w > 1.0 + kEpsilon) return "width exceeds 1";
    if (h > 1.0 + kEpsilon) return "height exceeds 1";
    if (cx - w / 2 < -kEpsilon || cx + w / 2 > 1.0 + kEpsilon)
      return "box extends outside the frame horizontally";
    if (cy - h / 2 < -kEpsilon || cy + h / 2 > 1.0 + kEpsilon)
      return "box extends outside the frame vertically";
    return std::nullopt;
  }

  static bool is_valid(double cx, double cy, double w, double h) {
    return !violation(cx, cy, w, h);
  }

  static BoundingBox full_frame() { return {0.5, 0.5, 1.0, 1.0}; }

  double cx() const noexcept { return cx_; }
  double cy() const noexcept { return cy_; }
  double w() const noexcept { return w_; }
  double h() const noexcept { return h_; }
  double area() const noexcept { return w_ * h_; }

  bool operator==(const BoundingBox&) const = default;

 private:
  double cx_ = 0.5, cy_ = 0.5, w_ = 1.0, h_ = 1.0;
};

// ---------------------------------------------------------------------------
// Records and hypotheses

struct ImageRecord {
  std::string record_id;
  PlateId plate_id;
  std::string image_ref;
  std::optional<std::string> label_path;
  Timestamp captured_at{};
  std::optional<GeoPoint> location;
  std::map<Task, std::string> ground_truth;

  bool operator==(const ImageRecord&) const = default;
};

inline void validate(const ImageRecord& r) {
  if (r.record_id.empty()) throw InvalidArgument("empty record_id");
  if (r.image_ref.empty())
    throw InvalidArgument("record '" + r.record_id + "' has empty image_ref");
}

inline void validate_confidence(double c) {
  if (!(c >= 0.0 && c <= 1.0))
    throw InvalidArgument("confidence outside [0,1]");
}

struct Detection {
  int class_id = 0;
  std::string class_name;
  double confidence = 0.0;
  BoundingBox bbox;

  bool operator==(const Detection&) const = default;
};

inline void validate(const Detection& d) {
  if (d.class_id < 0) throw InvalidArgument("negative class_id");
  validate_confidence(d.confidence);
}

struct RankedLabel {
  std::string label;
  double confidence = 0.0;

  bool operator==(const RankedLabel&) const = default;
};

// ---------------------------------------------------------------------------
// Taxonomy

class Taxonomy {
 public:
  Taxonomy() = default;
  Taxonomy(Task task, std::vector<std::string> labels,
           std::map<std::string, std::string> merge_map = {},
           int min_plate_frequency = 0,
           std::map<std::string, std::string> binary_map = {})
      : task_(task),
        labels_(std::move(labels)),
        merge_map_(std::move(merge_map)),
        min_plate_frequency_(min_plate_frequency),
        binary_map_(std::move(binary_map)) {
    validate();
  }

  Task task() const noexcept { return task_; }
  const std::vector<std::string>& labels() const noexcept { return labels_; }
  const std::map<std::string, std::string>& merge_map() const noexcept {
    return merge_map_;
  }
  int min_plate_frequency() const noexcept { return min_plate_frequency_; }
  const std::map<std::string, std::string>& binary_map() const noexcept {
    return binary_map_;
  }

  bool is_canonical(std::string_view label) const {
    return std::find(labels_.begin(), labels_.end(), label) != labels_.end();
  }

  std::optional<int> class_id(std::string_view label) const {
    auto it = std::find(labels_.begin(), labels_.end(), label);
    if (it == labels_.end()) return std::nullopt;
    return static_cast<int>(it - labels_.begin());
  }

  std::optional<std::string> try_canonicalize(std::string_view raw) const {
    if (auto it = merge_map_.find(std::string(raw)); it != merge_map_.end())
      return it->second;
    if (is_canonical(raw)) return std::string(raw);
    return std::nullopt;
  }

  std::string canonicalize(std::string_view raw) const {
    if (auto c = try_canonicalize(raw)) return *c;
    throw UnknownLabel("'" + std::string(raw) + "' is not a " +
                       std::string(to_string(task_)) + " label");
  }

  Taxonomy with_min_plate_frequency(int threshold) const {
    return Taxonomy(task_, labels_, merge_map_, threshold, binary_map_);
  }

  bool operator==(const Taxonomy&) const = default;

 private:
  void validate() const {
    std::set<std::string> seen;
    for (const auto& l : labels_) {
      if (l.empty()) throw InvalidArgument("empty label in taxonomy");
      if (is_no_detection(l))
        throw InvalidArgument("NO_DETECTION is reserved and cannot be a label");
      if (!seen.insert(l).second)
        throw InvalidArgument("duplicate label '" + l + "'");
    }
    for (const auto& [alias, target] : merge_map_) {
      if (seen.count(alias))
        throw InvalidArgument("alias '" + alias + "' is also a canonical label");
      if (!seen.count(target))
        throw InvalidArgument("merge target '" + target +
                              "' is not a canonical label");
    }
    if (min_plate_frequency_ < 0)
      throw InvalidArgument("min_plate_frequency must be >= 0");
    if (task_ == Task::colour_binary && binary_map_.empty())
      throw InvalidArgument("colour_binary taxonomy requires a binary_map");
    for (const auto& [colour, group] : binary_map_)
      if (!seen.count(group))
        throw InvalidArgument("binary_map value '" + group +
                              "' is not a canonical label");
  }

  Task task_ = Task::make;
  std::vector<std::string> labels_;
  std::map<std::string, std::string> merge_map_;
  int min_plate_frequency_ = 0;
  std::map<std::string, std::string> binary_map_;
};

inline std::string canonicalize(const Taxonomy& taxonomy,
                                std::string_view raw_label) {
  return taxonomy.canonicalize(raw_label);
}

// Maps a colour label onto the colour_binary groups (e.g. bright/dark).
inline std::string binarize_colour(const Taxonomy& taxonomy,
                                   std::string_view colour_label) {
  if (taxonomy.task() != Task::colour_binary)
    throw InvalidArgument("binarize_colour needs a colour_binary taxonomy");
  auto it = taxonomy.binary_map().find(std::string(colour_label));
  if (it == taxonomy.binary_map().end())
    throw UnknownLabel("colour '" + std::string(colour_label) +
                       "' has no bright/dark mapping");
  return it->second;
}

// ---------------------------------------------------------------------------
// Predictions and tallies

struct Prediction {
  std::string record_id;
  PlateId plate_id;
  Task task = Task::make;
  std::string backend_id;
  std::string label{kNoDetection};
  double confidence = 0.0;
  Timestamp produced_at{};
  std::optional<std::string> error;

  bool no_detection() const { return is_no_detection(label); }
  bool operator==(const Prediction&) const = default;
};

inline void validate(const Prediction& p) {
  validate_confidence(p.confidence);
  if (p.label.empty()) throw InvariantViolation("prediction with empty label");
  if (p.no_detection() != (p.confidence == 0.0))
    throw InvariantViolation("prediction '" + p.record_id +
                             "': NO_DETECTION must coincide with confidence 0");
}

struct VoteTally {
  PlateId plate_id;
  Task task = Task::make;
  std::string backend_id;
  std::map<std::string, int> counts;
  std::string winner;
  bool tie_broken = false;
  std::vector<std::string> evidence;

  bool operator==(const VoteTally&) const = default;
};

inline void validate(const VoteTally& t) {
  if (t.counts.empty()) throw InvariantViolation("tally without votes");
  long total = 0;
  for (const auto& [label, n] : t.counts) {
    if (n < 1) throw InvariantViolation("tally count below 1 for '" + label + "'");
    total += n;
  }
  if (total != static_cast<long>(t.evidence.size()))
    throw InvariantViolation("tally counts do not match evidence size");
  auto w = t.counts.find(t.winner);
  if (w == t.counts.end())
    throw InvariantViolation("tally winner '" + t.winner + "' has no votes");
  if (is_no_detection(t.winner) && t.counts.size() != 1)
    throw InvariantViolation("NO_DETECTION won against a real label");
  for (const auto& [label, n] : t.counts)
    if (!is_no_detection(label) && n > w->second)
      throw InvariantViolation("tally winner is not a plurality label");
}

// ---------------------------------------------------------------------------
// Splits

enum class Partition { train, val, test };

inline constexpr std::array<Partition, 3> kAllPartitions = {
    Partition::train, Partition::val, Partition::test};

constexpr std::string_view to_string(Partition p) {
  switch (p) {
    case Partition::train:
      return "train";
    case Partition::val:
      return "val";
    case Partition::test:
      return "test";
  }
  return "?";
}

inline Partition parse_partition(std::string_view s) {
  for (Partition p : kAllPartitions)
    if (to_string(p) == s) return p;
  throw InvalidArgument("unknown partition '" + std::string(s) + "'");
}

struct SplitManifest {
  std::uint64_t seed = 0;
  double test_fraction = 0.30;
  double val_fraction_of_remainder = 0.20;
  std::map<std::string, Partition> assignment;  // plate_id -> partition

  std::size_t count(Partition p) const {
    return static_cast<std::size_t>(
        std::count_if(assignment.begin(), assignment.end(),
                      [p](const auto& kv) { return kv.second == p; }));
  }

  bool operator==(const SplitManifest&) const = default;
};

// ---------------------------------------------------------------------------
// Evaluation

// Square matrix over labels; NO_DETECTION is always the last label.
// Rows are truth, columns are predictions.
struct ConfusionMatrix {
  std::vector<std::string> labels;
  std::vector<std::vector<std::size_t>> cells;

  std::size_t index_of(std::string_view label) const {
    auto it = std::find(labels.begin(), labels.end(), label);
    if (it == labels.end())
      throw InvalidArgument("label '" + std::string(label) +
                            "' not in confusion matrix");
    return static_cast<std::size_t>(it - labels.begin());
  }

  std::size_t at(std::string_view truth, std::string_view predicted) const {
    return cells[index_of(truth)][index_of(predicted)];
  }

  std::size_t row_sum(std::size_t r) const {
    std::size_t s = 0;
    for (auto v : cells[r]) s += v;
    return s;
  }

  std::size_t total() const {
    std::size_t s = 0;
    for (std::size_t r = 0; r < cells.size(); ++r) s += row_sum(r);
    return s;
  }

  bool operator==(const ConfusionMatrix&) const = default;
};

struct EvalReport {
  Task task = Task::make;
  std::string backend_id;
  double svi_accuracy = 0.0;
  double mvi_accuracy = 0.0;
  double unknown_rate_svi = 0.0;
  double unknown_rate_mvi = 0.0;
  ConfusionMatrix confusion_svi;
  ConfusionMatrix confusion_mvi;
  std::map<std::string, double> per_class_accuracy;  // MVI, per truth label
  std::size_t images_evaluated = 0;
  std::size_t plates_evaluated = 0;

  bool operator==(const EvalReport&) const = default;
};

}  // namespace fleetlens
