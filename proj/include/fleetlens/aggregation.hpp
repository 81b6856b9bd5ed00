#pragma once

#include <algorithm>
#include <map>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "fleetlens/backend.hpp"
#include "fleetlens/curation.hpp"
#include "fleetlens/domain.hpp"
#include "fleetlens/errors.hpp"

namespace fleetlens {

// ---------------------------------------------------------------------------
// Single-view inference

struct TopLabel {
  std::string label{kNoDetection};
  double confidence = 0.0;

  bool operator==(const TopLabel&) const = default;
};

// Highest-confidence detection; ties go to the larger box, then the lower
// class_id. Zero-confidence hypotheses count as no detection.
inline TopLabel top1(std::span<const Detection> detections,
                     const Taxonomy& taxonomy) {
  const Detection* best = nullptr;
  for (const auto& d : detections) {
    validate(d);
    if (d.confidence <= 0.0) continue;
    if (!best || d.confidence > best->confidence ||
        (d.confidence == best->confidence &&
         (d.bbox.area() > best->bbox.area() ||
          (d.bbox.area() == best->bbox.area() && d.class_id < best->class_id))))
      best = &d;
  }
  if (!best) return {};
  return {taxonomy.canonicalize(best->class_name), best->confidence};
}

// Rank-1 entry of a ranking (the first entry among those with the maximum
// confidence).
inline TopLabel top1(std::span<const RankedLabel> ranking,
                     const Taxonomy& taxonomy) {
  const RankedLabel* best = nullptr;
  for (const auto& r : ranking) {
    validate_confidence(r.confidence);
    if (r.confidence <= 0.0) continue;
    if (!best || r.confidence > best->confidence) best = &r;
  }
  if (!best) return {};
  return {taxonomy.canonicalize(best->label), best->confidence};
}

inline TopLabel top1(const BackendOutput& out, const Taxonomy& taxonomy) {
  return out.mode == BackendMode::detect
             ? top1(std::span<const Detection>(out.detections), taxonomy)
             : top1(std::span<const RankedLabel>(out.ranking), taxonomy);
}

struct PredictionContext {
  std::string record_id;
  PlateId plate_id;
  std::string backend_id;
  Timestamp produced_at{};
};

inline Prediction predict_single(const BackendOutput& output,
                                 const PredictionContext& ctx,
                                 const Taxonomy& taxonomy) {
  auto top = top1(output, taxonomy);
  Prediction p{ctx.record_id,  ctx.plate_id,   taxonomy.task(), ctx.backend_id,
               top.label,      top.confidence, ctx.produced_at, std::nullopt};
  validate(p);
  return p;
}

// A failed backend call becomes an annotated NO_DETECTION vote.
inline Prediction failed_prediction(const PredictionContext& ctx, Task task,
                                    const ErrorInfo& error) {
  return {ctx.record_id,  ctx.plate_id,    task,
          ctx.backend_id, std::string(kNoDetection), 0.0,
          ctx.produced_at, error.kind + ": " + error.message};
}

// ---------------------------------------------------------------------------
// Multi-view voting

// Plurality over real labels. NO_DETECTION is counted but only wins when it is
// the only key. Ties among real labels: larger confidence sum, then the
// lexicographically smaller label.
inline VoteTally tally_votes(std::span<const Prediction> predictions) {
  if (predictions.empty()) throw EmptyInput("cannot tally zero predictions");
  const auto& first = predictions.front();
  for (const auto& p : predictions)
    if (p.plate_id != first.plate_id || p.task != first.task ||
        p.backend_id != first.backend_id)
      throw MixedGroup("predictions for '" + first.plate_id.value() +
                       "' mix plates, tasks or backends");

  VoteTally t;
  t.plate_id = first.plate_id;
  t.task = first.task;
  t.backend_id = first.backend_id;

  std::map<std::string, std::vector<double>> confidences;
  for (const auto& p : predictions) {
    ++t.counts[p.label];
    confidences[p.label].push_back(p.confidence);
    t.evidence.push_back(p.record_id);
  }
  std::sort(t.evidence.begin(), t.evidence.end());

  // Sum in sorted order so the result does not depend on input order.
  auto summed = [&](const std::string& label) {
    auto c = confidences.at(label);
    std::sort(c.begin(), c.end());
    double s = 0.0;
    for (double v : c) s += v;
    return s;
  };

  int best = 0;
  std::vector<std::string> leaders;
  for (const auto& [label, n] : t.counts) {
    if (is_no_detection(label)) continue;
    if (n > best) {
      best = n;
      leaders = {label};
    } else if (n == best) {
      leaders.push_back(label);
    }
  }

  if (leaders.empty()) {
    t.winner = std::string(kNoDetection);
  } else if (leaders.size() == 1) {
    t.winner = leaders.front();
  } else {
    t.tie_broken = true;
    // leaders are in ascending label order, so strict > keeps the smaller
    // label on an exact confidence tie.
    double best_sum = -1.0;
    for (const auto& l : leaders) {
      double s = summed(l);
      if (s > best_sum) {
        best_sum = s;
        t.winner = l;
      }
    }
  }
  validate(t);
  return t;
}

inline VoteTally tally_votes(const std::vector<Prediction>& predictions) {
  return tally_votes(std::span<const Prediction>(predictions));
}

// ---------------------------------------------------------------------------
// Pipelines

struct SviOptions {
  unsigned parallelism = 1;
  Timestamp produced_at{};
};

inline ImageRequest make_request(const ImageRecord& r, const Taxonomy& taxonomy) {
  return {r.record_id, r.image_ref, taxonomy.task(), canonical_truth(r, taxonomy)};
}

// One prediction per record, ordered by record_id. Per-record failures
// (backend errors or labels outside the taxonomy) become annotated
// NO_DETECTION rows.
inline std::vector<Prediction> run_svi(const DetectorBackend& backend,
                                       const std::vector<ImageRecord>& records,
                                       const Taxonomy& taxonomy,
                                       const SviOptions& options = {}) {
  std::vector<ImageRequest> requests;
  requests.reserve(records.size());
  std::map<std::string, PlateId> plate_of;
  for (const auto& r : records) {
    requests.push_back(make_request(r, taxonomy));
    if (!plate_of.emplace(r.record_id, r.plate_id).second)
      throw DuplicateRecordId("record_id '" + r.record_id + "' repeated");
  }

  auto results = run_batch(backend, requests, options.parallelism);
  std::vector<Prediction> out;
  out.reserve(results.size());
  for (const auto& res : results) {
    PredictionContext ctx{res.record_id, plate_of.at(res.record_id),
                          backend.descriptor().backend_id, options.produced_at};
    if (res.error) {
      out.push_back(failed_prediction(ctx, taxonomy.task(), *res.error));
      continue;
    }
    try {
      out.push_back(predict_single(*res.output, ctx, taxonomy));
    } catch (const UnknownLabel& e) {
      out.push_back(
          failed_prediction(ctx, taxonomy.task(), {e.kind(), e.what()}));
    }
  }
  return out;
}

// One tally per (plate, task, backend), ordered by that key.
inline std::vector<VoteTally> run_mvi(const std::vector<Prediction>& predictions) {
  std::map<std::tuple<PlateId, Task, std::string>, std::vector<Prediction>> groups;
  for (const auto& p : predictions)
    groups[{p.plate_id, p.task, p.backend_id}].push_back(p);
  std::vector<VoteTally> out;
  out.reserve(groups.size());
  for (const auto& [key, group] : groups) out.push_back(tally_votes(group));
  return out;
}

}  // namespace fleetlens
