#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fleetlens/aggregation.hpp"
#include "fleetlens/backend.hpp"
#include "fleetlens/domain.hpp"
#include "fleetlens/errors.hpp"
#include "fleetlens/serialize.hpp"

namespace fleetlens {

struct AccuracyResult {
  double accuracy = 0.0;
  double unknown_rate = 0.0;
  ConfusionMatrix confusion;
  std::map<std::string, double> per_class_accuracy;
  std::size_t total = 0;
};

namespace detail {

// Label axis: preferred order first, then any other labels seen (sorted),
// NO_DETECTION last.
inline std::vector<std::string> label_axis(
    const std::vector<std::string>& preferred,
    const std::vector<std::pair<std::string, std::string>>& pairs) {
  std::vector<std::string> axis;
  std::set<std::string> have;
  for (const auto& l : preferred)
    if (!is_no_detection(l) && have.insert(l).second) axis.push_back(l);
  std::set<std::string> extra;
  for (const auto& [truth, pred] : pairs) {
    for (const auto* l : {&truth, &pred})
      if (!is_no_detection(*l) && !have.count(*l)) extra.insert(*l);
  }
  axis.insert(axis.end(), extra.begin(), extra.end());
  axis.emplace_back(kNoDetection);
  return axis;
}

// pairs are (truth, predicted).
inline AccuracyResult score_pairs(
    const std::vector<std::pair<std::string, std::string>>& pairs,
    const std::vector<std::string>& label_order) {
  AccuracyResult r;
  r.confusion.labels = label_axis(label_order, pairs);
  const std::size_t n = r.confusion.labels.size();
  r.confusion.cells.assign(n, std::vector<std::size_t>(n, 0));

  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < n; ++i) index[r.confusion.labels[i]] = i;

  std::size_t correct = 0, unknown = 0;
  for (const auto& [truth, pred] : pairs) {
    ++r.confusion.cells[index.at(truth)][index.at(pred)];
    if (is_no_detection(pred))
      ++unknown;
    else if (pred == truth)
      ++correct;
  }
  r.total = pairs.size();
  if (r.total > 0) {
    r.accuracy = static_cast<double>(correct) / static_cast<double>(r.total);
    r.unknown_rate = static_cast<double>(unknown) / static_cast<double>(r.total);
  }
  for (std::size_t i = 0; i + 1 < n; ++i) {
    std::size_t support = r.confusion.row_sum(i);
    if (support > 0)
      r.per_class_accuracy[r.confusion.labels[i]] =
          static_cast<double>(r.confusion.cells[i][i]) /
          static_cast<double>(support);
  }
  return r;
}

}  // namespace detail

// Per-image accuracy. NO_DETECTION counts as incorrect and is reported through
// unknown_rate as well.
inline AccuracyResult svi_accuracy(
    const std::vector<Prediction>& predictions,
    const std::map<std::string, std::string>& truth_by_record,
    const std::vector<std::string>& label_order = {}) {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::set<std::string> seen;
  pairs.reserve(predictions.size());
  for (const auto& p : predictions) {
    if (!seen.insert(p.record_id).second)
      throw InvalidArgument("duplicate prediction for '" + p.record_id + "'");
    auto it = truth_by_record.find(p.record_id);
    if (it == truth_by_record.end())
      throw MissingTruth("no truth for record '" + p.record_id + "'");
    pairs.emplace_back(it->second, p.label);
  }
  return detail::score_pairs(pairs, label_order);
}

// Per-plate accuracy of the voting winners, same NO_DETECTION policy as SVI.
inline AccuracyResult mvi_accuracy(
    const std::vector<VoteTally>& tallies,
    const std::map<std::string, std::string>& truth_by_plate,
    const std::vector<std::string>& label_order = {}) {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::set<std::string> seen;
  pairs.reserve(tallies.size());
  for (const auto& t : tallies) {
    if (!seen.insert(t.plate_id.value()).second)
      throw DuplicateTally("two tallies for plate '" + t.plate_id.value() + "'");
    auto it = truth_by_plate.find(t.plate_id.value());
    if (it == truth_by_plate.end())
      throw MissingTruth("no truth for plate '" + t.plate_id.value() + "'");
    pairs.emplace_back(it->second, t.winner);
  }
  return detail::score_pairs(pairs, label_order);
}

struct TruthMaps {
  std::map<std::string, std::string> by_record;
  std::map<std::string, std::string> by_plate;
  std::set<std::string> conflicting_plates;
};

// Canonical truth per record and per plate. Plates whose records disagree are
// left out of by_plate and listed in conflicting_plates.
inline TruthMaps truth_from_records(const std::vector<ImageRecord>& records,
                                    const Taxonomy& taxonomy) {
  TruthMaps m;
  std::map<std::string, std::set<std::string>> plate_labels;
  for (const auto& r : records) {
    auto label = canonical_truth(r, taxonomy);
    if (!label) continue;
    m.by_record[r.record_id] = *label;
    plate_labels[r.plate_id.value()].insert(*label);
  }
  for (const auto& [plate, labels] : plate_labels) {
    if (labels.size() == 1)
      m.by_plate[plate] = *labels.begin();
    else
      m.conflicting_plates.insert(plate);
  }
  return m;
}

inline EvalReport evaluate(const std::vector<Prediction>& predictions,
                           const std::vector<VoteTally>& tallies,
                           const TruthMaps& truth, Task task,
                           const std::vector<std::string>& label_order = {}) {
  auto svi = svi_accuracy(predictions, truth.by_record, label_order);
  auto mvi = mvi_accuracy(tallies, truth.by_plate, label_order);
  EvalReport r;
  r.task = task;
  std::set<std::string> backends;
  for (const auto& p : predictions) backends.insert(p.backend_id);
  for (const auto& t : tallies) backends.insert(t.backend_id);
  if (backends.size() > 1)
    throw MixedGroup("evaluation input mixes backends");
  if (!backends.empty()) r.backend_id = *backends.begin();
  r.svi_accuracy = svi.accuracy;
  r.unknown_rate_svi = svi.unknown_rate;
  r.confusion_svi = std::move(svi.confusion);
  r.mvi_accuracy = mvi.accuracy;
  r.unknown_rate_mvi = mvi.unknown_rate;
  r.confusion_mvi = std::move(mvi.confusion);
  r.per_class_accuracy = std::move(mvi.per_class_accuracy);
  r.images_evaluated = svi.total;
  r.plates_evaluated = mvi.total;
  return r;
}

// ---------------------------------------------------------------------------
// Report rendering

struct ReportRow {
  std::string model;
  std::string size;
  double svi = 0.0;
  double mvi = 0.0;
  double unknown_svi = 0.0;
  double unknown_mvi = 0.0;

  bool operator==(const ReportRow&) const = default;
};

inline void to_json(json& j, const ReportRow& r) {
  j = json{{"model", r.model},         {"size", r.size},
           {"svi", r.svi},             {"mvi", r.mvi},
           {"unknown_svi", r.unknown_svi}, {"unknown_mvi", r.unknown_mvi}};
}
inline void from_json(const json& j, ReportRow& r) {
  r.model = j.at("model").get<std::string>();
  r.size = j.at("size").get<std::string>();
  r.svi = j.at("svi").get<double>();
  r.mvi = j.at("mvi").get<double>();
  r.unknown_svi = j.value("unknown_svi", 0.0);
  r.unknown_mvi = j.value("unknown_mvi", 0.0);
}

struct RenderedReport {
  json document;
  std::string markdown;
  std::vector<std::string> models;  // row groups, in order
  std::vector<std::string> sizes;   // columns, in order
  std::size_t grid_rows = 0;        // models x {SVI, MVI}
};

namespace detail {

inline int size_rank(const std::string& size) {
  static const std::vector<std::string> kOrder = {
      "Nano", "Small", "Medium", "Large", "X-Large"};
  auto it = std::find(kOrder.begin(), kOrder.end(), size);
  return it == kOrder.end() ? static_cast<int>(kOrder.size())
                            : static_cast<int>(it - kOrder.begin());
}

inline std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v * 100.0);
  return buf;
}

inline std::string md_row(const std::vector<std::string>& cells) {
  std::string out = "|";
  for (const auto& c : cells) out += " " + c + " |";
  return out + "\n";
}

}  // namespace detail

// Model x {SVI, MVI} rows against size columns; the best MVI cell is bold.
inline RenderedReport render_report(Task task, const std::vector<ReportRow>& rows,
                                    const json& provenance = json::object()) {
  if (rows.empty()) throw EmptyInput("render_report needs at least one result");

  RenderedReport out;
  for (const auto& r : rows) {
    if (std::find(out.models.begin(), out.models.end(), r.model) == out.models.end())
      out.models.push_back(r.model);
    if (std::find(out.sizes.begin(), out.sizes.end(), r.size) == out.sizes.end())
      out.sizes.push_back(r.size);
  }
  std::stable_sort(out.sizes.begin(), out.sizes.end(), [](const auto& a, const auto& b) {
    return detail::size_rank(a) < detail::size_rank(b);
  });

  std::map<std::pair<std::string, std::string>, const ReportRow*> cell;
  for (const auto& r : rows) {
    auto [it, fresh] = cell.emplace(std::make_pair(r.model, r.size), &r);
    if (!fresh)
      throw InvalidArgument("duplicate result for " + r.model + "/" + r.size);
  }

  const ReportRow* best = &rows.front();
  for (const auto& r : rows)
    if (r.mvi > best->mvi) best = &r;

  std::vector<std::string> header{"Model", "Inference"};
  header.insert(header.end(), out.sizes.begin(), out.sizes.end());
  out.markdown = detail::md_row(header);
  out.markdown += detail::md_row(std::vector<std::string>(header.size(), "---"));
  for (const auto& model : out.models) {
    for (const char* mode : {"SVI", "MVI"}) {
      std::vector<std::string> line{std::string(mode) == "SVI" ? model : "", mode};
      for (const auto& size : out.sizes) {
        auto it = cell.find({model, size});
        if (it == cell.end()) {
          line.push_back("-");
          continue;
        }
        bool mvi = std::string(mode) == "MVI";
        std::string v = detail::percent(mvi ? it->second->mvi : it->second->svi);
        if (mvi && it->second == best) v = "**" + v + "**";
        line.push_back(v);
      }
      out.markdown += detail::md_row(line);
      ++out.grid_rows;
    }
  }

  out.document = json{{"task", task},
                      {"rows", rows},
                      {"best_mvi", {{"model", best->model}, {"size", best->size}}},
                      {"provenance", provenance}};
  return out;
}

struct ComparisonRow {
  Task task = Task::make;
  std::string size;
  double baseline = 0.0;
  double tuned = 0.0;
};

// Attribute x size rows with the baseline (e.g. zero-shot) and tuned accuracy
// side by side.
inline std::string render_comparison(const std::vector<ComparisonRow>& rows,
                                     const std::string& baseline_name = "Zero-shot",
                                     const std::string& tuned_name = "Fine-tuned") {
  if (rows.empty()) throw EmptyInput("render_comparison needs at least one row");
  std::string md = detail::md_row(
      {"Attribute", "Size", baseline_name + " (%)", tuned_name + " (%)"});
  md += detail::md_row({"---", "---", "---", "---"});
  std::optional<Task> last;
  for (const auto& r : rows) {
    md += detail::md_row({last == r.task ? "" : std::string(to_string(r.task)), r.size,
                          detail::percent(r.baseline), detail::percent(r.tuned)});
    last = r.task;
  }
  return md;
}

// ---------------------------------------------------------------------------
// MVI gain simulation

struct SimulationResult {
  double svi_estimate = 0.0;
  double mvi_estimate = 0.0;
  std::optional<double> analytic_mvi;
  double analytic_svi = 0.0;
  std::size_t plates = 0;
  std::size_t views = 0;
};

// Probability that `views` i.i.d. votes elect the true label, for 2 labels,
// no abstentions and odd view counts.
inline double binomial_majority(double p, std::size_t views) {
  double total = 0.0;
  for (std::size_t j = views / 2 + 1; j <= views; ++j) {
    double log_c = std::lgamma(views + 1.0) - std::lgamma(j + 1.0) -
                   std::lgamma(static_cast<double>(views - j) + 1.0);
    total += std::exp(log_c) * std::pow(p, static_cast<double>(j)) *
             std::pow(1.0 - p, static_cast<double>(views - j));
  }
  return total;
}

// Exact probability that the plurality vote is correct, by enumerating every
// vote-count vector over {truth, NO_DETECTION, wrong_1..wrong_{m-1}}. Exact
// real-label ties are split evenly because the simulator's confidences are
// i.i.d. and independent of the outcome. nullopt when the count vectors
// exceed max_outcomes.
inline std::optional<double> enumerate_majority(const StochasticProfile& profile,
                                                std::size_t labels,
                                                std::size_t views,
                                                double max_outcomes = 1e6) {
  if (labels < 1 || views < 1) return std::nullopt;
  const std::size_t wrong = labels - 1;
  const double p = profile.p_correct;
  const double q = wrong == 0 ? 1.0 - p : profile.p_no_detection;
  const double w = wrong == 0 ? 0.0 : (1.0 - p - profile.p_no_detection) / wrong;

  // C(views + wrong + 1, wrong + 1) count vectors.
  double vectors = 1.0;
  for (std::size_t i = 1; i <= wrong + 1; ++i)
    vectors = vectors * static_cast<double>(views + i) / static_cast<double>(i);
  if (vectors > max_outcomes) return std::nullopt;

  auto log_fact = [](std::size_t n) { return std::lgamma(n + 1.0); };
  auto term = [](double prob, std::size_t n) {
    return n == 0 ? 0.0 : static_cast<double>(n) * std::log(prob);
  };

  double total = 0.0;
  std::vector<std::size_t> wrong_counts(wrong, 0);
  // Recurse over wrong-label counts; truth and abstain counts close the sum.
  std::function<void(std::size_t, std::size_t)> walk = [&](std::size_t idx,
                                                            std::size_t left) {
    if (idx == wrong) {
      std::size_t max_wrong = 0, at_max = 0;
      for (auto c : wrong_counts) {
        if (c > max_wrong) {
          max_wrong = c;
          at_max = 1;
        } else if (c == max_wrong) {
          ++at_max;
        }
      }
      double log_base = log_fact(views);
      for (auto c : wrong_counts) log_base += term(w, c) - log_fact(c);
      for (std::size_t correct = 0; correct <= left; ++correct) {
        std::size_t abstain = left - correct;
        if (correct == 0 || correct < max_wrong) continue;
        if ((p == 0.0 && correct > 0) || (q == 0.0 && abstain > 0)) continue;
        double share = correct > max_wrong ? 1.0 : 1.0 / (1.0 + at_max);
        double lp = log_base + term(p, correct) - log_fact(correct) +
                    term(q, abstain) - log_fact(abstain);
        total += share * std::exp(lp);
      }
      return;
    }
    for (std::size_t c = 0; c <= left; ++c) {
      if (w == 0.0 && c > 0) break;
      wrong_counts[idx] = c;
      walk(idx + 1, left - c);
    }
    wrong_counts[idx] = 0;
  };
  walk(0, views);
  return total;
}

inline std::optional<double> analytic_majority(const StochasticProfile& profile,
                                               std::size_t labels,
                                               std::size_t views) {
  if (labels == 2 && profile.p_no_detection == 0.0 && views % 2 == 1)
    return binomial_majority(profile.p_correct, views);
  return enumerate_majority(profile, labels, views);
}

// Monte Carlo SVI/MVI accuracy of the simulator on `plates` synthetic plates
// with `views` images each, pushed through the same top-1 and voting code as
// real predictions.
inline SimulationResult simulate_mvi_gain(const StochasticProfile& profile,
                                          std::size_t labels, std::size_t views,
                                          std::size_t plates) {
  if (views < 1) throw InvalidArgument("views must be >= 1");
  if (plates < 1) throw InvalidArgument("plates must be >= 1");
  if (labels < 1) throw InvalidArgument("labels must be >= 1");
  profile.validate();

  std::vector<std::string> names;
  for (std::size_t i = 0; i < labels; ++i) names.push_back("L" + std::to_string(i));
  Taxonomy taxonomy(Task::make, names);
  StochasticBackend backend(profile, taxonomy);

  std::size_t svi_correct = 0, mvi_correct = 0;
  std::vector<Prediction> group(views);
  char plate_buf[32];
  for (std::size_t i = 0; i < plates; ++i) {
    std::snprintf(plate_buf, sizeof plate_buf, "P%08zu", i);
    const PlateId plate(plate_buf);
    const std::string& truth = names[i % labels];
    for (std::size_t v = 0; v < views; ++v) {
      ImageRequest req{plate.value() + "-" + std::to_string(v), "", Task::make, truth};
      auto top = top1(std::span<const Detection>(backend.detect(req)), taxonomy);
      group[v] = Prediction{req.record_id, plate,     Task::make,
                            backend.descriptor().backend_id, top.label,
                            top.confidence, Timestamp{}, std::nullopt};
      if (top.label == truth) ++svi_correct;
    }
    if (tally_votes(group).winner == truth) ++mvi_correct;
  }

  SimulationResult r;
  r.plates = plates;
  r.views = views;
  r.svi_estimate = static_cast<double>(svi_correct) / static_cast<double>(plates * views);
  r.mvi_estimate = static_cast<double>(mvi_correct) / static_cast<double>(plates);
  r.analytic_svi = profile.p_correct;
  r.analytic_mvi = analytic_majority(profile, labels, views);
  return r;
}

}  // namespace fleetlens
