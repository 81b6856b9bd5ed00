#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include "fleetlens/digest.hpp"
#include "fleetlens/domain.hpp"
#include "fleetlens/errors.hpp"
#include "fleetlens/serialize.hpp"
#include "fleetlens/timeutil.hpp"

namespace fleetlens {

// ---------------------------------------------------------------------------
// Events

struct Correction {
  std::string label;
  std::string author;
  Timestamp at{};

  bool operator==(const Correction&) const = default;
};

inline json correction_json(const Correction& c) {
  return json{{"label", c.label},
              {"author", c.author},
              {"timestamp", format_rfc3339(c.at)}};
}

struct StoreEvent {
  std::uint64_t seq = 0;
  std::string kind;  // "tally" | "correction"
  json payload;
  std::string checksum;
};

inline std::string event_checksum(std::uint64_t seq, const std::string& kind,
                                  const json& payload) {
  return sha256_hex(
      json{{"seq", seq}, {"kind", kind}, {"payload", payload}}.dump());
}

inline std::string event_row(const StoreEvent& e) {
  return json{{"seq", e.seq},
              {"kind", e.kind},
              {"payload", e.payload},
              {"checksum", e.checksum}}
      .dump();
}

// Parses and verifies an event log. Sequence numbers must run 1, 2, 3, ...
inline std::vector<StoreEvent> replay_event_log(std::istream& in) {
  std::vector<StoreEvent> events;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    StoreEvent e;
    try {
      json row = json::parse(line);
      e.seq = row.at("seq").get<std::uint64_t>();
      e.kind = row.at("kind").get<std::string>();
      e.payload = row.at("payload");
      e.checksum = row.at("checksum").get<std::string>();
    } catch (const json::exception& ex) {
      throw StoreCorrupt("event log line " + std::to_string(lineno) + ": " +
                         ex.what());
    }
    if (e.seq != events.size() + 1)
      throw StoreCorrupt("event log line " + std::to_string(lineno) +
                         ": expected seq " + std::to_string(events.size() + 1));
    if (event_checksum(e.seq, e.kind, e.payload) != e.checksum)
      throw StoreCorrupt("event log line " + std::to_string(lineno) +
                         ": checksum mismatch");
    if (e.kind != "tally" && e.kind != "correction")
      throw StoreCorrupt("event log line " + std::to_string(lineno) +
                         ": unknown kind '" + e.kind + "'");
    events.push_back(std::move(e));
  }
  return events;
}

// ---------------------------------------------------------------------------
// Index

struct TallyEntry {
  VoteTally tally;
  std::vector<Prediction> predictions;  // evidence rows that were supplied

  bool operator==(const TallyEntry&) const = default;
};

struct TaskState {
  std::map<std::string, TallyEntry> by_backend;
  std::vector<Correction> corrections;  // append order, oldest first
};

struct Sighting {
  std::string record_id;
  Timestamp captured_at{};
  std::optional<GeoPoint> location;
};

struct PlateState {
  PlateId plate_id;
  std::vector<Sighting> sightings;  // sorted by (captured_at, record_id)
  std::map<Task, TaskState> tasks;

  std::optional<Timestamp> last_seen() const {
    if (sightings.empty()) return std::nullopt;
    return sightings.back().captured_at;
  }
};

struct StoreConfig {
  std::map<Task, std::string> active_backend;
};

// Immutable once built; readers share it through shared_ptr.
struct StoreIndex {
  std::map<std::string, PlateState> plates;
  std::map<Task, std::set<std::string>> backends_by_task;
  std::uint64_t last_seq = 0;
};

struct Query {
  std::map<Task, std::set<std::string>> labels;
  std::optional<Timestamp> from, to;
  std::optional<double> lat_min, lat_max, lon_min, lon_max;
  bool include_unknown = false;
  std::size_t offset = 0;
  std::size_t limit = 50;

  static constexpr std::size_t kMaxLimit = 500;

  bool has_box() const { return lat_min || lat_max || lon_min || lon_max; }

  void validate() const {
    bool any_labels = false;
    for (const auto& [task, set] : labels) any_labels |= !set.empty();
    if (!any_labels && !from && !to && !has_box())
      throw InvalidQuery("query needs at least one filter");
    if (from && to && *from > *to) throw InvalidQuery("time window is reversed");
    if (lat_min && lat_max && *lat_min > *lat_max)
      throw InvalidQuery("latitude bounds are reversed");
    if (lon_min && lon_max && *lon_min > *lon_max)
      throw InvalidQuery("longitude bounds are reversed");
    if (limit < 1 || limit > kMaxLimit)
      throw InvalidQuery("limit must be in [1, 500]");
  }
};

struct SearchPage {
  std::size_t total = 0;
  std::vector<json> items;
};

struct UpsertReport {
  std::size_t applied = 0;
  std::size_t unchanged = 0;
  std::vector<std::string> warnings;
};

namespace detail {

inline void apply_event(StoreIndex& index, const StoreEvent& e) {
  index.last_seq = e.seq;
  if (e.kind == "tally") {
    TallyEntry entry;
    entry.tally = e.payload.at("tally").get<VoteTally>();
    entry.predictions = e.payload.at("predictions").get<std::vector<Prediction>>();
    auto& plate = index.plates[entry.tally.plate_id.value()];
    plate.plate_id = entry.tally.plate_id;
    index.backends_by_task[entry.tally.task].insert(entry.tally.backend_id);
    plate.tasks[entry.tally.task].by_backend[entry.tally.backend_id] =
        std::move(entry);
  } else {
    PlateId pid = e.payload.at("plate_id").get<PlateId>();
    Task task = e.payload.at("task").get<Task>();
    Correction c{e.payload.at("label").get<std::string>(),
                 e.payload.at("author").get<std::string>(),
                 parse_rfc3339(e.payload.at("timestamp").get<std::string>())};
    auto& plate = index.plates[pid.value()];
    plate.plate_id = pid;
    plate.tasks[task].corrections.push_back(std::move(c));
  }
}

inline StoreIndex build_index(const std::vector<ImageRecord>& records,
                              const std::vector<StoreEvent>& events) {
  StoreIndex index;
  for (const auto& r : records) {
    auto& plate = index.plates[r.plate_id.value()];
    plate.plate_id = r.plate_id;
    plate.sightings.push_back({r.record_id, r.captured_at, r.location});
  }
  for (auto& [id, plate] : index.plates)
    std::sort(plate.sightings.begin(), plate.sightings.end(),
              [](const auto& a, const auto& b) {
                return std::tie(a.captured_at, a.record_id) <
                       std::tie(b.captured_at, b.record_id);
              });
  for (const auto& e : events) apply_event(index, e);
  return index;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Store

// Directory layout:
//   records.jsonl          ingested ImageRecords, sorted by record_id
//   taxonomies/<task>.json
//   config.json            {"active_backend": {task: backend_id}}
//   events.jsonl           append-only tally/correction log
//   snapshot.json          index derived from records + events
//
// One writer at a time; readers work on an immutable index snapshot.
class Store {
 public:
  explicit Store(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create store '" + dir_.string() + "': " + ec.message());
    load();
  }

  const std::filesystem::path& dir() const { return dir_; }

  // ---- records ----------------------------------------------------------

  // Inserts or replaces records by record_id. Returns how many changed.
  std::size_t ingest_records(const std::vector<ImageRecord>& incoming) {
    std::unique_lock writer(write_mutex_);
    std::map<std::string, ImageRecord> merged;
    for (auto& r : records_) merged.emplace(r.record_id, r);
    std::size_t changed = 0;
    for (const auto& r : incoming) {
      validate(r);
      auto [it, fresh] = merged.try_emplace(r.record_id, r);
      if (fresh) {
        ++changed;
      } else if (!(it->second == r)) {
        it->second = r;
        ++changed;
      }
    }
    if (changed == 0) return 0;
    std::vector<ImageRecord> next;
    next.reserve(merged.size());
    for (auto& [id, r] : merged) next.push_back(std::move(r));
    write_text_file(dir_ / "records.jsonl", to_jsonl(next));
    {
      std::unique_lock lock(read_mutex_);
      records_ = std::move(next);
    }
    publish(detail::build_index(records_, events_));
    return changed;
  }

  std::vector<ImageRecord> records() const {
    std::shared_lock lock(read_mutex_);
    return records_;
  }

  // ---- configuration ----------------------------------------------------

  void set_taxonomy(const Taxonomy& taxonomy) {
    std::unique_lock writer(write_mutex_);
    write_json_file(taxonomy_path(taxonomy.task()), taxonomy);
    std::unique_lock lock(read_mutex_);
    taxonomies_[taxonomy.task()] = taxonomy;
  }

  std::optional<Taxonomy> taxonomy(Task task) const {
    std::shared_lock lock(read_mutex_);
    auto it = taxonomies_.find(task);
    if (it == taxonomies_.end()) return std::nullopt;
    return it->second;
  }

  Taxonomy require_taxonomy(Task task) const {
    if (auto t = taxonomy(task)) return *t;
    throw InvalidArgument("store has no taxonomy for " + std::string(to_string(task)));
  }

  std::map<Task, Taxonomy> taxonomies() const {
    std::shared_lock lock(read_mutex_);
    return taxonomies_;
  }

  void set_active_backend(Task task, const std::string& backend_id) {
    std::unique_lock writer(write_mutex_);
    StoreConfig next = config();
    next.active_backend[task] = backend_id;
    json j = json::object();
    for (const auto& [t, id] : next.active_backend) j[std::string(to_string(t))] = id;
    write_json_file(dir_ / "config.json", json{{"active_backend", j}});
    {
      std::unique_lock lock(read_mutex_);
      config_ = std::move(next);
    }
    // Profiles depend on the active backend, so the snapshot is re-rendered.
    publish(StoreIndex(*current()));
  }

  StoreConfig config() const {
    std::shared_lock lock(read_mutex_);
    return config_;
  }

  // ---- results ----------------------------------------------------------

  // Idempotent per (plate, task, backend): an identical tally with identical
  // evidence appends nothing.
  UpsertReport upsert_results(const std::vector<VoteTally>& tallies,
                              const std::vector<Prediction>& predictions) {
    std::unique_lock writer(write_mutex_);
    std::map<std::tuple<std::string, Task, std::string>, const Prediction*> by_key;
    for (const auto& p : predictions) {
      validate(p);
      by_key[{p.record_id, p.task, p.backend_id}] = &p;
    }

    UpsertReport report;
    auto index = current();
    std::vector<StoreEvent> fresh;
    for (const auto& t : tallies) {
      validate(t);
      TallyEntry entry{t, {}};
      std::size_t dangling = 0;
      for (const auto& rid : t.evidence) {
        auto it = by_key.find({rid, t.task, t.backend_id});
        if (it == by_key.end())
          ++dangling;
        else
          entry.predictions.push_back(*it->second);
      }
      if (dangling > 0)
        report.warnings.push_back("dangling evidence: plate " + t.plate_id.value() +
                                  " references " + std::to_string(dangling) +
                                  " unknown prediction(s)");

      if (const TallyEntry* existing = find_entry(*index, t); existing && *existing == entry) {
        ++report.unchanged;
        continue;
      }
      json payload{{"tally", entry.tally}, {"predictions", entry.predictions}};
      fresh.push_back(make_event("tally", std::move(payload),
                                 events_.size() + fresh.size() + 1));
      ++report.applied;
    }
    append(fresh);
    return report;
  }

  json submit_correction(const std::string& plate_raw, Task task,
                         const std::string& label_raw, const std::string& author,
                         Timestamp at) {
    const PlateId plate(plate_raw);
    if (author.empty()) throw InvalidArgument("correction needs an author");
    std::string label = label_raw;
    if (!is_no_detection(label)) {
      auto tax = taxonomy(task);
      if (!tax)
        throw UnknownLabel("no taxonomy configured for " + std::string(to_string(task)));
      label = tax->canonicalize(label_raw);
    }

    std::unique_lock writer(write_mutex_);
    if (!current()->plates.count(plate.value()))
      throw NotFound("plate '" + plate.value() + "' not found");
    json payload{{"plate_id", plate},
                 {"task", task},
                 {"label", label},
                 {"author", author},
                 {"timestamp", format_rfc3339(at)}};
    append({make_event("correction", std::move(payload), events_.size() + 1)});
    writer.unlock();
    return get_plate(plate.value());
  }

  // ---- queries ----------------------------------------------------------

  SearchPage search(Query query) const {
    query.validate();
    auto index = current();
    const auto cfg = config();

    for (auto& [task, labels] : query.labels) {
      if (labels.empty()) continue;
      resolve_active(*index, cfg, task, /*strict=*/true);
      if (auto tax = taxonomy(task)) {
        std::set<std::string> canonical;
        for (const auto& l : labels) {
          if (is_no_detection(l)) {
            canonical.insert(l);
            continue;
          }
          auto c = tax->try_canonicalize(l);
          if (!c) throw InvalidQuery("'" + l + "' is not a " +
                                     std::string(to_string(task)) + " label");
          canonical.insert(*c);
        }
        labels = std::move(canonical);
      }
    }

    std::vector<const PlateState*> hits;
    for (const auto& [id, plate] : index->plates)
      if (matches(*index, cfg, plate, query)) hits.push_back(&plate);

    std::sort(hits.begin(), hits.end(), [](const PlateState* a, const PlateState* b) {
      auto la = a->last_seen(), lb = b->last_seen();
      if (la != lb) {
        if (!la) return false;
        if (!lb) return true;
        return *la > *lb;
      }
      return a->plate_id < b->plate_id;
    });

    SearchPage page;
    page.total = hits.size();
    for (std::size_t i = query.offset; i < hits.size() && page.items.size() < query.limit; ++i)
      page.items.push_back(profile_json(*index, cfg, *hits[i], false));
    return page;
  }

  json get_plate(const std::string& plate_raw) const {
    const PlateId plate(plate_raw);
    auto index = current();
    auto it = index->plates.find(plate.value());
    if (it == index->plates.end())
      throw NotFound("plate '" + plate.value() + "' not found");
    return profile_json(*index, config(), it->second, true);
  }

  std::size_t plate_count() const { return current()->plates.size(); }
  std::uint64_t last_seq() const { return current()->last_seq; }

  // ---- snapshot ---------------------------------------------------------

  std::string snapshot_text() const { return render_snapshot(*current(), config()); }

  // Rebuilds the index from records.jsonl and events.jsonl on disk, ignoring
  // in-memory state, and renders it.
  std::string rebuild_snapshot_from_log() const {
    auto records = read_records(dir_ / "records.jsonl");
    auto events = read_events(dir_ / "events.jsonl");
    return render_snapshot(detail::build_index(records, events), config());
  }

  std::string stored_snapshot_text() const {
    auto p = dir_ / "snapshot.json";
    return std::filesystem::exists(p) ? read_file_bytes(p.string()) : std::string{};
  }

 private:
  std::filesystem::path taxonomy_path(Task t) const {
    return dir_ / "taxonomies" / (std::string(to_string(t)) + ".json");
  }

  static std::vector<ImageRecord> read_records(const std::filesystem::path& p) {
    if (!std::filesystem::exists(p)) return {};
    return read_jsonl_file<ImageRecord>(p);
  }

  static std::vector<StoreEvent> read_events(const std::filesystem::path& p) {
    if (!std::filesystem::exists(p)) return {};
    std::ifstream in(p);
    if (!in) throw IoError("cannot open '" + p.string() + "'");
    return replay_event_log(in);
  }

  void load() {
    records_ = read_records(dir_ / "records.jsonl");
    events_ = read_events(dir_ / "events.jsonl");
    for (Task t : kAllTasks)
      if (std::filesystem::exists(taxonomy_path(t)))
        taxonomies_[t] = load_taxonomy(taxonomy_path(t));
    if (std::filesystem::exists(dir_ / "config.json")) {
      json j = read_json_file(dir_ / "config.json");
      if (j.contains("active_backend"))
        for (const auto& [task, id] : j["active_backend"].items())
          config_.active_backend[parse_task(task)] = id.get<std::string>();
    }
    index_ = std::make_shared<const StoreIndex>(detail::build_index(records_, events_));
  }

  std::shared_ptr<const StoreIndex> current() const {
    std::shared_lock lock(read_mutex_);
    return index_;
  }

  // Caller holds write_mutex_.
  void publish(StoreIndex next) {
    auto ptr = std::make_shared<const StoreIndex>(std::move(next));
    write_text_file(dir_ / "snapshot.json", render_snapshot(*ptr, config()));
    std::unique_lock lock(read_mutex_);
    index_ = std::move(ptr);
  }

  static StoreEvent make_event(std::string kind, json payload, std::uint64_t seq) {
    StoreEvent e{seq, std::move(kind), std::move(payload), {}};
    e.checksum = event_checksum(e.seq, e.kind, e.payload);
    return e;
  }

  // Caller holds write_mutex_.
  void append(const std::vector<StoreEvent>& fresh) {
    if (fresh.empty()) return;
    {
      std::ofstream out(dir_ / "events.jsonl", std::ios::app | std::ios::binary);
      if (!out) throw IoError("cannot append to event log");
      for (const auto& e : fresh) out << event_row(e) << '\n';
      out.flush();
      if (!out) throw IoError("event log write failed");
    }
    StoreIndex next = *current();
    for (const auto& e : fresh) {
      detail::apply_event(next, e);
      events_.push_back(e);
    }
    publish(std::move(next));
  }

  static const TallyEntry* find_entry(const StoreIndex& index, const VoteTally& t) {
    auto p = index.plates.find(t.plate_id.value());
    if (p == index.plates.end()) return nullptr;
    auto task = p->second.tasks.find(t.task);
    if (task == p->second.tasks.end()) return nullptr;
    auto b = task->second.by_backend.find(t.backend_id);
    return b == task->second.by_backend.end() ? nullptr : &b->second;
  }

  // Backend whose tallies answer queries for a task. Without configuration
  // the only backend seen for the task is used; several is an error in
  // strict mode and "none" otherwise.
  static std::optional<std::string> resolve_active(const StoreIndex& index,
                                                   const StoreConfig& cfg, Task task,
                                                   bool strict) {
    if (auto it = cfg.active_backend.find(task); it != cfg.active_backend.end())
      return it->second;
    auto b = index.backends_by_task.find(task);
    if (b == index.backends_by_task.end() || b->second.empty()) return std::nullopt;
    if (b->second.size() == 1) return *b->second.begin();
    if (strict)
      throw InvalidQuery("several backends hold " + std::string(to_string(task)) +
                         " results; configure an active backend");
    return std::nullopt;
  }

  // Newest correction, else the active backend's winner.
  static std::optional<std::string> effective_label(const StoreIndex& index,
                                                    const StoreConfig& cfg,
                                                    const PlateState& plate, Task task) {
    auto ts = plate.tasks.find(task);
    if (ts == plate.tasks.end()) return std::nullopt;
    if (!ts->second.corrections.empty()) return ts->second.corrections.back().label;
    auto active = resolve_active(index, cfg, task, false);
    if (!active) return std::nullopt;
    auto b = ts->second.by_backend.find(*active);
    if (b == ts->second.by_backend.end()) return std::nullopt;
    return b->second.tally.winner;
  }

  static bool matches(const StoreIndex& index, const StoreConfig& cfg,
                      const PlateState& plate, const Query& q) {
    for (const auto& [task, labels] : q.labels) {
      if (labels.empty()) continue;
      auto label = effective_label(index, cfg, plate, task);
      if (!label) return false;
      if (is_no_detection(*label)) {
        if (!q.include_unknown && !labels.count(*label)) return false;
      } else if (!labels.count(*label)) {
        return false;
      }
    }
    if (!q.from && !q.to && !q.has_box()) return true;
    for (const auto& s : plate.sightings) {
      if (q.from && s.captured_at < *q.from) continue;
      if (q.to && s.captured_at > *q.to) continue;
      if (q.has_box()) {
        if (!s.location) continue;
        const auto& loc = *s.location;
        if ((q.lat_min && loc.lat < *q.lat_min) || (q.lat_max && loc.lat > *q.lat_max) ||
            (q.lon_min && loc.lon < *q.lon_min) || (q.lon_max && loc.lon > *q.lon_max))
          continue;
      }
      return true;
    }
    return false;
  }

  static json profile_json(const StoreIndex& index, const StoreConfig& cfg,
                           const PlateState& plate, bool with_evidence) {
    json sightings = json::array();
    for (const auto& s : plate.sightings)
      sightings.push_back({{"record_id", s.record_id},
                           {"captured_at", format_rfc3339(s.captured_at)},
                           {"lat", s.location ? json(s.location->lat) : json(nullptr)},
                           {"lon", s.location ? json(s.location->lon) : json(nullptr)}});

    json tasks = json::object();
    std::vector<Prediction> evidence;
    for (const auto& [task, state] : plate.tasks) {
      auto active = resolve_active(index, cfg, task, false);
      const TallyEntry* entry = nullptr;
      if (active)
        if (auto b = state.by_backend.find(*active); b != state.by_backend.end())
          entry = &b->second;

      json history = json::array();
      for (auto it = state.corrections.rbegin(); it != state.corrections.rend(); ++it)
        history.push_back(correction_json(*it));
      json backends = json::array();
      for (const auto& [id, e] : state.by_backend) {
        backends.push_back(id);
        if (with_evidence)
          evidence.insert(evidence.end(), e.predictions.begin(), e.predictions.end());
      }

      auto eff = effective_label(index, cfg, plate, task);
      tasks[std::string(to_string(task))] = {
          {"active_backend", active ? json(*active) : json(nullptr)},
          {"winner", entry ? json(entry->tally.winner) : json(nullptr)},
          {"tie_broken", entry ? entry->tally.tie_broken : false},
          {"counts", entry ? json(entry->tally.counts) : json::object()},
          {"evidence", entry ? json(entry->tally.evidence) : json::array()},
          {"effective_label", eff ? json(*eff) : json(nullptr)},
          {"corrected", !state.corrections.empty()},
          {"correction", state.corrections.empty()
                             ? json(nullptr)
                             : correction_json(state.corrections.back())},
          {"correction_history", history},
          {"backends", backends}};
    }

    auto last = plate.last_seen();
    json out{{"plate_id", plate.plate_id},
             {"last_seen", last ? json(format_rfc3339(*last)) : json(nullptr)},
             {"sightings", sightings},
             {"tasks", tasks}};
    if (with_evidence) {
      std::sort(evidence.begin(), evidence.end(), [](const auto& a, const auto& b) {
        return std::tie(a.record_id, a.task, a.backend_id) <
               std::tie(b.record_id, b.task, b.backend_id);
      });
      out["evidence"] = evidence;
    }
    return out;
  }

  static std::string render_snapshot(const StoreIndex& index, const StoreConfig& cfg) {
    json plates = json::object();
    for (const auto& [id, plate] : index.plates)
      plates[id] = profile_json(index, cfg, plate, true);
    return json{{"last_seq", index.last_seq}, {"plates", plates}}.dump(1) + "\n";
  }

  std::filesystem::path dir_;
  std::vector<ImageRecord> records_;
  std::vector<StoreEvent> events_;
  std::map<Task, Taxonomy> taxonomies_;
  StoreConfig config_;

  mutable std::shared_mutex read_mutex_;  // guards index_, records_, taxonomies_, config_
  std::mutex write_mutex_;                // serializes writers
  std::shared_ptr<const StoreIndex> index_;
};

}  // namespace fleetlens
