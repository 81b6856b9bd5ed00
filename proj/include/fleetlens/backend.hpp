#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>

#include "fleetlens/digest.hpp"
#include "fleetlens/domain.hpp"
#include "fleetlens/errors.hpp"
#include "fleetlens/random.hpp"
#include "fleetlens/serialize.hpp"

namespace fleetlens {

enum class BackendMode { detect, classify };

constexpr std::string_view to_string(BackendMode m) {
  return m == BackendMode::detect ? "detect" : "classify";
}

inline BackendMode parse_backend_mode(std::string_view s) {
  if (s == "detect") return BackendMode::detect;
  if (s == "classify") return BackendMode::classify;
  throw InvalidArgument("unknown backend mode '" + std::string(s) + "'");
}

struct BackendDescriptor {
  std::string backend_id;
  Task task = Task::make;
  BackendMode mode = BackendMode::detect;
};

// One image to score. truth is only consulted by the simulator.
struct ImageRequest {
  std::string record_id;
  std::string image_ref;
  Task task = Task::make;
  std::optional<std::string> truth;
};

struct BackendOutput {
  BackendMode mode = BackendMode::detect;
  std::vector<Detection> detections;
  std::vector<RankedLabel> ranking;

  bool operator==(const BackendOutput&) const = default;
};

// Implementations must be callable from many threads at once.
class DetectorBackend {
 public:
  virtual ~DetectorBackend() = default;

  virtual const BackendDescriptor& descriptor() const = 0;
  virtual std::vector<Detection> detect(const ImageRequest& req) const = 0;
  virtual std::vector<RankedLabel> classify(const ImageRequest& req) const = 0;

  BackendOutput infer(const ImageRequest& req) const {
    BackendOutput out;
    out.mode = descriptor().mode;
    if (out.mode == BackendMode::detect)
      out.detections = detect(req);
    else
      out.ranking = classify(req);
    return out;
  }

 protected:
  void check_task(const ImageRequest& req) const {
    if (req.task != descriptor().task)
      throw InvalidArgument("backend '" + descriptor().backend_id +
                            "' is configured for " +
                            std::string(to_string(descriptor().task)) + ", not " +
                            std::string(to_string(req.task)));
  }
};

// ---------------------------------------------------------------------------
// Mock: table lookup from a fixture document.
//
//   {"task": "make", "mode": "detect",
//    "detections": {"<record_id>": [Detection...]},
//    "rankings":   {"<record_id>": [{"class_name", "confidence"}...]}}
//
// Records absent from the table produce an empty result.

class MockBackend final : public DetectorBackend {
 public:
  MockBackend(std::string backend_id, const json& fixtures) {
    desc_.backend_id = std::move(backend_id);
    desc_.task = fixtures.at("task").get<Task>();
    desc_.mode = parse_backend_mode(fixtures.value("mode", "detect"));
    if (fixtures.contains("detections"))
      for (const auto& [id, dets] : fixtures["detections"].items())
        detections_[id] = dets.get<std::vector<Detection>>();
    if (fixtures.contains("rankings"))
      for (const auto& [id, ranking] : fixtures["rankings"].items())
        rankings_[id] = ranking.get<std::vector<RankedLabel>>();
  }

  static std::unique_ptr<MockBackend> from_file(
      const std::filesystem::path& path) {
    return std::make_unique<MockBackend>("mock:" + path.string(),
                                         read_json_file(path));
  }

  const BackendDescriptor& descriptor() const override { return desc_; }

  std::vector<Detection> detect(const ImageRequest& req) const override {
    check_task(req);
    auto it = detections_.find(req.record_id);
    return it == detections_.end() ? std::vector<Detection>{} : it->second;
  }

  std::vector<RankedLabel> classify(const ImageRequest& req) const override {
    check_task(req);
    auto it = rankings_.find(req.record_id);
    return it == rankings_.end() ? std::vector<RankedLabel>{} : it->second;
  }

 private:
  BackendDescriptor desc_;
  std::map<std::string, std::vector<Detection>> detections_;
  std::map<std::string, std::vector<RankedLabel>> rankings_;
};

// ---------------------------------------------------------------------------
// Stochastic simulator

struct StochasticProfile {
  double p_correct = 0.8;
  double p_no_detection = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(p_correct >= 0.0 && p_correct <= 1.0))
      throw InvalidArgument("p_correct must be in [0,1]");
    if (!(p_no_detection >= 0.0 && p_no_detection <= 1.0))
      throw InvalidArgument("p_no_detection must be in [0,1]");
    if (p_correct + p_no_detection > 1.0 + 1e-12)
      throw InvalidArgument("p_correct + p_no_detection exceeds 1");
  }
};

// Outcome of one simulated view, before it is shaped into detections.
struct SimulatedDraw {
  std::optional<std::string> label;  // nullopt: no detection
  double confidence = 0.0;
};

// Per view: truth with probability p, nothing with probability q, otherwise a
// uniformly chosen other label. Confidence is drawn from [0.5, 1) independently
// of the outcome. Every draw is a pure function of (seed, record_id, task).
class StochasticBackend final : public DetectorBackend {
 public:
  StochasticBackend(StochasticProfile profile, Taxonomy taxonomy,
                    BackendMode mode = BackendMode::detect)
      : profile_(profile), taxonomy_(std::move(taxonomy)) {
    profile_.validate();
    if (taxonomy_.labels().empty())
      throw InvalidArgument("simulator needs at least one label");
    desc_.task = taxonomy_.task();
    desc_.mode = mode;
    std::ostringstream id;
    id << "sim:p=" << profile_.p_correct << ",q=" << profile_.p_no_detection
       << ",seed=" << profile_.seed;
    if (mode == BackendMode::classify) id << ",mode=classify";
    desc_.backend_id = id.str();
  }

  const BackendDescriptor& descriptor() const override { return desc_; }
  const StochasticProfile& profile() const { return profile_; }

  SimulatedDraw draw(const ImageRequest& req) const {
    check_task(req);
    if (!req.truth)
      throw ProtocolError("simulator needs ground truth for '" +
                          req.record_id + "'");
    const std::string truth = taxonomy_.canonicalize(*req.truth);
    Rng rng = Rng::for_key(profile_.seed,
                           req.record_id + "|" + std::string(to_string(req.task)));
    const double u = rng.uniform();
    const double confidence = rng.uniform(0.5, 1.0);

    SimulatedDraw d;
    d.confidence = confidence;
    if (u < profile_.p_correct) {
      d.label = truth;
    } else if (u < profile_.p_correct + profile_.p_no_detection) {
      d.label.reset();
    } else {
      std::vector<std::string> others;
      for (const auto& l : taxonomy_.labels())
        if (l != truth) others.push_back(l);
      if (!others.empty()) d.label = others[rng.below(others.size())];
    }
    if (!d.label) d.confidence = 0.0;
    return d;
  }

  std::vector<Detection> detect(const ImageRequest& req) const override {
    auto d = draw(req);
    if (!d.label) return {};
    return {{*taxonomy_.class_id(*d.label), *d.label, d.confidence,
             BoundingBox(0.5, 0.5, 0.8, 0.6)}};
  }

  std::vector<RankedLabel> classify(const ImageRequest& req) const override {
    auto d = draw(req);
    if (!d.label) return {};
    std::vector<RankedLabel> ranking{{*d.label, d.confidence}};
    const auto& labels = taxonomy_.labels();
    const double rest =
        labels.size() > 1 ? (1.0 - d.confidence) / (labels.size() - 1) : 0.0;
    for (const auto& l : labels)
      if (l != *d.label) ranking.push_back({l, rest});
    return ranking;
  }

 private:
  StochasticProfile profile_;
  Taxonomy taxonomy_;
  BackendDescriptor desc_;
};

// ---------------------------------------------------------------------------
// Remote model server client

struct RetryPolicy {
  int max_attempts = 3;
  std::chrono::milliseconds base_delay{100};
  std::chrono::milliseconds max_delay{2000};
  double jitter = 0.20;
  std::uint64_t seed = 0;

  // Delay before retry number `retry` (0-based) of the given request.
  std::chrono::milliseconds delay(int retry, std::string_view key) const {
    double d = static_cast<double>(base_delay.count()) * std::ldexp(1.0, retry);
    Rng rng = Rng::for_key(seed, std::string(key) + "#" + std::to_string(retry));
    d *= 1.0 + jitter * (2.0 * rng.uniform() - 1.0);
    d = std::min(d, static_cast<double>(max_delay.count()));
    return std::chrono::milliseconds(static_cast<long long>(std::llround(d)));
  }
};

struct RemoteOptions {
  RetryPolicy retry;
  std::chrono::milliseconds timeout{10000};
  int top_k = 5;
};

namespace detail {

struct BaseUrl {
  std::string origin;  // scheme://host[:port]
  std::string prefix;  // path without trailing slash
};

inline BaseUrl split_base_url(const std::string& url) {
  auto scheme = url.find("://");
  if (scheme == std::string::npos)
    throw InvalidArgument("base url needs a scheme: '" + url + "'");
  auto slash = url.find('/', scheme + 3);
  BaseUrl out;
  out.origin = url.substr(0, slash);
  if (slash != std::string::npos) out.prefix = url.substr(slash);
  while (!out.prefix.empty() && out.prefix.back() == '/') out.prefix.pop_back();
  return out;
}

}  // namespace detail

// Speaks POST /v1/detect and /v1/classify. 5xx, connection failures and
// timeouts are retried; every other failure is final.
class RemoteBackend final : public DetectorBackend {
 public:
  RemoteBackend(std::string base_url, Task task, BackendMode mode,
                RemoteOptions options = {})
      : url_(detail::split_base_url(base_url)), options_(options) {
    desc_.backend_id = "remote:" + base_url;
    desc_.task = task;
    desc_.mode = mode;
    if (options_.retry.max_attempts < 1)
      throw InvalidArgument("max_attempts must be >= 1");
    if (options_.top_k < 1) throw InvalidArgument("top_k must be >= 1");
  }

  const BackendDescriptor& descriptor() const override { return desc_; }

  std::vector<Detection> detect(const ImageRequest& req) const override {
    check_task(req);
    json body = call("/v1/detect", req);
    if (!body.contains("detections") || !body["detections"].is_array())
      throw ProtocolError("response lacks a detections array");
    std::vector<Detection> out;
    for (const auto& d : body["detections"]) {
      try {
        Detection det;
        det.class_id = d.at("class_id").get<int>();
        det.class_name = d.at("class_name").get<std::string>();
        det.confidence = d.at("confidence").get<double>();
        const auto& b = d.at("bbox");
        double cx = b.at("cx").get<double>(), cy = b.at("cy").get<double>(),
               w = b.at("w").get<double>(), h = b.at("h").get<double>();
        if (auto why = BoundingBox::violation(cx, cy, w, h))
          throw ProtocolError("invalid bbox: " + *why);
        det.bbox = BoundingBox(cx, cy, w, h);
        validate(det);
        out.push_back(std::move(det));
      } catch (const json::exception& e) {
        throw ProtocolError(std::string("malformed detection: ") + e.what());
      } catch (const InvalidArgument& e) {
        throw ProtocolError(std::string("invalid detection: ") + e.what());
      }
    }
    return out;
  }

  std::vector<RankedLabel> classify(const ImageRequest& req) const override {
    check_task(req);
    json body = call("/v1/classify", req);
    if (!body.contains("ranking") || !body["ranking"].is_array())
      throw ProtocolError("response lacks a ranking array");
    std::vector<RankedLabel> out;
    for (const auto& r : body["ranking"]) {
      try {
        RankedLabel rl{r.at("class_name").get<std::string>(),
                       r.at("confidence").get<double>()};
        validate_confidence(rl.confidence);
        if (!out.empty() && rl.confidence > out.back().confidence)
          throw ProtocolError("ranking is not sorted by descending confidence");
        out.push_back(std::move(rl));
      } catch (const json::exception& e) {
        throw ProtocolError(std::string("malformed ranking entry: ") + e.what());
      } catch (const InvalidArgument& e) {
        throw ProtocolError(std::string("invalid ranking entry: ") + e.what());
      }
    }
    return out;
  }

 private:
  std::unique_ptr<httplib::Client> acquire() const {
    {
      std::lock_guard lock(pool_mutex_);
      if (!pool_.empty()) {
        auto c = std::move(pool_.back());
        pool_.pop_back();
        return c;
      }
    }
    auto c = std::make_unique<httplib::Client>(url_.origin);
    auto secs = std::chrono::duration_cast<std::chrono::seconds>(options_.timeout);
    auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(
        options_.timeout - secs);
    c->set_connection_timeout(secs.count(), usecs.count());
    c->set_read_timeout(secs.count(), usecs.count());
    c->set_write_timeout(secs.count(), usecs.count());
    c->set_keep_alive(true);
    return c;
  }

  void release(std::unique_ptr<httplib::Client> c) const {
    std::lock_guard lock(pool_mutex_);
    pool_.push_back(std::move(c));
  }

  json call(const std::string& endpoint, const ImageRequest& req) const {
    json request{{"image_id", req.record_id},
                 {"task", req.task},
                 {"image_b64", base64_encode(read_file_bytes(req.image_ref))},
                 {"top_k", options_.top_k}};
    const std::string payload = request.dump();
    const std::string path = url_.prefix + endpoint;

    std::string last_failure;
    bool last_was_timeout = false;
    for (int attempt = 0; attempt < options_.retry.max_attempts; ++attempt) {
      if (attempt > 0)
        std::this_thread::sleep_for(
            options_.retry.delay(attempt - 1, req.record_id));

      auto client = acquire();
      auto res = client->Post(path, payload, "application/json");
      if (!res) {
        auto err = res.error();
        last_was_timeout =
            err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read;
        last_failure = "transport error: " + httplib::to_string(err);
        continue;  // drop the client; it may hold a broken socket
      }
      release(std::move(client));

      const int status = res->status;
      if (status >= 500) {
        last_was_timeout = false;
        last_failure = "server returned HTTP " + std::to_string(status);
        continue;
      }
      if (status == 422)
        throw ProtocolError("server rejected task (HTTP 422): " + res->body);
      if (status != 200)
        throw ProtocolError("server returned HTTP " + std::to_string(status) +
                            ": " + res->body);

      json body;
      try {
        body = json::parse(res->body);
      } catch (const json::exception& e) {
        throw ProtocolError(std::string("response is not JSON: ") + e.what());
      }
      if (!body.is_object() || !body.contains("image_id") ||
          !body["image_id"].is_string())
        throw ProtocolError("response lacks image_id");
      if (body["image_id"].get<std::string>() != req.record_id)
        throw ProtocolError("response image_id does not match request");
      if (!body.contains("model_id") || !body["model_id"].is_string())
        throw ProtocolError("response lacks model_id");
      return body;
    }
    const std::string msg = "'" + req.record_id + "' failed after " +
                            std::to_string(options_.retry.max_attempts) +
                            " attempts: " + last_failure;
    if (last_was_timeout) throw Timeout(msg);
    throw BackendUnavailable(msg);
  }

  detail::BaseUrl url_;
  RemoteOptions options_;
  BackendDescriptor desc_;
  mutable std::mutex pool_mutex_;
  mutable std::vector<std::unique_ptr<httplib::Client>> pool_;
};

// ---------------------------------------------------------------------------
// Factory

namespace detail {

inline std::map<std::string, std::string> parse_kv_list(std::string_view s) {
  std::map<std::string, std::string> kv;
  std::size_t pos = 0;
  while (pos < s.size()) {
    auto comma = s.find(',', pos);
    auto item = s.substr(pos, comma == std::string_view::npos ? s.size() - pos
                                                              : comma - pos);
    auto eq = item.find('=');
    if (eq == std::string_view::npos)
      throw InvalidArgument("expected key=value in '" + std::string(s) + "'");
    kv[std::string(item.substr(0, eq))] = std::string(item.substr(eq + 1));
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return kv;
}

}  // namespace detail

// Builds a backend from its id:
//   mock:<fixtures.json>
//   sim:p=<p>,q=<q>,seed=<n>[,mode=detect|classify]
//   remote:<base-url>
inline std::unique_ptr<DetectorBackend> make_backend(
    const std::string& backend_id, const Taxonomy& taxonomy,
    BackendMode mode = BackendMode::detect, RemoteOptions remote = {}) {
  auto colon = backend_id.find(':');
  if (colon == std::string::npos)
    throw InvalidArgument("backend id needs a kind prefix: '" + backend_id + "'");
  const std::string kind = backend_id.substr(0, colon);
  const std::string rest = backend_id.substr(colon + 1);

  if (kind == "mock") {
    auto b = MockBackend::from_file(rest);
    if (b->descriptor().task != taxonomy.task())
      throw InvalidArgument("mock fixture task does not match taxonomy");
    return b;
  }
  if (kind == "sim") {
    auto kv = detail::parse_kv_list(rest);
    StochasticProfile profile;
    try {
      if (kv.count("p")) profile.p_correct = std::stod(kv["p"]);
      if (kv.count("q")) profile.p_no_detection = std::stod(kv["q"]);
      if (kv.count("seed")) profile.seed = std::stoull(kv["seed"]);
    } catch (const std::logic_error&) {
      throw InvalidArgument("bad simulator parameters in '" + backend_id + "'");
    }
    if (kv.count("mode")) mode = parse_backend_mode(kv["mode"]);
    for (const auto& [k, v] : kv)
      if (k != "p" && k != "q" && k != "seed" && k != "mode")
        throw InvalidArgument("unknown simulator parameter '" + k + "'");
    return std::make_unique<StochasticBackend>(profile, taxonomy, mode);
  }
  if (kind == "remote")
    return std::make_unique<RemoteBackend>(rest, taxonomy.task(), mode, remote);
  throw InvalidArgument("unknown backend kind '" + kind + "'");
}

// ---------------------------------------------------------------------------
// Batch orchestration

struct ErrorInfo {
  std::string kind;
  std::string message;

  bool operator==(const ErrorInfo&) const = default;
};

struct BatchResult {
  std::string record_id;
  std::optional<BackendOutput> output;
  std::optional<ErrorInfo> error;

  bool operator==(const BatchResult&) const = default;
};

// Runs every request on up to `parallelism` workers. A failing record carries
// its error; the batch never aborts. Output is sorted by record_id.
inline std::vector<BatchResult> run_batch(const DetectorBackend& backend,
                                          const std::vector<ImageRequest>& requests,
                                          unsigned parallelism = 1) {
  if (parallelism < 1) throw InvalidArgument("parallelism must be >= 1");
  std::vector<BatchResult> results(requests.size());
  std::atomic<std::size_t> next{0};

  auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < requests.size();
         i = next.fetch_add(1)) {
      BatchResult& r = results[i];
      r.record_id = requests[i].record_id;
      try {
        r.output = backend.infer(requests[i]);
      } catch (const Error& e) {
        r.error = ErrorInfo{e.kind(), e.what()};
      } catch (const std::exception& e) {
        r.error = ErrorInfo{"InternalError", e.what()};
      }
    }
  };

  const unsigned workers =
      static_cast<unsigned>(std::min<std::size_t>(parallelism, requests.size()));
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(worker);
  }

  std::stable_sort(results.begin(), results.end(),
                   [](const auto& a, const auto& b) { return a.record_id < b.record_id; });
  return results;
}

}  // namespace fleetlens
