#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <thread>
#include <utility>

#include <httplib.h>

#include "fleetlens/errors.hpp"
#include "fleetlens/ingestion.hpp"
#include "fleetlens/serialize.hpp"
#include "fleetlens/store.hpp"

namespace fleetlens {

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    auto comma = s.find(',', pos);
    auto item = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (!item.empty()) out.push_back(item);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

inline double query_double(const std::string& name, const std::string& v) {
  auto d = parse_double(v);
  if (!d) throw InvalidQuery(name + " must be a number");
  return *d;
}

inline std::size_t query_size(const std::string& name, const std::string& v) {
  auto n = parse_integer(v);
  if (!n || *n < 0) throw InvalidQuery(name + " must be a non-negative integer");
  return static_cast<std::size_t>(*n);
}

inline bool query_bool(const std::string& name, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw InvalidQuery(name + " must be true or false");
}

}  // namespace detail

// Builds a Query from URL parameters. Label filters accept comma-separated
// lists and may repeat; empty values are ignored.
inline Query parse_search_params(const std::multimap<std::string, std::string>& params) {
  Query q;
  for (const auto& [key, value] : params) {
    if (value.empty()) continue;
    if (auto task = try_parse_task(key)) {
      for (auto& l : detail::split_list(value)) q.labels[*task].insert(l);
    } else if (key == "from" || key == "to") {
      auto t = try_parse_rfc3339(value);
      if (!t) throw InvalidQuery(key + " must be an RFC 3339 timestamp");
      (key == "from" ? q.from : q.to) = *t;
    } else if (key == "lat_min") {
      q.lat_min = detail::query_double(key, value);
    } else if (key == "lat_max") {
      q.lat_max = detail::query_double(key, value);
    } else if (key == "lon_min") {
      q.lon_min = detail::query_double(key, value);
    } else if (key == "lon_max") {
      q.lon_max = detail::query_double(key, value);
    } else if (key == "include_unknown") {
      q.include_unknown = detail::query_bool(key, value);
    } else if (key == "offset") {
      q.offset = detail::query_size(key, value);
    } else if (key == "limit") {
      q.limit = detail::query_size(key, value);
    } else {
      throw InvalidQuery("unknown parameter '" + key + "'");
    }
  }
  return q;
}

inline int http_status_for(const Error& e) {
  const auto& k = e.kind();
  if (k == "NotFound") return 404;
  if (k == "UnknownLabel") return 422;
  if (k == "InvalidQuery" || k == "InvalidArgument" || k == "ParseError") return 400;
  return 500;
}

// HTTP front end over a Store:
//   GET  /v1/health
//   GET  /v1/search
//   GET  /v1/plates/{plate_id}
//   POST /v1/corrections
//   GET  /v1/taxonomies
class QueryServer {
 public:
  using Clock = std::function<Timestamp()>;

  explicit QueryServer(Store& store, Clock clock = now_utc)
      : store_(store), clock_(std::move(clock)) {
    routes();
  }

  ~QueryServer() { stop(); }

  QueryServer(const QueryServer&) = delete;
  QueryServer& operator=(const QueryServer&) = delete;

  // Binds; port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port) {
    int bound = port == 0 ? server_.bind_to_any_port(host)
                          : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0)
      throw IoError("cannot bind " + host + ":" + std::to_string(port));
    return bound;
  }

  // Blocks until stop().
  void listen() { server_.listen_after_bind(); }

  void start_background() {
    thread_ = std::thread([this] { listen(); });
    server_.wait_until_ready();
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

 private:
  static void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  template <typename F>
  static void guarded(httplib::Response& res, F&& f) {
    try {
      f();
    } catch (const Error& e) {
      send_json(res, http_status_for(e), {{"error", e.kind()}, {"message", e.what()}});
    } catch (const json::exception& e) {
      send_json(res, 400, {{"error", "BadRequest"}, {"message", e.what()}});
    } catch (const std::exception& e) {
      send_json(res, 500, {{"error", "InternalError"}, {"message", e.what()}});
    }
  }

  void routes() {
    server_.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, [&] {
        send_json(res, 200, {{"status", "ok"}, {"plates", store_.plate_count()}});
      });
    });

    server_.Get("/v1/search", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        std::multimap<std::string, std::string> params(req.params.begin(),
                                                       req.params.end());
        auto page = store_.search(parse_search_params(params));
        send_json(res, 200, {{"total", page.total}, {"items", page.items}});
      });
    });

    server_.Get(R"(/v1/plates/([^/]+))",
                [this](const httplib::Request& req, httplib::Response& res) {
                  guarded(res, [&] {
                    send_json(res, 200, store_.get_plate(req.matches[1].str()));
                  });
                });

    server_.Post("/v1/corrections", [this](const httplib::Request& req,
                                           httplib::Response& res) {
      guarded(res, [&] {
        json body = json::parse(req.body);
        auto task = try_parse_task(body.at("task").get<std::string>());
        if (!task) throw InvalidArgument("unknown task");
        send_json(res, 200,
                  store_.submit_correction(body.at("plate_id").get<std::string>(), *task,
                                           body.at("label").get<std::string>(),
                                           body.at("author").get<std::string>(),
                                           clock_()));
      });
    });

    server_.Get("/v1/taxonomies", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, [&] {
        json out = json::object();
        for (const auto& [task, tax] : store_.taxonomies())
          out[std::string(to_string(task))] = tax;
        send_json(res, 200, out);
      });
    });
  }

  Store& store_;
  Clock clock_;
  httplib::Server server_;
  std::thread thread_;
};

// Thin client over the query API. Non-2xx responses are rethrown as the
// matching library error.
class QueryClient {
 public:
  explicit QueryClient(const std::string& base_url) : client_(base_url) {
    client_.set_connection_timeout(5, 0);
    client_.set_read_timeout(30, 0);
  }

  json health() { return get("/v1/health"); }

  json search(const httplib::Params& params) {
    return get(httplib::append_query_params("/v1/search", params));
  }

  json plate(const std::string& plate_id) {
    return get("/v1/plates/" + httplib::detail::encode_url(plate_id));
  }

  json taxonomies() { return get("/v1/taxonomies"); }

  json correct(const std::string& plate_id, Task task, const std::string& label,
               const std::string& author) {
    json body{{"plate_id", plate_id}, {"task", task}, {"label", label}, {"author", author}};
    auto res = client_.Post("/v1/corrections", body.dump(), "application/json");
    return unwrap(res);
  }

 private:
  json get(const std::string& path) { return unwrap(client_.Get(path)); }

  static json unwrap(const httplib::Result& res) {
    if (!res) throw BackendUnavailable("query service unreachable: " +
                                       httplib::to_string(res.error()));
    json body;
    try {
      body = json::parse(res->body);
    } catch (const json::exception&) {
      throw ProtocolError("non-JSON response (HTTP " + std::to_string(res->status) + ")");
    }
    if (res->status == 200) return body;
    std::string msg = body.value("message", res->body);
    switch (res->status) {
      case 404:
        throw NotFound(msg);
      case 422:
        throw UnknownLabel(msg);
      case 400:
        throw InvalidQuery(msg);
      default:
        throw ProtocolError("HTTP " + std::to_string(res->status) + ": " + msg);
    }
  }

  httplib::Client client_;
};

}  // namespace fleetlens
