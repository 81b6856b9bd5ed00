#include <gtest/gtest.h>

#include <fstream>
#include <mutex>

#include "fleetlens/backend.hpp"
#include "support.hpp"

namespace fleetlens {
namespace {

using testing::colour_taxonomy;
using testing::make_taxonomy;
using testing::TempDir;

ImageRequest req(const std::string& id, std::optional<std::string> truth = "Ford",
                 Task task = Task::make) {
  return {id, "/nonexistent/" + id + ".jpg", task, std::move(truth)};
}

TEST(MockBackendTest, ReturnsFixtureRowsAndEmptyForUnknownIds) {
  json fx = {{"task", "make"},
             {"mode", "detect"},
             {"detections",
              {{"r1", json::array({{{"class_id", 1},
                                    {"class_name", "Ford"},
                                    {"confidence", 0.7},
                                    {"bbox",
                                     {{"cx", 0.5}, {"cy", 0.5}, {"w", 0.2}, {"h", 0.2}}}}})}}}};
  MockBackend b("mock:fx", fx);
  auto out = b.infer(req("r1"));
  ASSERT_EQ(out.detections.size(), 1u);
  EXPECT_EQ(out.detections[0].class_name, "Ford");
  EXPECT_TRUE(b.infer(req("r2")).detections.empty());
  EXPECT_THROW(b.infer(req("r1", "Red", Task::colour)), InvalidArgument);
}

TEST(StochasticBackendTest, DrawsAreDeterministicPerRecord) {
  StochasticBackend a({0.5, 0.2, 9}, make_taxonomy());
  StochasticBackend b({0.5, 0.2, 9}, make_taxonomy());
  StochasticBackend c({0.5, 0.2, 10}, make_taxonomy());
  int differ = 0;
  for (int i = 0; i < 200; ++i) {
    auto r = req("r" + std::to_string(i));
    EXPECT_EQ(a.detect(r), b.detect(r));
    differ += a.detect(r) != c.detect(r);
  }
  EXPECT_GT(differ, 0);
  EXPECT_EQ(a.descriptor().backend_id, "sim:p=0.5,q=0.2,seed=9");
}

TEST(StochasticBackendTest, OutcomeFrequenciesMatchProfile) {
  auto tax = make_taxonomy();
  StochasticBackend b({0.6, 0.15, 1}, tax);
  const int n = 40000;
  int correct = 0, none = 0;
  std::map<std::string, int> wrong;
  for (int i = 0; i < n; ++i) {
    auto d = b.draw(req("r" + std::to_string(i)));
    if (!d.label) {
      ++none;
      EXPECT_EQ(d.confidence, 0.0);
    } else {
      EXPECT_GE(d.confidence, 0.5);
      EXPECT_LT(d.confidence, 1.0);
      if (*d.label == "Ford")
        ++correct;
      else
        ++wrong[*d.label];
    }
  }
  // 4 sigma bands.
  EXPECT_NEAR(correct / double(n), 0.6, 4 * std::sqrt(0.24 / n));
  EXPECT_NEAR(none / double(n), 0.15, 4 * std::sqrt(0.1275 / n));
  EXPECT_EQ(wrong.size(), 6u);
  for (const auto& [l, k] : wrong) EXPECT_NEAR(k / double(n), 0.25 / 6, 0.006) << l;
}

TEST(StochasticBackendTest, ClassifyRankingSumsToOne) {
  StochasticBackend b({0.9, 0.0, 2}, colour_taxonomy(), BackendMode::classify);
  auto r = b.classify(req("x", "Maroon", Task::colour));
  ASSERT_EQ(r.size(), 9u);
  double sum = 0;
  for (const auto& x : r) sum += x.confidence;
  EXPECT_NEAR(sum, 1.0, 1e-12);
  for (std::size_t i = 1; i < r.size(); ++i) EXPECT_LE(r[i].confidence, r[0].confidence);
  EXPECT_THROW(b.classify(req("x", std::nullopt, Task::colour)), ProtocolError);
}

TEST(StochasticBackendTest, RejectsBadProfiles) {
  EXPECT_THROW(StochasticBackend({1.2, 0, 0}, make_taxonomy()), InvalidArgument);
  EXPECT_THROW(StochasticBackend({0.7, 0.4, 0}, make_taxonomy()), InvalidArgument);
}

TEST(FactoryTest, ParsesBackendIds) {
  auto tax = make_taxonomy();
  auto sim = make_backend("sim:p=0.7,q=0.1,seed=3", tax);
  EXPECT_EQ(sim->descriptor().backend_id, "sim:p=0.7,q=0.1,seed=3");
  EXPECT_EQ(make_backend("sim:p=0.7,mode=classify", tax)->descriptor().mode,
            BackendMode::classify);
  EXPECT_EQ(make_backend("remote:http://127.0.0.1:9/api", tax)->descriptor().backend_id,
            "remote:http://127.0.0.1:9/api");
  EXPECT_THROW(make_backend("sim:p=x", tax), InvalidArgument);
  EXPECT_THROW(make_backend("sim:z=1", tax), InvalidArgument);
  EXPECT_THROW(make_backend("bogus:1", tax), InvalidArgument);
  EXPECT_THROW(make_backend("nocolon", tax), InvalidArgument);
  EXPECT_THROW(make_backend("remote:127.0.0.1", tax), InvalidArgument);

  TempDir dir;
  std::ofstream(dir / "fx.json") << R"({"task":"colour"})";
  EXPECT_THROW(make_backend("mock:" + (dir / "fx.json").string(), tax), InvalidArgument);
  EXPECT_NO_THROW(make_backend("mock:" + (dir / "fx.json").string(), colour_taxonomy()));
}

TEST(RetryPolicyTest, DelaysGrowAndStayWithinJitterAndCap) {
  RetryPolicy p;
  for (int retry = 0; retry < 6; ++retry) {
    double nominal = std::min(100.0 * std::pow(2.0, retry), 2000.0);
    auto d = p.delay(retry, "rec").count();
    EXPECT_GE(d, std::min(nominal * 0.8, 2000.0) - 1) << retry;
    EXPECT_LE(d, 2000) << retry;
    EXPECT_LE(d, nominal * 1.2 + 1) << retry;
    EXPECT_EQ(d, p.delay(retry, "rec").count());
  }
}

// --- remote protocol against a scripted server ----------------------------

class FakeModelServer {
 public:
  FakeModelServer() {
    server_.Post(R"(/api/v1/(detect|classify))",
                 [this](const httplib::Request& rq, httplib::Response& rs) {
                   handle(rq, rs);
                 });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeModelServer() {
    server_.stop();
    thread_.join();
  }

  std::string base_url() const {
    return "http://127.0.0.1:" + std::to_string(port_) + "/api";
  }
  int calls(const std::string& id) {
    std::lock_guard lock(mu_);
    return calls_[id];
  }
  json last_request() {
    std::lock_guard lock(mu_);
    return last_;
  }

 private:
  void handle(const httplib::Request& rq, httplib::Response& rs) {
    json body = json::parse(rq.body);
    std::string id = body.at("image_id");
    int n;
    {
      std::lock_guard lock(mu_);
      n = ++calls_[id];
      last_ = body;
    }
    bool classify = rq.path.find("classify") != std::string::npos;
    json det = {{"class_id", 1},
                {"class_name", "Ford"},
                {"confidence", 0.8},
                {"bbox", {{"cx", 0.5}, {"cy", 0.5}, {"w", 0.3}, {"h", 0.3}}}};
    json ok = {{"image_id", id}, {"model_id", "fake-v1"}};
    if (classify)
      ok["ranking"] = {{{"class_name", "Ford"}, {"confidence", 0.8}},
                       {{"class_name", "BMW"}, {"confidence", 0.2}}};
    else
      ok["detections"] = json::array({det});

    auto send = [&](int status, const json& j) {
      rs.status = status;
      rs.set_content(j.dump(), "application/json");
    };
    if (id == "flaky" && n == 1) return send(503, {{"error", "warming up"}});
    if (id == "flaky2" && n <= 2) return send(503, {{"error", "warming up"}});
    if (id == "down") return send(503, {{"error", "down"}});
    if (id == "bad-request") return send(400, {{"error", "bad"}});
    if (id == "wrong-task") return send(422, {{"error", "task"}});
    if (id == "slow") std::this_thread::sleep_for(std::chrono::milliseconds(600));
    if (id == "bad-confidence") {
      ok["detections"][0]["confidence"] = 1.5;
      ok["ranking"] = json::array({{{"class_name", "Ford"}, {"confidence", 1.5}}});
    }
    if (id == "bad-bbox") ok["detections"][0]["bbox"]["w"] = 0.0;
    if (id == "unsorted")
      ok["ranking"] = {{{"class_name", "BMW"}, {"confidence", 0.2}},
                       {{"class_name", "Ford"}, {"confidence", 0.8}}};
    if (id == "mismatch") ok["image_id"] = "other";
    if (id == "no-model") ok.erase("model_id");
    if (id == "not-json") {
      rs.status = 200;
      rs.set_content("<html>", "text/html");
      return;
    }
    send(200, ok);
  }

  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::mutex mu_;
  std::map<std::string, int> calls_;
  json last_;
};

class RemoteBackendTest : public ::testing::Test {
 protected:
  void SetUp() override { std::ofstream(dir / "img.jpg") << "JPEGDATA"; }

  ImageRequest request(const std::string& id) {
    return {id, (dir / "img.jpg").string(), Task::make, std::nullopt};
  }
  RemoteBackend backend(BackendMode mode = BackendMode::detect) {
    RemoteOptions o;
    o.retry.base_delay = std::chrono::milliseconds(1);
    o.retry.max_delay = std::chrono::milliseconds(5);
    o.timeout = std::chrono::milliseconds(250);
    o.top_k = 3;
    return RemoteBackend(server.base_url(), Task::make, mode, o);
  }

  TempDir dir;
  FakeModelServer server;
};

TEST_F(RemoteBackendTest, SendsWireRequestAndParsesDetections) {
  auto out = backend().detect(request("ok"));
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].class_name, "Ford");
  EXPECT_DOUBLE_EQ(out[0].bbox.w(), 0.3);
  auto sent = server.last_request();
  EXPECT_EQ(sent["task"], "make");
  EXPECT_EQ(sent["top_k"], 3);
  EXPECT_EQ(sent["image_b64"], base64_encode("JPEGDATA"));
  EXPECT_EQ(server.calls("ok"), 1);
}

TEST_F(RemoteBackendTest, ParsesRankings) {
  auto out = backend(BackendMode::classify).classify(request("ok"));
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[1].label, "BMW");
  EXPECT_THROW(backend(BackendMode::classify).classify(request("unsorted")),
               ProtocolError);
}

TEST_F(RemoteBackendTest, RetriesServerErrors) {
  EXPECT_EQ(backend().detect(request("flaky")).size(), 1u);
  EXPECT_EQ(server.calls("flaky"), 2);
  EXPECT_EQ(backend().detect(request("flaky2")).size(), 1u);
  EXPECT_EQ(server.calls("flaky2"), 3);
  EXPECT_THROW(backend().detect(request("down")), BackendUnavailable);
  EXPECT_EQ(server.calls("down"), 3);
}

TEST_F(RemoteBackendTest, ClientErrorsAreNotRetried) {
  EXPECT_THROW(backend().detect(request("bad-request")), ProtocolError);
  EXPECT_EQ(server.calls("bad-request"), 1);
  EXPECT_THROW(backend().detect(request("wrong-task")), ProtocolError);
  EXPECT_EQ(server.calls("wrong-task"), 1);
}

TEST_F(RemoteBackendTest, MalformedResponsesAreProtocolErrors) {
  for (const char* id : {"bad-confidence", "bad-bbox", "mismatch", "no-model", "not-json"}) {
    EXPECT_THROW(backend().detect(request(id)), ProtocolError) << id;
    EXPECT_EQ(server.calls(id), 1) << id;
  }
}

TEST_F(RemoteBackendTest, SlowServerTimesOut) {
  EXPECT_THROW(backend().detect(request("slow")), Timeout);
  EXPECT_EQ(server.calls("slow"), 3);
}

TEST_F(RemoteBackendTest, UnreachableServerIsUnavailable) {
  RemoteOptions o;
  o.retry.base_delay = std::chrono::milliseconds(1);
  o.timeout = std::chrono::milliseconds(200);
  httplib::Server probe;
  int port = probe.bind_to_any_port("127.0.0.1");
  probe.stop();
  RemoteBackend b("http://127.0.0.1:" + std::to_string(port), Task::make,
                  BackendMode::detect, o);
  try {
    b.detect(request("ok"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_TRUE(e.retriable()) << e.kind();
  }
}

TEST_F(RemoteBackendTest, BatchCarriesPerRecordErrors) {
  auto b = backend();
  std::vector<ImageRequest> rs{request("ok"), request("bad-request"), request("flaky")};
  auto out = run_batch(b, rs, 3);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[0].record_id, "bad-request");
  EXPECT_EQ(out[0].error->kind, "ProtocolError");
  EXPECT_TRUE(out[1].output);
  EXPECT_TRUE(out[2].output);
}

TEST(RunBatchTest, ParallelEqualsSequential) {
  auto tax = make_taxonomy();
  StochasticBackend b({0.5, 0.2, 4}, tax);
  std::vector<ImageRequest> rs;
  for (int i = 0; i < 500; ++i) rs.push_back(req("r" + std::to_string(i)));
  rs.push_back(req("no-truth", std::nullopt));
  auto one = run_batch(b, rs, 1);
  auto eight = run_batch(b, rs, 8);
  EXPECT_EQ(one, eight);
  EXPECT_EQ(one[0].record_id, "no-truth");
  EXPECT_EQ(one[0].error->kind, "ProtocolError");
  EXPECT_THROW(run_batch(b, rs, 0), InvalidArgument);
}

}  // namespace
}  // namespace fleetlens
