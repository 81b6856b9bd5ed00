// fleetlens: command-line entry point.
//
// Exit codes: 0 success, 1 runtime error, 2 usage error. Runtime errors are
// written to stderr as one JSON object {"error": kind, "message": text}.

#include <csignal>
#include <cstdio>
#include <iostream>
#include <pthread.h>

#include <CLI11.hpp>

#include "fleetlens/fleetlens.hpp"

namespace fl = fleetlens;
using fl::json;

namespace {

const std::vector<std::string> kTaskNames = {"make", "shape", "colour", "colour_binary"};

void print_json(const json& j) { std::cout << j.dump() << std::endl; }

CLI::Option* add_store(CLI::App* app, std::string& store) {
  return app->add_option("--store", store, "Store directory")
      ->envname("FLEETLENS_STORE")
      ->required();
}

CLI::Option* add_task(CLI::App* app, std::string& task) {
  return app->add_option("--task", task, "make | shape | colour | colour_binary")
      ->check(CLI::IsMember(kTaskNames))
      ->required();
}

std::filesystem::path default_split_path(const std::string& store) {
  return std::filesystem::path(store) / "split.json";
}

fl::Taxonomy resolve_taxonomy(const fl::Store& store, fl::Task task,
                              const std::string& file) {
  if (!file.empty()) return fl::load_taxonomy(file);
  return store.require_taxonomy(task);
}

std::vector<fl::ImageRecord> records_in_partition(
    std::vector<fl::ImageRecord> records, const std::string& partition,
    const std::filesystem::path& split_file) {
  if (partition.empty()) return records;
  auto part = fl::parse_partition(partition);
  auto split = fl::read_json_file(split_file).get<fl::SplitManifest>();
  std::vector<fl::ImageRecord> out;
  for (auto& r : records) {
    auto it = split.assignment.find(r.plate_id.value());
    if (it != split.assignment.end() && it->second == part) out.push_back(std::move(r));
  }
  return out;
}

void write_or_print(const std::string& out, const std::string& text) {
  if (out.empty() || out == "-")
    std::cout << text << std::flush;
  else
    fl::write_text_file(out, text);
}

// --- serve ----------------------------------------------------------------

std::pair<std::string, int> parse_addr(const std::string& addr) {
  auto colon = addr.rfind(':');
  if (colon == std::string::npos) throw fl::InvalidArgument("--addr must be host:port");
  auto port = fl::detail::parse_integer(addr.substr(colon + 1));
  if (!port || *port < 0 || *port > 65535)
    throw fl::InvalidArgument("bad port in --addr '" + addr + "'");
  return {addr.substr(0, colon), static_cast<int>(*port)};
}

int serve(const std::string& store_dir, const std::string& addr) {
  // Block termination signals before any thread starts; one thread waits for
  // them and stops the server.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  fl::Store store(store_dir);
  fl::QueryServer server(store);
  auto [host, port] = parse_addr(addr);
  int bound = server.bind(host, port);
  std::cout << "listening on http://" << host << ":" << bound << std::endl;

  std::thread waiter([&] {
    int sig = 0;
    sigwait(&set, &sig);
    server.stop();
  });
  server.listen();
  // listen() can also return on its own; wake the waiter so it can exit.
  pthread_kill(waiter.native_handle(), SIGTERM);
  waiter.join();
  return 0;
}

// --- query ----------------------------------------------------------------

httplib::Params parse_pairs(const std::vector<std::string>& pairs) {
  httplib::Params params;
  for (const auto& p : pairs) {
    auto eq = p.find('=');
    if (eq == std::string::npos)
      throw fl::InvalidArgument("search filters are key=value, got '" + p + "'");
    params.emplace(p.substr(0, eq), p.substr(eq + 1));
  }
  return params;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fleetlens: plate-grouped vehicle attribute pipeline"};
  app.set_config("--config", "", "Read options from a TOML or INI file");
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand all help");

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Load a manifest (and truth labels) into a store");
  std::string store_dir, manifest, truth_file;
  std::vector<std::string> taxonomy_files;
  add_store(ingest, store_dir);
  ingest->add_option("--manifest", manifest, "Manifest CSV")->required()->check(CLI::ExistingFile);
  ingest->add_option("--truth", truth_file, "Truth CSV (record_id,task,label)")
      ->check(CLI::ExistingFile);
  ingest->add_option("--taxonomy", taxonomy_files, "Taxonomy JSON to register (repeatable)")
      ->check(CLI::ExistingFile);

  // curate
  auto* curate = app.add_subcommand("curate", "Report conflicts, merges and frequency filtering");
  std::string task_name;
  std::string taxonomy_file, out;
  add_store(curate, store_dir);
  add_task(curate, task_name);
  curate->add_option("--taxonomy", taxonomy_file, "Taxonomy JSON (default: the store's)");
  curate->add_option("--out", out, "Report file (default: stdout)");

  // split
  auto* split = app.add_subcommand("split", "Plate-disjoint train/val/test split");
  std::uint64_t seed = 0;
  double test_fraction = 0.30, val_fraction = 0.20;
  bool allow_degenerate = false;
  add_store(split, store_dir);
  split->add_option("--seed", seed, "Shuffle seed")->required();
  split->add_option("--test", test_fraction, "Test fraction of all plates")->capture_default_str();
  split->add_option("--val", val_fraction, "Validation fraction of the remainder")->capture_default_str();
  split->add_flag("--allow-degenerate", allow_degenerate,
                  "With fewer than 3 plates put everything in train");
  split->add_option("--out", out, "Split file (default: <store>/split.json)");

  // build-dataset
  auto* build = app.add_subcommand("build-dataset", "Write a YOLO dataset for one task");
  std::string split_file;
  add_store(build, store_dir);
  add_task(build, task_name);
  build->add_option("--taxonomy", taxonomy_file, "Taxonomy JSON (default: the store's)");
  build->add_option("--split-file", split_file, "Split JSON (default: <store>/split.json)");
  build->add_option("--out", out, "Output directory")->required();

  // infer
  auto* infer = app.add_subcommand("infer", "Single-view inference over stored records");
  std::string backend_id, partition, mode_name = "detect", produced_at;
  unsigned parallel = 1;
  int timeout_ms = 10000, max_attempts = 3, top_k = 5;
  add_store(infer, store_dir);
  add_task(infer, task_name);
  infer->add_option("--backend", backend_id, "mock:<file> | sim:p=..,q=..,seed=.. | remote:<url>")
      ->required();
  infer->add_option("--taxonomy", taxonomy_file, "Taxonomy JSON (default: the store's)");
  infer->add_option("--split", partition, "Only this partition (train | val | test)")
      ->check(CLI::IsMember({"train", "val", "test"}));
  infer->add_option("--split-file", split_file, "Split JSON (default: <store>/split.json)");
  infer->add_option("--out", out, "Predictions JSONL")->required();
  infer->add_option("--parallel", parallel, "Concurrent backend calls")->capture_default_str()
      ->check(CLI::Range(1u, 256u));
  infer->add_option("--mode", mode_name, "detect | classify")->capture_default_str()
      ->check(CLI::IsMember({"detect", "classify"}));
  infer->add_option("--produced-at", produced_at, "Timestamp stamped on every row (default: now)");
  infer->add_option("--timeout-ms", timeout_ms, "Remote call timeout")->capture_default_str()
      ->check(CLI::PositiveNumber);
  infer->add_option("--max-attempts", max_attempts, "Remote attempts per image")->capture_default_str()
      ->check(CLI::Range(1, 10));
  infer->add_option("--top-k", top_k, "Remote top_k")->capture_default_str()->check(CLI::PositiveNumber);

  // aggregate
  auto* aggregate = app.add_subcommand("aggregate", "Multi-view voting per plate");
  std::string predictions_file, tallies_file;
  std::string aggregate_store;
  aggregate->add_option("--predictions", predictions_file, "Predictions JSONL")
      ->required()
      ->check(CLI::ExistingFile);
  aggregate->add_option("--out", out, "Tallies JSONL")->required();
  aggregate->add_option("--store", aggregate_store,
                        "Also publish tallies and evidence to this store");

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "SVI and MVI accuracy, or render a report grid");
  std::string rows_file, provenance;
  bool markdown = false;
  evaluate->add_option("--store", store_dir, "Store holding the truth labels")
      ->envname("FLEETLENS_STORE");
  evaluate->add_option("--task", task_name, "Task")->check(CLI::IsMember(kTaskNames));
  evaluate->add_option("--taxonomy", taxonomy_file, "Taxonomy JSON (default: the store's)");
  evaluate->add_option("--predictions", predictions_file, "Predictions JSONL")
      ->check(CLI::ExistingFile);
  evaluate->add_option("--tallies", tallies_file, "Tallies JSONL (default: vote now)")
      ->check(CLI::ExistingFile);
  evaluate->add_option("--rows", rows_file,
                       "Render a model x size grid from a JSON array of result rows")
      ->check(CLI::ExistingFile);
  evaluate->add_flag("--markdown", markdown, "With --rows, print the markdown table");
  evaluate->add_option("--out", out, "Report file (default: stdout)");

  // simulate
  auto* simulate = app.add_subcommand("simulate", "Monte Carlo MVI gain with an analytic check");
  double p = 0.8, q = 0.0;
  std::size_t labels = 2, views = 5, plates = 100000;
  simulate->add_option("--p", p, "Probability a view is correct")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  simulate->add_option("--q", q, "Probability a view detects nothing")->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));
  simulate->add_option("--labels", labels, "Number of labels")->capture_default_str()->check(CLI::PositiveNumber);
  simulate->add_option("--views", views, "Views per plate")->capture_default_str()->check(CLI::PositiveNumber);
  simulate->add_option("--plates", plates, "Simulated plates")->capture_default_str()->check(CLI::PositiveNumber);
  simulate->add_option("--seed", seed, "Simulator seed")->required();

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP query service");
  std::string addr = "127.0.0.1:8080";
  add_store(serve_cmd, store_dir);
  serve_cmd->add_option("--addr", addr, "host:port (port 0 picks one)")->capture_default_str();

  // query
  auto* query = app.add_subcommand("query", "Client for a running query service");
  std::string url = "http://127.0.0.1:8080";
  query->add_option("--url", url, "Service base URL")->capture_default_str()->envname("FLEETLENS_URL");
  query->require_subcommand(1);
  query->add_subcommand("health", "Service status");
  query->add_subcommand("taxonomies", "Configured taxonomies");
  auto* q_search = query->add_subcommand("search", "Search plates by attributes");
  std::vector<std::string> filters;
  q_search->add_option("filters", filters, "key=value filters, e.g. colour=Red limit=10")
      ->required();
  auto* q_plate = query->add_subcommand("plate", "Plate profile with evidence");
  std::string plate_id;
  q_plate->add_option("plate_id", plate_id, "Plate id")->required();
  auto* q_correct = query->add_subcommand("correct", "Submit a label correction");
  std::string label, author;
  q_correct->add_option("--plate", plate_id, "Plate id")->required();
  q_correct->add_option("--task", task_name, "Task")->check(CLI::IsMember(kTaskNames))->required();
  q_correct->add_option("--label", label, "Corrected label")->required();
  q_correct->add_option("--author", author, "Who made the correction")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  const fl::Task task = task_name.empty() ? fl::Task::make : fl::parse_task(task_name);

  try {
    if (*ingest) {
      fl::Store store(store_dir);
      for (const auto& f : taxonomy_files) store.set_taxonomy(fl::load_taxonomy(f));
      auto records = fl::load_manifest(manifest);
      std::size_t unmatched = 0;
      if (!truth_file.empty())
        unmatched = fl::apply_truth(records, fl::load_truth_csv(truth_file));
      auto changed = store.ingest_records(records);
      print_json({{"records", records.size()},
                  {"changed", changed},
                  {"unmatched_truth", unmatched},
                  {"plates", store.plate_count()}});
    } else if (*curate) {
      fl::Store store(store_dir);
      auto tax = resolve_taxonomy(store, task, taxonomy_file);
      auto records = store.records();
      // Every plate in train so only the curation filters apply.
      fl::SplitManifest all_train;
      std::size_t merged = 0;
      for (const auto& r : records) {
        all_train.assignment[r.plate_id.value()] = fl::Partition::train;
        if (auto raw = fl::raw_truth(r, tax))
          if (auto c = tax.try_canonicalize(*raw); c && *c != *raw) ++merged;
      }
      auto plan = fl::plan_task_dataset(records, tax, all_train);
      std::map<std::string, std::size_t> per_class;
      std::set<std::string> counted;
      for (const auto& e : plan.entries)
        if (counted.insert(e.plate_id.value()).second) ++per_class[e.label];
      json findings = json::array();
      for (const auto& f : plan.findings)
        findings.push_back({{"subject", f.path}, {"message", f.message}});
      json report{{"task", task},
                  {"min_plate_frequency", tax.min_plate_frequency()},
                  {"merged_records", merged},
                  {"classes", plan.classes},
                  {"plates_per_class", per_class},
                  {"plates", plan.summary.total_plates},
                  {"images", plan.summary.total_images},
                  {"conflict_plates", plan.conflict_plates},
                  {"low_frequency_plates", plan.low_frequency_plates},
                  {"findings", findings}};
      write_or_print(out, report.dump(2) + "\n");
    } else if (*split) {
      fl::Store store(store_dir);
      std::set<fl::PlateId> unique;
      for (const auto& r : store.records()) unique.insert(r.plate_id);
      auto m = fl::make_split(std::vector<fl::PlateId>(unique.begin(), unique.end()), seed, test_fraction,
                              val_fraction, {allow_degenerate});
      auto path = out.empty() ? default_split_path(store_dir) : std::filesystem::path(out);
      fl::write_json_file(path, m);
      std::map<std::string, std::size_t> sizes;
      for (auto part : fl::kAllPartitions) sizes[std::string(fl::to_string(part))] = 0;
      for (const auto& [plate, part] : m.assignment) ++sizes[std::string(fl::to_string(part))];
      print_json({{"split", path.string()}, {"plates", m.assignment.size()}, {"partitions", sizes}});
    } else if (*build) {
      fl::Store store(store_dir);
      auto tax = resolve_taxonomy(store, task, taxonomy_file);
      auto path = split_file.empty() ? default_split_path(store_dir)
                                     : std::filesystem::path(split_file);
      auto m = fl::read_json_file(path).get<fl::SplitManifest>();
      auto records = store.records();
      auto plan = fl::build_task_dataset(records, tax, m, out);
      auto leaks = fl::check_leakage(m, {plan.entries});
      if (!leaks.empty())
        throw fl::InvariantViolation("plate " + leaks.front().plate_id +
                                     " appears in more than one partition");
      json summary = plan.summary;
      summary["findings"] = plan.findings.size();
      summary["out"] = out;
      print_json(summary);
    } else if (*infer) {
      fl::Store store(store_dir);
      auto tax = resolve_taxonomy(store, task, taxonomy_file);
      fl::RemoteOptions remote;
      remote.timeout = std::chrono::milliseconds(timeout_ms);
      remote.retry.max_attempts = max_attempts;
      remote.top_k = top_k;
      auto backend = fl::make_backend(backend_id, tax, fl::parse_backend_mode(mode_name), remote);
      auto records = records_in_partition(
          store.records(), partition,
          split_file.empty() ? default_split_path(store_dir) : std::filesystem::path(split_file));
      fl::SviOptions opts;
      opts.parallelism = parallel;
      opts.produced_at = produced_at.empty() ? fl::now_utc() : fl::parse_rfc3339(produced_at);
      auto preds = fl::run_svi(*backend, records, tax, opts);
      fl::write_text_file(out, fl::to_jsonl(preds));
      std::size_t failed = 0, unknown = 0;
      for (const auto& pr : preds) {
        failed += pr.error.has_value();
        unknown += pr.no_detection();
      }
      print_json({{"predictions", preds.size()},
                  {"no_detection", unknown},
                  {"errors", failed},
                  {"backend_id", backend->descriptor().backend_id},
                  {"out", out}});
    } else if (*aggregate) {
      auto preds = fl::read_jsonl_file<fl::Prediction>(predictions_file);
      auto tallies = fl::run_mvi(preds);
      fl::write_text_file(out, fl::to_jsonl(tallies));
      json result{{"tallies", tallies.size()}, {"predictions", preds.size()}, {"out", out}};
      if (!aggregate_store.empty()) {
        fl::Store store(aggregate_store);
        auto report = store.upsert_results(tallies, preds);
        result["applied"] = report.applied;
        result["unchanged"] = report.unchanged;
        for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
      }
      print_json(result);
    } else if (*evaluate) {
      if (!rows_file.empty()) {
        if (!evaluate->count("--task"))
          throw fl::InvalidArgument("--rows needs --task");
        auto rows = fl::read_json_file(rows_file).get<std::vector<fl::ReportRow>>();
        auto rendered = fl::render_report(task, rows, {{"rows_file", rows_file}});
        write_or_print(out, markdown ? rendered.markdown : rendered.document.dump(2) + "\n");
      } else {
        if (store_dir.empty() || predictions_file.empty() || !evaluate->count("--task"))
          throw fl::InvalidArgument("evaluate needs --store, --task and --predictions");
        fl::Store store(store_dir);
        auto tax = resolve_taxonomy(store, task, taxonomy_file);
        auto preds = fl::read_jsonl_file<fl::Prediction>(predictions_file);
        for (const auto& pr : preds)
          if (pr.task != task)
            throw fl::MixedGroup("prediction '" + pr.record_id + "' is for another task");
        auto tallies = tallies_file.empty() ? fl::run_mvi(preds)
                                            : fl::read_jsonl_file<fl::VoteTally>(tallies_file);
        auto truth = fl::truth_from_records(store.records(), tax);
        auto report = fl::evaluate(preds, tallies, truth, task, tax.labels());
        write_or_print(out, json(report).dump(2) + "\n");
      }
    } else if (*simulate) {
      auto r = fl::simulate_mvi_gain({p, q, seed}, labels, views, plates);
      print_json({{"svi", r.svi_estimate},
                  {"mvi", r.mvi_estimate},
                  {"analytic_svi", r.analytic_svi},
                  {"analytic_mvi", r.analytic_mvi ? json(*r.analytic_mvi) : json(nullptr)},
                  {"plates", r.plates},
                  {"views", r.views}});
    } else if (*serve_cmd) {
      return serve(store_dir, addr);
    } else if (*query) {
      fl::QueryClient client(url);
      if (query->got_subcommand("health"))
        print_json(client.health());
      else if (query->got_subcommand("taxonomies"))
        print_json(client.taxonomies());
      else if (*q_search)
        print_json(client.search(parse_pairs(filters)));
      else if (*q_plate)
        print_json(client.plate(plate_id));
      else if (*q_correct)
        print_json(client.correct(plate_id, task, label, author));
    }
  } catch (const fl::Error& e) {
    std::cerr << json{{"error", e.kind()}, {"message", e.what()}}.dump() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "InternalError"}, {"message", e.what()}}.dump() << std::endl;
    return 1;
  }
  return 0;
}
