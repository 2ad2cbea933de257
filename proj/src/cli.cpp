#include "cotrr/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "cotrr/backend_layers.hpp"
#include "cotrr/harness.hpp"
#include "cotrr/mock_backend.hpp"

namespace cotrr {

namespace {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string number_text(double v) { return nlohmann::json(v).dump(); }

std::string env_or_empty(const char* name) {
  const char* v = std::getenv(name);
  return v == nullptr ? std::string() : std::string(v);
}

void add_run_options(CLI::App& cmd, RunConfig& c) {
  cmd.add_option("--profile", c.profile, "Task preset: flickr30k, mscoco, cirr, circo or visdial")
      ->capture_default_str();
  cmd.add_option("--manifest", c.manifest, "Canonical JSON-lines manifest");
  cmd.add_option("--image-store", c.image_store, "Corpus embedding file (CTRREMB1)");
  cmd.add_option("--query-store", c.query_store, "Query embedding file keyed by query_id (or query_id#round)");
  cmd.add_option("--image-root", c.image_root, "Directory that image references are relative to")
      ->capture_default_str();
  cmd.add_option("--image-pattern", c.image_pattern, "File name pattern for an image id, e.g. {id}.jpg")
      ->capture_default_str();
  cmd.add_option("--backend", c.backend, "'endpoint' or mock:<oracle|scripted|noisy|truncating|malformed>:<seed>")
      ->capture_default_str();
  cmd.add_option("--base-url", c.base_url, "Chat-completions base URL")->envname("COTRR_BASE_URL");
  cmd.add_option("--model", c.model, "Model identifier sent with every request")->capture_default_str();
  cmd.add_option("--temperature", c.temperature, "Sampling temperature")->capture_default_str();
  cmd.add_option("--k-rerank", c.k_rerank, "Candidates re-ranked per query (0: profile default)")
      ->check(CLI::NonNegativeNumber);
  cmd.add_option("--k-subset", c.k_subset, "Subset candidates re-ranked (0: profile default)")
      ->check(CLI::NonNegativeNumber);
  cmd.add_option("--depth", c.depth, "Initial ranking depth from the store (0: max(k-rerank, 50))")
      ->check(CLI::NonNegativeNumber);
  cmd.add_option("--metrics", c.metrics, "Metric list such as R@1,R@5,mAP@5 (empty: profile default)");
  cmd.add_option("--mode", c.mode, "Stages: R, R+D, R+E or R+D+E")->capture_default_str();
  cmd.add_option("--parallelism", c.parallelism, "Maximum requests in flight")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd.add_option("--cache-dir", c.cache_dir, "Response cache directory")->envname("COTRR_CACHE_DIR");
  cmd.add_option("--output-dir", c.output_dir, "Run directory to write")->capture_default_str();
  cmd.add_option("--failure-threshold", c.failure_threshold, "Abort when more than this fraction of records fail")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  cmd.add_flag("--attach-thumbnails", c.attach_thumbnails, "Send small candidate thumbnails with the ranking call");
  cmd.add_option("--prompt-dir", c.prompt_dir, "Directory of prompt templates (default: built-in)");
  cmd.add_option("--backbone", c.backbone, "Label of the embedding export, echoed into the report");
  cmd.add_option("--mock-script", c.mock_script, "JSON-lines replies for mock:scripted ({\"text\":..} or {\"status\":..})");
}

TaskProfile effective_profile(const RunConfig& c) {
  TaskProfile p;
  try {
    p = profile_by_name(c.profile);
    if (c.k_rerank > 0) p.k_rerank = static_cast<std::size_t>(c.k_rerank);
    if (c.k_subset > 0) p.k_subset = static_cast<std::size_t>(c.k_subset);
    if (c.depth > 0) p.depth = static_cast<std::size_t>(c.depth);
    if (!c.metrics.empty()) p.metrics = parse_metric_list(c.metrics);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  p.backbone = c.backbone;
  return p;
}

std::vector<ScriptStep> load_script(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open mock script " + path);
  std::vector<ScriptStep> steps;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw ConfigError("bad mock script line: " + line);
    steps.push_back({j.value("text", std::string()), j.value("status", 0)});
  }
  return steps;
}

struct BuiltBackend {
  BackendPtr handle;
};

BackendPtr build_backend(const RunConfig& c, const std::vector<ManifestRecord>& records, const ImageResolver& images,
                         const PipelineOptions& pipeline) {
  BackendPtr base;
  if (c.backend.rfind("mock:", 0) == 0) {
    const std::string rest = c.backend.substr(5);
    const auto colon = rest.find(':');
    const auto kind = parse_mock_kind(rest.substr(0, colon));
    if (!kind) throw ConfigError("unknown mock kind in '" + c.backend + "'");
    std::uint64_t seed = 0;
    if (colon != std::string::npos) {
      try {
        seed = std::stoull(rest.substr(colon + 1));
      } catch (const std::exception&) {
        throw ConfigError("mock seed must be a non-negative integer in '" + c.backend + "'");
      }
    }
    MockOptions options;
    if (*kind == MockKind::scripted) {
      if (c.mock_script.empty()) throw ConfigError("mock:scripted needs --mock-script");
      options.script = load_script(c.mock_script);
    }
    std::shared_ptr<const OracleKnowledge> knowledge;
    if (*kind != MockKind::scripted && *kind != MockKind::malformed) {
      knowledge = oracle_knowledge_from(records, images, pipeline.encoding);
    }
    base = make_mock_backend(*kind, seed, knowledge, std::move(options));
  } else if (c.backend == "endpoint") {
    EndpointConfig endpoint;
    endpoint.api_key = env_or_empty("COTRR_API_KEY");
    endpoint.base_url = c.base_url;
    if (endpoint.api_key.empty()) throw ConfigError("COTRR_API_KEY is not set");
    if (endpoint.base_url.empty()) throw ConfigError("no endpoint base URL (--base-url or COTRR_BASE_URL)");
    base = std::make_shared<HttpChatBackend>(endpoint, std::shared_ptr<HttpTransport>(make_http_transport(endpoint)));
  } else {
    throw ConfigError("--backend must be 'endpoint' or mock:<kind>:<seed>, got '" + c.backend + "'");
  }
  BackendPtr layered = std::make_shared<RetryingBackend>(base);
  if (!c.cache_dir.empty()) {
    layered = std::make_shared<CachingBackend>(layered, std::make_shared<ResponseCache>(c.cache_dir));
  }
  return std::make_shared<BoundedBackend>(layered, c.parallelism);
}

std::unique_ptr<EmbeddingStore> maybe_load_store(const std::string& path) {
  if (path.empty()) return nullptr;
  try {
    return std::make_unique<EmbeddingStore>(load_store(path));
  } catch (const StoreError& e) {
    throw ValidationError(e.what());
  }
}

std::vector<ManifestRecord> load_records(const std::string& path, const EmbeddingStore* corpus, std::ostream& err) {
  if (path.empty()) throw ConfigError("--manifest is required");
  auto result = read_manifest(std::filesystem::path(path), corpus);
  if (!result.issues.empty()) {
    for (const auto& issue : result.issues) err << path << ":" << issue.line << ": " << issue.message << "\n";
    throw ValidationError(std::to_string(result.issues.size()) + " manifest issue(s)");
  }
  return std::move(result.records);
}

int cmd_run(const RunConfig& c, std::ostream& out, std::ostream& err) {
  const auto mode = parse_mode(c.mode);
  if (!mode) throw ConfigError("--mode must be one of R, R+D, R+E, R+D+E");
  const TaskProfile profile = effective_profile(c);

  PipelineOptions pipeline;
  pipeline.model = c.model;
  pipeline.temperature = c.temperature;
  pipeline.parallelism = c.parallelism;
  pipeline.attach_thumbnails = c.attach_thumbnails;
  std::optional<PromptSet> custom_prompts;
  if (!c.prompt_dir.empty()) {
    try {
      custom_prompts = PromptSet::load(c.prompt_dir);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
    pipeline.prompts = &*custom_prompts;
  }

  // Credentials are checked before anything touches the network or the data.
  if (c.backend == "endpoint") {
    if (env_or_empty("COTRR_API_KEY").empty()) throw ConfigError("COTRR_API_KEY is not set");
    if (c.base_url.empty()) throw ConfigError("no endpoint base URL (--base-url or COTRR_BASE_URL)");
  }

  const auto corpus = maybe_load_store(c.image_store);
  const auto queries = maybe_load_store(c.query_store);
  std::vector<ManifestRecord> records = load_records(c.manifest, corpus.get(), err);
  for (const auto& r : records) {
    if (r.task != profile.task) {
      err << c.manifest << ":" << r.line << ": task '" << to_string(r.task) << "' does not match profile '"
          << profile.name << "'\n";
      throw ValidationError("manifest task does not match profile");
    }
  }

  const ImageResolver images(c.image_root, c.image_pattern);
  const BackendPtr backend = build_backend(c, records, images, pipeline);

  RunInputs in;
  in.records = std::move(records);
  in.profile = profile;
  in.corpus = corpus.get();
  in.query_embeddings = queries.get();
  in.images = images;
  in.backend = backend.get();
  in.mode = *mode;
  in.pipeline = pipeline;
  in.parallelism = c.parallelism;
  in.failure_threshold = c.failure_threshold;
  in.config_echo = c.to_echo();

  const RunResult result = run(in);
  write_run(result, c.output_dir);

  out << "mode " << to_string(*mode) << ", profile " << profile.name << ": " << in.records.size() << " queries, "
      << result.failed << " failed\n";
  for (auto it = result.report["aggregates"].begin(); it != result.report["aggregates"].end(); ++it) {
    if (it.key().find("@round") != std::string::npos) continue;
    out << "  " << it.key() << " = " << it.value().dump() << "\n";
  }
  out << "wrote " << c.output_dir << "\n";
  if (result.aborted) {
    err << "run aborted: " << result.failed << " of " << in.records.size() << " records failed\n";
    return kExitAborted;
  }
  return kExitOk;
}

int cmd_retrieve(const RunConfig& c, const std::string& output, std::ostream& out, std::ostream& err) {
  if (c.image_store.empty() || c.query_store.empty()) {
    throw ConfigError("retrieve needs --image-store and --query-store");
  }
  const TaskProfile profile = effective_profile(c);
  const auto corpus = maybe_load_store(c.image_store);
  const auto queries = maybe_load_store(c.query_store);
  if (corpus->dim() != queries->dim()) {
    throw ValidationError("query store dim " + std::to_string(queries->dim()) + " != image store dim " +
                          std::to_string(corpus->dim()));
  }
  const auto records = load_records(c.manifest, corpus.get(), err);

  std::string lines;
  auto emit = [&](const std::string& qid, const std::string& key, std::optional<std::size_t> round) {
    const auto list = corpus->top_k(queries->row(queries->index_of(key)), profile.effective_depth());
    nlohmann::json ids = nlohmann::json::array();
    nlohmann::json scores = nlohmann::json::array();
    for (const auto& cand : list) {
      ids.push_back(cand.id);
      scores.push_back(cand.score);
    }
    nlohmann::json j = {{"query_id", qid}, {"ids", ids}, {"scores", scores}};
    if (round) j["round"] = *round;
    lines += j.dump() + "\n";
  };
  std::size_t missing = 0;
  for (const auto& r : records) {
    if (r.task == Task::chat) {
      bool any = false;
      for (std::size_t t = 0; t <= r.dialogue.size(); ++t) {
        const std::string key = r.query_id + "#" + std::to_string(t);
        if (queries->contains(key)) {
          emit(r.query_id, key, t);
          any = true;
        }
      }
      if (any) continue;
    }
    if (!queries->contains(r.query_id)) {
      err << c.manifest << ":" << r.line << ": no query embedding for '" << r.query_id << "'\n";
      ++missing;
      continue;
    }
    emit(r.query_id, r.query_id, std::nullopt);
  }
  if (missing > 0) throw ValidationError(std::to_string(missing) + " queries have no embedding");

  if (output.empty() || output == "-") {
    out << lines;
  } else {
    std::ofstream f(output, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + output);
    f << lines;
    out << "wrote " << records.size() << " rankings to " << output << "\n";
  }
  return kExitOk;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& csv_out, std::ostream& out,
               std::ostream& err) {
  if (dirs.empty()) throw ConfigError("report needs at least one run directory");
  struct Column {
    std::string label;
    nlohmann::json aggregates;
    std::string chart;
  };
  std::vector<Column> columns;
  std::set<std::string> keys;
  for (const auto& dir : dirs) {
    std::ifstream in(std::filesystem::path(dir) / "report.json");
    if (!in) throw ValidationError("no report.json in " + dir);
    const auto report = nlohmann::json::parse(in, nullptr, false);
    if (report.is_discarded() || !report.contains("aggregates")) throw ValidationError("invalid report in " + dir);
    Column col;
    col.label = std::filesystem::path(dir).filename().string();
    if (col.label.empty()) col.label = dir;
    col.label += " (" + report.value("mode", std::string("?")) + ")";
    col.aggregates = report["aggregates"];
    std::ifstream chart(std::filesystem::path(dir) / "chart.csv");
    col.chart.assign(std::istreambuf_iterator<char>(chart), std::istreambuf_iterator<char>());
    for (auto it = col.aggregates.begin(); it != col.aggregates.end(); ++it) keys.insert(it.key());
    columns.push_back(std::move(col));
  }
  for (const auto& col : columns) {
    std::vector<std::string> missing;
    for (const auto& k : keys) {
      if (!col.aggregates.contains(k)) missing.push_back(k);
    }
    if (!missing.empty()) {
      err << "incompatible metric sets: " << col.label << " lacks " << missing.size() << " metric(s), e.g. "
          << missing.front() << "\n";
    }
  }

  std::size_t key_width = 6;
  for (const auto& k : keys) key_width = std::max(key_width, k.size());
  std::vector<std::size_t> widths;
  for (const auto& col : columns) {
    std::size_t w = col.label.size();
    for (const auto& k : keys) {
      if (col.aggregates.contains(k)) w = std::max(w, col.aggregates[k].dump().size());
    }
    widths.push_back(w);
  }
  out << std::left << std::setw(static_cast<int>(key_width)) << "metric";
  for (std::size_t i = 0; i < columns.size(); ++i) {
    out << "  " << std::right << std::setw(static_cast<int>(widths[i])) << columns[i].label;
  }
  out << "\n";
  for (const auto& k : keys) {
    out << std::left << std::setw(static_cast<int>(key_width)) << k;
    for (std::size_t i = 0; i < columns.size(); ++i) {
      const std::string v = columns[i].aggregates.contains(k) ? columns[i].aggregates[k].dump() : "-";
      out << "  " << std::right << std::setw(static_cast<int>(widths[i])) << v;
    }
    out << "\n";
  }

  if (!csv_out.empty()) {
    std::ofstream csv(csv_out, std::ios::binary | std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write " + csv_out);
    csv << "run,round,variant,k,value\n";
    for (const auto& col : columns) {
      std::istringstream lines(col.chart);
      std::string line;
      std::getline(lines, line);  // header
      while (std::getline(lines, line)) {
        if (!line.empty()) csv << col.label << "," << line << "\n";
      }
    }
  }
  return kExitOk;
}

int cmd_validate(const std::string& manifest, const std::string& image_store, const std::string& profile_name,
                 std::ostream& out, std::ostream& err) {
  const auto corpus = maybe_load_store(image_store);
  if (manifest.empty()) throw ConfigError("--manifest is required");
  auto result = read_manifest(std::filesystem::path(manifest), corpus.get());
  if (!profile_name.empty()) {
    TaskProfile p;
    try {
      p = profile_by_name(profile_name);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    for (const auto& r : result.records) {
      if (r.task != p.task) result.issues.push_back({r.line, "task does not match profile '" + p.name + "'"});
    }
  }
  for (const auto& issue : result.issues) err << manifest << ":" << issue.line << ": " << issue.message << "\n";
  if (!result.issues.empty()) return kExitValidation;
  out << "ok: " << result.records.size() << " records\n";
  return kExitOk;
}

// Arguments that reproduce the echoed configuration of an earlier report.
std::vector<std::string> replay_args(const std::string& report_path) {
  std::ifstream in(report_path);
  if (!in) throw ConfigError("cannot open " + report_path);
  const auto report = nlohmann::json::parse(in, nullptr, false);
  if (report.is_discarded() || !report.contains("config") || !report["config"].is_object()) {
    throw ConfigError(report_path + " has no config echo");
  }
  std::vector<std::string> args;
  for (auto it = report["config"].begin(); it != report["config"].end(); ++it) {
    if (!it.value().is_string()) throw ConfigError("config echo values must be strings");
    if (it.value().get_ref<const std::string&>().empty()) continue;  // empty echo means the default
    std::string flag = it.key();
    std::replace(flag.begin(), flag.end(), '_', '-');
    if (flag == "attach-thumbnails") {
      if (it.value() == "true") args.push_back("--attach-thumbnails");
      continue;
    }
    args.push_back("--" + flag + "=" + it.value().get<std::string>());
  }
  return args;
}

}  // namespace

nlohmann::json RunConfig::to_echo() const {
  return {{"profile", profile},
          {"manifest", manifest},
          {"image_store", image_store},
          {"query_store", query_store},
          {"image_root", image_root},
          {"image_pattern", image_pattern},
          {"backend", backend},
          {"base_url", base_url},
          {"model", model},
          {"temperature", number_text(temperature)},
          {"k_rerank", std::to_string(k_rerank)},
          {"k_subset", std::to_string(k_subset)},
          {"depth", std::to_string(depth)},
          {"metrics", metrics},
          {"mode", mode},
          {"parallelism", std::to_string(parallelism)},
          {"cache_dir", cache_dir},
          {"output_dir", output_dir},
          {"failure_threshold", number_text(failure_threshold)},
          {"attach_thumbnails", attach_thumbnails ? "true" : "false"},
          {"prompt_dir", prompt_dir},
          {"backbone", backbone},
          {"mock_script", mock_script}};
}

int run_cli(const std::vector<std::string>& input_args, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args = input_args;
  // `run --replay report.json [overrides...]` expands to the echoed flags followed by the overrides.
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--replay" || args[i].rfind("--replay=", 0) == 0) {
      std::string path;
      std::size_t erase = 1;
      if (args[i] == "--replay") {
        if (i + 1 >= args.size()) {
          err << "--replay needs a report path\n";
          return kExitConfig;
        }
        path = args[i + 1];
        erase = 2;
      } else {
        path = args[i].substr(9);
      }
      std::vector<std::string> replay;
      try {
        replay = replay_args(path);
      } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
      }
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + erase));
      args.insert(args.begin() + static_cast<std::ptrdiff_t>(i), replay.begin(), replay.end());
      break;
    }
  }

  CLI::App app{"Chain-of-thought re-ranking for image retrieval with multimodal LLMs", "cotrr"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.set_config("--config", "", "Read options from a key = value config file (sections per subcommand)");
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  RunConfig run_cfg;
  auto* run_cmd = app.add_subcommand("run", "Retrieve, re-rank and score every manifest record");
  add_run_options(*run_cmd, run_cfg);
  run_cmd->fallthrough();
  std::string replay_path;  // expanded before parsing; declared here for --help
  run_cmd->add_option("--replay", replay_path, "Re-launch the configuration echoed in an earlier report.json");

  RunConfig retrieve_cfg;
  std::string retrieve_output;
  auto* retrieve_cmd = app.add_subcommand("retrieve", "Write initial top-N rankings from embedding stores");
  retrieve_cmd->add_option("--manifest", retrieve_cfg.manifest, "Canonical JSON-lines manifest")->required();
  retrieve_cmd->add_option("--image-store", retrieve_cfg.image_store, "Corpus embedding file")->required();
  retrieve_cmd->add_option("--query-store", retrieve_cfg.query_store, "Query embedding file")->required();
  retrieve_cmd->add_option("--profile", retrieve_cfg.profile, "Task preset used for the default depth")
      ->capture_default_str();
  retrieve_cmd->add_option("--k-rerank", retrieve_cfg.k_rerank, "Re-rank depth the candidates must cover")
      ->check(CLI::NonNegativeNumber);
  retrieve_cmd->add_option("--depth", retrieve_cfg.depth, "Ranking depth (0: max(k-rerank, 50))")
      ->check(CLI::NonNegativeNumber);
  retrieve_cmd->add_option("--output", retrieve_output, "Output JSON-lines file ('-' for stdout)");

  std::vector<std::string> report_dirs;
  std::string report_csv;
  auto* report_cmd = app.add_subcommand("report", "Compare aggregates across run directories");
  report_cmd->add_option("runs", report_dirs, "Run directories")->required();
  report_cmd->add_option("--csv-out", report_csv, "Write the merged round,variant,k,value chart CSV here");

  std::string validate_manifest, validate_store, validate_profile;
  auto* validate_cmd = app.add_subcommand("validate-manifest", "Check a manifest against its schema and corpus");
  validate_cmd->add_option("--manifest", validate_manifest, "Canonical JSON-lines manifest")->required();
  validate_cmd->add_option("--image-store", validate_store, "Corpus embedding file to check ids against");
  validate_cmd->add_option("--profile", validate_profile, "Also require records to match this profile's task");

  std::vector<std::string> argv_strings;
  argv_strings.emplace_back("cotrr");
  argv_strings.insert(argv_strings.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& s : argv_strings) argv.push_back(s.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    // Top-level help lists every subcommand's flags too.
    out << (app.get_subcommands().empty() ? app.help("", CLI::AppFormatMode::All) : app.help());
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (*run_cmd) return cmd_run(run_cfg, out, err);
    if (*retrieve_cmd) return cmd_retrieve(retrieve_cfg, retrieve_output, out, err);
    if (*report_cmd) return cmd_report(report_dirs, report_csv, out, err);
    if (*validate_cmd) return cmd_validate(validate_manifest, validate_store, validate_profile, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ValidationError& e) {
    err << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ManifestError& e) {
    err << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitConfig;
}

}  // namespace cotrr
