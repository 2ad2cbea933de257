#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace cotrr {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitValidation = 3,
  kExitAborted = 4,
};

/// Effective configuration of a `run`. Every field maps to a `run` flag of the same name
/// (underscores become hyphens) and to a `key = value` entry under `[run]` in a config file.
struct RunConfig {
  std::string profile = "flickr30k";
  std::string manifest;
  std::string image_store;
  std::string query_store;
  std::string image_root = ".";
  std::string image_pattern = "{id}";
  std::string backend = "endpoint";  // endpoint | mock:<kind>:<seed>
  std::string base_url;
  std::string model = "gemini-2.5-pro";
  double temperature = 0.0;
  int k_rerank = 0;  // 0: profile default
  int k_subset = 0;  // 0: profile default
  int depth = 0;     // 0: max(k_rerank, 50)
  std::string metrics;  // empty: profile default
  std::string mode = "R+D+E";
  int parallelism = 8;
  std::string cache_dir;
  std::string output_dir = "run";
  double failure_threshold = 0.10;
  bool attach_thumbnails = false;
  std::string prompt_dir;  // empty: built-in templates
  std::string backbone;
  std::string mock_script;

  /// Key/value echo written into the report; contains no secrets.
  nlohmann::json to_echo() const;
};

/// Entry point shared by the `cotrr` binary and the tests.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cotrr
