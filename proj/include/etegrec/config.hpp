#pragma once

// Run configuration: nested JSON with key paths. Precedence is command-line
// overrides, then the config file, then built-in defaults.

#include "etegrec/io.hpp"
#include "etegrec/pipeline.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace etegrec::config {

using io::json;

struct DataConfig {
  std::string name = "dataset";
  std::string interactions;
  std::string embeddings;  // empty: derive by SVD
  int k_core = 5;
  int max_len = 50;
  int svd_window = 5;
  bool l2_normalize = false;
};

struct RunConfig {
  DataConfig data;
  pipeline::ExperimentConfig experiment;
  std::string variant = "full";
  std::uint64_t seed = 1;
  std::string output_dir = "runs/default";
};

json to_json(const RunConfig& c);
RunConfig from_json(const json& j);
// preset: "default" (full-size model) or "synthetic" (desk-scale model).
RunConfig defaults(const std::string& preset = "default");

// Sets `path` (dot separated) to `value`; the value is parsed as JSON when
// possible, otherwise stored as a string. Unknown paths are rejected.
void apply_override(json& j, const std::string& path, const std::string& value);

// defaults <- file (deep merge) <- overrides
RunConfig resolve(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides,
                  const std::string& preset = "default");

// Output paths honour ETEGREC_OUTPUT_ROOT for relative directories.
std::filesystem::path output_root();
std::filesystem::path resolve_output(const std::string& dir);

void echo(const RunConfig& c, const std::filesystem::path& dir, const std::string& command);
std::uint64_t config_hash(const RunConfig& c);

}  // namespace etegrec::config
