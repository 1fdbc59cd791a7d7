#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cimp/data.hpp"
#include "cimp/engine.hpp"

namespace cimp {

/// Where the images come from: a CSV manifest, or the procedural generator.
struct DataSource {
  std::optional<std::filesystem::path> manifest;
  DeskSpec desk;
  SplitSpec split;
  ImageFormat format = ImageFormat::Png;
};

struct ExperimentConfig {
  std::string profile = "paper-supp-t2";
  DataSource data;
  ScheduleSpec schedule;
  EngineConfig engine;
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path out = "runs/default";
  bool write_impressions = true;
  bool write_step_metrics = true;

  nlohmann::json to_json() const;
  /// Fully explicit TOML that parse_config reads back into an equal config.
  /// Written next to every run so the run can be repeated from it alone.
  std::string to_toml() const;
};

/// Command-line overrides, applied after the file is read so that a profile
/// named on the command line still yields to per-key settings in the file.
struct ConfigOverrides {
  std::optional<std::string> profile;
  std::optional<Strategy> strategy;
  std::optional<Ablation> ablation;
  std::optional<std::vector<std::uint64_t>> seeds;
  std::optional<std::filesystem::path> out;
};

/// Parses TOML text. Unknown keys and schema violations raise a Config error
/// whose message starts with the dotted field path. Relative manifest paths
/// resolve against `base_dir`.
ExperimentConfig parse_config(std::string_view toml_text, const ConfigOverrides& overrides = {},
                              const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path, const ConfigOverrides& overrides = {});
/// Defaults plus overrides, for runs without a config file.
ExperimentConfig default_config(const ConfigOverrides& overrides = {});

/// Comma-separated unsigned integers, e.g. "1,2,3".
std::vector<std::uint64_t> parse_seed_list(std::string_view text);

/// Builds the manifest the config points at (loading or generating it).
DatasetManifest materialize_data(const DataSource& source);

/// Engine config of one seed, with the architecture geometry taken from the data.
EngineConfig engine_for(const ExperimentConfig& cfg, const DatasetManifest& data, std::uint64_t seed);

}  // namespace cimp
