#pragma once

#include "okd/data.hpp"
#include "okd/model.hpp"
#include "okd/train.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace okd {

enum class ModelPreset { Desk, Full };

/// Where the train/test scenes come from: directories written by gen-data, or
/// generated in memory when a directory is left empty.
struct DataSource {
  std::filesystem::path train_dir;
  std::filesystem::path test_dir;
  SceneParams synthetic;
  Index train_scenes = 200;
  Index test_scenes = 50;
  std::uint64_t test_seed_offset = 1000003;
};

/// Everything a run needs; round-trips through JSON.
struct RunConfig {
  ModelPreset preset = ModelPreset::Desk;
  InitScheme init = InitScheme::He;
  Scalar init_std = 0.01;
  DataSource data;
  TrainConfig train;
  std::filesystem::path out_dir = "run";
};

/// Missing keys keep their defaults; unknown keys and bad values throw ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& cfg);
RunConfig load_run_config(const std::filesystem::path& path);

ModelConfig model_config(const RunConfig& cfg);

struct Datasets {
  Dataset train;
  Dataset test;
};
Datasets load_datasets(const DataSource& source);

/// One row of an ablation grid.
struct AblationRow {
  std::string name;
  DistillConfig distill;
};
/// Rows for "modules" (8), "fid" (4), "frd" (3) or "rd" (3), built on `base`.
std::vector<AblationRow> ablation_rows(const std::string& suite, const DistillConfig& base);

/// 8-bit binary P5 heatmap, min-max normalised; a constant map is all zeros.
void write_pgm(const std::filesystem::path& path, std::span<const Scalar> values, Index height, Index width);

/// Entry point of the `okd` tool. Returns the process exit code: 0 success,
/// 1 runtime or I/O failure, 2 usage error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace okd
