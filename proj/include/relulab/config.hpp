#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "relulab/json_io.hpp"
#include "relulab/tasks.hpp"
#include "relulab/train.hpp"

namespace relulab {

void to_json(Json& j, const TaskSpec& spec);
void from_json(const Json& j, TaskSpec& spec);
void to_json(Json& j, const TrainOptions& opts);
void from_json(const Json& j, TrainOptions& opts);

/// One training run: `model`, `task`, and `train` sections, each optional.
struct RunConfig {
    ModelConfig model;
    TaskSpec task;
    TrainOptions train;

    /// Sets the model, task, and training seeds to `seed`.
    void override_seed(std::uint64_t seed);
};

void to_json(Json& j, const RunConfig& cfg);
void from_json(const Json& j, RunConfig& cfg);

/// Parses a YAML document (JSON is valid YAML) into a JSON value.
Json parse_yaml(const std::string& text);
Json load_config_file(const std::filesystem::path& path);

/// Hex SHA-256 of the compact JSON dump (keys sorted).
std::string config_hash(const Json& config);

/// Writes manifest.json: config hash, seed, artifact version, RNG algorithm, and the config.
void write_manifest(const std::filesystem::path& dir, const Json& config, std::uint64_t seed,
                    const std::string& command);

/// Artifact version string.
std::string artifact_version();

}  // namespace relulab
