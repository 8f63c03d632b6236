#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"

#include "fvae/facedata.hpp"
#include "fvae/model.hpp"
#include "fvae/train.hpp"

namespace fvae {

using Json = nlohmann::json;

// Strict JSON mapping: missing keys keep their defaults, unknown keys throw
// std::invalid_argument naming the key path.
Json to_json(const ModelConfig& c);
Json to_json(const TrainConfig& c);
Json to_json(const SynthConfig& c);
void from_json(const Json& j, ModelConfig& c, const std::string& path = "model");
void from_json(const Json& j, TrainConfig& c, const std::string& path = "train");
void from_json(const Json& j, SynthConfig& c, const std::string& path = "data");

struct DataConfig {
  SynthConfig synth;
  std::uint64_t split_seed = 7;
  double train_fraction = 0.8;

  bool operator==(const DataConfig&) const = default;
};

// Everything one CLI invocation reads: model, training and dataset settings
// plus paths.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  std::string dataset_dir = "data";
  std::string run_dir = "runs/latest";

  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

Json to_json(const RunConfig& c);
RunConfig run_config_from_json(const Json& j);

// Applies "key=value" style overrides: key is a dotted path ("train.max_steps")
// or a leaf name that is unique across the document ("max_steps"); dashes
// read as underscores. The value is parsed as JSON, falling back to a string.
void apply_override(Json& doc, const std::string& key, const std::string& value);

RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const std::filesystem::path& path, const RunConfig& config);

}  // namespace fvae
