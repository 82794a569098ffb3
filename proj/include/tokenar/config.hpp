#pragma once

#include "tokenar/eval.hpp"
#include "tokenar/inference.hpp"
#include "tokenar/model.hpp"
#include "tokenar/scene.hpp"
#include "tokenar/sequence.hpp"
#include "tokenar/training.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace tokenar {

struct TokenizerConfig {
  int K = 64;
  int patch = 4;
  std::uint64_t codebook_seed = 0;
};

struct DatagenConfig {
  int count = 1000;  // candidates drawn; the filter decides how many are kept
  double delta = 0.8;
  std::uint64_t seed = 1;
  int grid = 8;
};

struct AblationConfig {
  std::vector<std::string> variants{"full", "no-instruct", "no-ITD", "baseline"};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  int train_count = 400;  // first records of the dataset
  int eval_count = 100;   // following records, held out
};

struct PathsConfig {
  std::string dataset;
  std::string out = "out";
  std::string checkpoint;
};

// One document drives every command. Layout.n is derived from the grid.
struct RunConfig {
  TokenizerConfig tokenizer;
  SequenceLayout layout;
  ModelConfig model;
  TrainConfig training;
  DatagenConfig datagen;
  GenerateConfig generate;
  AblationConfig ablation;
  PathsConfig paths;
  int threads = 1;

  // Throws ConfigError on the first violated invariant.
  void validate() const;
  // Model config with the derived fields (vocab size, n, M, sequence length) filled in.
  ModelConfig resolved_model() const;
  SequenceLayout resolved_layout() const;
  SceneGeometry geometry() const;
};

// Missing keys keep defaults; unknown keys raise ConfigError naming the path.
RunConfig config_from_json(const nlohmann::json& doc);
nlohmann::json config_to_json(const RunConfig& cfg);
RunConfig load_config(const std::filesystem::path& path);

// "section.key=value" override; value parsed as JSON, falling back to a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

}  // namespace tokenar
