#pragma once

#include "tokenar/config.hpp"
#include "tokenar/dataset.hpp"
#include "tokenar/eval.hpp"
#include "tokenar/inference.hpp"
#include "tokenar/training.hpp"

#include <array>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace tokenar {

// Bad invocation (missing inputs, conflicting flags). Maps to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GenDataStats {
  int generated = 0;
  int kept = 0;
  double pass_rate = 0.0;
  std::array<int, kNumRelations> relation_histogram{};
};

GenDataStats cmd_gen_data(const RunConfig& cfg, const std::filesystem::path& out_dir);

struct TrainSummary {
  std::vector<StepLog> log;
  DatasetScore final_score;
  std::filesystem::path checkpoint;
};

// Writes <out>/model.tkar, <out>/metrics.csv, <out>/config.json and
// interval checkpoints under <out>/checkpoints.
TrainSummary cmd_train(const RunConfig& cfg, const std::filesystem::path& dataset, const std::filesystem::path& out_dir,
                       std::ostream* progress = nullptr);

// Writes <out>/sample_<i>.ppm and <out>/sample_<i>_span.json.
GenerateResult cmd_generate(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                            const std::filesystem::path& dataset, int index, const std::filesystem::path& out_dir);

enum class EvalSource { model, oracle, predictions };

// Writes <out>/eval.json and <out>/eval.csv. `predictions` holds
// <id>_target.ppm images (same naming as the dataset) when source == predictions.
EvalReport cmd_eval(const RunConfig& cfg, EvalSource source, const std::filesystem::path& checkpoint,
                    const std::filesystem::path& dataset, const std::filesystem::path& predictions,
                    const std::filesystem::path& out_dir);

// Writes <out>/ablation.json and <out>/ablation.csv.
AblationTable cmd_ablate(const RunConfig& cfg, const std::filesystem::path& dataset, const std::filesystem::path& out_dir,
                         std::ostream* progress = nullptr);

struct LayerSummary {
  int layer = 0;
  double focus_entropy = 0.0;
  double instruct_prompt_divergence = 0.0;  // NaN without instruct tokens
};

// Writes <out>/attention_trace.csv (layer,head,span,query,key,weight) for
// the first sample of `indices` and <out>/attention_summary.csv with the
// per-layer curves averaged over all of them.
std::vector<LayerSummary> cmd_inspect_attn(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                                           const std::filesystem::path& dataset, const std::vector<int>& indices,
                                           const std::filesystem::path& out_dir);

// Full command-line entry point; returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tokenar
