#pragma once

#include "tokenar/inference.hpp"
#include "tokenar/model.hpp"
#include "tokenar/scene.hpp"
#include "tokenar/sequence.hpp"
#include "tokenar/training.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <string>
#include <vector>

namespace tokenar {

inline constexpr double kPsnrCap = 99.0;

// 10*log10(1/MSE) over [0,1] channels. The optional mask may be at pixel or
// token resolution (each mask cell then covers a block of pixels).
double psnr(const ImageGrid& a, const ImageGrid& b, const MaskGrid* mask = nullptr);

double token_accuracy(const TokenGrid& pred, const TokenGrid& truth, const MaskGrid* mask = nullptr);

// Mean over both subjects of the share of a subject's cells that carry the
// other subject's signature colors.
double identity_confusion(const TokenGrid& pred, const SceneSample& sample);

// Mean Shannon entropy (nats) of the recorded rows over one key span at a layer.
double attn_focus_entropy(const AttentionTrace& trace, int layer, const std::string& span = "prompt");

// L1 distance between the spatial profiles (over target queries) of the
// attention mass placed on instruct keys and on prompt keys; averaged over heads.
double attn_prompt_similarity(const AttentionTrace& trace, int layer);

struct EvalReport {
  double psnr_full = 0.0;
  double psnr_background = 0.0;
  double token_accuracy = 0.0;
  double identity_confusion = 0.0;
  double eval_ce = 0.0;  // teacher-forced CE over target-image tokens
  std::vector<double> focus_entropy;          // per layer, target queries over prompt keys
  std::vector<double> instruct_prompt_divergence;  // per layer; empty without instruct tokens
  int samples = 0;
};

nlohmann::json to_json(const EvalReport& r);

struct EvalOptions {
  bool capture_attention = true;
  int threads = 1;
};

// Greedy generation on every sample, then all metrics.
template <class Scalar>
EvalReport evaluate_model(const ModelParams<Scalar>& params, const std::vector<SceneSample>& samples,
                          const SequenceLayout& layout, const TokenizerSpec& tokenizer, const EvalOptions& options = {});

// Metrics for externally supplied predictions (no attention curves, no CE).
EvalReport evaluate_predictions(const std::vector<TokenGrid>& predictions, const std::vector<SceneSample>& samples,
                                const Codebook& codebook, int patch);

// Teacher-forced CE restricted to the target image tokens.
template <class Scalar>
double target_ce(const ModelParams<Scalar>& params, const std::vector<SceneSample>& samples, const SequenceLayout& layout,
                 int threads);

struct Variant {
  std::string name;
  bool itd = true;
  bool instruct = true;
  bool index_embedding = true;
};

// full, no-instruct, no-ITD, baseline.
Variant variant_by_name(const std::string& name);

struct AblationSetup {
  ModelConfig model;       // instruct_tokens / index flag are overridden per variant
  SequenceLayout layout;   // M / itd are overridden per variant
  TrainConfig train;
  TokenizerSpec tokenizer;
  std::uint64_t teacher_seed = 7;
  int threads = 1;
};

struct AblationRow {
  std::string variant;
  std::vector<std::uint64_t> seeds;
  std::vector<EvalReport> per_seed;
  EvalReport mean;
  EvalReport min;
  EvalReport max;
};

struct AblationTable {
  std::vector<AblationRow> rows;
};

AblationTable run_ablation(const std::vector<SceneSample>& train, const std::vector<SceneSample>& eval,
                           const std::vector<std::string>& variants, const std::vector<std::uint64_t>& seeds,
                           const AblationSetup& setup,
                           const std::function<void(const std::string&)>& progress = {});

nlohmann::json to_json(const AblationTable& t);
std::string to_csv(const AblationTable& t);

}  // namespace tokenar
