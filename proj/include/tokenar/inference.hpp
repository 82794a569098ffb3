#pragma once

#include "tokenar/model.hpp"
#include "tokenar/scene.hpp"
#include "tokenar/sequence.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace tokenar {

enum class DecodeMode { greedy, sample };

struct GenerateConfig {
  DecodeMode mode = DecodeMode::greedy;
  double temperature = 1.0;
  int top_k = 0;  // 0 keeps the full image vocabulary
  std::uint64_t seed = 0;
  bool use_cache = true;       // false recomputes the whole prefix every step
  bool capture_trace = false;  // record target-vs-prompt/instruct attention

  void validate() const;
};

struct GenerateResult {
  TokenGrid target;
  std::vector<int> span;  // every decoded token, in order
  std::optional<AttentionTrace> trace;
};

// Query span = target image tokens; key spans "prompt" and, when present, "instruct".
TraceSpec target_trace_spec(const SequenceLayout& layout);

template <class Scalar>
GenerateResult generate(const ModelParams<Scalar>& params, const SceneSample& sample, const SequenceLayout& layout,
                        const GenerateConfig& gcfg);

// Last n tokens of a decoded span as a grid with `cols` columns.
TokenGrid extract_target(const std::vector<int>& span, const SequenceLayout& layout, int cols);

}  // namespace tokenar
