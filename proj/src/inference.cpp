#include "tokenar/inference.hpp"

#include "tokenar/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace tokenar {

void GenerateConfig::validate() const {
  if (mode == DecodeMode::sample) require(temperature > 0.0, "GenerateConfig: temperature must be > 0 when sampling");
  require(top_k >= 0, "GenerateConfig: top_k must be non-negative");
}

TraceSpec target_trace_spec(const SequenceLayout& layout) {
  TraceSpec spec;
  spec.query_begin = layout.context_length() + layout.target_offset();
  spec.query_end = layout.total_length();
  spec.keys.push_back({"prompt", layout.prompt_begin(), layout.prompt_begin() + layout.prompt_len});
  if (layout.M > 0) spec.keys.push_back({"instruct", 0, layout.M});
  return spec;
}

TokenGrid extract_target(const std::vector<int>& span, const SequenceLayout& layout, int cols) {
  require(static_cast<int>(span.size()) == layout.predicted_length(),
          "extract_target: span has " + std::to_string(span.size()) + " tokens, layout predicts " +
              std::to_string(layout.predicted_length()));
  require(cols > 0 && layout.n % cols == 0, "extract_target: n is not divisible by the grid width");
  TokenGrid grid(layout.n / cols, cols);
  std::copy(span.end() - layout.n, span.end(), grid.data.begin());
  return grid;
}

namespace {

template <class Scalar>
int pick_token(const RowVec<Scalar>& logits, int image_tokens, const GenerateConfig& g, std::mt19937_64& rng) {
  // Only image ids are admissible at image positions.
  Eigen::RowVectorXd z = logits.head(image_tokens).template cast<double>();
  if (g.mode == DecodeMode::greedy) {
    Eigen::Index arg = 0;
    z.maxCoeff(&arg);
    return static_cast<int>(arg);
  }
  std::vector<int> ids(static_cast<std::size_t>(image_tokens));
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return z[a] > z[b]; });
  if (g.top_k > 0 && g.top_k < image_tokens) ids.resize(static_cast<std::size_t>(g.top_k));
  const double mx = z[ids.front()];
  std::vector<double> w;
  double sum = 0.0;
  for (int id : ids) {
    w.push_back(std::exp((z[id] - mx) / g.temperature));
    sum += w.back();
  }
  const double u = std::uniform_real_distribution<double>(0.0, sum)(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    acc += w[i];
    if (u < acc) return ids[i];
  }
  return ids.back();
}

}  // namespace

template <class Scalar>
GenerateResult generate(const ModelParams<Scalar>& params, const SceneSample& sample, const SequenceLayout& layout,
                        const GenerateConfig& gcfg) {
  gcfg.validate();
  layout.validate();
  const ModelConfig& cfg = params.config;
  require(layout.total_length() <= cfg.max_seq_len,
          "generate: layout needs " + std::to_string(layout.total_length()) + " positions, model allows " +
              std::to_string(cfg.max_seq_len));
  require(layout.M == cfg.instruct_tokens, "generate: layout instruct count differs from the checkpoint");

  const SequenceBundle bundle = build_sequence_from_tokens(sample, layout);
  const int C = bundle.context_length();
  const int S = bundle.predicted_length();

  TokenStream stream;
  stream.ids = bundle.context_ids;
  stream.index_ids.assign(bundle.index_ids.begin(), bundle.index_ids.begin() + C);
  stream.positions.assign(bundle.position_ids.begin(), bundle.position_ids.begin() + C);
  stream.instruct_count = bundle.instruct_count;

  std::mt19937_64 rng(gcfg.seed);
  GenerateResult out;
  out.span.reserve(static_cast<std::size_t>(S));

  if (gcfg.use_cache) {
    DecodeCache<Scalar> cache = prefill(params, stream);
    RowVec<Scalar> logits = cache.last_logits;
    for (int j = 0; j < S; ++j) {
      if (j > 0) {
        const auto p = static_cast<std::size_t>(C + j - 1);
        logits = decode_step(params, cache, out.span.back(), bundle.index_ids[p], bundle.position_ids[p]);
      }
      out.span.push_back(pick_token(logits, cfg.image_tokens, gcfg, rng));
    }
  } else {
    for (int j = 0; j < S; ++j) {
      if (j > 0) {
        const auto p = static_cast<std::size_t>(C + j - 1);
        stream.ids.push_back(out.span.back());
        stream.index_ids.push_back(bundle.index_ids[p]);
        stream.positions.push_back(bundle.position_ids[p]);
      }
      const Mat<Scalar> all = forward_stream(params, stream);
      const RowVec<Scalar> last = all.row(all.rows() - 1);
      out.span.push_back(pick_token(last, cfg.image_tokens, gcfg, rng));
    }
  }

  out.target = extract_target(out.span, layout, sample.target_tokens.cols > 0 ? sample.target_tokens.cols : layout.n);

  if (gcfg.capture_trace) {
    TokenStream full;
    for (int p = 0; p < C + S; ++p) full.ids.push_back(p < C ? bundle.context_ids[static_cast<std::size_t>(p)]
                                                              : out.span[static_cast<std::size_t>(p - C)]);
    full.index_ids = bundle.index_ids;
    full.positions = bundle.position_ids;
    full.instruct_count = bundle.instruct_count;
    const TraceSpec spec = target_trace_spec(layout);
    AttentionTrace trace;
    forward_stream(params, full, &spec, &trace);
    out.trace = std::move(trace);
  }
  return out;
}

template GenerateResult generate<float>(const ModelParams<float>&, const SceneSample&, const SequenceLayout&,
                                        const GenerateConfig&);
template GenerateResult generate<double>(const ModelParams<double>&, const SceneSample&, const SequenceLayout&,
                                         const GenerateConfig&);

}  // namespace tokenar
