#pragma once

#include "tokenar/sequence.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace tokenar {

template <class Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

struct ModelConfig {
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int vocab_size = Vocabulary{}.size();
  int image_tokens = 64;  // K; ids below this are image tokens
  int max_seq_len = 1024;
  int instruct_tokens = 30;
  int index_table_size = kIndexTableSize;
  int distill_dim = 16;
  int float_width = 32;
  bool use_index_embedding = true;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;
  double embed_std = 0.02;

  void validate() const;
  int head_dim() const { return d_model / n_heads; }
  int mlp_dim() const { return 4 * d_model; }
  bool operator==(const ModelConfig&) const = default;
};

template <class Scalar>
struct LayerParams {
  Mat<Scalar> attn_norm;  // 1 x d
  Mat<Scalar> wq, wk, wv, wo;
  Mat<Scalar> mlp_norm;  // 1 x d
  Mat<Scalar> w1, b1;    // d x 4d, 1 x 4d
  Mat<Scalar> w2, b2;    // 4d x d, 1 x d
};

template <class Scalar>
struct ModelParams {
  ModelConfig config;
  Mat<Scalar> tok_emb;      // V x d
  Mat<Scalar> index_table;  // index_table_size x d
  Mat<Scalar> instruct;     // M x d
  std::vector<LayerParams<Scalar>> layers;
  Mat<Scalar> final_norm;    // 1 x d
  Mat<Scalar> head;          // d x V
  Mat<Scalar> distill_proj;  // d x distill_dim

  // Calls f(name, tensor) for every learnable tensor in a fixed order.
  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  static ModelParams zeros(const ModelConfig& cfg);

  template <class Other>
  ModelParams<Other> cast() const {
    ModelParams<Other> out = ModelParams<Other>::zeros(config);
    std::vector<const Mat<Scalar>*> src;
    visit([&](const std::string&, const Mat<Scalar>& t) { src.push_back(&t); });
    std::size_t i = 0;
    out.visit([&](const std::string&, Mat<Other>& t) { t = src[i++]->template cast<Other>(); });
    return out;
  }

  Eigen::Index parameter_count() const {
    Eigen::Index n = 0;
    visit([&](const std::string&, const Mat<Scalar>& t) { n += t.size(); });
    return n;
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    f("tok_emb", self.tok_emb);
    f("index_table", self.index_table);
    f("instruct", self.instruct);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& L = self.layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      f(p + "attn_norm", L.attn_norm);
      f(p + "wq", L.wq);
      f(p + "wk", L.wk);
      f(p + "wv", L.wv);
      f(p + "wo", L.wo);
      f(p + "mlp_norm", L.mlp_norm);
      f(p + "w1", L.w1);
      f(p + "b1", L.b1);
      f(p + "w2", L.w2);
      f(p + "b2", L.b2);
    }
    f("final_norm", self.final_norm);
    f("head", self.head);
    f("distill_proj", self.distill_proj);
  }
};

template <class Scalar>
ModelParams<Scalar> init_params(const ModelConfig& cfg, std::uint64_t seed);

// Flat view of one model input sequence.
struct TokenStream {
  std::vector<int> ids;
  std::vector<int> index_ids;
  std::vector<int> positions;
  int instruct_count = 0;  // leading positions fed from the instruct rows

  int length() const { return static_cast<int>(ids.size()); }
};

// The teacher-forced input for a bundle: context plus all but the last target.
TokenStream teacher_forced_stream(const SequenceBundle& bundle);

// Which attention rows to record: one query span against named key spans.
struct TraceSpec {
  struct KeySpan {
    std::string name;
    int begin = 0;
    int end = 0;
  };
  int query_begin = 0;
  int query_end = 0;
  std::vector<KeySpan> keys;
};

// Attention rows restricted to each key span and renormalized over it.
struct AttentionTrace {
  TraceSpec spec;
  int n_layers = 0;
  int n_heads = 0;
  // rows[(layer * n_heads + head) * spans + span] is (queries x span keys).
  std::vector<Eigen::MatrixXd> rows;
  // Unrestricted probability mass each query puts on the span, same indexing.
  std::vector<Eigen::VectorXd> mass;

  int span_index(const std::string& name) const;
  const Eigen::MatrixXd& at(int layer, int head, int span) const {
    return rows[static_cast<std::size_t>((layer * n_heads + head) * static_cast<int>(spec.keys.size()) + span)];
  }
};

template <class Scalar>
struct ForwardOutput {
  Mat<Scalar> logits;    // one row per predicted position
  Mat<Scalar> features;  // final hidden state at the same rows
  std::optional<AttentionTrace> trace;
};

template <class Scalar>
ForwardOutput<Scalar> forward(const ModelParams<Scalar>& params, const SequenceBundle& bundle,
                              const TraceSpec* trace = nullptr);

// Logits for every position of an arbitrary stream.
template <class Scalar>
Mat<Scalar> forward_stream(const ModelParams<Scalar>& params, const TokenStream& stream,
                           const TraceSpec* trace = nullptr, AttentionTrace* trace_out = nullptr);

struct LossBreakdown {
  double ce = 0.0;
  double distill = 0.0;
  double total = 0.0;
  int masked = 0;
  int correct = 0;  // argmax hits over masked positions
};

// ce_scale and distill_scale let a batch weight its samples; the objective is
// ce_scale * CE + lambda_distill * distill_scale * distill.
template <class Scalar>
struct LossSpec {
  double lambda_distill = 0.0;
  const Mat<Scalar>* teacher = nullptr;  // n x distill_dim, aligned with the target image rows
  int target_offset = 0;                 // first predicted row of the target image
  double ce_scale = 1.0;
  double distill_scale = 1.0;
};

template <class Scalar>
struct GradientResult {
  LossBreakdown loss;
  ModelParams<Scalar> grads;
};

template <class Scalar>
GradientResult<Scalar> gradients(const ModelParams<Scalar>& params, const SequenceBundle& bundle,
                                 const LossSpec<Scalar>& spec);

// Loss only; same objective as gradients().
template <class Scalar>
LossBreakdown evaluate_loss(const ModelParams<Scalar>& params, const SequenceBundle& bundle,
                            const LossSpec<Scalar>& spec);

template <class Scalar>
struct DecodeCache {
  std::vector<Mat<Scalar>> keys;    // per layer, capacity x d (rotated)
  std::vector<Mat<Scalar>> values;  // per layer, capacity x d
  int length = 0;
  RowVec<Scalar> last_logits;  // prediction for the position after the cache
};

template <class Scalar>
DecodeCache<Scalar> prefill(const ModelParams<Scalar>& params, const TokenStream& context);

template <class Scalar>
RowVec<Scalar> decode_step(const ModelParams<Scalar>& params, DecodeCache<Scalar>& cache, int last_token_id,
                           int index_id, int position);

}  // namespace tokenar
