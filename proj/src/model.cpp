#include "tokenar/model.hpp"

#include "tokenar/error.hpp"
#include "tokenar/loss.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

namespace tokenar {

void ModelConfig::validate() const {
  require(d_model > 0 && n_layers > 0 && n_heads > 0, "ModelConfig: sizes must be positive");
  require(d_model % n_heads == 0, "ModelConfig: d_model must be divisible by n_heads");
  require(head_dim() % 2 == 0, "ModelConfig: head dimension must be even for rotary positions");
  require(image_tokens > 0 && vocab_size > image_tokens, "ModelConfig: vocab_size must exceed image_tokens");
  require(instruct_tokens >= 0, "ModelConfig: instruct_tokens must be non-negative");
  require(max_seq_len > 0, "ModelConfig: max_seq_len must be positive");
  require(index_table_size >= 1, "ModelConfig: index table must have at least one row");
  require(distill_dim > 0, "ModelConfig: distill_dim must be positive");
  require(float_width == 32 || float_width == 64, "ModelConfig: float_width must be 32 or 64");
}

template <class Scalar>
ModelParams<Scalar> ModelParams<Scalar>::zeros(const ModelConfig& cfg) {
  cfg.validate();
  const int d = cfg.d_model;
  ModelParams p;
  p.config = cfg;
  p.tok_emb = Mat<Scalar>::Zero(cfg.vocab_size, d);
  p.index_table = Mat<Scalar>::Zero(cfg.index_table_size, d);
  p.instruct = Mat<Scalar>::Zero(cfg.instruct_tokens, d);
  p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& L : p.layers) {
    L.attn_norm = Mat<Scalar>::Zero(1, d);
    L.wq = Mat<Scalar>::Zero(d, d);
    L.wk = Mat<Scalar>::Zero(d, d);
    L.wv = Mat<Scalar>::Zero(d, d);
    L.wo = Mat<Scalar>::Zero(d, d);
    L.mlp_norm = Mat<Scalar>::Zero(1, d);
    L.w1 = Mat<Scalar>::Zero(d, cfg.mlp_dim());
    L.b1 = Mat<Scalar>::Zero(1, cfg.mlp_dim());
    L.w2 = Mat<Scalar>::Zero(cfg.mlp_dim(), d);
    L.b2 = Mat<Scalar>::Zero(1, d);
  }
  p.final_norm = Mat<Scalar>::Zero(1, d);
  p.head = Mat<Scalar>::Zero(d, cfg.vocab_size);
  p.distill_proj = Mat<Scalar>::Zero(d, cfg.distill_dim);
  return p;
}

template <class Scalar>
ModelParams<Scalar> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams<Scalar> p = ModelParams<Scalar>::zeros(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](Mat<Scalar>& t, double std_dev) {
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(std_dev * normal(rng));
  };
  const double d = cfg.d_model;
  const double depth_scale = 1.0 / std::sqrt(2.0 * cfg.n_layers);

  fill(p.tok_emb, cfg.embed_std);
  fill(p.index_table, cfg.embed_std);
  p.index_table.row(0).setZero();
  for (auto& L : p.layers) {
    L.attn_norm.setOnes();
    fill(L.wq, 1.0 / std::sqrt(d));
    fill(L.wk, 1.0 / std::sqrt(d));
    fill(L.wv, 1.0 / std::sqrt(d));
    fill(L.wo, depth_scale / std::sqrt(d));
    L.mlp_norm.setOnes();
    fill(L.w1, 1.0 / std::sqrt(d));
    fill(L.w2, depth_scale / std::sqrt(static_cast<double>(cfg.mlp_dim())));
  }
  p.final_norm.setOnes();
  fill(p.head, 1.0 / std::sqrt(d));
  fill(p.distill_proj, 1.0 / std::sqrt(d));
  return p;
}

TokenStream teacher_forced_stream(const SequenceBundle& bundle) {
  require(bundle.predicted_length() > 0, "teacher_forced_stream: bundle has no predicted span");
  require(static_cast<int>(bundle.index_ids.size()) == bundle.total_length() &&
              static_cast<int>(bundle.position_ids.size()) == bundle.total_length(),
          "teacher_forced_stream: index/position ids do not cover the sequence");
  TokenStream s;
  const int L = bundle.total_length() - 1;
  s.ids.reserve(static_cast<std::size_t>(L));
  for (int p = 0; p < L; ++p) s.ids.push_back(bundle.id_at(p));
  s.index_ids.assign(bundle.index_ids.begin(), bundle.index_ids.begin() + L);
  s.positions.assign(bundle.position_ids.begin(), bundle.position_ids.begin() + L);
  s.instruct_count = bundle.instruct_count;
  return s;
}

int AttentionTrace::span_index(const std::string& name) const {
  for (std::size_t i = 0; i < spec.keys.size(); ++i)
    if (spec.keys[i].name == name) return static_cast<int>(i);
  throw InvalidArgument("AttentionTrace: no key span named '" + name + "'");
}

namespace {

template <class Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <class Scalar>
struct LayerTape {
  Mat<Scalar> x_in;
  Vec<Scalar> inv_rms1;
  Mat<Scalar> h1, q, k, v;  // q and k after rotation
  std::vector<Mat<Scalar>> probs;
  Mat<Scalar> o;
  Mat<Scalar> x_mid;
  Vec<Scalar> inv_rms2;
  Mat<Scalar> h2, u, a;
};

template <class Scalar>
struct Tape {
  std::vector<LayerTape<Scalar>> layers;
  Mat<Scalar> x_out;
  Vec<Scalar> inv_rmsf;
};

template <class Scalar>
struct RopeTable {
  Mat<Scalar> cos, sin;  // rows = sequence positions, cols = head_dim / 2
};

template <class Scalar>
RopeTable<Scalar> rope_table(const std::vector<int>& positions, int head_dim, double base) {
  const int half = head_dim / 2;
  RopeTable<Scalar> t{Mat<Scalar>(static_cast<Eigen::Index>(positions.size()), half),
                      Mat<Scalar>(static_cast<Eigen::Index>(positions.size()), half)};
  for (std::size_t i = 0; i < positions.size(); ++i)
    for (int j = 0; j < half; ++j) {
      const double theta = positions[i] * std::pow(base, -2.0 * j / head_dim);
      t.cos(static_cast<Eigen::Index>(i), j) = static_cast<Scalar>(std::cos(theta));
      t.sin(static_cast<Eigen::Index>(i), j) = static_cast<Scalar>(std::sin(theta));
    }
  return t;
}

// Rotates consecutive channel pairs of every head; inverse applies the transpose.
template <class Scalar>
void apply_rope(Mat<Scalar>& x, const RopeTable<Scalar>& t, int n_heads, bool inverse) {
  const Eigen::Index half = t.cos.cols();
  const Eigen::Index hd = 2 * half;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (int h = 0; h < n_heads; ++h)
      for (Eigen::Index j = 0; j < half; ++j) {
        const Scalar c = t.cos(i, j);
        const Scalar s = inverse ? -t.sin(i, j) : t.sin(i, j);
        Scalar& a = x(i, h * hd + 2 * j);
        Scalar& b = x(i, h * hd + 2 * j + 1);
        const Scalar a0 = a, b0 = b;
        a = a0 * c - b0 * s;
        b = a0 * s + b0 * c;
      }
}

template <class Scalar>
Mat<Scalar> rms_norm(const Mat<Scalar>& x, const Mat<Scalar>& gain, double eps, Vec<Scalar>& inv_rms) {
  inv_rms = ((x.array().square().rowwise().sum() / static_cast<Scalar>(x.cols())) + static_cast<Scalar>(eps)).rsqrt();
  Mat<Scalar> y = x.array().colwise() * inv_rms.array();
  y.array().rowwise() *= gain.row(0).array();
  return y;
}

// Accumulates dgain and returns dx for y = x * inv_rms * gain.
template <class Scalar>
Mat<Scalar> rms_norm_backward(const Mat<Scalar>& x, const Mat<Scalar>& gain, const Vec<Scalar>& inv_rms,
                              const Mat<Scalar>& dy, Mat<Scalar>& dgain) {
  const Mat<Scalar> normed = x.array().colwise() * inv_rms.array();
  dgain.row(0) += (dy.array() * normed.array()).colwise().sum().matrix();
  Mat<Scalar> t = dy.array().rowwise() * gain.row(0).array();
  const Vec<Scalar> tx = (t.array() * x.array()).rowwise().sum();
  const Vec<Scalar> coef = inv_rms.array().cube() * tx.array() / static_cast<Scalar>(x.cols());
  Mat<Scalar> dx = t.array().colwise() * inv_rms.array();
  dx.array() -= x.array().colwise() * coef.array();
  return dx;
}

template <class Scalar>
Scalar gelu(Scalar x) {
  return static_cast<Scalar>(0.5) * x * (static_cast<Scalar>(1) + std::erf(x * static_cast<Scalar>(std::numbers::sqrt2 / 2)));
}

template <class Scalar>
Scalar gelu_grad(Scalar x) {
  const Scalar cdf = static_cast<Scalar>(0.5) * (static_cast<Scalar>(1) + std::erf(x * static_cast<Scalar>(std::numbers::sqrt2 / 2)));
  const Scalar pdf = std::exp(static_cast<Scalar>(-0.5) * x * x) * static_cast<Scalar>(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + x * pdf;
}

template <class Scalar>
void check_stream(const ModelConfig& cfg, const TokenStream& s) {
  require(s.length() > 0, "forward: empty sequence");
  require(s.length() <= cfg.max_seq_len,
          "forward: sequence length " + std::to_string(s.length()) + " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  require(s.index_ids.size() == s.ids.size() && s.positions.size() == s.ids.size(),
          "forward: ids/index_ids/positions length mismatch");
  require(s.instruct_count == cfg.instruct_tokens,
          "forward: stream has " + std::to_string(s.instruct_count) + " instruct slots, model has " +
              std::to_string(cfg.instruct_tokens));
  for (int i = 0; i < s.length(); ++i) {
    const auto u = static_cast<std::size_t>(i);
    require(i < s.instruct_count || (s.ids[u] >= 0 && s.ids[u] < cfg.vocab_size),
            "forward: token id " + std::to_string(s.ids[u]) + " outside vocabulary");
    require(s.index_ids[u] >= 0 && s.index_ids[u] < cfg.index_table_size,
            "forward: index id " + std::to_string(s.index_ids[u]) + " outside index table");
    require(s.positions[u] >= 0 && s.positions[u] < cfg.max_seq_len, "forward: position outside [0,max_seq_len)");
  }
}

template <class Scalar>
Mat<Scalar> embed(const ModelParams<Scalar>& p, const TokenStream& s) {
  Mat<Scalar> x(s.length(), p.config.d_model);
  for (int i = 0; i < s.length(); ++i) {
    const auto u = static_cast<std::size_t>(i);
    if (i < s.instruct_count)
      x.row(i) = p.instruct.row(i);
    else
      x.row(i) = p.tok_emb.row(s.ids[u]);
    if (p.config.use_index_embedding) x.row(i) += p.index_table.row(s.index_ids[u]);
  }
  return x;
}

template <class Scalar>
void softmax_causal(Mat<Scalar>& scores) {
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    auto row = scores.row(i);
    const Scalar mx = row.head(i + 1).maxCoeff();
    row.head(i + 1) = (row.head(i + 1).array() - mx).exp();
    row.head(i + 1) /= row.head(i + 1).sum();
    row.tail(scores.cols() - i - 1).setZero();
  }
}

template <class Scalar>
void record_trace(const Mat<Scalar>& scores, const Mat<Scalar>& probs, const TraceSpec& spec, int layer, int head,
                  AttentionTrace& out) {
  for (std::size_t sp = 0; sp < spec.keys.size(); ++sp) {
    const auto& ks = spec.keys[sp];
    const int nq = spec.query_end - spec.query_begin;
    const int nk = ks.end - ks.begin;
    Eigen::MatrixXd rows(nq, nk);
    Eigen::VectorXd mass(nq);
    for (int qi = 0; qi < nq; ++qi) {
      const Eigen::RowVectorXd s = scores.row(spec.query_begin + qi).segment(ks.begin, nk).template cast<double>();
      const Eigen::RowVectorXd e = (s.array() - s.maxCoeff()).exp();
      rows.row(qi) = e / e.sum();
      mass[qi] = static_cast<double>(probs.row(spec.query_begin + qi).segment(ks.begin, nk).sum());
    }
    const auto idx = static_cast<std::size_t>((layer * out.n_heads + head) * static_cast<int>(spec.keys.size())) + sp;
    out.rows[idx] = std::move(rows);
    out.mass[idx] = std::move(mass);
  }
}

// Runs the transformer and returns the final normalized hidden state (L x d).
template <class Scalar>
Mat<Scalar> run(const ModelParams<Scalar>& p, const TokenStream& s, Tape<Scalar>* tape, const TraceSpec* trace_spec,
                AttentionTrace* trace) {
  const ModelConfig& cfg = p.config;
  check_stream<Scalar>(cfg, s);
  const int L = s.length();
  const int hd = cfg.head_dim();
  const Scalar scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(hd)));

  if (trace_spec) {
    require(trace != nullptr, "forward: trace spec given without output");
    require(trace_spec->query_begin >= 0 && trace_spec->query_begin < trace_spec->query_end &&
                trace_spec->query_end <= L,
            "forward: trace query span outside sequence");
    for (const auto& k : trace_spec->keys)
      require(k.begin >= 0 && k.begin < k.end && k.end <= trace_spec->query_begin,
              "forward: trace key span '" + k.name + "' must be non-empty and precede the query span");
    trace->spec = *trace_spec;
    trace->n_layers = cfg.n_layers;
    trace->n_heads = cfg.n_heads;
    const auto total = static_cast<std::size_t>(cfg.n_layers * cfg.n_heads) * trace_spec->keys.size();
    trace->rows.assign(total, {});
    trace->mass.assign(total, {});
  }

  const RopeTable<Scalar> rope = rope_table<Scalar>(s.positions, hd, cfg.rope_base);
  Mat<Scalar> x = embed(p, s);
  if (tape) tape->layers.resize(static_cast<std::size_t>(cfg.n_layers));

  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerParams<Scalar>& W = p.layers[static_cast<std::size_t>(l)];
    Vec<Scalar> inv1;
    Mat<Scalar> h1 = rms_norm(x, W.attn_norm, cfg.norm_eps, inv1);
    Mat<Scalar> q = h1 * W.wq;
    Mat<Scalar> k = h1 * W.wk;
    Mat<Scalar> v = h1 * W.wv;
    apply_rope(q, rope, cfg.n_heads, false);
    apply_rope(k, rope, cfg.n_heads, false);

    Mat<Scalar> o(L, cfg.d_model);
    std::vector<Mat<Scalar>> probs;
    for (int h = 0; h < cfg.n_heads; ++h) {
      Mat<Scalar> scores = (q.middleCols(h * hd, hd) * k.middleCols(h * hd, hd).transpose()) * scale;
      Mat<Scalar> P = scores;
      softmax_causal(P);
      if (trace_spec) record_trace(scores, P, *trace_spec, l, h, *trace);
      o.middleCols(h * hd, hd).noalias() = P * v.middleCols(h * hd, hd);
      if (tape) probs.push_back(std::move(P));
    }
    Mat<Scalar> x_mid = x + o * W.wo;

    Vec<Scalar> inv2;
    Mat<Scalar> h2 = rms_norm(x_mid, W.mlp_norm, cfg.norm_eps, inv2);
    Mat<Scalar> u = h2 * W.w1;
    u.rowwise() += W.b1.row(0);
    Mat<Scalar> a = u.unaryExpr([](Scalar z) { return gelu(z); });
    Mat<Scalar> x_out = x_mid + a * W.w2;
    x_out.rowwise() += W.b2.row(0);

    if (tape) {
      LayerTape<Scalar>& T = tape->layers[static_cast<std::size_t>(l)];
      T.x_in = std::move(x);
      T.inv_rms1 = std::move(inv1);
      T.h1 = std::move(h1);
      T.q = std::move(q);
      T.k = std::move(k);
      T.v = std::move(v);
      T.probs = std::move(probs);
      T.o = std::move(o);
      T.x_mid = std::move(x_mid);
      T.inv_rms2 = std::move(inv2);
      T.h2 = std::move(h2);
      T.u = std::move(u);
      T.a = std::move(a);
    }
    x = std::move(x_out);
  }

  Vec<Scalar> invf;
  Mat<Scalar> F = rms_norm(x, p.final_norm, cfg.norm_eps, invf);
  if (tape) {
    tape->x_out = std::move(x);
    tape->inv_rmsf = std::move(invf);
  }
  return F;
}

template <class Scalar>
void backward(const ModelParams<Scalar>& p, const TokenStream& s, Tape<Scalar>& tape, Mat<Scalar> dF,
              ModelParams<Scalar>& g) {
  const ModelConfig& cfg = p.config;
  const int hd = cfg.head_dim();
  const Scalar scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(hd)));
  const RopeTable<Scalar> rope = rope_table<Scalar>(s.positions, hd, cfg.rope_base);

  Mat<Scalar> dx = rms_norm_backward(tape.x_out, p.final_norm, tape.inv_rmsf, dF, g.final_norm);

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const LayerParams<Scalar>& W = p.layers[static_cast<std::size_t>(l)];
    LayerParams<Scalar>& G = g.layers[static_cast<std::size_t>(l)];
    LayerTape<Scalar>& T = tape.layers[static_cast<std::size_t>(l)];

    // MLP branch.
    G.w2.noalias() += T.a.transpose() * dx;
    G.b2.row(0) += dx.colwise().sum();
    Mat<Scalar> du = dx * W.w2.transpose();
    du.array() *= T.u.unaryExpr([](Scalar z) { return gelu_grad(z); }).array();
    G.w1.noalias() += T.h2.transpose() * du;
    G.b1.row(0) += du.colwise().sum();
    const Mat<Scalar> dh2 = du * W.w1.transpose();
    dx += rms_norm_backward(T.x_mid, W.mlp_norm, T.inv_rms2, dh2, G.mlp_norm);

    // Attention branch.
    G.wo.noalias() += T.o.transpose() * dx;
    const Mat<Scalar> dO = dx * W.wo.transpose();
    Mat<Scalar> dq(T.q.rows(), T.q.cols()), dk(T.k.rows(), T.k.cols()), dv(T.v.rows(), T.v.cols());
    for (int h = 0; h < cfg.n_heads; ++h) {
      const Mat<Scalar>& P = T.probs[static_cast<std::size_t>(h)];
      const Mat<Scalar> dOh = dO.middleCols(h * hd, hd);
      dv.middleCols(h * hd, hd).noalias() = P.transpose() * dOh;
      Mat<Scalar> dS = dOh * T.v.middleCols(h * hd, hd).transpose();
      const Vec<Scalar> rowdot = (dS.array() * P.array()).rowwise().sum();
      dS = (P.array() * (dS.array().colwise() - rowdot.array())) * scale;
      dq.middleCols(h * hd, hd).noalias() = dS * T.k.middleCols(h * hd, hd);
      dk.middleCols(h * hd, hd).noalias() = dS.transpose() * T.q.middleCols(h * hd, hd);
    }
    apply_rope(dq, rope, cfg.n_heads, true);
    apply_rope(dk, rope, cfg.n_heads, true);
    G.wq.noalias() += T.h1.transpose() * dq;
    G.wk.noalias() += T.h1.transpose() * dk;
    G.wv.noalias() += T.h1.transpose() * dv;
    Mat<Scalar> dh1 = dq * W.wq.transpose();
    dh1.noalias() += dk * W.wk.transpose();
    dh1.noalias() += dv * W.wv.transpose();
    dx += rms_norm_backward(T.x_in, W.attn_norm, T.inv_rms1, dh1, G.attn_norm);
  }

  for (int i = 0; i < s.length(); ++i) {
    const auto u = static_cast<std::size_t>(i);
    if (i < s.instruct_count)
      g.instruct.row(i) += dx.row(i);
    else
      g.tok_emb.row(s.ids[u]) += dx.row(i);
    if (cfg.use_index_embedding) g.index_table.row(s.index_ids[u]) += dx.row(i);
  }
}

template <class Scalar>
LossBreakdown loss_and_maybe_grads(const ModelParams<Scalar>& p, const SequenceBundle& bundle,
                                   const LossSpec<Scalar>& spec, ModelParams<Scalar>* grads) {
  const TokenStream stream = teacher_forced_stream(bundle);
  Tape<Scalar> tape;
  const Mat<Scalar> F = run(p, stream, grads ? &tape : nullptr, nullptr, nullptr);
  const int C = bundle.context_length();
  const int S = bundle.predicted_length();
  require(static_cast<int>(bundle.loss_mask.size()) == S, "gradients: loss mask does not cover the predicted span");
  const Mat<Scalar> Fp = F.middleRows(C - 1, S);
  const Mat<Scalar> Z = Fp * p.head;

  LossBreakdown out;
  Mat<Scalar> dZ = Mat<Scalar>::Zero(S, Z.cols());
  double nll = 0.0;
  for (int i = 0; i < S; ++i) {
    if (!bundle.loss_mask[static_cast<std::size_t>(i)]) continue;
    const int t = bundle.target_ids[static_cast<std::size_t>(i)];
    const Eigen::RowVectorXd row = Z.row(i).template cast<double>();
    const double mx = row.maxCoeff();
    const Eigen::RowVectorXd e = (row.array() - mx).exp();
    const double sum = e.sum();
    nll += mx + std::log(sum) - row[t];
    Eigen::Index arg = 0;
    row.maxCoeff(&arg);
    if (arg == t) ++out.correct;
    ++out.masked;
    dZ.row(i) = (e / sum).template cast<Scalar>();
    dZ(i, t) -= static_cast<Scalar>(1);
  }
  require(out.masked > 0, "gradients: loss mask selects no positions");
  out.ce = nll / out.masked;
  dZ *= static_cast<Scalar>(spec.ce_scale / out.masked);

  Mat<Scalar> dFp;
  Mat<Scalar> dFt;
  const bool has_teacher = spec.teacher != nullptr;
  if (has_teacher) {
    const Mat<Scalar>& Tt = *spec.teacher;
    require(spec.target_offset >= 0 && spec.target_offset + Tt.rows() <= S,
            "gradients: teacher rows fall outside the predicted span");
    require(Tt.cols() == p.distill_proj.cols(), "gradients: teacher width differs from distill_dim");
    const Mat<Scalar> Ft = Fp.middleRows(spec.target_offset, Tt.rows());
    const Mat<Scalar> diff = Ft * p.distill_proj - Tt;
    out.distill = static_cast<double>(diff.template cast<double>().squaredNorm()) / static_cast<double>(diff.size());
    if (grads && spec.lambda_distill != 0.0) {
      const Mat<Scalar> dY =
          diff * static_cast<Scalar>(2.0 * spec.lambda_distill * spec.distill_scale / static_cast<double>(diff.size()));
      grads->distill_proj.noalias() += Ft.transpose() * dY;
      dFt = dY * p.distill_proj.transpose();
    }
  }
  out.total = total_loss(out.ce, out.distill, spec.lambda_distill);
  if (!std::isfinite(out.total)) throw NumericError("gradients: non-finite loss");

  if (grads) {
    grads->head.noalias() += Fp.transpose() * dZ;
    dFp = dZ * p.head.transpose();
    if (dFt.size() > 0) dFp.middleRows(spec.target_offset, dFt.rows()) += dFt;
    Mat<Scalar> dF = Mat<Scalar>::Zero(F.rows(), F.cols());
    dF.middleRows(C - 1, S) = dFp;
    backward(p, stream, tape, std::move(dF), *grads);
  }
  return out;
}

}  // namespace

template <class Scalar>
Mat<Scalar> forward_stream(const ModelParams<Scalar>& params, const TokenStream& stream, const TraceSpec* trace,
                           AttentionTrace* trace_out) {
  const Mat<Scalar> F = run<Scalar>(params, stream, nullptr, trace, trace_out);
  return F * params.head;
}

template <class Scalar>
ForwardOutput<Scalar> forward(const ModelParams<Scalar>& params, const SequenceBundle& bundle, const TraceSpec* trace) {
  const TokenStream stream = teacher_forced_stream(bundle);
  ForwardOutput<Scalar> out;
  AttentionTrace t;
  const Mat<Scalar> F = run<Scalar>(params, stream, nullptr, trace, trace ? &t : nullptr);
  out.features = F.middleRows(bundle.context_length() - 1, bundle.predicted_length());
  out.logits = out.features * params.head;
  if (trace) out.trace = std::move(t);
  return out;
}

template <class Scalar>
GradientResult<Scalar> gradients(const ModelParams<Scalar>& params, const SequenceBundle& bundle,
                                 const LossSpec<Scalar>& spec) {
  GradientResult<Scalar> r{{}, ModelParams<Scalar>::zeros(params.config)};
  r.loss = loss_and_maybe_grads(params, bundle, spec, &r.grads);
  return r;
}

template <class Scalar>
LossBreakdown evaluate_loss(const ModelParams<Scalar>& params, const SequenceBundle& bundle,
                            const LossSpec<Scalar>& spec) {
  return loss_and_maybe_grads<Scalar>(params, bundle, spec, nullptr);
}

template <class Scalar>
DecodeCache<Scalar> prefill(const ModelParams<Scalar>& params, const TokenStream& context) {
  const ModelConfig& cfg = params.config;
  Tape<Scalar> tape;
  const Mat<Scalar> F = run<Scalar>(params, context, &tape, nullptr, nullptr);
  DecodeCache<Scalar> cache;
  for (const LayerTape<Scalar>& T : tape.layers) {
    Mat<Scalar> k = Mat<Scalar>::Zero(cfg.max_seq_len, cfg.d_model);
    Mat<Scalar> v = Mat<Scalar>::Zero(cfg.max_seq_len, cfg.d_model);
    k.topRows(context.length()) = T.k;
    v.topRows(context.length()) = T.v;
    cache.keys.push_back(std::move(k));
    cache.values.push_back(std::move(v));
  }
  cache.length = context.length();
  cache.last_logits = F.row(F.rows() - 1) * params.head;
  return cache;
}

template <class Scalar>
RowVec<Scalar> decode_step(const ModelParams<Scalar>& params, DecodeCache<Scalar>& cache, int last_token_id,
                           int index_id, int position) {
  const ModelConfig& cfg = params.config;
  require(cache.length < cfg.max_seq_len, "decode_step: cache is full (max_seq_len " + std::to_string(cfg.max_seq_len) + ")");
  require(static_cast<int>(cache.keys.size()) == cfg.n_layers, "decode_step: cache does not match model depth");
  require(last_token_id >= 0 && last_token_id < cfg.vocab_size, "decode_step: token id outside vocabulary");
  require(index_id >= 0 && index_id < cfg.index_table_size, "decode_step: index id outside index table");
  require(position >= 0 && position < cfg.max_seq_len, "decode_step: position outside [0,max_seq_len)");

  const int hd = cfg.head_dim();
  const Scalar scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(hd)));
  const RopeTable<Scalar> rope = rope_table<Scalar>({position}, hd, cfg.rope_base);
  const int t = cache.length;

  Mat<Scalar> x = params.tok_emb.row(last_token_id);
  if (cfg.use_index_embedding) x += params.index_table.row(index_id);

  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerParams<Scalar>& W = params.layers[static_cast<std::size_t>(l)];
    Vec<Scalar> inv;
    const Mat<Scalar> h1 = rms_norm(x, W.attn_norm, cfg.norm_eps, inv);
    Mat<Scalar> q = h1 * W.wq;
    Mat<Scalar> k = h1 * W.wk;
    apply_rope(q, rope, cfg.n_heads, false);
    apply_rope(k, rope, cfg.n_heads, false);
    Mat<Scalar>& K = cache.keys[static_cast<std::size_t>(l)];
    Mat<Scalar>& V = cache.values[static_cast<std::size_t>(l)];
    K.row(t) = k;
    V.row(t) = h1 * W.wv;

    Mat<Scalar> o(1, cfg.d_model);
    for (int h = 0; h < cfg.n_heads; ++h) {
      RowVec<Scalar> s = (q.middleCols(h * hd, hd) * K.block(0, h * hd, t + 1, hd).transpose()) * scale;
      s = (s.array() - s.maxCoeff()).exp();
      s /= s.sum();
      o.middleCols(h * hd, hd).noalias() = s * V.block(0, h * hd, t + 1, hd);
    }
    Mat<Scalar> x_mid = x + o * W.wo;
    const Mat<Scalar> h2 = rms_norm(x_mid, W.mlp_norm, cfg.norm_eps, inv);
    Mat<Scalar> u = h2 * W.w1 + W.b1;
    const Mat<Scalar> a = u.unaryExpr([](Scalar z) { return gelu(z); });
    x = x_mid + a * W.w2 + W.b2;
  }
  Vec<Scalar> invf;
  const Mat<Scalar> F = rms_norm(x, params.final_norm, cfg.norm_eps, invf);
  cache.length = t + 1;
  cache.last_logits = F * params.head;
  return cache.last_logits;
}

#define TOKENAR_INSTANTIATE(S)                                                                                        \
  template struct ModelParams<S>;                                                                                     \
  template ModelParams<S> init_params<S>(const ModelConfig&, std::uint64_t);                                          \
  template Mat<S> forward_stream<S>(const ModelParams<S>&, const TokenStream&, const TraceSpec*, AttentionTrace*);    \
  template ForwardOutput<S> forward<S>(const ModelParams<S>&, const SequenceBundle&, const TraceSpec*);                \
  template GradientResult<S> gradients<S>(const ModelParams<S>&, const SequenceBundle&, const LossSpec<S>&);          \
  template LossBreakdown evaluate_loss<S>(const ModelParams<S>&, const SequenceBundle&, const LossSpec<S>&);          \
  template DecodeCache<S> prefill<S>(const ModelParams<S>&, const TokenStream&);                                      \
  template RowVec<S> decode_step<S>(const ModelParams<S>&, DecodeCache<S>&, int, int, int);

TOKENAR_INSTANTIATE(float)
TOKENAR_INSTANTIATE(double)

}  // namespace tokenar
