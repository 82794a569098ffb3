#include "tokenar/eval.hpp"

#include "tokenar/error.hpp"
#include "tokenar/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace tokenar {

using nlohmann::json;

double psnr(const ImageGrid& a, const ImageGrid& b, const MaskGrid* mask) {
  require(a.width == b.width && a.height == b.height, "psnr: image dimensions differ");
  int bx = 1, by = 1;
  if (mask) {
    require(mask->cols > 0 && mask->rows > 0 && a.width % mask->cols == 0 && a.height % mask->rows == 0,
            "psnr: mask does not tile the image");
    bx = a.width / mask->cols;
    by = a.height / mask->rows;
  }
  double se = 0.0;
  long count = 0;
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x) {
      if (mask && !(*mask)(y / by, x / bx)) continue;
      se += (a.pixel(x, y) - b.pixel(x, y)).squaredNorm();
      count += 3;
    }
  require(count > 0, "psnr: mask selects no pixels");
  const double mse = se / static_cast<double>(count);
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double token_accuracy(const TokenGrid& pred, const TokenGrid& truth, const MaskGrid* mask) {
  require(pred.rows == truth.rows && pred.cols == truth.cols, "token_accuracy: grid shapes differ");
  if (mask) require(mask->rows == pred.rows && mask->cols == pred.cols, "token_accuracy: mask shape differs");
  int hits = 0, total = 0;
  for (int i = 0; i < pred.size(); ++i) {
    if (mask && !(*mask)[i]) continue;
    ++total;
    if (pred[i] == truth[i]) ++hits;
  }
  require(total > 0, "token_accuracy: no positions selected");
  return static_cast<double>(hits) / total;
}

double identity_confusion(const TokenGrid& pred, const SceneSample& sample) {
  double sum = 0.0;
  for (std::size_t x = 0; x < 2; ++x) {
    const MaskGrid& region = sample.masks[x];
    require(region.rows == pred.rows && region.cols == pred.cols, "identity_confusion: mask/prediction shape differs");
    const std::vector<int>& other = sample.subjects[1 - x].signature;
    int cells = 0, confused = 0;
    for (int i = 0; i < pred.size(); ++i) {
      if (!region[i]) continue;
      ++cells;
      if (std::find(other.begin(), other.end(), pred[i]) != other.end()) ++confused;
    }
    require(cells > 0, "identity_confusion: subject mask is empty");
    sum += static_cast<double>(confused) / cells;
  }
  return sum / 2.0;
}

double attn_focus_entropy(const AttentionTrace& trace, int layer, const std::string& span) {
  require(layer >= 0 && layer < trace.n_layers, "attn_focus_entropy: layer " + std::to_string(layer) + " not recorded");
  const int sp = trace.span_index(span);
  double total = 0.0;
  long rows = 0;
  for (int h = 0; h < trace.n_heads; ++h) {
    const Eigen::MatrixXd& m = trace.at(layer, h, sp);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      double ent = 0.0;
      for (Eigen::Index c = 0; c < m.cols(); ++c)
        if (m(r, c) > 0.0) ent -= m(r, c) * std::log(m(r, c));
      total += ent;
      ++rows;
    }
  }
  require(rows > 0, "attn_focus_entropy: no rows recorded");
  return total / static_cast<double>(rows);
}

double attn_prompt_similarity(const AttentionTrace& trace, int layer) {
  require(layer >= 0 && layer < trace.n_layers, "attn_prompt_similarity: layer " + std::to_string(layer) + " not recorded");
  int ins = -1, pr = -1;
  for (std::size_t i = 0; i < trace.spec.keys.size(); ++i) {
    if (trace.spec.keys[i].name == "instruct") ins = static_cast<int>(i);
    if (trace.spec.keys[i].name == "prompt") pr = static_cast<int>(i);
  }
  require(ins >= 0 && pr >= 0, "attn_prompt_similarity: trace lacks instruct or prompt key spans");
  auto idx = [&](int h, int sp) {
    return static_cast<std::size_t>((layer * trace.n_heads + h) * static_cast<int>(trace.spec.keys.size()) + sp);
  };
  double total = 0.0;
  for (int h = 0; h < trace.n_heads; ++h) {
    const Eigen::VectorXd& a = trace.mass[idx(h, ins)];
    const Eigen::VectorXd& b = trace.mass[idx(h, pr)];
    require(a.size() == b.size() && a.size() > 0, "attn_prompt_similarity: malformed mass profiles");
    const double sa = a.sum(), sb = b.sum();
    const Eigen::VectorXd pa = sa > 0 ? Eigen::VectorXd(a / sa) : Eigen::VectorXd::Constant(a.size(), 1.0 / a.size());
    const Eigen::VectorXd pb = sb > 0 ? Eigen::VectorXd(b / sb) : Eigen::VectorXd::Constant(b.size(), 1.0 / b.size());
    total += (pa - pb).lpNorm<1>();
  }
  return total / trace.n_heads;
}

json to_json(const EvalReport& r) {
  return json{{"psnr_full", r.psnr_full},
              {"psnr_background", r.psnr_background},
              {"token_accuracy", r.token_accuracy},
              {"identity_confusion", r.identity_confusion},
              {"eval_ce", r.eval_ce},
              {"focus_entropy", r.focus_entropy},
              {"instruct_prompt_divergence", r.instruct_prompt_divergence},
              {"samples", r.samples}};
}

namespace {

MaskGrid background_mask(const SceneSample& s) {
  MaskGrid m(s.masks[0].rows, s.masks[0].cols, 1);
  for (int i = 0; i < m.size(); ++i)
    if (s.masks[0][i] || s.masks[1][i]) m[i] = 0;
  return m;
}

struct SampleMetrics {
  double psnr_full, psnr_background, accuracy, confusion;
  std::vector<double> entropy, divergence;
};

SampleMetrics image_metrics(const TokenGrid& pred, const SceneSample& s, const Codebook& codebook, int patch) {
  const ImageGrid img = dequantize(pred, codebook, patch);
  const MaskGrid bg = background_mask(s);
  return {psnr(img, s.target), psnr(img, s.target, &bg), token_accuracy(pred, s.target_tokens),
          identity_confusion(pred, s), {}, {}};
}

EvalReport reduce(const std::vector<SampleMetrics>& m) {
  EvalReport r;
  r.samples = static_cast<int>(m.size());
  if (m.empty()) return r;
  for (const auto& x : m) {
    r.psnr_full += x.psnr_full;
    r.psnr_background += x.psnr_background;
    r.token_accuracy += x.accuracy;
    r.identity_confusion += x.confusion;
  }
  const double n = static_cast<double>(m.size());
  r.psnr_full /= n;
  r.psnr_background /= n;
  r.token_accuracy /= n;
  r.identity_confusion /= n;
  auto mean_curve = [&](auto member) {
    std::vector<double> out((m.front().*member).size(), 0.0);
    for (const auto& x : m)
      for (std::size_t l = 0; l < out.size(); ++l) out[l] += (x.*member)[l] / n;
    return out;
  };
  r.focus_entropy = mean_curve(&SampleMetrics::entropy);
  r.instruct_prompt_divergence = mean_curve(&SampleMetrics::divergence);
  return r;
}

}  // namespace

EvalReport evaluate_predictions(const std::vector<TokenGrid>& predictions, const std::vector<SceneSample>& samples,
                                const Codebook& codebook, int patch) {
  require(predictions.size() == samples.size(), "evaluate_predictions: prediction count differs from sample count");
  std::vector<SampleMetrics> m;
  for (std::size_t i = 0; i < samples.size(); ++i) m.push_back(image_metrics(predictions[i], samples[i], codebook, patch));
  return reduce(m);
}

template <class Scalar>
double target_ce(const ModelParams<Scalar>& params, const std::vector<SceneSample>& samples, const SequenceLayout& layout,
                 int threads) {
  require(!samples.empty(), "target_ce: no samples");
  std::vector<LossBreakdown> parts(samples.size());
  parallel_for(static_cast<int>(samples.size()), threads, [&](int i) {
    SequenceBundle b = build_sequence_from_tokens(samples[static_cast<std::size_t>(i)], layout);
    std::fill(b.loss_mask.begin(), b.loss_mask.begin() + layout.target_offset(), 0);
    parts[static_cast<std::size_t>(i)] = evaluate_loss(params, b, LossSpec<Scalar>{});
  });
  double nll = 0.0;
  int count = 0;
  for (const auto& p : parts) {
    nll += p.ce * p.masked;
    count += p.masked;
  }
  return nll / count;
}

template <class Scalar>
EvalReport evaluate_model(const ModelParams<Scalar>& params, const std::vector<SceneSample>& samples,
                          const SequenceLayout& layout, const TokenizerSpec& tokenizer, const EvalOptions& options) {
  require(!samples.empty(), "evaluate_model: no samples");
  std::vector<SampleMetrics> m(samples.size());
  parallel_for(static_cast<int>(samples.size()), options.threads, [&](int i) {
    const SceneSample& s = samples[static_cast<std::size_t>(i)];
    GenerateConfig g;
    g.capture_trace = options.capture_attention;
    const GenerateResult out = generate(params, s, layout, g);
    SampleMetrics x = image_metrics(out.target, s, tokenizer.codebook, tokenizer.patch);
    if (out.trace) {
      for (int l = 0; l < out.trace->n_layers; ++l) {
        x.entropy.push_back(attn_focus_entropy(*out.trace, l, "prompt"));
        if (layout.M > 0) x.divergence.push_back(attn_prompt_similarity(*out.trace, l));
      }
    }
    m[static_cast<std::size_t>(i)] = std::move(x);
  });
  EvalReport r = reduce(m);
  r.eval_ce = target_ce(params, samples, layout, options.threads);
  return r;
}

Variant variant_by_name(const std::string& name) {
  if (name == "full") return {name, true, true, true};
  if (name == "no-instruct") return {name, true, false, true};
  // the index embedding is ablated together with ITD
  if (name == "no-ITD") return {name, false, true, false};
  if (name == "baseline") return {name, false, false, false};
  throw InvalidArgument("unknown ablation variant '" + name + "' (expected full, no-instruct, no-ITD, baseline)");
}

namespace {

EvalReport fold(const std::vector<EvalReport>& xs, int how) {
  // how: 0 mean, 1 min, 2 max
  EvalReport r = xs.front();
  auto comb = [&](double a, double b) { return how == 0 ? a + b : how == 1 ? std::min(a, b) : std::max(a, b); };
  for (std::size_t k = 1; k < xs.size(); ++k) {
    const EvalReport& x = xs[k];
    r.psnr_full = comb(r.psnr_full, x.psnr_full);
    r.psnr_background = comb(r.psnr_background, x.psnr_background);
    r.token_accuracy = comb(r.token_accuracy, x.token_accuracy);
    r.identity_confusion = comb(r.identity_confusion, x.identity_confusion);
    r.eval_ce = comb(r.eval_ce, x.eval_ce);
    for (std::size_t l = 0; l < r.focus_entropy.size() && l < x.focus_entropy.size(); ++l)
      r.focus_entropy[l] = comb(r.focus_entropy[l], x.focus_entropy[l]);
    for (std::size_t l = 0; l < r.instruct_prompt_divergence.size() && l < x.instruct_prompt_divergence.size(); ++l)
      r.instruct_prompt_divergence[l] = comb(r.instruct_prompt_divergence[l], x.instruct_prompt_divergence[l]);
  }
  if (how == 0) {
    const double n = static_cast<double>(xs.size());
    r.psnr_full /= n;
    r.psnr_background /= n;
    r.token_accuracy /= n;
    r.identity_confusion /= n;
    r.eval_ce /= n;
    for (double& v : r.focus_entropy) v /= n;
    for (double& v : r.instruct_prompt_divergence) v /= n;
  }
  return r;
}

}  // namespace

AblationTable run_ablation(const std::vector<SceneSample>& train, const std::vector<SceneSample>& eval,
                           const std::vector<std::string>& variants, const std::vector<std::uint64_t>& seeds,
                           const AblationSetup& setup, const std::function<void(const std::string&)>& progress) {
  require(!train.empty() && !eval.empty(), "run_ablation: empty train or eval set");
  require(!seeds.empty(), "run_ablation: no seeds");
  const int M = setup.layout.M;
  const Eigen::MatrixXd projection =
      make_teacher_projection(setup.model.image_tokens, setup.model.distill_dim, setup.teacher_seed);
  AblationTable table;
  for (const std::string& name : variants) {
    const Variant v = variant_by_name(name);
    AblationRow row;
    row.variant = v.name;
    row.seeds = seeds;
    ModelConfig mc = setup.model;
    mc.instruct_tokens = v.instruct ? M : 0;
    mc.use_index_embedding = v.index_embedding;
    SequenceLayout layout = setup.layout;
    layout.M = mc.instruct_tokens;
    layout.itd_enabled = v.itd;
    const auto examples = prepare_examples<float>(train, layout, setup.tokenizer, projection);
    for (std::uint64_t seed : seeds) {
      if (progress) progress("variant " + v.name + " seed " + std::to_string(seed) + ": training");
      ModelParams<float> params = init_params<float>(mc, seed);
      TrainConfig tc = setup.train;
      tc.seed = seed;
      tc.threads = setup.threads;
      if (!v.instruct && tc.instruct_mode == InstructMode::standalone) tc.instruct_mode = InstructMode::joint;
      train_loop(examples, tc, params);
      EvalOptions eo;
      eo.threads = setup.threads;
      eo.capture_attention = true;
      row.per_seed.push_back(evaluate_model(params, eval, layout, setup.tokenizer, eo));
      if (progress) {
        std::ostringstream msg;
        msg << "variant " << v.name << " seed " << seed << ": psnr " << row.per_seed.back().psnr_full << " acc "
            << row.per_seed.back().token_accuracy;
        progress(msg.str());
      }
    }
    row.mean = fold(row.per_seed, 0);
    row.min = fold(row.per_seed, 1);
    row.max = fold(row.per_seed, 2);
    table.rows.push_back(std::move(row));
  }
  return table;
}

json to_json(const AblationTable& t) {
  json rows = json::array();
  for (const AblationRow& r : t.rows) {
    json per = json::array();
    for (const EvalReport& e : r.per_seed) per.push_back(to_json(e));
    rows.push_back({{"variant", r.variant},
                    {"seeds", r.seeds},
                    {"per_seed", per},
                    {"mean", to_json(r.mean)},
                    {"min", to_json(r.min)},
                    {"max", to_json(r.max)}});
  }
  return json{{"rows", rows}};
}

std::string to_csv(const AblationTable& t) {
  std::ostringstream out;
  out << "variant,seeds,psnr_full,psnr_full_min,psnr_full_max,psnr_background,token_accuracy,token_accuracy_min,"
         "token_accuracy_max,identity_confusion,eval_ce\n";
  for (const AblationRow& r : t.rows)
    out << r.variant << ',' << r.seeds.size() << ',' << r.mean.psnr_full << ',' << r.min.psnr_full << ','
        << r.max.psnr_full << ',' << r.mean.psnr_background << ',' << r.mean.token_accuracy << ','
        << r.min.token_accuracy << ',' << r.max.token_accuracy << ',' << r.mean.identity_confusion << ','
        << r.mean.eval_ce << '\n';
  return out.str();
}

template EvalReport evaluate_model<float>(const ModelParams<float>&, const std::vector<SceneSample>&,
                                          const SequenceLayout&, const TokenizerSpec&, const EvalOptions&);
template EvalReport evaluate_model<double>(const ModelParams<double>&, const std::vector<SceneSample>&,
                                           const SequenceLayout&, const TokenizerSpec&, const EvalOptions&);
template double target_ce<float>(const ModelParams<float>&, const std::vector<SceneSample>&, const SequenceLayout&, int);
template double target_ce<double>(const ModelParams<double>&, const std::vector<SceneSample>&, const SequenceLayout&,
                                  int);

}  // namespace tokenar
