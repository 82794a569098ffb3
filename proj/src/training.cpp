#include "tokenar/training.hpp"

#include "tokenar/error.hpp"
#include "tokenar/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

namespace tokenar {

void TrainConfig::validate() const {
  require(lr > 0.0, "TrainConfig: learning rate must be positive");
  require(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0, "TrainConfig: betas must lie in (0,1)");
  require(weight_decay >= 0.0, "TrainConfig: weight decay must be non-negative");
  require(lambda_distill >= 0.0, "TrainConfig: lambda_distill must be non-negative");
  require(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
  require(steps >= 0, "TrainConfig: steps must be non-negative");
  require(checkpoint_interval >= 0, "TrainConfig: checkpoint_interval must be non-negative");
  require(threads >= 1, "TrainConfig: threads must be >= 1");
  require(accuracy_check_interval >= 1, "TrainConfig: accuracy_check_interval must be >= 1");
}

Eigen::MatrixXd make_teacher_projection(int K, int feature_dim, std::uint64_t seed) {
  require(K > 0 && feature_dim > 0, "make_teacher_projection: dimensions must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd R(feature_dim, K);
  for (Eigen::Index j = 0; j < R.cols(); ++j)
    for (Eigen::Index i = 0; i < R.rows(); ++i) R(i, j) = normal(rng);
  return R;
}

Eigen::MatrixXd teacher_features(const TokenGrid& target, const Eigen::MatrixXd& projection) {
  Eigen::MatrixXd out(target.size(), projection.rows());
  for (int r = 0; r < target.rows; ++r)
    for (int c = 0; c < target.cols; ++c) {
      const int r0 = (r / 2) * 2, c0 = (c / 2) * 2;
      Eigen::VectorXd pooled = Eigen::VectorXd::Zero(projection.rows());
      int count = 0;
      for (int rr = r0; rr < std::min(r0 + 2, target.rows); ++rr)
        for (int cc = c0; cc < std::min(c0 + 2, target.cols); ++cc) {
          const int t = target(rr, cc);
          require(t >= 0 && t < projection.cols(), "teacher_features: token outside projection width");
          pooled += projection.col(t);
          ++count;
        }
      out.row(r * target.cols + c) = (pooled / count).transpose();
    }
  return out;
}

template <class Scalar>
void adamw_step(ModelParams<Scalar>& params, const ModelParams<Scalar>& grads, OptState<Scalar>& opt,
                const TrainConfig& cfg) {
  std::vector<const Mat<Scalar>*> g;
  grads.visit([&](const std::string& name, const Mat<Scalar>& t) {
    if (!t.allFinite()) throw NumericError("adamw_step: non-finite gradient in " + name);
    g.push_back(&t);
  });
  std::vector<Mat<Scalar>*> m, v;
  opt.m.visit([&](const std::string&, Mat<Scalar>& t) { m.push_back(&t); });
  opt.v.visit([&](const std::string&, Mat<Scalar>& t) { v.push_back(&t); });

  ++opt.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.step));
  const Scalar decay = static_cast<Scalar>(1.0 - cfg.lr * cfg.weight_decay);
  const Scalar b1 = static_cast<Scalar>(cfg.beta1), b2 = static_cast<Scalar>(cfg.beta2);
  const Scalar step_size = static_cast<Scalar>(cfg.lr / bc1);
  const Scalar inv_sqrt_bc2 = static_cast<Scalar>(1.0 / std::sqrt(bc2));
  const Scalar eps = static_cast<Scalar>(cfg.eps);

  std::size_t i = 0;
  params.visit([&](const std::string& name, Mat<Scalar>& theta) {
    const Mat<Scalar>& gi = *g[i];
    Mat<Scalar>& mi = *m[i];
    Mat<Scalar>& vi = *v[i];
    require(gi.rows() == theta.rows() && gi.cols() == theta.cols(), "adamw_step: gradient shape mismatch for " + name);
    theta *= decay;
    mi = b1 * mi + (1 - b1) * gi;
    vi = b2 * vi + (1 - b2) * gi.cwiseAbs2();
    theta.array() -= step_size * mi.array() / (vi.array().sqrt() * inv_sqrt_bc2 + eps);
    ++i;
  });
}

template <class Scalar>
void instruct_token_update(Mat<Scalar>& instruct, const Mat<Scalar>& grad, double lr) {
  require(instruct.rows() == grad.rows() && instruct.cols() == grad.cols(), "instruct_token_update: shape mismatch");
  instruct -= static_cast<Scalar>(lr) * grad;
}

template <class Scalar>
std::vector<TrainExample<Scalar>> prepare_examples(const std::vector<SceneSample>& samples, const SequenceLayout& layout,
                                                   const TokenizerSpec& tokenizer, const Eigen::MatrixXd& teacher_projection) {
  std::vector<TrainExample<Scalar>> out;
  out.reserve(samples.size());
  for (const SceneSample& s : samples) {
    TrainExample<Scalar> ex;
    ex.bundle = build_training_sequence(s, layout, tokenizer);
    const TokenGrid target = quantize(s.target, tokenizer.codebook, tokenizer.patch);
    ex.teacher = teacher_features(target, teacher_projection).template cast<Scalar>();
    ex.target_offset = layout.target_offset();
    out.push_back(std::move(ex));
  }
  return out;
}

namespace {

template <class Scalar>
void add_into(ModelParams<Scalar>& acc, const ModelParams<Scalar>& g) {
  std::vector<const Mat<Scalar>*> src;
  g.visit([&](const std::string&, const Mat<Scalar>& t) { src.push_back(&t); });
  std::size_t i = 0;
  acc.visit([&](const std::string&, Mat<Scalar>& t) { t += *src[i++]; });
}

}  // namespace

template <class Scalar>
GradientResult<Scalar> batch_gradients(const ModelParams<Scalar>& params, const std::vector<const TrainExample<Scalar>*>& batch,
                                       double lambda_distill, int threads) {
  require(!batch.empty(), "batch_gradients: empty batch");
  int total_masked = 0;
  for (const auto* ex : batch)
    total_masked += static_cast<int>(std::count(ex->bundle.loss_mask.begin(), ex->bundle.loss_mask.end(), 1));
  require(total_masked > 0, "batch_gradients: batch has no masked positions");

  std::vector<GradientResult<Scalar>> parts(batch.size());
  parallel_for(static_cast<int>(batch.size()), threads, [&](int i) {
    const TrainExample<Scalar>& ex = *batch[static_cast<std::size_t>(i)];
    const int masked = static_cast<int>(std::count(ex.bundle.loss_mask.begin(), ex.bundle.loss_mask.end(), 1));
    LossSpec<Scalar> spec;
    spec.lambda_distill = lambda_distill;
    spec.teacher = &ex.teacher;
    spec.target_offset = ex.target_offset;
    spec.ce_scale = static_cast<double>(masked) / total_masked;
    spec.distill_scale = 1.0 / static_cast<double>(batch.size());
    parts[static_cast<std::size_t>(i)] = gradients(params, ex.bundle, spec);
  });

  GradientResult<Scalar> out{{}, std::move(parts[0].grads)};
  for (std::size_t i = 1; i < parts.size(); ++i) add_into(out.grads, parts[i].grads);
  for (const auto& p : parts) {
    out.loss.ce += p.loss.ce * p.loss.masked;
    out.loss.distill += p.loss.distill;
    out.loss.masked += p.loss.masked;
    out.loss.correct += p.loss.correct;
  }
  out.loss.ce /= out.loss.masked;
  out.loss.distill /= static_cast<double>(parts.size());
  out.loss.total = total_loss(out.loss.ce, out.loss.distill, lambda_distill);
  return out;
}

template <class Scalar>
DatasetScore score_examples(const ModelParams<Scalar>& params, const std::vector<TrainExample<Scalar>>& examples,
                            double lambda_distill, int threads) {
  require(!examples.empty(), "score_examples: no examples");
  std::vector<LossBreakdown> parts(examples.size());
  parallel_for(static_cast<int>(examples.size()), threads, [&](int i) {
    const auto& ex = examples[static_cast<std::size_t>(i)];
    LossSpec<Scalar> spec;
    spec.lambda_distill = lambda_distill;
    spec.teacher = &ex.teacher;
    spec.target_offset = ex.target_offset;
    parts[static_cast<std::size_t>(i)] = evaluate_loss(params, ex.bundle, spec);
  });
  DatasetScore s;
  int correct = 0;
  for (const auto& p : parts) {
    s.ce += p.ce * p.masked;
    s.distill += p.distill;
    s.masked += p.masked;
    correct += p.correct;
  }
  s.ce /= s.masked;
  s.distill /= static_cast<double>(parts.size());
  s.accuracy = static_cast<double>(correct) / s.masked;
  return s;
}

template <class Scalar>
std::vector<StepLog> train_loop(const std::vector<TrainExample<Scalar>>& examples, const TrainConfig& cfg,
                                ModelParams<Scalar>& params, const TrainHooks<Scalar>& hooks) {
  cfg.validate();
  require(!examples.empty(), "train_loop: dataset is empty");
  for (const auto& ex : examples)
    require(ex.bundle.instruct_count == params.config.instruct_tokens,
            "train_loop: examples carry " + std::to_string(ex.bundle.instruct_count) + " instruct slots, model has " +
                std::to_string(params.config.instruct_tokens));

  OptState<Scalar> opt = OptState<Scalar>::zeros(params.config);
  std::mt19937_64 rng(cfg.seed);
  std::vector<int> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  std::vector<StepLog> log;
  for (int step = 1; step <= cfg.steps; ++step) {
    std::vector<const TrainExample<Scalar>*> batch;
    for (int b = 0; b < cfg.batch_size && b < static_cast<int>(examples.size()); ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(&examples[static_cast<std::size_t>(order[cursor++])]);
    }

    GradientResult<Scalar> g = batch_gradients(params, batch, cfg.lambda_distill, cfg.threads);
    if (!std::isfinite(g.loss.total)) throw NumericError("train_loop: non-finite loss at step " + std::to_string(step));

    if (cfg.instruct_mode == InstructMode::joint) {
      adamw_step(params, g.grads, opt, cfg);
    } else {
      if (!g.grads.instruct.allFinite()) throw NumericError("train_loop: non-finite instruct gradient");
      instruct_token_update(params.instruct, g.grads.instruct, cfg.lr);
    }

    StepLog row{step, g.loss.ce, g.loss.distill, g.loss.total, cfg.lr,
                static_cast<double>(g.loss.correct) / g.loss.masked};
    log.push_back(row);
    if (hooks.on_step) hooks.on_step(row);
    if (hooks.on_checkpoint && cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 && step != cfg.steps)
      hooks.on_checkpoint(step, params);

    if (cfg.stop_at_accuracy <= 1.0 && step % cfg.accuracy_check_interval == 0) {
      const DatasetScore score = score_examples(params, examples, cfg.lambda_distill, cfg.threads);
      if (score.accuracy >= cfg.stop_at_accuracy) break;
    }
  }
  if (hooks.on_checkpoint) hooks.on_checkpoint(log.empty() ? 0 : log.back().step, params);
  return log;
}

#define TOKENAR_INSTANTIATE(S)                                                                                        \
  template void adamw_step<S>(ModelParams<S>&, const ModelParams<S>&, OptState<S>&, const TrainConfig&);             \
  template void instruct_token_update<S>(Mat<S>&, const Mat<S>&, double);                                            \
  template std::vector<TrainExample<S>> prepare_examples<S>(const std::vector<SceneSample>&, const SequenceLayout&,   \
                                                            const TokenizerSpec&, const Eigen::MatrixXd&);            \
  template GradientResult<S> batch_gradients<S>(const ModelParams<S>&, const std::vector<const TrainExample<S>*>&,    \
                                                double, int);                                                         \
  template DatasetScore score_examples<S>(const ModelParams<S>&, const std::vector<TrainExample<S>>&, double, int);   \
  template std::vector<StepLog> train_loop<S>(const std::vector<TrainExample<S>>&, const TrainConfig&,               \
                                              ModelParams<S>&, const TrainHooks<S>&);

TOKENAR_INSTANTIATE(float)
TOKENAR_INSTANTIATE(double)

}  // namespace tokenar
