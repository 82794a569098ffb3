#pragma once

#include "tokenar/loss.hpp"
#include "tokenar/model.hpp"
#include "tokenar/scene.hpp"
#include "tokenar/sequence.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace tokenar {

enum class InstructMode {
  joint,       // instruct rows ride along in AdamW with every other tensor
  standalone,  // model frozen; instruct rows follow plain gradient descent
};

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.05;
  double eps = 1e-8;
  double lambda_distill = 0.5;
  int batch_size = 8;
  int steps = 1000;
  std::uint64_t seed = 0;
  std::uint64_t teacher_seed = 7;
  InstructMode instruct_mode = InstructMode::joint;
  int checkpoint_interval = 0;  // 0 disables intermediate checkpoints
  int threads = 1;
  // Stop once teacher-forced accuracy over the whole training set reaches this
  // (checked every accuracy_check_interval steps). Values > 1 disable it.
  double stop_at_accuracy = 2.0;
  int accuracy_check_interval = 25;

  void validate() const;
};

template <class Scalar>
struct OptState {
  ModelParams<Scalar> m;
  ModelParams<Scalar> v;
  long step = 0;

  static OptState zeros(const ModelConfig& cfg) { return {ModelParams<Scalar>::zeros(cfg), ModelParams<Scalar>::zeros(cfg), 0}; }
};

// Decoupled weight decay, then bias-corrected Adam moments.
template <class Scalar>
void adamw_step(ModelParams<Scalar>& params, const ModelParams<Scalar>& grads, OptState<Scalar>& opt,
                const TrainConfig& cfg);

// P <- P - lr * grad_P.
template <class Scalar>
void instruct_token_update(Mat<Scalar>& instruct, const Mat<Scalar>& grad, double lr);

// A training example with its teacher features precomputed.
template <class Scalar>
struct TrainExample {
  SequenceBundle bundle;
  Mat<Scalar> teacher;
  int target_offset = 0;
};

template <class Scalar>
std::vector<TrainExample<Scalar>> prepare_examples(const std::vector<SceneSample>& samples, const SequenceLayout& layout,
                                                   const TokenizerSpec& tokenizer, const Eigen::MatrixXd& teacher_projection);

struct StepLog {
  int step = 0;
  double ce = 0.0;
  double distill = 0.0;
  double total = 0.0;
  double lr = 0.0;
  double accuracy = -1.0;  // batch teacher-forced accuracy over masked tokens
};

// Batch loss and summed gradients; CE is weighted by masked counts, distill averaged over samples.
template <class Scalar>
GradientResult<Scalar> batch_gradients(const ModelParams<Scalar>& params, const std::vector<const TrainExample<Scalar>*>& batch,
                                       double lambda_distill, int threads);

struct DatasetScore {
  double ce = 0.0;
  double distill = 0.0;
  double accuracy = 0.0;  // teacher-forced argmax accuracy over masked tokens
  int masked = 0;
};

template <class Scalar>
DatasetScore score_examples(const ModelParams<Scalar>& params, const std::vector<TrainExample<Scalar>>& examples,
                            double lambda_distill, int threads);

template <class Scalar>
struct TrainHooks {
  std::function<void(const StepLog&)> on_step;
  std::function<void(int step, const ModelParams<Scalar>&)> on_checkpoint;
};

template <class Scalar>
std::vector<StepLog> train_loop(const std::vector<TrainExample<Scalar>>& examples, const TrainConfig& cfg,
                                ModelParams<Scalar>& params, const TrainHooks<Scalar>& hooks = {});

}  // namespace tokenar
