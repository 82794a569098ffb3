#pragma once

// Small models and samples shared by the unit and acceptance tests.

#include "tokenar/loss.hpp"
#include "tokenar/model.hpp"
#include "tokenar/sequence.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace tiny {

using namespace tokenar;

inline constexpr int kK = 16;

inline ModelConfig config() {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.image_tokens = kK;
  c.vocab_size = Vocabulary{kK}.size();
  c.max_seq_len = 64;
  c.instruct_tokens = 3;
  c.distill_dim = 3;
  return c;
}

inline SequenceLayout layout() { return SequenceLayout{2, 4, 3, kPromptLength, true}; }

// Token-level sample on a 2x2 grid; only the fields sequences are built from.
inline SceneSample sample(std::mt19937_64& rng, int grid = 2) {
  auto grid_of = [&] {
    TokenGrid g(grid, grid);
    for (int& v : g.data) v = static_cast<int>(rng() % kK);
    return g;
  };
  SceneSample s;
  s.K = kK;
  s.ref_tokens = {grid_of(), grid_of()};
  s.background_tokens = grid_of();
  s.target_tokens = grid_of();
  const int a = static_cast<int>(rng() % kNumClasses);
  s.prompt = encode_prompt(Vocabulary{kK}, a, static_cast<int>(rng() % kNumRelations), (a + 1) % kNumClasses);
  for (std::size_t x = 0; x < 2; ++x) {
    s.masks[x] = MaskGrid(grid, grid, 0);
    s.subjects[x].signature = {static_cast<int>(2 * x), static_cast<int>(2 * x + 1)};
  }
  s.masks[0][0] = 1;
  s.masks[1][grid * grid - 1] = 1;
  return s;
}

// Randomizes the zero-initialized tensors so every path carries signal.
template <class S>
void perturb(ModelParams<S>& p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.3);
  p.instruct = p.instruct.unaryExpr([&](S) { return static_cast<S>(n(rng)); });
  p.index_table = p.index_table.unaryExpr([&](S) { return static_cast<S>(n(rng)); });
  for (auto& L : p.layers) {
    L.b1 = L.b1.unaryExpr([&](S) { return static_cast<S>(0.1 * n(rng)); });
    L.b2 = L.b2.unaryExpr([&](S) { return static_cast<S>(0.1 * n(rng)); });
    L.attn_norm = L.attn_norm.unaryExpr([&](S v) { return static_cast<S>(v + 0.2 * n(rng)); });
    L.mlp_norm = L.mlp_norm.unaryExpr([&](S v) { return static_cast<S>(v + 0.2 * n(rng)); });
  }
  p.final_norm = p.final_norm.unaryExpr([&](S v) { return static_cast<S>(v + 0.2 * n(rng)); });
}

struct GradCheck {
  int checked = 0;
  int failed = 0;
  double worst = 0.0;
  std::string worst_at;
  std::set<std::string> tensors;
};

// Central differences in float64 on the exact parameter values of `params`,
// compared against analytic gradients computed in Scalar. Relative error uses
// max(|analytic|, |numeric|, floor) as the denominator.
template <class S>
GradCheck grad_check(const ModelParams<S>& params, const SequenceBundle& bundle, const Eigen::MatrixXd& teacher,
                     int target_offset, double lambda, int per_tensor, std::uint64_t seed, double tol, double floor,
                     double h = 1e-5) {
  const Mat<S> teacher_s = teacher.cast<S>();
  LossSpec<S> spec{lambda, &teacher_s, target_offset, 1.0, 1.0};
  const ModelParams<S> analytic = gradients(params, bundle, spec).grads;

  ModelParams<double> base = params.template cast<double>();
  const Mat<double> teacher_d = teacher;
  const LossSpec<double> dspec{lambda, &teacher_d, target_offset, 1.0, 1.0};

  std::vector<const Mat<S>*> ga;
  analytic.visit([&](const std::string&, const Mat<S>& t) { ga.push_back(&t); });

  std::mt19937_64 rng(seed);
  GradCheck out;
  std::size_t ti = 0;
  base.visit([&](const std::string& name, Mat<double>& t) {
    const Mat<S>& g = *ga[ti++];
    for (int k = 0; k < per_tensor; ++k) {
      const Eigen::Index i = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(t.size()));
      const double keep = t.data()[i];
      t.data()[i] = keep + h;
      const double up = evaluate_loss(base, bundle, dspec).total;
      t.data()[i] = keep - h;
      const double down = evaluate_loss(base, bundle, dspec).total;
      t.data()[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double a = static_cast<double>(g.data()[i]);
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++out.checked;
      out.tensors.insert(name);
      if (rel >= tol) ++out.failed;
      if (rel > out.worst) {
        out.worst = rel;
        out.worst_at = name + "[" + std::to_string(i) + "] analytic " + std::to_string(a) + " numeric " +
                       std::to_string(numeric);
      }
    }
  });
  return out;
}

}  // namespace tiny
