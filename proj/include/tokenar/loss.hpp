#pragma once

#include "tokenar/error.hpp"
#include "tokenar/tokenizer.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace tokenar {

struct CeResult {
  double mean = 0.0;
  Eigen::VectorXd per_token;  // NLL per row, zero where the mask is off
  int count = 0;
};

// Mean negative log-likelihood over masked rows of a (rows x V) logit matrix.
template <class Derived>
CeResult ce_loss(const Eigen::MatrixBase<Derived>& logits, const std::vector<int>& targets,
                 const std::vector<std::uint8_t>& mask) {
  require(static_cast<std::size_t>(logits.rows()) == targets.size() && targets.size() == mask.size(),
          "ce_loss: logits/targets/mask length mismatch");
  CeResult r;
  r.per_token = Eigen::VectorXd::Zero(logits.rows());
  double sum = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    const int t = targets[static_cast<std::size_t>(i)];
    require(t >= 0 && t < logits.cols(), "ce_loss: target id " + std::to_string(t) + " outside logits width");
    const Eigen::RowVectorXd row = logits.row(i).template cast<double>();
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    r.per_token[i] = lse - row[t];
    sum += r.per_token[i];
    ++r.count;
  }
  require(r.count > 0, "ce_loss: loss mask selects no positions");
  r.mean = sum / r.count;
  return r;
}

// Mean squared error between projected features (rows x d) * A (d x f) and the teacher (rows x f).
template <class DF, class DA, class DT>
double distill_loss(const Eigen::MatrixBase<DF>& features, const Eigen::MatrixBase<DA>& projection,
                    const Eigen::MatrixBase<DT>& teacher) {
  require(features.cols() == projection.rows(), "distill_loss: feature width does not match projection rows");
  require(features.rows() == teacher.rows() && projection.cols() == teacher.cols(),
          "distill_loss: projected shape differs from teacher shape");
  const Eigen::MatrixXd diff =
      (features.template cast<double>() * projection.template cast<double>()) - teacher.template cast<double>();
  return diff.squaredNorm() / static_cast<double>(diff.size());
}

inline double total_loss(double ce, double distill, double lambda_distill) { return ce + lambda_distill * distill; }

// Frozen random map from token one-hots to teacher features (f x K).
Eigen::MatrixXd make_teacher_projection(int K, int feature_dim, std::uint64_t seed);

// One feature row per target cell: projection applied to the mean one-hot of
// the aligned 2x2 token block containing that cell.
Eigen::MatrixXd teacher_features(const TokenGrid& target, const Eigen::MatrixXd& projection);

}  // namespace tokenar
