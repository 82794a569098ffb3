#pragma once

// Independent filter implementation for cross-checking filter_sample.

#include "tokenar/scene.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace oracle {

using namespace tokenar;

// Histogram cosine written from scratch with plain arrays.
inline double sim(const TokenGrid& tokens, const MaskGrid& mask, const TokenGrid& ref, const MaskGrid& ref_mask, int K) {
  std::vector<double> a(static_cast<std::size_t>(K), 0.0), b(static_cast<std::size_t>(K), 0.0);
  for (int i = 0; i < tokens.size(); ++i)
    if (mask[i]) a[static_cast<std::size_t>(tokens[i])] += 1;
  for (int i = 0; i < ref.size(); ++i)
    if (ref_mask[i]) b[static_cast<std::size_t>(ref[i])] += 1;
  double sa = 0, sb = 0;
  for (int k = 0; k < K; ++k) {
    sa += a[static_cast<std::size_t>(k)];
    sb += b[static_cast<std::size_t>(k)];
  }
  if (sa == 0 || sb == 0) return 0;
  // proportional integer counts mean identical distributions
  bool same = true;
  for (int k = 0; k < K; ++k) same = same && a[static_cast<std::size_t>(k)] * sb == b[static_cast<std::size_t>(k)] * sa;
  if (same) return 1.0;
  double dot = 0, na = 0, nb = 0;
  for (int k = 0; k < K; ++k) {
    dot += a[static_cast<std::size_t>(k)] * b[static_cast<std::size_t>(k)];
    na += a[static_cast<std::size_t>(k)] * a[static_cast<std::size_t>(k)];
    nb += b[static_cast<std::size_t>(k)] * b[static_cast<std::size_t>(k)];
  }
  if (na == 0 || nb == 0) return 0;
  return dot / std::sqrt(na * nb);
}

inline bool filter(const SceneSample& s, double delta) {
  const double s0 = sim(s.target_tokens, s.masks[0], s.ref_tokens[0], s.ref_masks[0], s.K);
  const double s1 = sim(s.target_tokens, s.masks[1], s.ref_tokens[1], s.ref_masks[1], s.K);
  return std::min(s0, s1) >= delta;
}

}  // namespace oracle
