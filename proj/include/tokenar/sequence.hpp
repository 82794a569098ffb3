#pragma once

#include "tokenar/error.hpp"
#include "tokenar/scene.hpp"
#include "tokenar/tokenizer.hpp"
#include "tokenar/vocab.hpp"

#include <Eigen/Core>

#include <string>
#include <vector>

namespace tokenar {

inline constexpr int kMaxSubjects = 4;
inline constexpr int kIndexTableSize = kMaxSubjects + 3;
inline constexpr int kPromptLength = 3;

// Segment order: [instruct | prompt | ref_1..ref_m | background] then the
// predicted span [ref_1..ref_m | target] (or just [target] without ITD).
struct SequenceLayout {
  int m = 2;
  int n = 64;
  int M = 30;
  int prompt_len = kPromptLength;
  bool itd_enabled = true;

  void validate() const;

  int prompt_begin() const { return M; }
  int ref_begin(int r) const { return M + prompt_len + r * n; }  // r is 0-based
  int background_begin() const { return M + prompt_len + m * n; }
  int context_length() const { return M + prompt_len + (m + 1) * n; }
  int predicted_length() const { return itd_enabled ? (m + 1) * n : n; }
  int total_length() const { return context_length() + predicted_length(); }
  // Offset of the target image inside the predicted span.
  int target_offset() const { return predicted_length() - n; }

  int background_index() const { return m + 1; }
  int target_index() const { return m + 2; }
};

struct SequenceBundle {
  std::vector<int> context_ids;
  std::vector<int> target_ids;
  std::vector<int> index_ids;     // context_ids.size() + target_ids.size()
  std::vector<int> position_ids;  // same length as index_ids
  std::vector<std::uint8_t> loss_mask;  // over target_ids
  int instruct_count = 0;

  int context_length() const { return static_cast<int>(context_ids.size()); }
  int predicted_length() const { return static_cast<int>(target_ids.size()); }
  int total_length() const { return context_length() + predicted_length(); }
  // Token id at absolute position p of the full sequence.
  int id_at(int p) const {
    return p < context_length() ? context_ids[static_cast<std::size_t>(p)]
                                : target_ids[static_cast<std::size_t>(p - context_length())];
  }
};

struct TokenizerSpec {
  Codebook codebook;
  int patch = 4;
};

std::vector<int> encode_prompt(const Vocabulary& vocab, int class_a, int relation_id, int class_b);

SequenceBundle build_training_sequence(const SceneSample& sample, const SequenceLayout& layout,
                                       const TokenizerSpec& tokenizer);

// Same layout built from the sample's stored token grids (no re-quantization).
SequenceBundle build_sequence_from_tokens(const SceneSample& sample, const SequenceLayout& layout);

template <class Scalar>
using IndexTable = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Row i of the result is table row index_ids[i].
template <class Scalar>
IndexTable<Scalar> assign_index_embedding(const std::vector<int>& index_ids, const IndexTable<Scalar>& table) {
  IndexTable<Scalar> out(static_cast<Eigen::Index>(index_ids.size()), table.cols());
  for (std::size_t i = 0; i < index_ids.size(); ++i) {
    const int id = index_ids[i];
    require(id >= 0 && id < table.rows(),
            "assign_index_embedding: id " + std::to_string(id) + " outside table of " + std::to_string(table.rows()));
    out.row(static_cast<Eigen::Index>(i)) = table.row(id);
  }
  return out;
}

}  // namespace tokenar
