#include "tokenar/sequence.hpp"

#include <string>

namespace tokenar {

void SequenceLayout::validate() const {
  require(m >= 1 && m <= kMaxSubjects, "SequenceLayout: m must be in [1," + std::to_string(kMaxSubjects) + "]");
  require(n > 0, "SequenceLayout: n must be positive");
  require(M >= 0, "SequenceLayout: M must be non-negative");
  require(prompt_len >= 0, "SequenceLayout: prompt_len must be non-negative");
}

std::vector<int> encode_prompt(const Vocabulary& vocab, int class_a, int relation_id, int class_b) {
  require(class_a >= 0 && class_a < kNumClasses, "encode_prompt: unknown class id " + std::to_string(class_a));
  require(class_b >= 0 && class_b < kNumClasses, "encode_prompt: unknown class id " + std::to_string(class_b));
  require(relation_id >= 0 && relation_id < kNumRelations,
          "encode_prompt: unknown relation id " + std::to_string(relation_id));
  return {vocab.class_id(class_a), vocab.relation_id(relation_id), vocab.class_id(class_b)};
}

namespace {

SequenceBundle assemble(const Vocabulary& vocab, const std::vector<int>& prompt, const std::vector<const TokenGrid*>& refs,
                        const TokenGrid& background, const TokenGrid& target, const SequenceLayout& layout) {
  layout.validate();
  require(static_cast<int>(refs.size()) == layout.m,
          "build_training_sequence: layout expects m=" + std::to_string(layout.m) + " references, sample has " +
              std::to_string(refs.size()));
  require(static_cast<int>(prompt.size()) == layout.prompt_len, "build_training_sequence: prompt length mismatch");
  auto check_grid = [&](const TokenGrid& g, const char* what) {
    require(g.size() == layout.n, std::string("build_training_sequence: ") + what + " has " + std::to_string(g.size()) +
                                      " tokens, layout n=" + std::to_string(layout.n));
  };
  for (const TokenGrid* r : refs) check_grid(*r, "reference");
  check_grid(background, "background");
  check_grid(target, "target");

  SequenceBundle b;
  b.instruct_count = layout.M;
  b.context_ids.reserve(static_cast<std::size_t>(layout.context_length()));
  b.index_ids.reserve(static_cast<std::size_t>(layout.total_length()));

  auto push_context = [&](int id, int index) {
    b.context_ids.push_back(id);
    b.index_ids.push_back(index);
  };
  auto push_target = [&](int id, int index) {
    b.target_ids.push_back(id);
    b.index_ids.push_back(index);
  };

  for (int i = 0; i < layout.M; ++i) push_context(vocab.instruct_placeholder(), 0);
  for (int id : prompt) push_context(id, 0);
  for (int r = 0; r < layout.m; ++r)
    for (int t : refs[static_cast<std::size_t>(r)]->data) push_context(t, r + 1);
  for (int t : background.data) push_context(t, layout.background_index());

  if (layout.itd_enabled)
    for (int r = 0; r < layout.m; ++r)
      for (int t : refs[static_cast<std::size_t>(r)]->data) push_target(t, r + 1);
  for (int t : target.data) push_target(t, layout.target_index());

  b.position_ids.resize(b.index_ids.size());
  for (std::size_t i = 0; i < b.position_ids.size(); ++i) b.position_ids[i] = static_cast<int>(i);
  b.loss_mask.assign(b.target_ids.size(), 1);
  return b;
}

}  // namespace

SequenceBundle build_training_sequence(const SceneSample& sample, const SequenceLayout& layout,
                                       const TokenizerSpec& tokenizer) {
  require(tokenizer.codebook.size() == sample.K || sample.K == 0,
          "build_training_sequence: tokenizer codebook size differs from sample palette");
  std::vector<TokenGrid> refs;
  for (const ImageGrid& img : sample.ref_images) refs.push_back(quantize(img, tokenizer.codebook, tokenizer.patch));
  const TokenGrid background = quantize(sample.background, tokenizer.codebook, tokenizer.patch);
  const TokenGrid target = quantize(sample.target, tokenizer.codebook, tokenizer.patch);
  std::vector<const TokenGrid*> ref_ptrs;
  for (const TokenGrid& r : refs) ref_ptrs.push_back(&r);
  return assemble(Vocabulary{tokenizer.codebook.size()}, sample.prompt, ref_ptrs, background, target, layout);
}

SequenceBundle build_sequence_from_tokens(const SceneSample& sample, const SequenceLayout& layout) {
  std::vector<const TokenGrid*> ref_ptrs;
  for (const TokenGrid& r : sample.ref_tokens) ref_ptrs.push_back(&r);
  return assemble(Vocabulary{sample.K}, sample.prompt, ref_ptrs, sample.background_tokens, sample.target_tokens, layout);
}

}  // namespace tokenar
