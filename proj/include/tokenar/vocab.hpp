#pragma once

#include <array>
#include <string_view>

namespace tokenar {

inline constexpr std::array<std::string_view, 8> kClassNames = {"cat", "dog", "cup", "ball", "box", "lamp", "plant", "book"};

inline constexpr std::array<std::string_view, 11> kRelationNames = {
    "left of", "right of", "above", "below", "upper left of", "lower right of",
    "next to", "on top of", "in front of", "behind", "lower left of"};

inline constexpr int kNumClasses = static_cast<int>(kClassNames.size());
inline constexpr int kNumRelations = static_cast<int>(kRelationNames.size());

// Id layout: [0,K) image tokens | classes | relations | instruct placeholder.
struct Vocabulary {
  int K = 64;

  constexpr int image_tokens() const { return K; }
  constexpr int class_id(int cls) const { return K + cls; }
  constexpr int relation_id(int rel) const { return K + kNumClasses + rel; }
  constexpr int instruct_placeholder() const { return K + kNumClasses + kNumRelations; }
  constexpr int size() const { return instruct_placeholder() + 1; }
  constexpr bool is_image(int id) const { return id >= 0 && id < K; }
};

}  // namespace tokenar
