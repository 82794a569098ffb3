#pragma once

#include "tokenar/tokenizer.hpp"
#include "tokenar/vocab.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <random>
#include <vector>

namespace tokenar {

enum class Shape { square = 0, disc = 1, triangle = 2 };

struct SubjectSpec {
  int class_id = 0;
  Shape shape = Shape::square;
  std::vector<int> signature;  // 2..4 codebook indices
  std::uint64_t pose_seed = 0;

  bool operator==(const SubjectSpec&) const = default;
};

// Token-cell placement of a subject's 3x3 frame, rotated by quarter turns.
struct Placement {
  int row = 0;
  int col = 0;
  int quarter_turns = 0;

  bool operator==(const Placement&) const = default;
};

// Scene size at token resolution plus the roles the palette indices play.
struct SceneGeometry {
  int grid = 8;    // token rows == token cols
  int patch = 4;   // pixels per token side
  int extent = 3;  // subject frame side, in cells

  int image_size() const { return grid * patch; }
};

// Palette partition: signatures draw from [0, signature_end); scenery and
// the two reserved fills sit at the top of the codebook.
struct PaletteRoles {
  int K = 64;

  int blank() const { return K - 1; }
  int backdrop() const { return K - 2; }
  int scenery_count() const { return K / 8 < 2 ? 2 : K / 8; }
  int scenery_begin() const { return K - 2 - scenery_count(); }
  int signature_end() const { return scenery_begin(); }
};

struct SceneSample {
  std::array<ImageGrid, 2> ref_images;
  ImageGrid background;
  ImageGrid target;
  std::array<MaskGrid, 2> masks;      // target ownership, token resolution
  std::array<MaskGrid, 2> ref_masks;  // reference foreground, token resolution
  int relation_id = 0;
  std::vector<int> prompt;
  std::array<SubjectSpec, 2> subjects;
  std::uint64_t bg_seed = 0;
  std::array<Placement, 2> target_placement;
  int K = 0;  // codebook size the tokens index into

  // Quantized views of the images above.
  std::array<TokenGrid, 2> ref_tokens;
  TokenGrid background_tokens;
  TokenGrid target_tokens;

  bool operator==(const SceneSample&) const = default;
};

using FeatureVec = Eigen::VectorXd;

// Cells covered by a subject frame at the given placement, with the local
// (unrotated) coordinates each cell was painted from.
struct ShapeCell {
  int row, col;
  int local_row, local_col;
};
std::vector<ShapeCell> shape_cells(Shape shape, const Placement& placement, int extent);

SceneSample compose_scene(const Codebook& codebook, const SubjectSpec& a, const SubjectSpec& b, int relation_id,
                          std::uint64_t bg_seed, const SceneGeometry& geometry = {});

// Draws a subject pair with disjoint signatures and a random relation.
SceneSample random_scene(const Codebook& codebook, std::mt19937_64& rng, const SceneGeometry& geometry = {});

FeatureVec region_histogram(const TokenGrid& tokens, const MaskGrid& mask, int K);
double similarity(const FeatureVec& a, const FeatureVec& b);

// Per-subject foreground-vs-reference similarities; filter_sample takes their min.
std::array<double, 2> subject_similarities(const SceneSample& sample);
bool filter_sample(const SceneSample& sample, double delta);

}  // namespace tokenar
