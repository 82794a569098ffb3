#include "tokenar/scene.hpp"

#include "tokenar/error.hpp"
#include "tokenar/sequence.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace tokenar {

namespace {

// Offset of subject B's frame relative to subject A's, and paint order.
struct RelationLayout {
  int drow;
  int dcol;
  bool b_on_top;
};

constexpr std::array<RelationLayout, kNumRelations> kRelationLayouts = {{
    {0, 4, true},    // left of
    {0, -4, true},   // right of
    {4, 0, true},    // above
    {-4, 0, true},   // below
    {4, 4, true},    // upper left of
    {-4, -4, true},  // lower right of
    {0, 3, true},    // next to
    {3, 0, true},    // on top of
    {1, 2, false},   // in front of: A occludes B
    {1, -2, true},   // behind: B occludes A
    {-3, 3, true},   // lower left of
}};

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

bool in_frame(Shape shape, int r, int c, int extent) {
  switch (shape) {
    case Shape::square:
      return true;
    case Shape::disc: {
      const int mid = extent / 2;
      return std::abs(r - mid) + std::abs(c - mid) <= mid;
    }
    case Shape::triangle:
      return c <= r;
  }
  return false;
}

void validate_subject(const SubjectSpec& s, const PaletteRoles& roles, const char* which) {
  const std::string tag = std::string("compose_scene: subject ") + which;
  require(s.class_id >= 0 && s.class_id < kNumClasses, tag + " class_id out of range");
  require(s.signature.size() >= 2 && s.signature.size() <= 4, tag + " signature must hold 2..4 indices");
  for (int idx : s.signature)
    require(idx >= 0 && idx < roles.signature_end(),
            tag + " signature index " + std::to_string(idx) + " outside signature range [0," +
                std::to_string(roles.signature_end()) + ")");
}

void paint(TokenGrid& tokens, MaskGrid* owner, std::uint8_t owner_id, const SubjectSpec& subject,
           const Placement& at, int extent) {
  const int len = static_cast<int>(subject.signature.size());
  for (const ShapeCell& cell : shape_cells(subject.shape, at, extent)) {
    tokens(cell.row, cell.col) = subject.signature[static_cast<std::size_t>((cell.local_row + cell.local_col) % len)];
    if (owner) (*owner)(cell.row, cell.col) = owner_id;
  }
}

}  // namespace

std::vector<ShapeCell> shape_cells(Shape shape, const Placement& placement, int extent) {
  std::vector<ShapeCell> cells;
  const int last = extent - 1;
  for (int r = 0; r < extent; ++r) {
    for (int c = 0; c < extent; ++c) {
      if (!in_frame(shape, r, c, extent)) continue;
      int rr = r, cc = c;
      for (int t = 0; t < ((placement.quarter_turns % 4) + 4) % 4; ++t) {
        const int nr = cc, nc = last - rr;
        rr = nr;
        cc = nc;
      }
      cells.push_back({placement.row + rr, placement.col + cc, r, c});
    }
  }
  return cells;
}

SceneSample compose_scene(const Codebook& codebook, const SubjectSpec& a, const SubjectSpec& b, int relation_id,
                          std::uint64_t bg_seed, const SceneGeometry& geometry) {
  const PaletteRoles roles{codebook.size()};
  require(roles.signature_end() >= 8, "compose_scene: codebook too small for scene palette roles");
  require(relation_id >= 0 && relation_id < kNumRelations, "compose_scene: relation_id out of range");
  validate_subject(a, roles, "A");
  validate_subject(b, roles, "B");
  for (int x : a.signature)
    require(std::find(b.signature.begin(), b.signature.end(), x) == b.signature.end(),
            "compose_scene: subject signatures overlap at index " + std::to_string(x));

  const RelationLayout layout = kRelationLayouts[static_cast<std::size_t>(relation_id)];
  const int G = geometry.grid;
  const int E = geometry.extent;
  const int span = G - E;
  require(span >= std::max(std::abs(layout.drow), std::abs(layout.dcol)), "compose_scene: grid too small for relation");

  // Pose: quarter turns from each subject's own seed; the pair anchor from both.
  const Placement canonical{span / 2, span / 2, 0};
  std::mt19937_64 pose_rng(splitmix(a.pose_seed) ^ splitmix(b.pose_seed + 0x51ED27ull) ^
                           static_cast<std::uint64_t>(relation_id));
  const int row_lo = std::max(0, -layout.drow), row_hi = span - std::max(0, layout.drow);
  const int col_lo = std::max(0, -layout.dcol), col_hi = span - std::max(0, layout.dcol);
  const int ra = row_lo + static_cast<int>(pose_rng() % static_cast<std::uint64_t>(row_hi - row_lo + 1));
  const int ca = col_lo + static_cast<int>(pose_rng() % static_cast<std::uint64_t>(col_hi - col_lo + 1));
  std::array<Placement, 2> place = {
      Placement{ra, ca, static_cast<int>(splitmix(a.pose_seed) % 4)},
      Placement{ra + layout.drow, ca + layout.dcol, static_cast<int>(splitmix(b.pose_seed) % 4)}};
  for (Placement& p : place)
    if (p == canonical) p.quarter_turns = 1;

  SceneSample s;
  s.K = codebook.size();
  s.subjects = {a, b};
  s.relation_id = relation_id;
  s.bg_seed = bg_seed;
  s.target_placement = place;
  s.prompt = encode_prompt(Vocabulary{codebook.size()}, a.class_id, relation_id, b.class_id);

  // Scenery: 2-3 bands of scenery colors.
  std::mt19937_64 bg_rng(bg_seed);
  std::vector<int> pool(static_cast<std::size_t>(roles.scenery_count()));
  std::iota(pool.begin(), pool.end(), roles.scenery_begin());
  std::shuffle(pool.begin(), pool.end(), bg_rng);
  const int bands = std::min<int>(2 + static_cast<int>(bg_rng() % 2), static_cast<int>(pool.size()));
  const bool vertical = bg_rng() % 2 == 1;
  std::vector<int> cuts;
  for (int i = 1; i < bands; ++i) cuts.push_back(1 + static_cast<int>(bg_rng() % static_cast<std::uint64_t>(G - 1)));
  std::sort(cuts.begin(), cuts.end());

  TokenGrid target(G, G);
  for (int r = 0; r < G; ++r)
    for (int c = 0; c < G; ++c) {
      const int coord = vertical ? c : r;
      const auto band = std::upper_bound(cuts.begin(), cuts.end(), coord) - cuts.begin();
      target(r, c) = pool[static_cast<std::size_t>(band)];
    }

  MaskGrid owner(G, G, 0);
  const int bottom = layout.b_on_top ? 0 : 1;
  const int top = 1 - bottom;
  paint(target, &owner, static_cast<std::uint8_t>(bottom + 1), s.subjects[static_cast<std::size_t>(bottom)],
        place[static_cast<std::size_t>(bottom)], E);
  paint(target, &owner, static_cast<std::uint8_t>(top + 1), s.subjects[static_cast<std::size_t>(top)],
        place[static_cast<std::size_t>(top)], E);

  TokenGrid background = target;
  for (int i = 0; i < 2; ++i) s.masks[static_cast<std::size_t>(i)] = MaskGrid(G, G, 0);
  for (int k = 0; k < owner.size(); ++k) {
    if (owner[k] == 0) continue;
    s.masks[static_cast<std::size_t>(owner[k] - 1)][k] = 1;
    background[k] = roles.blank();
  }

  for (std::size_t i = 0; i < 2; ++i) {
    TokenGrid ref(G, G, roles.backdrop());
    MaskGrid ref_mask(G, G, 0);
    paint(ref, &ref_mask, 1, s.subjects[i], canonical, E);
    s.ref_tokens[i] = ref;
    s.ref_masks[i] = ref_mask;
    s.ref_images[i] = dequantize(ref, codebook, geometry.patch);
  }
  s.target_tokens = target;
  s.background_tokens = background;
  s.target = dequantize(target, codebook, geometry.patch);
  s.background = dequantize(background, codebook, geometry.patch);
  return s;
}

SceneSample random_scene(const Codebook& codebook, std::mt19937_64& rng, const SceneGeometry& geometry) {
  const PaletteRoles roles{codebook.size()};
  std::vector<int> pool(static_cast<std::size_t>(roles.signature_end()));
  std::iota(pool.begin(), pool.end(), 0);
  std::shuffle(pool.begin(), pool.end(), rng);

  auto take = [&](std::size_t& cursor) {
    const std::size_t len = 2 + rng() % 3;
    std::vector<int> sig(pool.begin() + static_cast<std::ptrdiff_t>(cursor),
                         pool.begin() + static_cast<std::ptrdiff_t>(cursor + len));
    cursor += len;
    return sig;
  };

  std::size_t cursor = 0;
  SubjectSpec a, b;
  a.class_id = static_cast<int>(rng() % kNumClasses);
  b.class_id = static_cast<int>((a.class_id + 1 + rng() % (kNumClasses - 1)) % kNumClasses);
  a.shape = static_cast<Shape>(rng() % 3);
  b.shape = static_cast<Shape>(rng() % 3);
  a.signature = take(cursor);
  b.signature = take(cursor);
  a.pose_seed = rng();
  b.pose_seed = rng();
  const int relation = static_cast<int>(rng() % kNumRelations);
  const std::uint64_t bg_seed = rng();
  return compose_scene(codebook, a, b, relation, bg_seed, geometry);
}

FeatureVec region_histogram(const TokenGrid& tokens, const MaskGrid& mask, int K) {
  require(tokens.rows == mask.rows && tokens.cols == mask.cols, "region_histogram: mask/token grid dimension mismatch");
  FeatureVec h = FeatureVec::Zero(K);
  int count = 0;
  for (int i = 0; i < tokens.size(); ++i) {
    if (!mask[i]) continue;
    require(tokens[i] >= 0 && tokens[i] < K, "region_histogram: token outside [0,K)");
    h[tokens[i]] += 1.0;
    ++count;
  }
  if (count > 0) h /= count;
  return h;
}

double similarity(const FeatureVec& a, const FeatureVec& b) {
  require(a.size() == b.size(), "similarity: dimension mismatch");
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  if (a == b) return 1.0;
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

std::array<double, 2> subject_similarities(const SceneSample& sample) {
  std::array<double, 2> out{};
  for (std::size_t i = 0; i < 2; ++i) {
    const FeatureVec fg = region_histogram(sample.target_tokens, sample.masks[i], sample.K);
    const FeatureVec ref = region_histogram(sample.ref_tokens[i], sample.ref_masks[i], sample.K);
    out[i] = similarity(fg, ref);
  }
  return out;
}

bool filter_sample(const SceneSample& sample, double delta) {
  require(delta >= 0.0, "filter_sample: delta must be non-negative");
  const auto sims = subject_similarities(sample);
  return std::min(sims[0], sims[1]) >= delta;
}

}  // namespace tokenar
