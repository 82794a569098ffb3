#include <doctest.h>

#include "tokenar/error.hpp"
#include "tokenar/eval.hpp"

#include <cmath>
#include <random>

using namespace tokenar;

namespace {

ImageGrid filled(int w, int h, double v) {
  ImageGrid img(w, h);
  img.pixels.setConstant(v);
  return img;
}

AttentionTrace one_row_trace(const Eigen::MatrixXd& row) {
  AttentionTrace t;
  t.spec.keys = {{"prompt", 0, static_cast<int>(row.cols())}};
  t.n_layers = 1;
  t.n_heads = 1;
  t.rows = {row};
  t.mass = {Eigen::VectorXd::Ones(row.rows())};
  return t;
}

AttentionTrace mass_trace(const Eigen::VectorXd& instruct, const Eigen::VectorXd& prompt) {
  AttentionTrace t;
  t.spec.keys = {{"prompt", 3, 6}, {"instruct", 0, 3}};
  t.n_layers = 1;
  t.n_heads = 1;
  t.rows = {Eigen::MatrixXd::Constant(instruct.size(), 3, 1.0 / 3), Eigen::MatrixXd::Constant(instruct.size(), 3, 1.0 / 3)};
  t.mass = {prompt, instruct};
  return t;
}

}  // namespace

TEST_CASE("psnr: cap, zero, twenty, symmetry, mask, mismatch") {
  const ImageGrid a = filled(4, 4, 0.3);
  CHECK(psnr(a, a) == kPsnrCap);
  CHECK(std::abs(psnr(filled(4, 4, 0.0), filled(4, 4, 1.0))) < 1e-12);
  CHECK(std::abs(psnr(filled(1, 1, 0.4), filled(1, 1, 0.5)) - 20.0) < 1e-9);

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u;
  ImageGrid x(8, 8), y(8, 8);
  x.pixels = x.pixels.unaryExpr([&](double) { return u(rng); });
  y.pixels = y.pixels.unaryExpr([&](double) { return u(rng); });
  CHECK(psnr(x, y) == psnr(y, x));

  // token-resolution mask selects the top-left 4x4 block only
  MaskGrid m(2, 2, 0);
  m(0, 0) = 1;
  ImageGrid z = filled(8, 8, 0.5);
  ImageGrid w = z;
  w.pixels.setConstant(0.0);
  for (int yy = 0; yy < 4; ++yy)
    for (int xx = 0; xx < 4; ++xx) w.pixels.row(yy * 8 + xx).setConstant(0.5);
  CHECK(psnr(z, w, &m) == kPsnrCap);
  CHECK(psnr(z, w) < 10.0);

  CHECK_THROWS_AS(psnr(filled(4, 4, 0), filled(4, 8, 0)), InvalidArgument);
  MaskGrid none(2, 2, 0);
  CHECK_THROWS_AS(psnr(z, w, &none), InvalidArgument);
}

TEST_CASE("token_accuracy: identical, disjoint, half") {
  TokenGrid a(2, 2), b(2, 2);
  a.data = {1, 2, 3, 4};
  b.data = {5, 6, 7, 8};
  CHECK(token_accuracy(a, a) == 1.0);
  CHECK(token_accuracy(a, b) == 0.0);
  TokenGrid h = a;
  h.data = {1, 2, 0, 0};
  CHECK(token_accuracy(h, a) == 0.5);
  MaskGrid m(2, 2, 0);
  m[0] = m[1] = 1;
  CHECK(token_accuracy(h, a, &m) == 1.0);
  CHECK_THROWS_AS(token_accuracy(a, TokenGrid(1, 4)), InvalidArgument);
}

TEST_CASE("identity_confusion: none, total swap, half") {
  SceneSample s;
  s.masks[0] = MaskGrid(2, 4, 0);
  s.masks[1] = MaskGrid(2, 4, 0);
  for (int c = 0; c < 2; ++c)
    for (int r = 0; r < 2; ++r) {
      s.masks[0](r, c) = 1;
      s.masks[1](r, c + 2) = 1;
    }
  s.subjects[0].signature = {1, 2};
  s.subjects[1].signature = {5, 6};
  TokenGrid truth(2, 4);
  truth.data = {1, 2, 5, 6, 2, 1, 6, 5};
  s.target_tokens = truth;
  CHECK(identity_confusion(truth, s) == 0.0);

  TokenGrid swapped = truth;
  swapped.data = {5, 6, 1, 2, 6, 5, 2, 1};
  CHECK(identity_confusion(swapped, s) == 1.0);

  TokenGrid a_half = truth;
  a_half(0, 0) = 5;
  a_half(1, 0) = 6;  // two of A's four cells carry B's colors
  // confusion 0.5 for A, 0 for B
  CHECK(identity_confusion(a_half, s) == doctest::Approx(0.25));
  s.masks[1] = MaskGrid(2, 4, 0);
  CHECK_THROWS_AS(identity_confusion(truth, s), InvalidArgument);
}

TEST_CASE("attn_focus_entropy: uniform, one-hot, two-way split") {
  CHECK(std::abs(attn_focus_entropy(one_row_trace(Eigen::MatrixXd::Constant(1, 7, 1.0 / 7)), 0) - std::log(7.0)) < 1e-12);
  Eigen::MatrixXd hot = Eigen::MatrixXd::Zero(1, 5);
  hot(0, 2) = 1.0;
  CHECK(attn_focus_entropy(one_row_trace(hot), 0) == 0.0);
  Eigen::MatrixXd half = Eigen::MatrixXd::Zero(1, 5);
  half(0, 0) = half(0, 1) = 0.5;
  CHECK(std::abs(attn_focus_entropy(one_row_trace(half), 0) - 0.6931471805599453) < 1e-12);
  CHECK_THROWS_AS(attn_focus_entropy(one_row_trace(half), 1), InvalidArgument);
  CHECK_THROWS_AS(attn_focus_entropy(one_row_trace(half), 0, "instruct"), InvalidArgument);
}

TEST_CASE("attn_prompt_similarity: identical, disjoint, hand-built") {
  Eigen::VectorXd a(4), b(4);
  a << 0.1, 0.2, 0.3, 0.4;
  CHECK(attn_prompt_similarity(mass_trace(a, 2.0 * a), 0) < 1e-15);
  a << 1, 0, 0, 0;
  b << 0, 0, 0, 0.3;
  CHECK(std::abs(attn_prompt_similarity(mass_trace(a, b), 0) - 2.0) < 1e-15);
  a << 0.5, 0.5, 0, 0;
  b << 0.25, 0.25, 0.25, 0.25;
  // |0.5-0.25|*2 + 0.25*2
  CHECK(std::abs(attn_prompt_similarity(mass_trace(a, b), 0) - 1.0) < 1e-15);

  AttentionTrace no_instruct = one_row_trace(Eigen::MatrixXd::Constant(1, 3, 1.0 / 3));
  CHECK_THROWS_AS(attn_prompt_similarity(no_instruct, 0), InvalidArgument);
}

TEST_CASE("evaluate_predictions: oracle predictions are perfect") {
  const Codebook cb = build_codebook(0, 64);
  std::mt19937_64 rng(3);
  std::vector<SceneSample> samples;
  std::vector<TokenGrid> preds;
  for (int i = 0; i < 5; ++i) {
    samples.push_back(random_scene(cb, rng));
    preds.push_back(samples.back().target_tokens);
  }
  const EvalReport r = evaluate_predictions(preds, samples, cb, 4);
  CHECK(r.token_accuracy == 1.0);
  CHECK(r.identity_confusion == 0.0);
  CHECK(r.psnr_full == kPsnrCap);
  CHECK(r.psnr_background == kPsnrCap);
  CHECK(r.samples == 5);
  preds.pop_back();
  CHECK_THROWS_AS(evaluate_predictions(preds, samples, cb, 4), InvalidArgument);
}

TEST_CASE("variant_by_name") {
  CHECK(variant_by_name("full").itd);
  CHECK_FALSE(variant_by_name("no-ITD").itd);
  CHECK(variant_by_name("no-ITD").instruct);
  CHECK_FALSE(variant_by_name("no-ITD").index_embedding);
  CHECK(variant_by_name("no-instruct").index_embedding);
  CHECK_FALSE(variant_by_name("no-instruct").instruct);
  CHECK(variant_by_name("no-instruct").itd);
  const Variant b = variant_by_name("baseline");
  CHECK_FALSE(b.itd);
  CHECK_FALSE(b.instruct);
  CHECK_FALSE(b.index_embedding);
  CHECK_THROWS_AS(variant_by_name("bogus"), InvalidArgument);
}

TEST_CASE("run_ablation: one row per variant, repeatable, bounded metrics") {
  const Codebook cb = build_codebook(0, 64);
  std::mt19937_64 rng(4);
  std::vector<SceneSample> train, eval;
  for (int i = 0; i < 3; ++i) train.push_back(random_scene(cb, rng));
  for (int i = 0; i < 2; ++i) eval.push_back(random_scene(cb, rng));

  AblationSetup setup;
  setup.model.d_model = 16;
  setup.model.n_layers = 1;
  setup.model.n_heads = 2;
  setup.model.distill_dim = 4;
  setup.model.instruct_tokens = 3;
  setup.layout.M = 3;
  setup.train.steps = 2;
  setup.train.batch_size = 2;
  setup.train.lr = 1e-3;
  setup.tokenizer = {cb, 4};

  const std::vector<std::string> variants{"full", "no-instruct", "no-ITD", "baseline"};
  const AblationTable t = run_ablation(train, eval, variants, {1}, setup);
  REQUIRE(t.rows.size() == 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    const AblationRow& r = t.rows[i];
    CHECK(r.variant == variants[i]);
    CHECK(r.per_seed.size() == 1u);
    CHECK(r.mean.samples == 2);
    CHECK(r.mean.token_accuracy >= 0.0);
    CHECK(r.mean.token_accuracy <= 1.0);
    CHECK(r.mean.identity_confusion >= 0.0);
    CHECK(r.mean.identity_confusion <= 1.0);
    CHECK(std::isfinite(r.mean.eval_ce));
    CHECK(r.mean.focus_entropy.size() == 1u);
    for (double h : r.mean.focus_entropy) CHECK((h >= 0.0 && h <= std::log(3.0) + 1e-9));
    for (double d : r.mean.instruct_prompt_divergence) CHECK((d >= 0.0 && d <= 2.0));
    CHECK(r.min.token_accuracy <= r.mean.token_accuracy);
    CHECK(r.max.token_accuracy >= r.mean.token_accuracy);
  }
  CHECK(t.rows[0].mean.instruct_prompt_divergence.size() == 1u);
  CHECK(t.rows[1].mean.instruct_prompt_divergence.empty());

  const AblationTable again = run_ablation(train, eval, {"no-ITD"}, {1}, setup);
  CHECK(to_json(again.rows[0].mean) == to_json(t.rows[2].mean));
  const std::string csv = to_csv(t);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
}
