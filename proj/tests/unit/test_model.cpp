#include <doctest.h>

#include "../support/tiny.hpp"

#include "tokenar/checkpoint.hpp"
#include "tokenar/error.hpp"

#include <filesystem>
#include <fstream>

using namespace tokenar;
namespace fs = std::filesystem;

namespace {

SequenceBundle tiny_bundle(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return build_sequence_from_tokens(tiny::sample(rng), tiny::layout());
}

template <class S>
bool same_params(const ModelParams<S>& a, const ModelParams<S>& b) {
  std::vector<const Mat<S>*> xs;
  a.visit([&](const std::string&, const Mat<S>& t) { xs.push_back(&t); });
  std::size_t i = 0;
  bool eq = true;
  b.visit([&](const std::string&, const Mat<S>& t) { eq = eq && (*xs[i++] == t); });
  return eq;
}

}  // namespace

TEST_CASE("init_params: zero instruct rows, determinism, seed dependence") {
  const ModelConfig cfg;
  const auto p = init_params<float>(cfg, 1);
  CHECK(p.instruct.rows() == 30);
  CHECK(p.instruct.isZero(0.0f));
  CHECK(p.index_table.row(0).isZero(0.0f));
  CHECK(same_params(p, init_params<float>(cfg, 1)));
  const auto q = init_params<float>(cfg, 2);
  CHECK_FALSE(p.tok_emb == q.tok_emb);
  CHECK_FALSE(p.layers[0].wq == q.layers[0].wq);
  CHECK(q.instruct.isZero(0.0f));

  ModelConfig bad;
  bad.n_heads = 3;
  CHECK_THROWS_AS(init_params<float>(bad, 0), InvalidArgument);
  bad = ModelConfig{};
  bad.vocab_size = bad.image_tokens;
  CHECK_THROWS_AS(init_params<float>(bad, 0), InvalidArgument);
}

TEST_CASE("forward: shapes, causality, overlong input") {
  auto p = init_params<double>(tiny::config(), 3);
  tiny::perturb(p, 4);
  const SequenceBundle b = tiny_bundle(5);
  const ForwardOutput<double> out = forward(p, b);
  CHECK(out.logits.rows() == b.predicted_length());
  CHECK(out.logits.cols() == tiny::config().vocab_size);
  CHECK(out.features.rows() == b.predicted_length());

  const TokenStream s = teacher_forced_stream(b);
  const Mat<double> full = forward_stream(p, s);
  for (int t : {5, 10, 20}) {
    TokenStream changed = s;
    for (int j = t + 1; j < changed.length(); ++j) changed.ids[static_cast<std::size_t>(j)] = (changed.ids[static_cast<std::size_t>(j)] + 7) % tiny::kK;
    const Mat<double> other = forward_stream(p, changed);
    CHECK(other.topRows(t + 1) == full.topRows(t + 1));
    CHECK_FALSE(other.row(t + 1) == full.row(t + 1));
  }

  ModelConfig short_cfg = tiny::config();
  short_cfg.max_seq_len = 20;
  auto ps = init_params<double>(short_cfg, 3);
  CHECK_THROWS_AS(forward(ps, b), InvalidArgument);
}

TEST_CASE("forward: trace rows are distributions") {
  auto p = init_params<double>(tiny::config(), 3);
  tiny::perturb(p, 4);
  const SequenceBundle b = tiny_bundle(6);
  TraceSpec spec;
  const SequenceLayout L = tiny::layout();
  spec.query_begin = L.context_length();
  spec.query_end = L.total_length() - 1;
  spec.keys = {{"prompt", L.prompt_begin(), L.prompt_begin() + 3}, {"instruct", 0, 3}};
  const ForwardOutput<double> out = forward(p, b, &spec);
  REQUIRE(out.trace.has_value());
  const AttentionTrace& tr = *out.trace;
  CHECK(tr.rows.size() == 2u * 2u * 2u);
  for (const auto& m : tr.rows) {
    CHECK((m.array() >= 0).all());
    for (Eigen::Index r = 0; r < m.rows(); ++r) CHECK(std::abs(m.row(r).sum() - 1.0) < 1e-12);
  }
  for (const auto& v : tr.mass) CHECK(((v.array() >= 0) && (v.array() <= 1 + 1e-12)).all());

  TraceSpec bad = spec;
  bad.keys = {{"late", spec.query_begin, spec.query_begin + 1}};
  CHECK_THROWS_AS(forward(p, b, &bad), InvalidArgument);
}

TEST_CASE("gradients: zero loss weight gives zero gradients") {
  const auto p = init_params<double>(tiny::config(), 3);
  const SequenceBundle b = tiny_bundle(7);
  LossSpec<double> spec;
  spec.ce_scale = 0.0;
  const auto g = gradients(p, b, spec).grads;
  g.visit([&](const std::string& name, const Mat<double>& t) {
    INFO(name);
    CHECK(t.isZero(0.0));
  });
}

TEST_CASE("gradients: finite-difference oracle, float64") {
  auto p = init_params<double>(tiny::config(), 11);
  tiny::perturb(p, 12);
  std::mt19937_64 rng(13);
  const SceneSample s = tiny::sample(rng);
  const SequenceBundle b = build_sequence_from_tokens(s, tiny::layout());
  const Eigen::MatrixXd teacher = teacher_features(s.target_tokens, make_teacher_projection(tiny::kK, 3, 7));
  const auto r = tiny::grad_check(p, b, teacher, tiny::layout().target_offset(), 0.5, 8, 14, 1e-6, 1e-10);
  INFO(r.worst_at);
  CHECK(r.checked >= 200);
  CHECK(r.tensors.size() == 3u + 2u * 10u + 3u);
  CHECK(r.failed == 0);
}

TEST_CASE("gradients: float32 analytic against float64 finite differences") {
  auto p = init_params<float>(tiny::config(), 21);
  tiny::perturb(p, 22);
  std::mt19937_64 rng(23);
  const SceneSample s = tiny::sample(rng);
  const SequenceBundle b = build_sequence_from_tokens(s, tiny::layout());
  const Eigen::MatrixXd teacher = teacher_features(s.target_tokens, make_teacher_projection(tiny::kK, 3, 7));
  const auto r = tiny::grad_check(p, b, teacher, tiny::layout().target_offset(), 0.5, 8, 24, 1e-3, 1e-7);
  INFO(r.worst_at);
  CHECK(r.checked >= 200);
  CHECK(r.failed == 0);
}

TEST_CASE("gradients: instruct rows receive signal through keys and values") {
  const auto p = init_params<double>(tiny::config(), 31);
  const SequenceBundle b = tiny_bundle(32);
  const auto g = gradients(p, b, LossSpec<double>{}).grads;
  CHECK(g.instruct.norm() > 0.0);
}

TEST_CASE("index embedding: a zero table is the same as no index embedding") {
  auto p = init_params<double>(tiny::config(), 41);
  p.index_table.setZero();
  auto q = p;
  q.config.use_index_embedding = false;
  const SequenceBundle b = tiny_bundle(42);
  CHECK(forward(p, b).logits == forward(q, b).logits);
}

TEST_CASE("prefill and decode_step match full forward") {
  auto p = init_params<double>(tiny::config(), 51);
  tiny::perturb(p, 52);
  const SequenceBundle b = tiny_bundle(53);
  const TokenStream full = teacher_forced_stream(b);
  TokenStream ctx;
  const int C = b.context_length();
  ctx.ids.assign(full.ids.begin(), full.ids.begin() + C);
  ctx.index_ids.assign(full.index_ids.begin(), full.index_ids.begin() + C);
  ctx.positions.assign(full.positions.begin(), full.positions.begin() + C);
  ctx.instruct_count = full.instruct_count;

  DecodeCache<double> cache = prefill(p, ctx);
  CHECK(cache.length == C);
  const DecodeCache<double> again = prefill(p, ctx);
  for (std::size_t l = 0; l < cache.keys.size(); ++l) {
    CHECK(cache.keys[l] == again.keys[l]);
    CHECK(cache.values[l] == again.values[l]);
  }

  const Mat<double> ref = forward_stream(p, full);
  CHECK((cache.last_logits - ref.row(C - 1)).cwiseAbs().maxCoeff() < 1e-12);
  for (int j = C; j < full.length(); ++j) {
    const auto u = static_cast<std::size_t>(j);
    const RowVec<double> z = decode_step(p, cache, full.ids[u], full.index_ids[u], full.positions[u]);
    CHECK((z - ref.row(j)).cwiseAbs().maxCoeff() < 1e-12);
  }
  CHECK(cache.length == full.length());

  ModelConfig small = tiny::config();
  small.max_seq_len = C;
  auto ps = init_params<double>(small, 1);
  DecodeCache<double> full_cache = prefill(ps, ctx);
  CHECK_THROWS_AS(decode_step(ps, full_cache, 0, 4, C), InvalidArgument);
}

TEST_CASE("decode_step in float32 stays within 1e-5 of forward") {
  auto p = init_params<float>(tiny::config(), 61);
  tiny::perturb(p, 62);
  const SequenceBundle b = tiny_bundle(63);
  const TokenStream full = teacher_forced_stream(b);
  const int C = b.context_length();
  TokenStream ctx{std::vector<int>(full.ids.begin(), full.ids.begin() + C),
                  std::vector<int>(full.index_ids.begin(), full.index_ids.begin() + C),
                  std::vector<int>(full.positions.begin(), full.positions.begin() + C), full.instruct_count};
  DecodeCache<float> cache = prefill(p, ctx);
  const Mat<float> ref = forward_stream(p, full);
  for (int j = C; j < full.length(); ++j) {
    const auto u = static_cast<std::size_t>(j);
    const RowVec<float> z = decode_step(p, cache, full.ids[u], full.index_ids[u], full.positions[u]);
    CHECK((z - ref.row(j)).cwiseAbs().maxCoeff() < 1e-5f);
  }
}

TEST_CASE("checkpoint round trip and version errors") {
  auto p = init_params<float>(tiny::config(), 71);
  tiny::perturb(p, 72);
  const fs::path path = fs::temp_directory_path() / "tokenar_test.tkar";
  save_checkpoint(path, p);
  const auto q = load_checkpoint(path);
  CHECK(q.config == p.config);
  CHECK(same_params(p, q));

  ModelConfig other = tiny::config();
  other.d_model = 32;
  try {
    require_compatible(other, q.config, path.string());
    FAIL("expected VersionError");
  } catch (const VersionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("d_model=32") != std::string::npos);
    CHECK(msg.find("d_model=16") != std::string::npos);
  }

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    const std::uint32_t v = 99;
    f.write(reinterpret_cast<const char*>(&v), 4);
  }
  CHECK_THROWS_AS(load_checkpoint(path), VersionError);
  {
    std::ofstream f(path, std::ios::binary);
    f << "NOPE";
  }
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
  fs::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
}
