#include <doctest.h>

#include "../support/tiny.hpp"

#include "tokenar/error.hpp"
#include "tokenar/inference.hpp"

using namespace tokenar;

namespace {

ModelParams<double> tiny_model(std::uint64_t seed) {
  auto p = init_params<double>(tiny::config(), seed);
  tiny::perturb(p, seed + 100);
  return p;
}

}  // namespace

TEST_CASE("generate: greedy is deterministic and emits only image ids") {
  const auto p = tiny_model(1);
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const SceneSample s = tiny::sample(rng);
    const GenerateResult a = generate(p, s, tiny::layout(), {});
    const GenerateResult b = generate(p, s, tiny::layout(), {});
    CHECK(a.span == b.span);
    CHECK(a.span.size() == 12u);
    for (int id : a.span) {
      CHECK(id >= 0);
      CHECK(id < tiny::kK);
    }
    CHECK(a.target == extract_target(a.span, tiny::layout(), 2));
    CHECK_FALSE(a.trace.has_value());
  }
}

TEST_CASE("generate: cached and recomputed decoding agree token for token") {
  const auto p = tiny_model(3);
  std::mt19937_64 rng(4);
  GenerateConfig slow;
  slow.use_cache = false;
  for (int trial = 0; trial < 10; ++trial) {
    const SceneSample s = tiny::sample(rng);
    CHECK(generate(p, s, tiny::layout(), {}).span == generate(p, s, tiny::layout(), slow).span);
  }
  SequenceLayout off = tiny::layout();
  off.itd_enabled = false;
  const SceneSample s = tiny::sample(rng);
  const auto a = generate(p, s, off, {});
  CHECK(a.span.size() == 4u);
  CHECK(a.span == generate(p, s, off, slow).span);
}

TEST_CASE("generate: sampling respects its seed") {
  const auto p = tiny_model(5);
  std::mt19937_64 rng(6);
  const SceneSample s = tiny::sample(rng);
  GenerateConfig g;
  g.mode = DecodeMode::sample;
  g.temperature = 2.0;
  g.seed = 9;
  const auto a = generate(p, s, tiny::layout(), g);
  CHECK(a.span == generate(p, s, tiny::layout(), g).span);
  for (int id : a.span) CHECK(id < tiny::kK);
  g.top_k = 1;
  CHECK(generate(p, s, tiny::layout(), g).span == generate(p, s, tiny::layout(), {}).span);

  g.temperature = 0.0;
  CHECK_THROWS_AS(generate(p, s, tiny::layout(), g), InvalidArgument);
}

TEST_CASE("generate: trace is captured on request") {
  const auto p = tiny_model(7);
  std::mt19937_64 rng(8);
  GenerateConfig g;
  g.capture_trace = true;
  const auto r = generate(p, tiny::sample(rng), tiny::layout(), g);
  REQUIRE(r.trace.has_value());
  CHECK(r.trace->n_layers == 2);
  CHECK(r.trace->spec.keys.size() == 2u);
  for (const auto& m : r.trace->rows) {
    CHECK(m.rows() == 4);
    for (Eigen::Index i = 0; i < m.rows(); ++i) CHECK(std::abs(m.row(i).sum() - 1.0) < 1e-12);
  }
}

TEST_CASE("generate: overlong layout is rejected") {
  ModelConfig c = tiny::config();
  c.max_seq_len = 20;
  const auto p = init_params<double>(c, 1);
  std::mt19937_64 rng(9);
  CHECK_THROWS_AS(generate(p, tiny::sample(rng), tiny::layout(), {}), InvalidArgument);
}

TEST_CASE("extract_target: layout arithmetic and round trip") {
  SequenceLayout L;  // m=2, n=64, ITD on
  std::vector<int> span(192);
  for (int i = 0; i < 192; ++i) span[static_cast<std::size_t>(i)] = i;
  const TokenGrid g = extract_target(span, L, 8);
  CHECK(g.rows == 8);
  for (int i = 0; i < 64; ++i) CHECK(g[i] == 128 + i);

  L.itd_enabled = false;
  std::vector<int> short_span(span.begin(), span.begin() + 64);
  CHECK(extract_target(short_span, L, 8).data == short_span);
  CHECK_THROWS_AS(extract_target(span, L, 8), InvalidArgument);

  std::mt19937_64 rng(10);
  const SceneSample s = tiny::sample(rng);
  const SequenceBundle b = build_sequence_from_tokens(s, tiny::layout());
  CHECK(extract_target(b.target_ids, tiny::layout(), 2) == s.target_tokens);
}
