#include <doctest.h>

#include "tokenar/checkpoint.hpp"
#include "tokenar/cli.hpp"

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

using namespace tokenar;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Workdir {
  fs::path root;
  Workdir() {
    root = fs::temp_directory_path() / ("tokenar_cli_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
    // small enough for seconds-long runs
    json cfg = {{"model", {{"d_model", 16}, {"n_layers", 1}, {"n_heads", 2}, {"distill_dim", 4}}},
                {"layout", {{"M", 3}}},
                {"training", {{"steps", 2}, {"batch_size", 2}, {"lr", 0.001}}},
                {"datagen", {{"count", 12}}},
                {"threads", 1}};
    std::ofstream(root / "cfg.json") << cfg.dump(2);
  }
  ~Workdir() { fs::remove_all(root); }

  std::string p(const std::string& rel) const { return (root / rel).string(); }

  int run(std::vector<std::string> args, std::string* out_text = nullptr, std::string* err_text = nullptr) const {
    args.insert(args.begin(), {"-c", p("cfg.json")});
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    if (out_text) *out_text = out.str();
    if (err_text) *err_text = err.str();
    return code;
  }
};

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

int exit_code_of(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("gen-data: vacuous and impossible thresholds, histogram totals") {
  Workdir w;
  REQUIRE(w.run({"gen-data", "-o", w.p("d0"), "--set", "datagen.delta=0", "--set", "datagen.count=100"}) == 0);
  json s = read_json(w.root / "d0" / "stats.json");
  CHECK(s["generated"] == 100);
  CHECK(s["kept"] == 100);
  int total = 0;
  for (const auto& [k, v] : s["relation_histogram"].items()) total += v.get<int>();
  CHECK(total == 100);

  REQUIRE(w.run({"gen-data", "-o", w.p("d1"), "--set", "datagen.delta=1.000001", "--set", "datagen.count=50"}) == 0);
  s = read_json(w.root / "d1" / "stats.json");
  CHECK(s["kept"].get<int>() <= 50);
  total = 0;
  for (const auto& [k, v] : s["relation_histogram"].items()) total += v.get<int>();
  CHECK(total == s["kept"].get<int>());
}

TEST_CASE("usage and config errors exit with 2") {
  Workdir w;
  std::string err;
  CHECK(w.run({"train", "-d", w.p("missing"), "-o", w.p("r")}, nullptr, &err) == 2);
  CHECK(err.find("missing") != std::string::npos);
  CHECK(w.run({"train", "-d", w.p("missing"), "--set", "training.stepz=3"}) == 2);
  CHECK(w.run({"frobnicate"}) == 2);
  CHECK(w.run({"eval", "--oracle", "--predictions", w.p("x"), "-d", w.p("d")}) == 2);

  std::ofstream(w.root / "bad.json") << R"({"model": {"d_model": 16, "colour": 1}})";
  std::ostringstream out, e2;
  CHECK(run_cli({"-c", w.p("bad.json"), "gen-data", "-o", w.p("z")}, out, e2) == 2);
  CHECK(e2.str().find("colour") != std::string::npos);
}

TEST_CASE("the installed binary reports exit codes") {
  Workdir w;
  const std::string bin = TOKENAR_CLI_PATH;
  CHECK(exit_code_of(bin + " --help > /dev/null") == 0);
  CHECK(exit_code_of(bin + " train -d " + w.p("nope") + " 2> /dev/null") == 2);
  CHECK(exit_code_of(bin + " -c " + w.p("cfg.json") + " gen-data -o " + w.p("d") + " > /dev/null") == 0);
}

TEST_CASE("train, generate, eval, inspect-attn end to end") {
  Workdir w;
  REQUIRE(w.run({"gen-data", "-o", w.p("d")}) == 0);

  SUBCASE("steps=0 checkpoints the initial parameters") {
    REQUIRE(w.run({"train", "-d", w.p("d"), "-o", w.p("r0"), "--set", "training.steps=0"}) == 0);
    const auto p = load_checkpoint(w.root / "r0" / "model.tkar");
    CHECK(p.config.d_model == 16);
    CHECK(p.instruct.isZero(0.0f));
  }

  REQUIRE(w.run({"train", "-d", w.p("d"), "-o", w.p("r")}) == 0);
  std::ifstream metrics(w.root / "r" / "metrics.csv");
  std::string header;
  std::getline(metrics, header);
  CHECK(header == "step,ce,distill,total,lr");
  int lines = 0;
  for (std::string l; std::getline(metrics, l);) ++lines;
  CHECK(lines == 2);
  const std::string ckpt = w.p("r/model.tkar");

  SUBCASE("generate writes an image and the span") {
    REQUIRE(w.run({"generate", "-k", ckpt, "-d", w.p("d"), "-i", "3", "-o", w.p("g")}) == 0);
    CHECK(fs::exists(w.root / "g" / "sample_3.ppm"));
    const json span = read_json(w.root / "g" / "sample_3_span.json");
    CHECK(span["span"].size() == 192u);
    CHECK(span["target"].size() == 64u);
    CHECK(w.run({"generate", "-k", ckpt, "-d", w.p("d"), "-i", "99", "-o", w.p("g")}) == 2);
  }
  SUBCASE("eval with ground truth as predictions is perfect") {
    REQUIRE(w.run({"eval", "--oracle", "-d", w.p("d"), "-o", w.p("e")}) == 0);
    const json r = read_json(w.root / "e" / "eval.json");
    CHECK(r["token_accuracy"] == 1.0);
    CHECK(r["identity_confusion"] == 0.0);

    REQUIRE(w.run({"eval", "-k", ckpt, "-d", w.p("d"), "-o", w.p("e2")}) == 0);
    const json m = read_json(w.root / "e2" / "eval.json");
    CHECK(m["samples"] == 12);
    CHECK(m["focus_entropy"].size() == 1u);
  }
  SUBCASE("inspect-attn rows are distributions") {
    REQUIRE(w.run({"inspect-attn", "-k", ckpt, "-d", w.p("d"), "-i", "0", "-i", "1", "-o", w.p("a")}) == 0);
    std::ifstream in(w.root / "a" / "attention_trace.csv");
    std::string line;
    std::getline(in, line);
    CHECK(line == "layer,head,span,query,key,weight");
    std::map<std::string, double> sums;
    while (std::getline(in, line)) {
      std::stringstream ss(line);
      std::string layer, head, span, query, key, weight;
      std::getline(ss, layer, ',');
      std::getline(ss, head, ',');
      std::getline(ss, span, ',');
      std::getline(ss, query, ',');
      std::getline(ss, key, ',');
      std::getline(ss, weight, ',');
      sums[layer + "/" + head + "/" + span + "/" + query] += std::stod(weight);
    }
    CHECK(sums.size() == 1u * 2u * 2u * 64u);
    for (const auto& [k, s] : sums) CHECK(std::abs(s - 1.0) < 1e-5);
    CHECK(fs::exists(w.root / "a" / "attention_summary.csv"));
  }
  SUBCASE("checkpoint and config disagreeing is a version error") {
    std::string err;
    CHECK(w.run({"eval", "-k", ckpt, "-d", w.p("d"), "-o", w.p("e3"), "--set", "model.d_model=32"}, nullptr, &err) == 2);
    CHECK(err.find("d_model=32") != std::string::npos);
    CHECK(err.find("d_model=16") != std::string::npos);
  }
  SUBCASE("retraining in single-thread mode is bitwise repeatable") {
    REQUIRE(w.run({"train", "-d", w.p("d"), "-o", w.p("r2")}) == 0);
    std::ifstream a(w.root / "r" / "model.tkar", std::ios::binary), b(w.root / "r2" / "model.tkar", std::ios::binary);
    const std::string x((std::istreambuf_iterator<char>(a)), {}), y((std::istreambuf_iterator<char>(b)), {});
    CHECK(x == y);
  }
}

TEST_CASE("ablate emits exactly the requested variants") {
  Workdir w;
  REQUIRE(w.run({"gen-data", "-o", w.p("d")}) == 0);
  REQUIRE(w.run({"ablate", "-d", w.p("d"), "-o", w.p("ab"), "--set", "ablation.train_count=4", "--set",
                 "ablation.eval_count=2", "--set", "ablation.seeds=[1]", "--set",
                 R"(ablation.variants=["no-ITD","full"])"}) == 0);
  const json t = read_json(w.root / "ab" / "ablation.json");
  REQUIRE(t["rows"].size() == 2u);
  CHECK(t["rows"][0]["variant"] == "no-ITD");
  CHECK(t["rows"][1]["variant"] == "full");
  CHECK(w.run({"ablate", "-d", w.p("d"), "-o", w.p("ab2"), "--set", "ablation.train_count=100"}) == 2);
}
