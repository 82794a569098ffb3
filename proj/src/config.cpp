#include "tokenar/config.hpp"

#include "tokenar/error.hpp"
#include "tokenar/vocab.hpp"

#include <fstream>
#include <set>

namespace tokenar {

using nlohmann::json;

namespace {

// Reads known keys out of one object and rejects anything else.
class Section {
 public:
  Section(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
    if (!doc_.is_object()) throw ConfigError("config: '" + path_ + "' must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = doc_.find(key);
    if (it == doc_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config: '" + path_ + "." + key + "' has the wrong type (" + it->dump() + ")");
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = doc_.find(key);
    return it == doc_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = doc_.begin(); it != doc_.end(); ++it)
      if (!seen_.count(it.key()))
        throw ConfigError("config: unknown key '" + (path_.empty() ? "" : path_ + ".") + it.key() + "'");
  }

 private:
  const json& doc_;
  std::string path_;
  std::set<std::string> seen_;
};

InstructMode parse_instruct_mode(const std::string& s) {
  if (s == "joint") return InstructMode::joint;
  if (s == "standalone") return InstructMode::standalone;
  throw ConfigError("config: training.instruct_mode must be 'joint' or 'standalone', got '" + s + "'");
}

DecodeMode parse_decode_mode(const std::string& s) {
  if (s == "greedy") return DecodeMode::greedy;
  if (s == "sample") return DecodeMode::sample;
  throw ConfigError("config: generate.mode must be 'greedy' or 'sample', got '" + s + "'");
}

}  // namespace

RunConfig config_from_json(const json& doc) {
  RunConfig c;
  Section root(doc, "");
  if (const json* j = root.child("tokenizer")) {
    Section s(*j, "tokenizer");
    s.get("K", c.tokenizer.K);
    s.get("patch", c.tokenizer.patch);
    s.get("codebook_seed", c.tokenizer.codebook_seed);
    s.finish();
  }
  if (const json* j = root.child("layout")) {
    Section s(*j, "layout");
    s.get("m", c.layout.m);
    s.get("M", c.layout.M);
    s.get("itd", c.layout.itd_enabled);
    bool instruct = true;
    s.get("instruct", instruct);
    if (!instruct) c.layout.M = 0;
    s.finish();
  }
  if (const json* j = root.child("model")) {
    Section s(*j, "model");
    s.get("d_model", c.model.d_model);
    s.get("n_layers", c.model.n_layers);
    s.get("n_heads", c.model.n_heads);
    s.get("distill_dim", c.model.distill_dim);
    s.get("max_seq_len", c.model.max_seq_len);
    s.get("use_index_embedding", c.model.use_index_embedding);
    s.get("rope_base", c.model.rope_base);
    s.finish();
  }
  if (const json* j = root.child("training")) {
    Section s(*j, "training");
    TrainConfig& t = c.training;
    s.get("lr", t.lr);
    s.get("beta1", t.beta1);
    s.get("beta2", t.beta2);
    s.get("weight_decay", t.weight_decay);
    s.get("eps", t.eps);
    s.get("lambda_distill", t.lambda_distill);
    s.get("batch_size", t.batch_size);
    s.get("steps", t.steps);
    s.get("seed", t.seed);
    s.get("teacher_seed", t.teacher_seed);
    std::string mode = "joint";
    s.get("instruct_mode", mode);
    t.instruct_mode = parse_instruct_mode(mode);
    s.get("checkpoint_interval", t.checkpoint_interval);
    s.get("stop_at_accuracy", t.stop_at_accuracy);
    s.get("accuracy_check_interval", t.accuracy_check_interval);
    s.finish();
  }
  if (const json* j = root.child("datagen")) {
    Section s(*j, "datagen");
    s.get("count", c.datagen.count);
    s.get("delta", c.datagen.delta);
    s.get("seed", c.datagen.seed);
    s.get("grid", c.datagen.grid);
    s.finish();
  }
  if (const json* j = root.child("generate")) {
    Section s(*j, "generate");
    std::string mode = "greedy";
    s.get("mode", mode);
    c.generate.mode = parse_decode_mode(mode);
    s.get("temperature", c.generate.temperature);
    s.get("top_k", c.generate.top_k);
    s.get("seed", c.generate.seed);
    s.get("use_cache", c.generate.use_cache);
    s.finish();
  }
  if (const json* j = root.child("ablation")) {
    Section s(*j, "ablation");
    s.get("variants", c.ablation.variants);
    s.get("seeds", c.ablation.seeds);
    s.get("train_count", c.ablation.train_count);
    s.get("eval_count", c.ablation.eval_count);
    s.finish();
  }
  if (const json* j = root.child("paths")) {
    Section s(*j, "paths");
    s.get("dataset", c.paths.dataset);
    s.get("out", c.paths.out);
    s.get("checkpoint", c.paths.checkpoint);
    s.finish();
  }
  root.get("threads", c.threads);
  root.finish();
  c.validate();
  return c;
}

json config_to_json(const RunConfig& c) {
  const TrainConfig& t = c.training;
  return json{
      {"tokenizer", {{"K", c.tokenizer.K}, {"patch", c.tokenizer.patch}, {"codebook_seed", c.tokenizer.codebook_seed}}},
      {"layout", {{"m", c.layout.m}, {"M", c.layout.M}, {"itd", c.layout.itd_enabled}}},
      {"model",
       {{"d_model", c.model.d_model},
        {"n_layers", c.model.n_layers},
        {"n_heads", c.model.n_heads},
        {"distill_dim", c.model.distill_dim},
        {"max_seq_len", c.model.max_seq_len},
        {"use_index_embedding", c.model.use_index_embedding},
        {"rope_base", c.model.rope_base}}},
      {"training",
       {{"lr", t.lr},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"weight_decay", t.weight_decay},
        {"eps", t.eps},
        {"lambda_distill", t.lambda_distill},
        {"batch_size", t.batch_size},
        {"steps", t.steps},
        {"seed", t.seed},
        {"teacher_seed", t.teacher_seed},
        {"instruct_mode", t.instruct_mode == InstructMode::joint ? "joint" : "standalone"},
        {"checkpoint_interval", t.checkpoint_interval},
        {"stop_at_accuracy", t.stop_at_accuracy},
        {"accuracy_check_interval", t.accuracy_check_interval}}},
      {"datagen", {{"count", c.datagen.count}, {"delta", c.datagen.delta}, {"seed", c.datagen.seed}, {"grid", c.datagen.grid}}},
      {"generate",
       {{"mode", c.generate.mode == DecodeMode::greedy ? "greedy" : "sample"},
        {"temperature", c.generate.temperature},
        {"top_k", c.generate.top_k},
        {"seed", c.generate.seed},
        {"use_cache", c.generate.use_cache}}},
      {"ablation",
       {{"variants", c.ablation.variants},
        {"seeds", c.ablation.seeds},
        {"train_count", c.ablation.train_count},
        {"eval_count", c.ablation.eval_count}}},
      {"paths", {{"dataset", c.paths.dataset}, {"out", c.paths.out}, {"checkpoint", c.paths.checkpoint}}},
      {"threads", c.threads}};
}

SceneGeometry RunConfig::geometry() const {
  SceneGeometry g;
  g.grid = datagen.grid;
  g.patch = tokenizer.patch;
  return g;
}

SequenceLayout RunConfig::resolved_layout() const {
  SequenceLayout l = layout;
  l.n = datagen.grid * datagen.grid;
  return l;
}

ModelConfig RunConfig::resolved_model() const {
  ModelConfig m = model;
  const SequenceLayout l = resolved_layout();
  m.image_tokens = tokenizer.K;
  m.vocab_size = Vocabulary{tokenizer.K}.size();
  m.instruct_tokens = l.M;
  return m;
}

void RunConfig::validate() const {
  auto check = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("config: " + msg);
  };
  check(tokenizer.K >= 8, "tokenizer.K must be >= 8");
  check(tokenizer.patch >= 1, "tokenizer.patch must be >= 1");
  check(layout.m == 2, "layout.m must be 2 (scenes hold two subjects)");
  check(layout.M >= 0, "layout.M must be >= 0");
  check(datagen.count >= 0, "datagen.count must be >= 0");
  check(datagen.delta >= 0.0, "datagen.delta must be >= 0");
  check(datagen.grid >= 4, "datagen.grid must be >= 4");
  check(threads >= 1, "threads must be >= 1");
  check(!ablation.seeds.empty(), "ablation.seeds must not be empty");
  check(ablation.train_count > 0 && ablation.eval_count > 0, "ablation counts must be positive");
  for (const auto& v : ablation.variants) {
    try {
      variant_by_name(v);
    } catch (const InvalidArgument& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
  try {
    resolved_layout().validate();
    const ModelConfig m = resolved_model();
    m.validate();
    check(resolved_layout().total_length() <= m.max_seq_len,
          "model.max_seq_len " + std::to_string(m.max_seq_len) + " is shorter than the layout (" +
              std::to_string(resolved_layout().total_length()) + ")");
    training.validate();
    generate.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON (" + e.what() + ")");
  }
  return config_from_json(doc);
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* node = &doc;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override '" + assignment + "' has an empty key segment");
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

}  // namespace tokenar
