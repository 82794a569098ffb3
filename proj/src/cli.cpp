#include "tokenar/cli.hpp"

#include "tokenar/checkpoint.hpp"
#include "tokenar/error.hpp"
#include "tokenar/loss.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <random>
#include <sstream>

namespace tokenar {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

TokenizerSpec tokenizer_of(const RunConfig& cfg) {
  return {build_codebook(cfg.tokenizer.codebook_seed, cfg.tokenizer.K), cfg.tokenizer.patch};
}

Dataset open_dataset(const RunConfig& cfg, const fs::path& dir) {
  if (dir.empty()) throw UsageError("no dataset given (use --dataset or paths.dataset)");
  if (!fs::exists(dir / "manifest.jsonl")) throw UsageError("dataset not found: " + (dir / "manifest.jsonl").string());
  Dataset ds = read_dataset(dir);
  const DatasetHeader& h = ds.header;
  if (h.K != cfg.tokenizer.K || h.codebook_seed != cfg.tokenizer.codebook_seed || h.geometry.patch != cfg.tokenizer.patch ||
      h.geometry.grid != cfg.datagen.grid)
    throw ConfigError("dataset " + dir.string() + " was written with K=" + std::to_string(h.K) +
                      " codebook_seed=" + std::to_string(h.codebook_seed) + " patch=" + std::to_string(h.geometry.patch) +
                      " grid=" + std::to_string(h.geometry.grid) + ", config has K=" + std::to_string(cfg.tokenizer.K) +
                      " codebook_seed=" + std::to_string(cfg.tokenizer.codebook_seed) +
                      " patch=" + std::to_string(cfg.tokenizer.patch) + " grid=" + std::to_string(cfg.datagen.grid));
  if (ds.samples.empty()) throw UsageError("dataset " + dir.string() + " holds no samples");
  return ds;
}

ModelParams<float> open_checkpoint(const RunConfig& cfg, const fs::path& path) {
  if (path.empty()) throw UsageError("no checkpoint given (use --checkpoint or paths.checkpoint)");
  if (!fs::exists(path)) throw UsageError("checkpoint not found: " + path.string());
  ModelParams<float> params = load_checkpoint(path);
  require_compatible(cfg.resolved_model(), params.config, path.string());
  return params;
}

const SceneSample& pick(const Dataset& ds, int index) {
  if (index < 0 || index >= static_cast<int>(ds.samples.size()))
    throw UsageError("sample index " + std::to_string(index) + " outside [0, " + std::to_string(ds.samples.size()) + ")");
  return ds.samples[static_cast<std::size_t>(index)];
}

std::string csv_row(const EvalReport& r) {
  std::ostringstream o;
  o << std::setprecision(10) << r.samples << ',' << r.psnr_full << ',' << r.psnr_background << ',' << r.token_accuracy
    << ',' << r.identity_confusion << ',' << r.eval_ce << '\n';
  return o.str();
}

}  // namespace

GenDataStats cmd_gen_data(const RunConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  const Codebook codebook = build_codebook(cfg.tokenizer.codebook_seed, cfg.tokenizer.K);
  const SceneGeometry geometry = cfg.geometry();
  std::mt19937_64 rng(cfg.datagen.seed);
  GenDataStats stats;
  std::vector<SceneSample> kept;
  for (int i = 0; i < cfg.datagen.count; ++i) {
    SceneSample s = random_scene(codebook, rng, geometry);
    ++stats.generated;
    if (!filter_sample(s, cfg.datagen.delta)) continue;
    ++stats.relation_histogram[static_cast<std::size_t>(s.relation_id)];
    kept.push_back(std::move(s));
  }
  stats.kept = static_cast<int>(kept.size());
  stats.pass_rate = stats.generated ? static_cast<double>(stats.kept) / stats.generated : 0.0;

  DatasetHeader header;
  header.count = stats.kept;
  header.K = cfg.tokenizer.K;
  header.codebook_seed = cfg.tokenizer.codebook_seed;
  header.geometry = geometry;
  header.delta = cfg.datagen.delta;
  write_dataset(kept, header, out_dir);

  json hist = json::object();
  for (int r = 0; r < kNumRelations; ++r)
    hist[std::string(kRelationNames[static_cast<std::size_t>(r)])] = stats.relation_histogram[static_cast<std::size_t>(r)];
  const json doc{{"generated", stats.generated},
                 {"kept", stats.kept},
                 {"pass_rate", stats.pass_rate},
                 {"delta", cfg.datagen.delta},
                 {"relation_histogram", hist}};
  write_text(out_dir / "stats.json", doc.dump(2) + "\n");
  return stats;
}

TrainSummary cmd_train(const RunConfig& cfg, const fs::path& dataset, const fs::path& out_dir, std::ostream* progress) {
  cfg.validate();
  const Dataset ds = open_dataset(cfg, dataset);
  ensure_dir(out_dir);
  ensure_dir(out_dir / "checkpoints");

  const ModelConfig mc = cfg.resolved_model();
  const SequenceLayout layout = cfg.resolved_layout();
  TrainConfig tc = cfg.training;
  tc.threads = cfg.threads;
  const Eigen::MatrixXd projection = make_teacher_projection(mc.image_tokens, mc.distill_dim, tc.teacher_seed);
  const auto examples = prepare_examples<float>(ds.samples, layout, tokenizer_of(cfg), projection);
  ModelParams<float> params = init_params<float>(mc, tc.seed);

  write_text(out_dir / "config.json", config_to_json(cfg).dump(2) + "\n");
  std::ofstream metrics(out_dir / "metrics.csv");
  if (!metrics) throw IoError("cannot write " + (out_dir / "metrics.csv").string());
  metrics << "step,ce,distill,total,lr\n" << std::setprecision(9);

  TrainHooks<float> hooks;
  hooks.on_step = [&](const StepLog& s) {
    metrics << s.step << ',' << s.ce << ',' << s.distill << ',' << s.total << ',' << s.lr << '\n';
    if (progress && (s.step % 50 == 0 || s.step == 1))
      *progress << "step " << s.step << " ce " << s.ce << " distill " << s.distill << " acc " << s.accuracy << std::endl;
  };
  hooks.on_checkpoint = [&](int step, const ModelParams<float>& p) {
    char name[40];
    std::snprintf(name, sizeof name, "step_%06d.tkar", step);
    save_checkpoint(out_dir / "checkpoints" / name, p);
  };

  TrainSummary summary;
  summary.log = train_loop(examples, tc, params, hooks);
  metrics.close();
  summary.checkpoint = out_dir / "model.tkar";
  save_checkpoint(summary.checkpoint, params);
  summary.final_score = score_examples(params, examples, tc.lambda_distill, tc.threads);
  if (progress)
    *progress << "final: steps " << (summary.log.empty() ? 0 : summary.log.back().step) << " ce "
              << summary.final_score.ce << " distill " << summary.final_score.distill << " masked-token accuracy "
              << summary.final_score.accuracy << "\ncheckpoint " << summary.checkpoint.string() << std::endl;
  return summary;
}

GenerateResult cmd_generate(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& dataset, int index,
                            const fs::path& out_dir) {
  cfg.validate();
  const ModelParams<float> params = open_checkpoint(cfg, checkpoint);
  const Dataset ds = open_dataset(cfg, dataset);
  const SceneSample& sample = pick(ds, index);
  ensure_dir(out_dir);
  const GenerateResult res = generate(params, sample, cfg.resolved_layout(), cfg.generate);
  const TokenizerSpec tok = tokenizer_of(cfg);
  const std::string stem = "sample_" + std::to_string(index);
  write_ppm(out_dir / (stem + ".ppm"), dequantize(res.target, tok.codebook, tok.patch));
  const json span{{"index", index},
                  {"itd", cfg.layout.itd_enabled},
                  {"span", res.span},
                  {"target", res.target.data},
                  {"target_accuracy", token_accuracy(res.target, sample.target_tokens)}};
  write_text(out_dir / (stem + "_span.json"), span.dump() + "\n");
  return res;
}

EvalReport cmd_eval(const RunConfig& cfg, EvalSource source, const fs::path& checkpoint, const fs::path& dataset,
                    const fs::path& predictions, const fs::path& out_dir) {
  cfg.validate();
  const Dataset ds = open_dataset(cfg, dataset);
  const TokenizerSpec tok = tokenizer_of(cfg);
  EvalReport report;
  if (source == EvalSource::model) {
    const ModelParams<float> params = open_checkpoint(cfg, checkpoint);
    report = evaluate_model(params, ds.samples, cfg.resolved_layout(), tok, EvalOptions{true, cfg.threads});
  } else {
    std::vector<TokenGrid> preds;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
      if (source == EvalSource::oracle) {
        preds.push_back(ds.samples[i].target_tokens);
        continue;
      }
      char name[40];
      std::snprintf(name, sizeof name, "%06zu_target.ppm", i);
      const fs::path p = predictions / name;
      if (!fs::exists(p)) throw UsageError("prediction missing: " + p.string());
      preds.push_back(quantize(read_ppm(p), tok.codebook, tok.patch));
    }
    report = evaluate_predictions(preds, ds.samples, tok.codebook, tok.patch);
  }
  ensure_dir(out_dir);
  write_text(out_dir / "eval.json", to_json(report).dump(2) + "\n");
  write_text(out_dir / "eval.csv",
             "samples,psnr_full,psnr_background,token_accuracy,identity_confusion,eval_ce\n" + csv_row(report));
  return report;
}

AblationTable cmd_ablate(const RunConfig& cfg, const fs::path& dataset, const fs::path& out_dir, std::ostream* progress) {
  cfg.validate();
  const Dataset ds = open_dataset(cfg, dataset);
  const int need = cfg.ablation.train_count + cfg.ablation.eval_count;
  if (static_cast<int>(ds.samples.size()) < need)
    throw UsageError("ablation needs " + std::to_string(need) + " samples, dataset has " + std::to_string(ds.samples.size()));
  const auto first = ds.samples.begin();
  const std::vector<SceneSample> train(first, first + cfg.ablation.train_count);
  const std::vector<SceneSample> eval(first + cfg.ablation.train_count, first + need);

  AblationSetup setup;
  setup.model = cfg.resolved_model();
  setup.layout = cfg.resolved_layout();
  setup.train = cfg.training;
  setup.tokenizer = tokenizer_of(cfg);
  setup.teacher_seed = cfg.training.teacher_seed;
  setup.threads = cfg.threads;
  auto report = [&](const std::string& msg) {
    if (progress) *progress << msg << std::endl;
  };
  const AblationTable table = run_ablation(train, eval, cfg.ablation.variants, cfg.ablation.seeds, setup, report);
  ensure_dir(out_dir);
  write_text(out_dir / "ablation.json", to_json(table).dump(2) + "\n");
  write_text(out_dir / "ablation.csv", to_csv(table));
  return table;
}

std::vector<LayerSummary> cmd_inspect_attn(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& dataset,
                                           const std::vector<int>& indices, const fs::path& out_dir) {
  cfg.validate();
  if (indices.empty()) throw UsageError("inspect-attn needs at least one sample index");
  const ModelParams<float> params = open_checkpoint(cfg, checkpoint);
  const Dataset ds = open_dataset(cfg, dataset);
  const SequenceLayout layout = cfg.resolved_layout();
  ensure_dir(out_dir);

  GenerateConfig g = cfg.generate;
  g.capture_trace = true;
  std::vector<LayerSummary> sums(static_cast<std::size_t>(params.config.n_layers));
  for (int l = 0; l < params.config.n_layers; ++l) sums[static_cast<std::size_t>(l)].layer = l;

  for (std::size_t k = 0; k < indices.size(); ++k) {
    const GenerateResult res = generate(params, pick(ds, indices[k]), layout, g);
    const AttentionTrace& tr = *res.trace;
    if (k == 0) {
      std::ofstream csv(out_dir / "attention_trace.csv");
      if (!csv) throw IoError("cannot write " + (out_dir / "attention_trace.csv").string());
      csv << "layer,head,span,query,key,weight\n" << std::setprecision(9);
      for (int l = 0; l < tr.n_layers; ++l)
        for (int h = 0; h < tr.n_heads; ++h)
          for (std::size_t s = 0; s < tr.spec.keys.size(); ++s) {
            const Eigen::MatrixXd& m = tr.at(l, h, static_cast<int>(s));
            for (Eigen::Index q = 0; q < m.rows(); ++q)
              for (Eigen::Index c = 0; c < m.cols(); ++c)
                csv << l << ',' << h << ',' << tr.spec.keys[s].name << ',' << tr.spec.query_begin + q << ','
                    << tr.spec.keys[s].begin + c << ',' << m(q, c) << '\n';
          }
      if (!csv) throw IoError("failed writing attention trace");
    }
    const double w = 1.0 / static_cast<double>(indices.size());
    for (int l = 0; l < tr.n_layers; ++l) {
      LayerSummary& s = sums[static_cast<std::size_t>(l)];
      s.focus_entropy += w * attn_focus_entropy(tr, l, "prompt");
      s.instruct_prompt_divergence += layout.M > 0 ? w * attn_prompt_similarity(tr, l)
                                                   : std::numeric_limits<double>::quiet_NaN();
    }
  }

  std::ostringstream summary;
  summary << std::setprecision(9) << "layer,focus_entropy,instruct_prompt_divergence\n";
  for (const LayerSummary& s : sums) {
    summary << s.layer << ',' << s.focus_entropy << ',';
    if (std::isnan(s.instruct_prompt_divergence))
      summary << "";
    else
      summary << s.instruct_prompt_divergence;
    summary << '\n';
  }
  write_text(out_dir / "attention_summary.csv", summary.str());
  return sums;
}

namespace {

int resolve_threads(int flag, int from_config) {
  if (flag > 0) return flag;
  if (const char* env = std::getenv("TOKENAR_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw UsageError(std::string("TOKENAR_THREADS is not a positive integer: ") + env);
    return static_cast<int>(v);
  }
  return from_config;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"tokenar: autoregressive multi-subject image generation on synthetic scenes"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> overrides;
  int threads = 0;
  app.add_option("-c,--config", config_path, "JSON run configuration");
  app.add_option("--set", overrides, "Override a config key, e.g. --set training.steps=200");
  app.add_option("--threads", threads, "Worker threads (1 = deterministic)")->check(CLI::PositiveNumber);

  std::string out_dir, dataset, checkpoint, predictions;
  int index = 0;
  std::vector<int> indices;
  bool oracle = false;

  auto* gen = app.add_subcommand("gen-data", "Generate and filter a synthetic dataset");
  gen->add_option("-o,--out", out_dir, "Dataset directory (default paths.dataset)");

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("-d,--dataset", dataset, "Dataset directory");
  train->add_option("-o,--out", out_dir, "Run directory (default paths.out)");

  auto* generate_cmd = app.add_subcommand("generate", "Generate the target for one sample");
  generate_cmd->add_option("-k,--checkpoint", checkpoint, "Checkpoint file");
  generate_cmd->add_option("-d,--dataset", dataset, "Dataset directory");
  generate_cmd->add_option("-i,--index", index, "Sample index");
  generate_cmd->add_option("-o,--out", out_dir, "Output directory");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint or external predictions");
  eval->add_option("-k,--checkpoint", checkpoint, "Checkpoint file");
  eval->add_option("-d,--dataset", dataset, "Dataset directory");
  auto* oracle_flag = eval->add_flag("--oracle", oracle, "Score the ground-truth targets as predictions");
  eval->add_option("--predictions", predictions, "Directory of <id>_target.ppm predictions")->excludes(oracle_flag);
  eval->add_option("-o,--out", out_dir, "Output directory");

  auto* ablate = app.add_subcommand("ablate", "Train and compare ablation variants");
  ablate->add_option("-d,--dataset", dataset, "Dataset directory");
  ablate->add_option("-o,--out", out_dir, "Output directory");

  auto* inspect = app.add_subcommand("inspect-attn", "Export attention traces and per-layer curves");
  inspect->add_option("-k,--checkpoint", checkpoint, "Checkpoint file");
  inspect->add_option("-d,--dataset", dataset, "Dataset directory");
  inspect->add_option("-i,--indices", indices, "Sample indices (default 0)");
  inspect->add_option("-o,--out", out_dir, "Output directory");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    json doc = json::object();
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw ConfigError("cannot open config " + config_path);
      try {
        doc = json::parse(in);
      } catch (const json::exception& e) {
        throw ConfigError("config " + config_path + " is not valid JSON (" + e.what() + ")");
      }
    }
    for (const auto& o : overrides) apply_override(doc, o);
    RunConfig cfg = config_from_json(doc);
    cfg.threads = resolve_threads(threads, cfg.threads);

    auto or_default = [](const std::string& v, const std::string& fallback) { return v.empty() ? fallback : v; };
    const std::string data_dir = or_default(dataset, cfg.paths.dataset);
    const std::string ckpt = or_default(checkpoint, cfg.paths.checkpoint);

    if (*gen) {
      const std::string dir = or_default(out_dir, cfg.paths.dataset);
      if (dir.empty()) throw UsageError("gen-data needs --out or paths.dataset");
      const GenDataStats s = cmd_gen_data(cfg, dir);
      out << "generated " << s.generated << ", kept " << s.kept << " (pass rate " << s.pass_rate << ") in " << dir << "\n";
    } else if (*train) {
      const TrainSummary s = cmd_train(cfg, data_dir, or_default(out_dir, cfg.paths.out), &out);
      (void)s;
    } else if (*generate_cmd) {
      const GenerateResult r = cmd_generate(cfg, ckpt, data_dir, index, or_default(out_dir, cfg.paths.out));
      out << "decoded " << r.span.size() << " tokens for sample " << index << "\n";
    } else if (*eval) {
      const EvalSource src = oracle ? EvalSource::oracle : !predictions.empty() ? EvalSource::predictions : EvalSource::model;
      const EvalReport r = cmd_eval(cfg, src, ckpt, data_dir, predictions, or_default(out_dir, cfg.paths.out));
      out << to_json(r).dump(2) << "\n";
    } else if (*ablate) {
      const AblationTable t = cmd_ablate(cfg, data_dir, or_default(out_dir, cfg.paths.out), &out);
      out << to_csv(t);
    } else if (*inspect) {
      if (indices.empty()) indices.push_back(0);
      const auto sums = cmd_inspect_attn(cfg, ckpt, data_dir, indices, or_default(out_dir, cfg.paths.out));
      out << "layer focus_entropy instruct_prompt_divergence\n";
      for (const LayerSummary& s : sums) out << s.layer << ' ' << s.focus_entropy << ' ' << s.instruct_prompt_divergence << "\n";
    }
    return 0;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const VersionError& e) {
    err << "incompatible checkpoint: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace tokenar
