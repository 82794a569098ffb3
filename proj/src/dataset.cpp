#include "tokenar/dataset.hpp"

#include "tokenar/error.hpp"

#include <cstdio>
#include <fstream>
#include <string>

namespace tokenar {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<int> encode_rle(const MaskGrid& mask) {
  std::vector<int> runs;
  std::uint8_t current = 0;
  int run = 0;
  for (std::uint8_t v : mask.data) {
    const std::uint8_t bit = v ? 1 : 0;
    if (bit != current) {
      runs.push_back(run);
      run = 0;
      current = bit;
    }
    ++run;
  }
  runs.push_back(run);
  return runs;
}

MaskGrid decode_rle(const std::vector<int>& runs, int rows, int cols) {
  MaskGrid m(rows, cols, 0);
  int pos = 0;
  std::uint8_t bit = 0;
  for (int r : runs) {
    require(r >= 0 && pos + r <= m.size(), "decode_rle: runs overflow the mask");
    for (int i = 0; i < r; ++i) m[pos++] = bit;
    bit ^= 1;
  }
  require(pos == m.size(), "decode_rle: runs do not cover the mask");
  return m;
}

json header_to_json(const DatasetHeader& h) {
  return json{{"format", "tokenar-dataset"},
              {"version", 1},
              {"count", h.count},
              {"K", h.K},
              {"codebook_seed", h.codebook_seed},
              {"grid", h.geometry.grid},
              {"patch", h.geometry.patch},
              {"extent", h.geometry.extent},
              {"delta", h.delta}};
}

json sample_record(const SceneSample& s, std::int64_t id) {
  char stem[32];
  std::snprintf(stem, sizeof stem, "images/%06lld", static_cast<long long>(id));
  const std::string base(stem);
  json subjects = json::array();
  for (const SubjectSpec& sub : s.subjects)
    subjects.push_back({{"class_id", sub.class_id},
                        {"class", std::string(kClassNames[static_cast<std::size_t>(sub.class_id)])},
                        {"shape", static_cast<int>(sub.shape)},
                        {"signature", sub.signature},
                        {"pose_seed", sub.pose_seed}});
  json placements = json::array();
  for (const Placement& p : s.target_placement)
    placements.push_back({{"row", p.row}, {"col", p.col}, {"quarter_turns", p.quarter_turns}});
  const auto scores = subject_similarities(s);
  return json{{"id", id},
              {"ref_images", {base + "_ref1.ppm", base + "_ref2.ppm"}},
              {"background", base + "_background.ppm"},
              {"target", base + "_target.ppm"},
              {"mask_rows", s.masks[0].rows},
              {"mask_cols", s.masks[0].cols},
              {"masks", {encode_rle(s.masks[0]), encode_rle(s.masks[1])}},
              {"ref_masks", {encode_rle(s.ref_masks[0]), encode_rle(s.ref_masks[1])}},
              {"relation_id", s.relation_id},
              {"relation", std::string(kRelationNames[static_cast<std::size_t>(s.relation_id)])},
              {"prompt", s.prompt},
              {"subjects", subjects},
              {"placements", placements},
              {"bg_seed", s.bg_seed},
              {"scores", {scores[0], scores[1]}}};
}

void write_manifest(const fs::path& path, const DatasetHeader& header, const std::vector<json>& records) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path.string());
  DatasetHeader h = header;
  h.count = static_cast<std::int64_t>(records.size());
  out << header_to_json(h).dump() << '\n';
  for (const json& r : records) out << r.dump() << '\n';
  if (!out) throw IoError("failed writing manifest " + path.string());
}

void write_dataset(const std::vector<SceneSample>& samples, const DatasetHeader& header, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create dataset directory " + (dir / "images").string() + ": " + ec.message());
  std::vector<json> records;
  records.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const SceneSample& s = samples[i];
    json rec = sample_record(s, static_cast<std::int64_t>(i));
    write_ppm(dir / rec["ref_images"][0].get<std::string>(), s.ref_images[0]);
    write_ppm(dir / rec["ref_images"][1].get<std::string>(), s.ref_images[1]);
    write_ppm(dir / rec["background"].get<std::string>(), s.background);
    write_ppm(dir / rec["target"].get<std::string>(), s.target);
    records.push_back(std::move(rec));
  }
  write_manifest(dir / "manifest.jsonl", header, records);
}

namespace {

SceneSample parse_record(const json& rec, const fs::path& root, const Codebook& codebook, int patch) {
  SceneSample s;
  s.K = codebook.size();
  for (std::size_t i = 0; i < 2; ++i) {
    s.ref_images[i] = read_ppm(root / rec.at("ref_images").at(i).get<std::string>());
    s.ref_tokens[i] = quantize(s.ref_images[i], codebook, patch);
  }
  s.background = read_ppm(root / rec.at("background").get<std::string>());
  s.target = read_ppm(root / rec.at("target").get<std::string>());
  s.background_tokens = quantize(s.background, codebook, patch);
  s.target_tokens = quantize(s.target, codebook, patch);
  const int rows = rec.at("mask_rows").get<int>();
  const int cols = rec.at("mask_cols").get<int>();
  for (std::size_t i = 0; i < 2; ++i) {
    s.masks[i] = decode_rle(rec.at("masks").at(i).get<std::vector<int>>(), rows, cols);
    s.ref_masks[i] = decode_rle(rec.at("ref_masks").at(i).get<std::vector<int>>(), rows, cols);
  }
  s.relation_id = rec.at("relation_id").get<int>();
  s.prompt = rec.at("prompt").get<std::vector<int>>();
  for (std::size_t i = 0; i < 2; ++i) {
    const json& sub = rec.at("subjects").at(i);
    s.subjects[i].class_id = sub.at("class_id").get<int>();
    s.subjects[i].shape = static_cast<Shape>(sub.at("shape").get<int>());
    s.subjects[i].signature = sub.at("signature").get<std::vector<int>>();
    s.subjects[i].pose_seed = sub.at("pose_seed").get<std::uint64_t>();
    const json& pl = rec.at("placements").at(i);
    s.target_placement[i] = {pl.at("row").get<int>(), pl.at("col").get<int>(), pl.at("quarter_turns").get<int>()};
  }
  s.bg_seed = rec.at("bg_seed").get<std::uint64_t>();
  return s;
}

}  // namespace

Dataset read_dataset(const fs::path& dir) {
  const fs::path manifest = dir / "manifest.jsonl";
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open dataset manifest " + manifest.string());

  Dataset ds;
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty manifest " + manifest.string());
  try {
    const json h = json::parse(line);
    if (h.at("format").get<std::string>() != "tokenar-dataset")
      throw IoError("manifest " + manifest.string() + " line 1: not a tokenar dataset header");
    ds.header.count = h.at("count").get<std::int64_t>();
    ds.header.K = h.at("K").get<int>();
    ds.header.codebook_seed = h.at("codebook_seed").get<std::uint64_t>();
    ds.header.geometry.grid = h.at("grid").get<int>();
    ds.header.geometry.patch = h.at("patch").get<int>();
    ds.header.geometry.extent = h.at("extent").get<int>();
    ds.header.delta = h.at("delta").get<double>();
  } catch (const json::exception& e) {
    throw IoError("manifest " + manifest.string() + " line 1: corrupt header (" + e.what() + ")");
  }

  const Codebook codebook = build_codebook(ds.header.codebook_seed, ds.header.K);
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      ds.samples.push_back(parse_record(json::parse(line), dir, codebook, ds.header.geometry.patch));
    } catch (const json::exception& e) {
      throw IoError("manifest " + manifest.string() + " line " + std::to_string(line_no) + ": corrupt record (" +
                    e.what() + ")");
    } catch (const InvalidArgument& e) {
      throw IoError("manifest " + manifest.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (static_cast<std::int64_t>(ds.samples.size()) != ds.header.count)
    throw IoError("manifest " + manifest.string() + " declares " + std::to_string(ds.header.count) + " records but holds " +
                  std::to_string(ds.samples.size()));
  return ds;
}

}  // namespace tokenar
