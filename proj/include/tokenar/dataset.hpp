#pragma once

#include "tokenar/scene.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <vector>

namespace tokenar {

// Everything needed to re-quantize the stored images.
struct DatasetHeader {
  std::int64_t count = 0;
  int K = 64;
  std::uint64_t codebook_seed = 0;
  SceneGeometry geometry;
  double delta = 0.8;
};

struct Dataset {
  DatasetHeader header;
  std::vector<SceneSample> samples;
};

// Run-length encoding of a mask: alternating run lengths, starting with a
// (possibly empty) run of zeros, in row-major order.
std::vector<int> encode_rle(const MaskGrid& mask);
MaskGrid decode_rle(const std::vector<int>& runs, int rows, int cols);

// Writes images under <dir>/images and one JSON object per sample to
// <dir>/manifest.jsonl, preceded by a header line.
void write_dataset(const std::vector<SceneSample>& samples, const DatasetHeader& header, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

nlohmann::json header_to_json(const DatasetHeader& header);
// The manifest record for sample `id` (image paths are relative to the dataset root).
nlohmann::json sample_record(const SceneSample& sample, std::int64_t id);
void write_manifest(const std::filesystem::path& path, const DatasetHeader& header, const std::vector<nlohmann::json>& records);

}  // namespace tokenar
