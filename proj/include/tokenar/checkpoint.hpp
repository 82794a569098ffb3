#pragma once

#include "tokenar/model.hpp"

#include <cstdint>
#include <filesystem>
#include <string>

namespace tokenar {

inline constexpr char kCheckpointMagic[4] = {'T', 'K', 'A', 'R'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout: magic "TKAR", u32 version, u32 tensor count, then per tensor
// (u32 name length, name bytes, u32 rank, u32 dims..., float32 row-major data),
// all little-endian. The architecture travels as the 1-D tensor "meta.config".
void save_checkpoint(const std::filesystem::path& path, const ModelParams<float>& params);
ModelParams<float> load_checkpoint(const std::filesystem::path& path);

// Throws VersionError naming both configurations when they differ.
void require_compatible(const ModelConfig& expected, const ModelConfig& found, const std::string& source);

std::string describe(const ModelConfig& cfg);

}  // namespace tokenar
