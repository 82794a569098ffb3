#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <vector>

namespace tokenar {

// Row-major 2-D grid of small values. Used for token grids and masks.
template <class T>
struct Grid {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(int r, int c, T fill = T{}) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

  int size() const { return rows * cols; }
  T& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  const T& operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  T& operator[](int i) { return data[static_cast<std::size_t>(i)]; }
  const T& operator[](int i) const { return data[static_cast<std::size_t>(i)]; }

  bool operator==(const Grid&) const = default;
};

using TokenGrid = Grid<int>;
using MaskGrid = Grid<std::uint8_t>;

using ColorTable = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Color = Eigen::RowVector3d;

struct Codebook {
  ColorTable entries;  // K x 3, channels in [0,1]
  std::uint64_t seed = 0;

  int size() const { return static_cast<int>(entries.rows()); }
  bool operator==(const Codebook& o) const { return seed == o.seed && entries == o.entries; }
};

struct ImageGrid {
  int width = 0;
  int height = 0;
  ColorTable pixels;  // width*height rows, row-major pixel order

  ImageGrid() = default;
  ImageGrid(int w, int h) : width(w), height(h), pixels(ColorTable::Zero(static_cast<Eigen::Index>(w) * h, 3)) {}

  auto pixel(int x, int y) { return pixels.row(static_cast<Eigen::Index>(y) * width + x); }
  auto pixel(int x, int y) const { return pixels.row(static_cast<Eigen::Index>(y) * width + x); }

  bool operator==(const ImageGrid& o) const {
    return width == o.width && height == o.height && pixels == o.pixels;
  }
};

// Palette on an RGB lattice with 8-bit exact levels, shuffled by seed.
Codebook build_codebook(std::uint64_t seed, int K);

// Index of the entry nearest to color (squared Euclidean, lowest index on ties).
int nearest_entry(const Codebook& codebook, const Color& color);

TokenGrid quantize(const ImageGrid& image, const Codebook& codebook, int patch);
ImageGrid dequantize(const TokenGrid& tokens, const Codebook& codebook, int patch);

// Binary P6 with maxval 255; channels map to value/255.
ImageGrid read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const ImageGrid& image);

}  // namespace tokenar
