#include "tokenar/tokenizer.hpp"

#include "tokenar/error.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <string>

namespace tokenar {

Codebook build_codebook(std::uint64_t seed, int K) {
  require(K >= 2, "build_codebook: K must be >= 2, got " + std::to_string(K));
  int levels = 2;
  while (levels * levels * levels < K) ++levels;
  require(levels <= 256, "build_codebook: K too large for an 8-bit lattice");

  const int lattice = levels * levels * levels;
  std::vector<int> order(static_cast<std::size_t>(lattice));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  auto level = [&](int i) { return std::round(255.0 * i / (levels - 1)) / 255.0; };

  Codebook cb;
  cb.seed = seed;
  cb.entries.resize(K, 3);
  for (int k = 0; k < K; ++k) {
    const int idx = order[static_cast<std::size_t>(k)];
    cb.entries(k, 0) = level(idx % levels);
    cb.entries(k, 1) = level((idx / levels) % levels);
    cb.entries(k, 2) = level(idx / (levels * levels));
  }
  return cb;
}

int nearest_entry(const Codebook& codebook, const Color& color) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < codebook.size(); ++k) {
    const double d = (codebook.entries.row(k) - color).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

TokenGrid quantize(const ImageGrid& image, const Codebook& codebook, int patch) {
  require(patch > 0, "quantize: patch must be positive");
  require(image.width % patch == 0 && image.height % patch == 0,
          "quantize: image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
              " not divisible by patch " + std::to_string(patch));
  TokenGrid grid(image.height / patch, image.width / patch);
  const double inv_area = 1.0 / (patch * patch);
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      Color mean = Color::Zero();
      for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x) mean += image.pixel(c * patch + x, r * patch + y);
      grid(r, c) = nearest_entry(codebook, mean * inv_area);
    }
  }
  return grid;
}

ImageGrid dequantize(const TokenGrid& tokens, const Codebook& codebook, int patch) {
  require(patch > 0, "dequantize: patch must be positive");
  ImageGrid image(tokens.cols * patch, tokens.rows * patch);
  for (int r = 0; r < tokens.rows; ++r) {
    for (int c = 0; c < tokens.cols; ++c) {
      const int t = tokens(r, c);
      require(t >= 0 && t < codebook.size(),
              "dequantize: token " + std::to_string(t) + " outside codebook of size " +
                  std::to_string(codebook.size()));
      for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x) image.pixel(c * patch + x, r * patch + y) = codebook.entries.row(t);
    }
  }
  return image;
}

namespace {

// Reads the next whitespace-separated header field, skipping '#' comments.
bool next_header_int(std::istream& in, int& value) {
  for (;;) {
    int ch = in.peek();
    if (ch == EOF) return false;
    if (std::isspace(ch)) {
      in.get();
    } else if (ch == '#') {
      std::string skip;
      std::getline(in, skip);
    } else {
      break;
    }
  }
  return static_cast<bool>(in >> value);
}

}  // namespace

ImageGrid read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  if (!in || magic != "P6") throw IoError("not a binary PPM (P6): " + path.string());
  int w = 0, h = 0, maxval = 0;
  if (!next_header_int(in, w) || !next_header_int(in, h) || !next_header_int(in, maxval))
    throw IoError("truncated PPM header: " + path.string());
  if (w <= 0 || h <= 0 || maxval != 255) throw IoError("unsupported PPM geometry or depth: " + path.string());
  in.get();  // single whitespace before raster

  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw IoError("truncated PPM raster: " + path.string());

  ImageGrid img(w, h);
  for (std::size_t i = 0; i < raw.size(); ++i)
    img.pixels(static_cast<Eigen::Index>(i / 3), static_cast<Eigen::Index>(i % 3)) = raw[i] / 255.0;
  return img;
}

void write_ppm(const std::filesystem::path& path, const ImageGrid& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  std::vector<unsigned char> raw(static_cast<std::size_t>(image.width) * image.height * 3);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const double v = image.pixels(static_cast<Eigen::Index>(i / 3), static_cast<Eigen::Index>(i % 3));
    raw[i] = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw IoError("failed writing image " + path.string());
}

}  // namespace tokenar
