#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace jidm {

/// Dense H x W x C array, row-major with interleaved channels.
template <typename T>
struct Grid {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<T> data;

  Grid() = default;
  Grid(int h, int w, int c = 1, T fill = T{})
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  std::size_t index(int row, int col, int ch = 0) const {
    return (static_cast<std::size_t>(row) * width + col) * channels + ch;
  }
  T& operator()(int row, int col, int ch = 0) { return data[index(row, col, ch)]; }
  const T& operator()(int row, int col, int ch = 0) const { return data[index(row, col, ch)]; }

  bool contains(int row, int col) const { return row >= 0 && row < height && col >= 0 && col < width; }
  std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }
  bool same_shape(int h, int w) const { return height == h && width == w; }

  friend bool operator==(const Grid&, const Grid&) = default;
};

/// Observation image, values in [0,1].
using Image = Grid<float>;
using Mask = Grid<std::uint8_t>;

inline std::size_t count_true(const Mask& m) {
  std::size_t n = 0;
  for (auto v : m.data) n += v ? 1 : 0;
  return n;
}

/// Binary PGM (C=1) or PPM (C=3) dump for debugging.
inline void write_pnm(const Image& img, const std::string& path) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("pnm dump needs 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << (img.channels == 1 ? "P5\n" : "P6\n") << img.width << ' ' << img.height << "\n255\n";
  for (float v : img.data) {
    const double c = v < 0.f ? 0.0 : (v > 1.f ? 1.0 : static_cast<double>(v));
    out.put(static_cast<char>(static_cast<unsigned char>(c * 255.0 + 0.5)));
  }
}

}  // namespace jidm
