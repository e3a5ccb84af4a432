#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace changedet {

// Interleaved 8-bit image, 1 (grayscale) or 3 (RGB) channels.
struct ImageU8 {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<std::uint8_t> data;

  ImageU8() = default;
  ImageU8(int h, int w, int c) : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, 0) {}

  std::uint8_t& at(int y, int x, int c) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

// Decodes a PNG to grayscale or RGB (palette expanded, 16-bit narrowed,
// alpha stripped). Throws IoError naming the path on any failure.
ImageU8 read_png(const std::filesystem::path& path);

// Encodes a 1- or 3-channel image. Throws IoError on failure.
void write_png(const std::filesystem::path& path, const ImageU8& image);

}  // namespace changedet
