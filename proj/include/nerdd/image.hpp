#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace nerdd {

/// 8-bit image with interleaved channels, row-major.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int w, int h, int c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, fill) {}

  std::size_t index(int x, int y, int c = 0) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  std::uint8_t& at(int x, int y, int c = 0) { return pixels[index(x, y, c)]; }
  std::uint8_t at(int x, int y, int c = 0) const { return pixels[index(x, y, c)]; }
  bool empty() const { return pixels.empty(); }

  friend bool operator==(const Image&, const Image&) = default;
};

// PNG codec (libpng). Gray, RGB and RGBA are supported; 16-bit input is reduced to 8-bit.
std::vector<std::uint8_t> encode_png(const Image& img);
Image decode_png(const std::vector<std::uint8_t>& bytes);
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);

}  // namespace nerdd
