#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace hps {

// Decoded PNG. Samples are interleaved per pixel; 8-bit images keep their
// values in the low byte.
struct PngImage {
  std::size_t width = 0;
  std::size_t height = 0;
  int channels = 0;   // 1 gray, 3 RGB, 4 RGBA
  int bit_depth = 0;  // 8 or 16
  std::vector<std::uint16_t> samples;
};

// Palette and sub-byte gray images are expanded to 8 bits. Throws DataError.
PngImage read_png(const std::filesystem::path& path);

void write_png_rgb8(const std::filesystem::path& path, std::size_t width,
                    std::size_t height, const std::vector<std::uint8_t>& rgb);
void write_png_gray8(const std::filesystem::path& path, std::size_t width,
                     std::size_t height,
                     const std::vector<std::uint8_t>& values);
void write_png_gray16(const std::filesystem::path& path, std::size_t width,
                      std::size_t height,
                      const std::vector<std::uint16_t>& values);

}  // namespace hps
