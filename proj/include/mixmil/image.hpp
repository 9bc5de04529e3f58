#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace mixmil {

using Rgb = std::array<std::uint8_t, 3>;

/// 8-bit RGB image, row-major, interleaved.
struct ImageRGB {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  ImageRGB() = default;
  ImageRGB(int h, int w, Rgb fill = {0, 0, 0});

  std::size_t pixel_count() const { return static_cast<std::size_t>(height) * static_cast<std::size_t>(width); }
  Rgb at(int y, int x) const {
    const std::size_t i = 3 * (static_cast<std::size_t>(y) * width + x);
    return {pixels[i], pixels[i + 1], pixels[i + 2]};
  }
  void set(int y, int x, Rgb c) {
    const std::size_t i = 3 * (static_cast<std::size_t>(y) * width + x);
    pixels[i] = c[0];
    pixels[i + 1] = c[1];
    pixels[i + 2] = c[2];
  }
  /// Sub-image copy; the window must lie inside the image.
  ImageRGB crop(int y0, int x0, int h, int w) const;
};

/// Pixel value marking "no annotation" in a label image.
inline constexpr std::uint8_t kUnlabeled = 255;

/// 8-bit single-channel image of class indices.
struct LabelImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;

  LabelImage() = default;
  LabelImage(int h, int w, std::uint8_t fill = kUnlabeled)
      : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}
  std::uint8_t at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_png(const std::filesystem::path& path, const ImageRGB& img);
void write_png(const std::filesystem::path& path, const LabelImage& img);
ImageRGB read_png_rgb(const std::filesystem::path& path);
LabelImage read_png_gray(const std::filesystem::path& path);

}  // namespace mixmil
