#include "mixmil/image.hpp"

#include <png.h>

#include <cstdio>
#include <memory>
#include <string>

namespace mixmil {

ImageRGB::ImageRGB(int h, int w, Rgb fill) : height(h), width(w) {
  if (h < 1 || w < 1) throw std::invalid_argument("image must have at least one pixel");
  pixels.resize(3 * pixel_count());
  for (std::size_t i = 0; i < pixel_count(); ++i) {
    pixels[3 * i] = fill[0];
    pixels[3 * i + 1] = fill[1];
    pixels[3 * i + 2] = fill[2];
  }
}

ImageRGB ImageRGB::crop(int y0, int x0, int h, int w) const {
  if (y0 < 0 || x0 < 0 || y0 + h > height || x0 + w > width) throw std::out_of_range("crop window outside image");
  ImageRGB out(h, w);
  for (int y = 0; y < h; ++y) {
    const auto* src = &pixels[3 * (static_cast<std::size_t>(y0 + y) * width + x0)];
    std::copy(src, src + 3 * w, &out.pixels[3 * static_cast<std::size_t>(y) * w]);
  }
  return out;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_png_raw(const std::filesystem::path& path, int height, int width, int color_type, int channels,
                   const std::uint8_t* data) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw ImageIoError("cannot open for writing: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("PNG encode failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_compression_level(png, 3);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(width) * channels;
  for (int y = 0; y < height; ++y) png_write_row(png, const_cast<png_bytep>(data + y * stride));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Decodes to 8-bit with the requested channel count (1 = gray, 3 = RGB).
std::vector<std::uint8_t> read_png_raw(const std::filesystem::path& path, int channels, int& height, int& width) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw ImageIoError("cannot open: " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw ImageIoError("not a PNG file: " + path.string());
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("libpng init failed");
  }
  std::vector<std::uint8_t> data;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("corrupt PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  const bool is_gray = (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA);
  if (channels == 3 && is_gray) png_set_gray_to_rgb(png);
  if (channels == 1 && !is_gray) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  const std::size_t stride = png_get_rowbytes(png, info);
  if (stride != static_cast<std::size_t>(width) * channels) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("unsupported PNG layout: " + path.string());
  }
  data.resize(stride * height);
  std::vector<png_bytep> rows(height);
  for (int y = 0; y < height; ++y) rows[y] = data.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return data;
}

}  // namespace

void write_png(const std::filesystem::path& path, const ImageRGB& img) {
  write_png_raw(path, img.height, img.width, PNG_COLOR_TYPE_RGB, 3, img.pixels.data());
}

void write_png(const std::filesystem::path& path, const LabelImage& img) {
  write_png_raw(path, img.height, img.width, PNG_COLOR_TYPE_GRAY, 1, img.values.data());
}

ImageRGB read_png_rgb(const std::filesystem::path& path) {
  ImageRGB img;
  img.pixels = read_png_raw(path, 3, img.height, img.width);
  return img;
}

LabelImage read_png_gray(const std::filesystem::path& path) {
  LabelImage img;
  img.values = read_png_raw(path, 1, img.height, img.width);
  return img;
}

}  // namespace mixmil
