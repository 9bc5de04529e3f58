#include "mixmil/visualize.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <stdexcept>

namespace mixmil {

namespace {

struct Glyph {
  char ch;
  std::array<std::uint8_t, 7> rows;  // 5 bits per row, MSB on the left
};

constexpr Glyph kFont[] = {
    {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}}, {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
    {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}}, {'D', {0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E}},
    {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}}, {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
    {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}}, {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
    {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}}, {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
    {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}}, {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
    {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}}, {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
    {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
    {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}}, {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
    {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}}, {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
    {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
    {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}}, {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
    {'Y', {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}}, {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
    {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}}, {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}}, {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
    {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}}, {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
    {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}}, {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
    {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}}, {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
    {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}}, {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}},
    {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}}, {'/', {0x00, 0x01, 0x02, 0x04, 0x08, 0x10, 0x00}},
    {' ', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00}}, {'?', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x00, 0x04}},
};

const Glyph& glyph(char c) {
  const char up = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (const auto& g : kFont)
    if (g.ch == up) return g;
  return kFont[std::size(kFont) - 1];
}

void fill_rect(ImageRGB& img, int x0, int y0, int w, int h, Rgb color) {
  for (int y = std::max(0, y0); y < std::min(img.height, y0 + h); ++y)
    for (int x = std::max(0, x0); x < std::min(img.width, x0 + w); ++x) img.set(y, x, color);
}

constexpr int kGlyphAdvance = 6;  // 5 columns plus one of spacing

}  // namespace

Rgb class_color(std::size_t class_index) {
  static constexpr Rgb kColors[] = {{40, 170, 70}, {240, 210, 40}, {245, 130, 30}, {210, 30, 40},
                                    {60, 110, 220}, {150, 60, 190}, {30, 190, 200}, {120, 120, 120}};
  return kColors[class_index % std::size(kColors)];
}

std::vector<int> region_classes(const SuperpixelMap& map, std::span<const std::int32_t> region_ids,
                                std::span<const int> classes) {
  if (region_ids.size() != classes.size()) throw std::invalid_argument("region_classes: length mismatch");
  std::vector<int> out(map.regions.size(), -1);
  for (std::size_t i = 0; i < region_ids.size(); ++i) {
    const auto r = static_cast<std::size_t>(region_ids[i]);
    if (r >= out.size()) throw std::out_of_range("region_classes: region id outside the map");
    out[r] = classes[i];
  }
  return out;
}

void draw_text(ImageRGB& img, int x, int y, const std::string& text, Rgb color, int scale) {
  for (char c : text) {
    const Glyph& g = glyph(c);
    for (int row = 0; row < 7; ++row)
      for (int col = 0; col < 5; ++col)
        if (g.rows[row] & (0x10 >> col)) fill_rect(img, x + col * scale, y + row * scale, scale, scale, color);
    x += kGlyphAdvance * scale;
  }
}

ImageRGB render_overlay(const ImageRGB& slide, const SuperpixelMap& map, std::span<const int> per_region_class,
                        const ClassSet& classes, double alpha) {
  if (map.height != slide.height || map.width != slide.width) throw std::invalid_argument("overlay: map does not cover slide");
  if (per_region_class.size() != map.regions.size()) throw std::invalid_argument("overlay: one class per region required");
  ImageRGB out = slide;
  for (int y = 0; y < slide.height; ++y) {
    for (int x = 0; x < slide.width; ++x) {
      const int c = per_region_class[static_cast<std::size_t>(map.at(y, x))];
      if (c < 0) continue;
      const Rgb base = slide.at(y, x);
      const Rgb tint = class_color(static_cast<std::size_t>(c));
      Rgb px;
      for (int k = 0; k < 3; ++k) px[k] = static_cast<std::uint8_t>(std::lround((1.0 - alpha) * base[k] + alpha * tint[k]));
      out.set(y, x, px);
    }
  }
  for (int y = 0; y < slide.height; ++y) {
    for (int x = 0; x < slide.width; ++x) {
      const auto r = map.at(y, x);
      if ((x + 1 < slide.width && map.at(y, x + 1) != r) || (y + 1 < slide.height && map.at(y + 1, x) != r)) {
        out.set(y, x, {20, 20, 20});
      }
    }
  }
  // Legend, shrunk to fit small slides.
  std::size_t longest = 0;
  for (const auto& name : classes.names()) longest = std::max(longest, name.size());
  const int text_w = static_cast<int>(longest) * kGlyphAdvance;
  const int scale = std::clamp(std::min(slide.width / (text_w + 24), slide.height / (10 * static_cast<int>(classes.size()) + 4)), 0, 2);
  if (scale >= 1) {
    const int line = 10 * scale;
    const int box_w = (text_w + 18) * scale;
    const int box_h = static_cast<int>(classes.size()) * line + 4 * scale;
    fill_rect(out, 0, 0, box_w, box_h, {255, 255, 255});
    for (std::size_t c = 0; c < classes.size(); ++c) {
      const int y = 2 * scale + static_cast<int>(c) * line;
      fill_rect(out, 2 * scale, y, 7 * scale, 7 * scale, class_color(c));
      draw_text(out, 12 * scale, y, classes.name(c), {0, 0, 0}, scale);
    }
  }
  return out;
}

std::vector<int> region_truth(const SuperpixelMap& map, const LabelImage& labels, std::size_t class_count) {
  if (labels.height != map.height || labels.width != map.width) throw std::invalid_argument("region_truth: size mismatch");
  std::vector<std::vector<std::size_t>> votes(map.regions.size(), std::vector<std::size_t>(class_count, 0));
  for (std::size_t p = 0; p < map.labels.size(); ++p) {
    const auto v = labels.values[p];
    if (v < class_count) ++votes[static_cast<std::size_t>(map.labels[p])][v];
  }
  std::vector<int> out(map.regions.size(), -1);
  for (std::size_t r = 0; r < votes.size(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = class_count; c-- > 0;) {
      if (votes[r][c] > best) best = votes[r][c], out[r] = static_cast<int>(c);
    }
  }
  return out;
}

double region_agreement(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("region_agreement: length mismatch");
  std::size_t total = 0, same = 0;
  for (std::size_t r = 0; r < predicted.size(); ++r) {
    if (predicted[r] < 0 || truth[r] < 0) continue;
    ++total;
    same += predicted[r] == truth[r];
  }
  if (total == 0) throw std::invalid_argument("region_agreement: no region has both a prediction and a truth class");
  return static_cast<double>(same) / static_cast<double>(total);
}

ImageRGB side_by_side(const ImageRGB& left, const ImageRGB& right, int gutter) {
  ImageRGB out(std::max(left.height, right.height), left.width + gutter + right.width, {255, 255, 255});
  for (int y = 0; y < left.height; ++y)
    for (int x = 0; x < left.width; ++x) out.set(y, x, left.at(y, x));
  for (int y = 0; y < right.height; ++y)
    for (int x = 0; x < right.width; ++x) out.set(y, left.width + gutter + x, right.at(y, x));
  return out;
}

}  // namespace mixmil
