#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mixmil/image.hpp"
#include "mixmil/instances.hpp"
#include "mixmil/superpixel.hpp"

namespace mixmil {

/// Display colour per class index (cycled past the built-in list).
Rgb class_color(std::size_t class_index);

/// Per-region class over the full map; regions not in `region_ids` get -1.
std::vector<int> region_classes(const SuperpixelMap& map, std::span<const std::int32_t> region_ids,
                                std::span<const int> classes);

/// Slide with each classified region tinted by its class colour, region
/// boundaries drawn, and a legend of class names. Same size as the slide.
ImageRGB render_overlay(const ImageRGB& slide, const SuperpixelMap& map, std::span<const int> per_region_class,
                        const ClassSet& classes, double alpha = 0.45);

/// Majority class of each region's annotated pixels (-1 when none).
std::vector<int> region_truth(const SuperpixelMap& map, const LabelImage& labels, std::size_t class_count);

/// Fraction of classified regions whose class equals the region's majority truth class.
double region_agreement(std::span<const int> predicted, std::span<const int> truth);

/// Two images next to each other with a white gutter.
ImageRGB side_by_side(const ImageRGB& left, const ImageRGB& right, int gutter = 8);

/// Draws upper-case text with a 5x7 bitmap font scaled by `scale`.
void draw_text(ImageRGB& img, int x, int y, const std::string& text, Rgb color, int scale = 2);

}  // namespace mixmil
