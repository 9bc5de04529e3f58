#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "mixmil/image.hpp"

namespace mixmil {

struct Lab {
  double L = 0.0;
  double a = 0.0;
  double b = 0.0;
};

/// sRGB (D65) to CIELAB, one triple per pixel in row-major order.
std::vector<Lab> rgb_to_lab(const ImageRGB& img);
Lab rgb_to_lab(Rgb c);

struct Region {
  std::size_t pixel_count = 0;
  double centroid_x = 0.0;  // mean column, pixels
  double centroid_y = 0.0;  // mean row, pixels
  int x0 = 0, y0 = 0;       // bounding box, inclusive
  int x1 = 0, y1 = 0;       // bounding box, exclusive
};

/// Per-pixel region ids 0..R-1 plus per-region statistics.
struct SuperpixelMap {
  int height = 0;
  int width = 0;
  std::vector<std::int32_t> labels;
  std::vector<Region> regions;
  /// K the map was produced for; drives the orphan size threshold.
  std::size_t requested_regions = 0;

  std::int32_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
  /// Linear pixel indices of each region.
  std::vector<std::vector<std::uint32_t>> members() const;
};

struct SlicParams {
  std::size_t regions = 4;  // K
  double compactness = 10.0;
  int max_iter = 10;
  /// Gaussian pre-smoothing of the Lab image (pixels); 0 disables.
  double smoothing = 0.0;
};

/// K that makes the mean region area roughly one patch (patch_size^2).
std::size_t auto_region_count(const ImageRGB& img, int patch_size = 224);

SuperpixelMap slic(const ImageRGB& img, const SlicParams& params);

/// Builds a map (statistics, dense ids) from a raw label array without
/// touching connectivity. Ids are renumbered by first appearance.
SuperpixelMap make_superpixel_map(int height, int width, const std::vector<std::int32_t>& raw,
                                  std::size_t requested_regions);

/// Splits regions into 4-connected components and merges components smaller
/// than (HW/K)/4 into their largest neighbour. Ids are re-densified in scan order.
SuperpixelMap enforce_connectivity(const SuperpixelMap& map);
SuperpixelMap enforce_connectivity(const SuperpixelMap& map, std::size_t min_size);

/// Number of 4-neighbour pixel pairs whose labels differ.
std::size_t boundary_length(const SuperpixelMap& map);
/// True when every region is a single 4-connected component.
bool is_four_connected(const SuperpixelMap& map);

/// Writes `<stem>.labels` (int32 little-endian, row-major) and `<stem>.json`
/// (height, width, K, c).
void save_label_map(const std::filesystem::path& stem, const SuperpixelMap& map, double compactness);
SuperpixelMap load_label_map(const std::filesystem::path& stem);

/// Copy of the image with region boundaries painted in `color`.
ImageRGB boundary_overlay(const ImageRGB& img, const SuperpixelMap& map, Rgb color = {255, 255, 0});

}  // namespace mixmil
