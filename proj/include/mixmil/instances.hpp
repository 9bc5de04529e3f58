#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mixmil/image.hpp"
#include "mixmil/superpixel.hpp"
#include "mixmil/tensor.hpp"

namespace mixmil {

/// Ordered class names; position is the severity rank.
class ClassSet {
 public:
  ClassSet();  // NC, GG3, GG4, GG5
  explicit ClassSet(std::vector<std::string> names);

  std::size_t size() const { return names_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  const std::vector<std::string>& names() const { return names_; }
  std::optional<std::size_t> index_of(std::string_view name) const;
  bool operator==(const ClassSet&) const = default;

 private:
  std::vector<std::string> names_;
};

/// Marks an instance whose region carried no annotated pixel.
inline constexpr int kNoLabel = -1;

struct Centroid {
  double x = 0.0;  // column, pixels
  double y = 0.0;  // row, pixels
};

/// One slide as a multiple-instance bag.
struct Bag {
  std::string slide_id;
  std::string patient_id;
  Tensor features;                                // N x d
  std::vector<Centroid> centroids;                // N
  std::optional<std::vector<int>> instance_labels;  // N class indices (or kNoLabel)
  std::vector<int> slide_label;                   // l entries in {0,1}; empty when unknown
  std::vector<std::int32_t> region_ids;           // superpixel id per instance

  std::size_t size() const { return centroids.size(); }
  std::size_t feature_dim() const { return features.cols(); }
  /// Throws std::invalid_argument when a structural invariant is broken.
  void validate() const;
};

class EmptyBagError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct InstanceConfig {
  double white_level = 230.0;     // mean RGB above this counts as blank
  double tissue_threshold = 0.9;  // max blank fraction a retained region may have
  int patch_size = 224;
  std::size_t feature_dim = 64;
};

/// Region ids whose near-white pixel fraction does not exceed the threshold.
std::vector<std::int32_t> filter_blank(const ImageRGB& img, const SuperpixelMap& map, const InstanceConfig& cfg);

/// Majority class over annotated pixels; ties go to the higher severity rank.
/// Returns kNoLabel when no pixel in the region is annotated.
int assign_instance_label(std::span<const std::uint32_t> region_pixels, const LabelImage& pixel_labels,
                          std::size_t class_count);

struct PatchWindow {
  int y0 = 0, x0 = 0, height = 0, width = 0;
  bool operator==(const PatchWindow&) const = default;
};

/// Centroid-centred window first, then stride-`patch_size` grid windows over the
/// bounding box whose centres lie in the region; all clamped to the image and deduplicated.
std::vector<PatchWindow> patch_windows(const ImageRGB& img, const SuperpixelMap& map, std::int32_t region,
                                       int patch_size = 224);
std::vector<ImageRGB> crop_patches(const ImageRGB& img, const SuperpixelMap& map, std::int32_t region,
                                   int patch_size = 224);

/// Number of raw descriptor entries before padding/wrapping to `dim`.
inline constexpr std::size_t kDescriptorLength = 62;

/// Colour histograms (3x16), channel mean/std (6), luminance gradient
/// orientation histogram (8); fitted to `dim` and L2-normalised.
std::vector<double> extract_features(const ImageRGB& patch, std::size_t dim);

std::vector<double> aggregate(std::span<const std::vector<double>> features);

/// filter_blank -> label/centroid/patches per region -> features -> aggregate.
Bag build_bag(const ImageRGB& img, const SuperpixelMap& map, const LabelImage* pixel_labels,
              std::vector<int> slide_label, const InstanceConfig& cfg, const ClassSet& classes = ClassSet());

/// Bag cache directory: features.tensor, centroids.csv, labels.csv (when
/// labelled), manifest.json, and a COMPLETE marker written last.
void save_bag(const std::filesystem::path& dir, const Bag& bag, const ClassSet& classes, const std::string& config_hash);
Bag load_bag(const std::filesystem::path& dir, ClassSet* classes_out = nullptr, std::string* hash_out = nullptr);
bool bag_cache_complete(const std::filesystem::path& dir, const std::string& config_hash);

}  // namespace mixmil
