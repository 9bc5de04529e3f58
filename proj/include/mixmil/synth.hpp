#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "mixmil/image.hpp"
#include "mixmil/instances.hpp"
#include "mixmil/superpixel.hpp"

namespace mixmil {

/// Texture of one class: base colour plus a sinusoidal stripe pattern.
struct SynthClass {
  Rgb base{180, 130, 180};
  double frequency = 0.05;    // cycles per pixel
  double orientation = 0.0;   // radians
  double amplitude = 30.0;    // stripe amplitude, intensity units
  double sigma = 12.0;        // Gaussian pixel noise
};

std::vector<SynthClass> default_palette();

struct SynthConfig {
  int image_size = 896;
  int grid_rows = 4;
  int grid_cols = 4;
  std::vector<SynthClass> palette = default_palette();
  double blank_prob = 0.1;
  double label_noise = 0.0;  // eta
  /// Independent per-class inclusion probabilities; empty class sets are redrawn.
  std::vector<double> class_prior{0.4, 0.3, 0.2, 0.1};
  /// Share of the cells left after one cell per drawn class that go to the
  /// slide's dominant class; the rest are uniform over the drawn set.
  double dominant_share = 0.0;
  /// Per-slide colour shift (std, intensity units) shared by all cells.
  double slide_jitter = 6.0;
  Rgb blank_color{242, 242, 242};
  std::uint64_t seed = 0;
  std::size_t n_slides = 100;
  std::size_t slides_per_patient = 2;

  void validate() const;
};

struct SynthSlide {
  std::string slide_id;
  std::string patient_id;
  ImageRGB image;
  LabelImage pixel_labels;  // recorded labels, noise applied; kUnlabeled on blank cells
  LabelImage truth;         // generated classes; kUnlabeled on blank cells
  std::vector<int> cell_classes;  // row-major, -1 for blank
  std::vector<int> slide_label;   // union of generated classes
};

/// Draws the class set, fills the grid and renders one slide.
SynthSlide generate_slide(const SynthConfig& cfg, std::mt19937_64& rng);

/// RNG for slide `index` of a dataset; independent of generation order.
std::mt19937_64 slide_rng(std::uint64_t seed, std::size_t index);

struct SynthDataset {
  std::vector<SynthSlide> slides;
  std::vector<Bag> bags;  // one per slide that produced a non-empty bag
  std::size_t empty_bags = 0;
  nlohmann::json manifest;
};

struct BagBuildOptions {
  bool build = true;
  SlicParams slic{0, 10.0, 10, 8.0};  // regions == 0 selects auto_region_count
  InstanceConfig instances;
  std::size_t workers = 1;
};

/// n slides -> SLIC -> build_bag; patients are assigned round-robin.
SynthDataset generate_dataset(const SynthConfig& cfg, const BagBuildOptions& options = {});

/// images/<id>.png, labels/<id>.png, truth/<id>.png and manifest.json.
void write_dataset(const std::filesystem::path& dir, const SynthDataset& data);

nlohmann::json synth_manifest(const SynthConfig& cfg, const std::vector<SynthSlide>& slides);

}  // namespace mixmil
