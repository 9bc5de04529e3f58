#include "mixmil/instances.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mixmil/tensor_io.hpp"

namespace mixmil {

ClassSet::ClassSet() : ClassSet({"NC", "GG3", "GG4", "GG5"}) {}

ClassSet::ClassSet(std::vector<std::string> names) : names_(std::move(names)) {
  if (names_.empty()) throw std::invalid_argument("class set must not be empty");
  std::set<std::string> unique(names_.begin(), names_.end());
  if (unique.size() != names_.size()) throw std::invalid_argument("class names must be unique");
}

std::optional<std::size_t> ClassSet::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return i;
  return std::nullopt;
}

void Bag::validate() const {
  const std::size_t n = centroids.size();
  if (n == 0) throw std::invalid_argument("bag " + slide_id + " has no instances");
  if (!features.defined() || features.rank() != 2 || features.rows() != n) {
    throw std::invalid_argument("bag " + slide_id + ": feature rows do not match instance count");
  }
  for (double v : features.data())
    if (!std::isfinite(v)) throw std::invalid_argument("bag " + slide_id + ": non-finite feature");
  // An empty slide label marks an unlabelled slide.
  if (!slide_label.empty()) {
    const bool binary = std::all_of(slide_label.begin(), slide_label.end(), [](int v) { return v == 0 || v == 1; });
    const bool positive = std::any_of(slide_label.begin(), slide_label.end(), [](int v) { return v == 1; });
    if (!binary || !positive) {
      throw std::invalid_argument("bag " + slide_id + ": slide label must be binary with at least one positive");
    }
  }
  if (instance_labels) {
    if (instance_labels->size() != n) throw std::invalid_argument("bag " + slide_id + ": instance label count");
    for (int y : *instance_labels)
      if (y < kNoLabel) throw std::invalid_argument("bag " + slide_id + ": instance label out of range");
  }
}

std::vector<std::int32_t> filter_blank(const ImageRGB& img, const SuperpixelMap& map, const InstanceConfig& cfg) {
  if (map.height != img.height || map.width != img.width) throw std::invalid_argument("label map does not cover image");
  std::vector<std::size_t> white(map.regions.size(), 0);
  for (std::size_t p = 0; p < img.pixel_count(); ++p) {
    const double m = (img.pixels[3 * p] + img.pixels[3 * p + 1] + img.pixels[3 * p + 2]) / 3.0;
    if (m > cfg.white_level) ++white[map.labels[p]];
  }
  std::vector<std::int32_t> kept;
  for (std::size_t r = 0; r < map.regions.size(); ++r) {
    const double frac = static_cast<double>(white[r]) / static_cast<double>(map.regions[r].pixel_count);
    if (frac <= cfg.tissue_threshold) kept.push_back(static_cast<std::int32_t>(r));
  }
  if (kept.empty()) throw EmptyBagError("every superpixel region is blank");
  return kept;
}

int assign_instance_label(std::span<const std::uint32_t> region_pixels, const LabelImage& pixel_labels,
                          std::size_t class_count) {
  std::vector<std::size_t> votes(class_count, 0);
  for (std::uint32_t p : region_pixels) {
    const std::uint8_t v = pixel_labels.values.at(p);
    if (v < class_count) ++votes[v];
  }
  int best = kNoLabel;
  std::size_t best_votes = 0;
  // Scan from most severe so ties keep the higher rank.
  for (std::size_t c = class_count; c-- > 0;) {
    if (votes[c] > best_votes) best_votes = votes[c], best = static_cast<int>(c);
  }
  return best;
}

std::vector<PatchWindow> patch_windows(const ImageRGB& img, const SuperpixelMap& map, std::int32_t region,
                                       int patch_size) {
  const Region& r = map.regions.at(static_cast<std::size_t>(region));
  const int ph = std::min(patch_size, img.height), pw = std::min(patch_size, img.width);
  const int half = patch_size / 2;
  auto clamp_window = [&](int y0, int x0) {
    return PatchWindow{std::clamp(y0, 0, img.height - ph), std::clamp(x0, 0, img.width - pw), ph, pw};
  };
  std::vector<PatchWindow> out;
  auto push_unique = [&](PatchWindow w) {
    if (std::find(out.begin(), out.end(), w) == out.end()) out.push_back(w);
  };
  push_unique(clamp_window(static_cast<int>(std::floor(r.centroid_y + 0.5)) - half,
                           static_cast<int>(std::floor(r.centroid_x + 0.5)) - half));
  for (int gy = r.y0; gy < r.y1; gy += patch_size) {
    for (int gx = r.x0; gx < r.x1; gx += patch_size) {
      const int cy = gy + half, cx = gx + half;
      if (cy >= img.height || cx >= img.width || map.at(cy, cx) != region) continue;
      push_unique(clamp_window(gy, gx));
    }
  }
  return out;
}

std::vector<ImageRGB> crop_patches(const ImageRGB& img, const SuperpixelMap& map, std::int32_t region,
                                   int patch_size) {
  std::vector<ImageRGB> patches;
  for (const auto& w : patch_windows(img, map, region, patch_size)) patches.push_back(img.crop(w.y0, w.x0, w.height, w.width));
  return patches;
}

std::vector<double> extract_features(const ImageRGB& patch, std::size_t dim) {
  if (dim == 0) throw std::invalid_argument("feature dimension must be positive");
  constexpr int kColorBins = 16, kOrientBins = 8;
  const std::size_t n = patch.pixel_count();
  const int H = patch.height, W = patch.width;
  std::vector<double> desc(kDescriptorLength, 0.0);

  // Colour histograms and moments.
  std::array<double, 3> sum{}, sum_sq{};
  for (std::size_t p = 0; p < n; ++p) {
    for (int c = 0; c < 3; ++c) {
      const int v = patch.pixels[3 * p + c];
      desc[c * kColorBins + v * kColorBins / 256] += 1.0;
      sum[c] += v;
      sum_sq[c] += static_cast<double>(v) * v;
    }
  }
  for (std::size_t i = 0; i < 3 * kColorBins; ++i) desc[i] /= static_cast<double>(n);
  for (int c = 0; c < 3; ++c) {
    const double mu = sum[c] / static_cast<double>(n);
    const double var = std::max(0.0, sum_sq[c] / static_cast<double>(n) - mu * mu);
    desc[48 + 2 * c] = mu / 255.0;
    desc[48 + 2 * c + 1] = std::sqrt(var) / 255.0;
  }

  // Unsigned gradient orientation on luminance, magnitude weighted.
  std::vector<double> lum(n);
  for (std::size_t p = 0; p < n; ++p) {
    lum[p] = 0.299 * patch.pixels[3 * p] + 0.587 * patch.pixels[3 * p + 1] + 0.114 * patch.pixels[3 * p + 2];
  }
  double total = 0.0;
  std::array<double, kOrientBins> orient{};
  for (int y = 1; y + 1 < H; ++y) {
    for (int x = 1; x + 1 < W; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * W + x;
      const double gx = lum[p + 1] - lum[p - 1];
      const double gy = lum[p + W] - lum[p - W];
      const double mag = std::hypot(gx, gy);
      if (mag < 1e-12) continue;
      double theta = std::atan2(gy, gx);
      if (theta < 0) theta += std::numbers::pi;
      const int bin = std::min(kOrientBins - 1, static_cast<int>(theta / std::numbers::pi * kOrientBins));
      orient[bin] += mag;
      total += mag;
    }
  }
  if (total > 0)
    for (int b = 0; b < kOrientBins; ++b) desc[54 + b] = orient[b] / total;

  std::vector<double> out(dim, 0.0);
  for (std::size_t i = 0; i < desc.size(); ++i) out[i % dim] += desc[i];
  double norm = 0.0;
  for (double v : out) norm += v * v;
  norm = std::sqrt(norm);
  if (norm <= 0.0) throw std::logic_error("all-zero descriptor");
  for (double& v : out) v /= norm;
  return out;
}

std::vector<double> aggregate(std::span<const std::vector<double>> features) {
  if (features.empty()) throw std::invalid_argument("aggregate: no feature vectors");
  std::vector<double> out(features[0].size(), 0.0);
  for (const auto& f : features) {
    if (f.size() != out.size()) throw DimensionError("aggregate: feature length mismatch");
    for (std::size_t i = 0; i < f.size(); ++i) out[i] += f[i];
  }
  for (double& v : out) v /= static_cast<double>(features.size());
  return out;
}

Bag build_bag(const ImageRGB& img, const SuperpixelMap& map, const LabelImage* pixel_labels,
              std::vector<int> slide_label, const InstanceConfig& cfg, const ClassSet& classes) {
  if (!slide_label.empty() && slide_label.size() != classes.size()) throw std::invalid_argument("slide label length does not match class set");
  if (pixel_labels && (pixel_labels->height != img.height || pixel_labels->width != img.width)) {
    throw std::invalid_argument("pixel label map does not match image size");
  }
  const auto kept = filter_blank(img, map, cfg);
  const auto members = map.members();
  Bag bag;
  bag.slide_label = std::move(slide_label);
  std::vector<double> rows;
  rows.reserve(kept.size() * cfg.feature_dim);
  if (pixel_labels) bag.instance_labels.emplace();
  for (std::int32_t r : kept) {
    const Region& region = map.regions[static_cast<std::size_t>(r)];
    bag.region_ids.push_back(r);
    bag.centroids.push_back({region.centroid_x, region.centroid_y});
    if (pixel_labels) bag.instance_labels->push_back(assign_instance_label(members[r], *pixel_labels, classes.size()));
    std::vector<std::vector<double>> feats;
    for (const auto& patch : crop_patches(img, map, r, cfg.patch_size)) feats.push_back(extract_features(patch, cfg.feature_dim));
    const auto f = aggregate(feats);
    rows.insert(rows.end(), f.begin(), f.end());
  }
  bag.features = Tensor({kept.size(), cfg.feature_dim}, std::move(rows));
  return bag;
}

// ---- cache ---------------------------------------------------------------

void save_bag(const std::filesystem::path& dir, const Bag& bag, const ClassSet& classes, const std::string& config_hash) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  fs::remove(dir / "COMPLETE");
  save_tensor(dir / "features.tensor", bag.features);
  {
    std::ofstream out(dir / "centroids.csv");
    out << "id,p_x,p_y\n";
    out.precision(17);
    for (std::size_t i = 0; i < bag.size(); ++i) out << i << ',' << bag.centroids[i].x << ',' << bag.centroids[i].y << '\n';
  }
  if (bag.instance_labels) {
    std::ofstream out(dir / "labels.csv");
    out << "id,label\n";
    for (std::size_t i = 0; i < bag.size(); ++i) out << i << ',' << (*bag.instance_labels)[i] << '\n';
  } else {
    fs::remove(dir / "labels.csv");
  }
  nlohmann::json manifest{{"slide_id", bag.slide_id},
                          {"patient_id", bag.patient_id},
                          {"class_set", classes.names()},
                          {"d", bag.feature_dim()},
                          {"instances", bag.size()},
                          {"slide_label", bag.slide_label},
                          {"region_ids", bag.region_ids},
                          {"instance_labels", bag.instance_labels.has_value()},
                          {"config_hash", config_hash}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
  std::ofstream(dir / "COMPLETE") << config_hash << '\n';
}

namespace {

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace

Bag load_bag(const std::filesystem::path& dir, ClassSet* classes_out, std::string* hash_out) {
  std::ifstream js(dir / "manifest.json");
  if (!js) throw std::runtime_error("missing bag manifest in " + dir.string());
  const auto manifest = nlohmann::json::parse(js);
  Bag bag;
  bag.slide_id = manifest.at("slide_id").get<std::string>();
  bag.patient_id = manifest.at("patient_id").get<std::string>();
  bag.slide_label = manifest.at("slide_label").get<std::vector<int>>();
  bag.region_ids = manifest.at("region_ids").get<std::vector<std::int32_t>>();
  bag.features = load_tensor(dir / "features.tensor");
  for (const auto& row : read_csv(dir / "centroids.csv")) bag.centroids.push_back({std::stod(row.at(1)), std::stod(row.at(2))});
  if (manifest.at("instance_labels").get<bool>()) {
    bag.instance_labels.emplace();
    for (const auto& row : read_csv(dir / "labels.csv")) bag.instance_labels->push_back(std::stoi(row.at(1)));
  }
  if (classes_out) *classes_out = ClassSet(manifest.at("class_set").get<std::vector<std::string>>());
  if (hash_out) *hash_out = manifest.at("config_hash").get<std::string>();
  bag.validate();
  return bag;
}

bool bag_cache_complete(const std::filesystem::path& dir, const std::string& config_hash) {
  std::ifstream in(dir / "COMPLETE");
  std::string stored;
  return in && std::getline(in, stored) && stored == config_hash;
}

}  // namespace mixmil
