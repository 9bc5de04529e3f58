#include "mixmil/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <fstream>
#include <optional>
#include <thread>

namespace mixmil {

std::vector<SynthClass> default_palette() {
  constexpr double pi = std::numbers::pi;
  return {
      {{196, 150, 190}, 0.030, 0.0, 14.0, 16.0},
      {{188, 142, 186}, 0.055, pi / 4, 14.0, 16.0},
      {{180, 134, 182}, 0.080, pi / 2, 14.0, 16.0},
      {{172, 126, 178}, 0.110, 3 * pi / 4, 14.0, 16.0},
  };
}

void SynthConfig::validate() const {
  if (image_size < 1 || grid_rows < 1 || grid_cols < 1) throw std::invalid_argument("synth sizes must be positive");
  if (grid_rows > image_size || grid_cols > image_size) throw std::invalid_argument("synth grid finer than the image");
  if (palette.empty() || palette.size() > 254) throw std::invalid_argument("synth palette must have 1..254 classes");
  if (class_prior.size() != palette.size()) throw std::invalid_argument("synth class_prior length must equal palette size");
  if (std::none_of(class_prior.begin(), class_prior.end(), [](double p) { return p > 0.0; })) {
    throw std::invalid_argument("synth class_prior needs a positive entry");
  }
  for (double p : class_prior)
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("synth class_prior entries must be in [0, 1]");
  if (!(blank_prob >= 0.0 && blank_prob <= 1.0)) throw std::invalid_argument("synth blank_prob must be in [0, 1]");
  if (!(label_noise >= 0.0 && label_noise < 1.0)) throw std::invalid_argument("synth label_noise must be in [0, 1)");
  if (!(dominant_share >= 0.0 && dominant_share <= 1.0)) throw std::invalid_argument("synth dominant_share must be in [0, 1]");
  if (slide_jitter < 0.0) throw std::invalid_argument("synth slide_jitter must be >= 0");
  if (n_slides < 1) throw std::invalid_argument("synth n_slides must be >= 1");
  if (slides_per_patient < 1) throw std::invalid_argument("synth slides_per_patient must be >= 1");
}

std::mt19937_64 slide_rng(std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

namespace {

std::uint8_t clamp8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

std::vector<int> draw_class_set(const SynthConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (;;) {
    std::vector<int> set;
    for (std::size_t c = 0; c < cfg.class_prior.size(); ++c)
      if (u(rng) < cfg.class_prior[c]) set.push_back(static_cast<int>(c));
    if (!set.empty()) return set;
  }
}

std::string padded_id(const std::string& prefix, std::size_t i) {
  std::string digits = std::to_string(i);
  if (digits.size() < 3) digits.insert(0, 3 - digits.size(), '0');
  return prefix + digits;
}

}  // namespace

SynthSlide generate_slide(const SynthConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t classes = cfg.palette.size();
  const std::size_t cells = static_cast<std::size_t>(cfg.grid_rows) * cfg.grid_cols;

  const std::vector<int> set = draw_class_set(cfg, rng);
  SynthSlide slide;
  slide.cell_classes.assign(cells, -1);
  std::vector<std::size_t> tissue;
  for (std::size_t i = 0; i < cells; ++i)
    if (!(u(rng) < cfg.blank_prob)) tissue.push_back(i);
  std::shuffle(tissue.begin(), tissue.end(), rng);
  // Every drawn class gets a cell while cells last; the rest go to the
  // dominant class or uniformly over the set.
  std::uniform_int_distribution<std::size_t> pick(0, set.size() - 1);
  const int dominant = set[pick(rng)];
  for (std::size_t j = 0; j < tissue.size(); ++j) {
    if (j < set.size()) {
      slide.cell_classes[tissue[j]] = set[j];
    } else {
      slide.cell_classes[tissue[j]] = u(rng) < cfg.dominant_share ? dominant : set[pick(rng)];
    }
  }
  slide.slide_label.assign(classes, 0);
  for (int c : slide.cell_classes)
    if (c >= 0) slide.slide_label[static_cast<std::size_t>(c)] = 1;

  std::array<double, 3> shift{};
  for (double& s : shift) s = cfg.slide_jitter * gauss(rng);
  std::vector<double> phase(cells);
  for (double& p : phase) p = 2.0 * std::numbers::pi * u(rng);

  const int n = cfg.image_size;
  slide.image = ImageRGB(n, n);
  slide.truth = LabelImage(n, n);
  slide.pixel_labels = LabelImage(n, n);
  for (int y = 0; y < n; ++y) {
    const int row = std::min(cfg.grid_rows - 1, y * cfg.grid_rows / n);
    for (int x = 0; x < n; ++x) {
      const int col = std::min(cfg.grid_cols - 1, x * cfg.grid_cols / n);
      const std::size_t cell = static_cast<std::size_t>(row) * cfg.grid_cols + col;
      const std::size_t p = static_cast<std::size_t>(y) * n + x;
      const int c = slide.cell_classes[cell];
      if (c < 0) {
        Rgb px;
        for (int k = 0; k < 3; ++k) px[k] = clamp8(cfg.blank_color[k] + 2.0 * gauss(rng));
        slide.image.set(y, x, px);
        continue;
      }
      const SynthClass& tex = cfg.palette[static_cast<std::size_t>(c)];
      const double t = x * std::cos(tex.orientation) + y * std::sin(tex.orientation);
      const double wave = tex.amplitude * std::sin(2.0 * std::numbers::pi * tex.frequency * t + phase[cell]);
      Rgb px;
      for (int k = 0; k < 3; ++k) px[k] = clamp8(tex.base[k] + shift[k] + wave + tex.sigma * gauss(rng));
      slide.image.set(y, x, px);
      slide.truth.values[p] = static_cast<std::uint8_t>(c);
      std::uint8_t recorded = static_cast<std::uint8_t>(c);
      if (classes > 1 && u(rng) < cfg.label_noise) {
        auto other = std::uniform_int_distribution<std::size_t>(0, classes - 2)(rng);
        if (other >= static_cast<std::size_t>(c)) ++other;
        recorded = static_cast<std::uint8_t>(other);
      }
      slide.pixel_labels.values[p] = recorded;
    }
  }
  return slide;
}

nlohmann::json synth_manifest(const SynthConfig& cfg, const std::vector<SynthSlide>& slides) {
  nlohmann::json palette = nlohmann::json::array();
  for (const auto& c : cfg.palette) {
    palette.push_back({{"base", {c.base[0], c.base[1], c.base[2]}},
                       {"frequency", c.frequency},
                       {"orientation", c.orientation},
                       {"amplitude", c.amplitude},
                       {"sigma", c.sigma}});
  }
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& s : slides) {
    entries.push_back({{"id", s.slide_id},
                       {"patient", s.patient_id},
                       {"image", "images/" + s.slide_id + ".png"},
                       {"labels", "labels/" + s.slide_id + ".png"},
                       {"truth", "truth/" + s.slide_id + ".png"},
                       {"slide_label", s.slide_label},
                       {"cells", s.cell_classes}});
  }
  return {{"generator",
           {{"image_size", cfg.image_size},
            {"grid_rows", cfg.grid_rows},
            {"grid_cols", cfg.grid_cols},
            {"blank_prob", cfg.blank_prob},
            {"label_noise", cfg.label_noise},
            {"class_prior", cfg.class_prior},
            {"dominant_share", cfg.dominant_share},
            {"slide_jitter", cfg.slide_jitter},
            {"seed", cfg.seed},
            {"palette", palette}}},
          {"slides", entries}};
}

SynthDataset generate_dataset(const SynthConfig& cfg, const BagBuildOptions& options) {
  cfg.validate();
  SynthDataset data;
  data.slides.resize(cfg.n_slides);
  std::vector<std::optional<Bag>> bags(cfg.n_slides);
  const std::size_t patients = (cfg.n_slides + cfg.slides_per_patient - 1) / cfg.slides_per_patient;
  auto work = [&](std::size_t i) {
    auto rng = slide_rng(cfg.seed, i);
    SynthSlide& s = data.slides[i];
    s = generate_slide(cfg, rng);
    s.slide_id = padded_id("slide_", i);
    s.patient_id = padded_id("patient_", i % patients);
    if (!options.build) return;
    SlicParams sp = options.slic;
    if (sp.regions == 0) sp.regions = auto_region_count(s.image, options.instances.patch_size);
    const auto map = slic(s.image, sp);
    try {
      Bag bag = build_bag(s.image, map, &s.pixel_labels, s.slide_label, options.instances);
      bag.slide_id = s.slide_id;
      bag.patient_id = s.patient_id;
      bags[i] = std::move(bag);
    } catch (const EmptyBagError&) {
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(options.workers, cfg.n_slides));
  if (workers == 1) {
    for (std::size_t i = 0; i < cfg.n_slides; ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < cfg.n_slides; i += workers) work(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  if (options.build) {
    for (auto& b : bags) {
      if (b) data.bags.push_back(std::move(*b));
      else ++data.empty_bags;
    }
  }
  data.manifest = synth_manifest(cfg, data.slides);
  return data;
}

void write_dataset(const std::filesystem::path& dir, const SynthDataset& data) {
  namespace fs = std::filesystem;
  for (const char* sub : {"images", "labels", "truth"}) fs::create_directories(dir / sub);
  for (const auto& s : data.slides) {
    write_png(dir / "images" / (s.slide_id + ".png"), s.image);
    write_png(dir / "labels" / (s.slide_id + ".png"), s.pixel_labels);
    write_png(dir / "truth" / (s.slide_id + ".png"), s.truth);
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  out << data.manifest.dump(2) << '\n';
}

}  // namespace mixmil
