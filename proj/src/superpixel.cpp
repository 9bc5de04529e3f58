#include "mixmil/superpixel.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace mixmil {

namespace {

const std::array<double, 256>& srgb_linear_table() {
  static const std::array<double, 256> table = [] {
    std::array<double, 256> t{};
    for (int i = 0; i < 256; ++i) {
      const double v = i / 255.0;
      t[i] = v <= 0.04045 ? v / 12.92 : std::pow((v + 0.055) / 1.055, 2.4);
    }
    return t;
  }();
  return table;
}

double lab_f(double t) {
  constexpr double delta = 6.0 / 29.0;
  return t > delta * delta * delta ? std::cbrt(t) : t / (3.0 * delta * delta) + 4.0 / 29.0;
}

double lab_dist2(const Lab& p, const Lab& q) {
  const double dl = p.L - q.L, da = p.a - q.a, db = p.b - q.b;
  return dl * dl + da * da + db * db;
}

struct Center {
  Lab lab;
  double x = 0.0;
  double y = 0.0;
};

// Union-find over connected components.
struct Components {
  std::vector<std::uint32_t> parent;
  std::vector<std::size_t> size;
  std::uint32_t find(std::uint32_t c) {
    while (parent[c] != c) {
      parent[c] = parent[parent[c]];
      c = parent[c];
    }
    return c;
  }
};

}  // namespace

Lab rgb_to_lab(Rgb c) {
  const auto& lin = srgb_linear_table();
  const double r = lin[c[0]], g = lin[c[1]], b = lin[c[2]];
  const double X = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
  const double Y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
  const double Z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
  const double fx = lab_f(X / 0.95047), fy = lab_f(Y / 1.00000), fz = lab_f(Z / 1.08883);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

std::vector<Lab> rgb_to_lab(const ImageRGB& img) {
  std::vector<Lab> out(img.pixel_count());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = rgb_to_lab(Rgb{img.pixels[3 * i], img.pixels[3 * i + 1], img.pixels[3 * i + 2]});
  }
  return out;
}

std::vector<std::vector<std::uint32_t>> SuperpixelMap::members() const {
  std::vector<std::vector<std::uint32_t>> out(regions.size());
  for (std::size_t r = 0; r < regions.size(); ++r) out[r].reserve(regions[r].pixel_count);
  for (std::size_t i = 0; i < labels.size(); ++i) out[static_cast<std::size_t>(labels[i])].push_back(static_cast<std::uint32_t>(i));
  return out;
}

std::size_t auto_region_count(const ImageRGB& img, int patch_size) {
  const double area = static_cast<double>(patch_size) * patch_size;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(img.pixel_count()) / area)));
}

SuperpixelMap make_superpixel_map(int height, int width, const std::vector<std::int32_t>& raw,
                                  std::size_t requested_regions) {
  if (raw.size() != static_cast<std::size_t>(height) * width) throw std::invalid_argument("label map size mismatch");
  SuperpixelMap map;
  map.height = height;
  map.width = width;
  map.requested_regions = requested_regions;
  map.labels.resize(raw.size());
  std::vector<std::int32_t> remap;
  std::vector<double> sx, sy;
  auto dense_id = [&](std::int32_t v) {
    if (v < 0) throw std::invalid_argument("negative region id in label map");
    if (static_cast<std::size_t>(v) >= remap.size()) remap.resize(static_cast<std::size_t>(v) + 1, -1);
    if (remap[v] < 0) {
      remap[v] = static_cast<std::int32_t>(map.regions.size());
      map.regions.emplace_back();
      sx.push_back(0.0);
      sy.push_back(0.0);
    }
    return remap[v];
  };
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * width + x;
      const std::int32_t id = dense_id(raw[i]);
      map.labels[i] = id;
      Region& r = map.regions[id];
      if (r.pixel_count == 0) {
        r.x0 = r.x1 = x;
        r.y0 = r.y1 = y;
      }
      ++r.pixel_count;
      sx[id] += x;
      sy[id] += y;
      r.x0 = std::min(r.x0, x);
      r.y0 = std::min(r.y0, y);
      r.x1 = std::max(r.x1, x);
      r.y1 = std::max(r.y1, y);
    }
  }
  for (std::size_t id = 0; id < map.regions.size(); ++id) {
    Region& r = map.regions[id];
    r.centroid_x = sx[id] / static_cast<double>(r.pixel_count);
    r.centroid_y = sy[id] / static_cast<double>(r.pixel_count);
    r.x1 += 1;
    r.y1 += 1;
  }
  return map;
}

namespace {

std::vector<Lab> gaussian_blur(std::vector<Lab> lab, int H, int W, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int k = -radius; k <= radius; ++k) total += kernel[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
  for (double& v : kernel) v /= total;
  std::vector<Lab> tmp(lab.size());
  // Separable pass with edge clamping; rows then columns.
  for (int pass = 0; pass < 2; ++pass) {
    const std::vector<Lab>& src = pass == 0 ? lab : tmp;
    std::vector<Lab>& dst = pass == 0 ? tmp : lab;
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        Lab acc;
        for (int k = -radius; k <= radius; ++k) {
          const int sx = pass == 0 ? std::clamp(x + k, 0, W - 1) : x;
          const int sy = pass == 0 ? y : std::clamp(y + k, 0, H - 1);
          const Lab& v = src[static_cast<std::size_t>(sy) * W + sx];
          const double w = kernel[k + radius];
          acc.L += w * v.L;
          acc.a += w * v.a;
          acc.b += w * v.b;
        }
        dst[static_cast<std::size_t>(y) * W + x] = acc;
      }
    }
  }
  return lab;
}

}  // namespace

SuperpixelMap slic(const ImageRGB& img, const SlicParams& params) {
  const std::size_t n = img.pixel_count();
  if (params.regions < 1 || params.regions > n) {
    throw std::invalid_argument("slic: region count " + std::to_string(params.regions) + " outside [1, " +
                                std::to_string(n) + "]");
  }
  const int H = img.height, W = img.width;
  const double S = std::sqrt(static_cast<double>(n) / static_cast<double>(params.regions));
  const auto lab = params.smoothing > 0.0 ? gaussian_blur(rgb_to_lab(img), H, W, params.smoothing) : rgb_to_lab(img);
  auto lab_at = [&](int y, int x) -> const Lab& { return lab[static_cast<std::size_t>(y) * W + x]; };

  // Seed grid.
  const int nx = std::clamp(static_cast<int>(std::lround(W / S)), 1, W);
  const int ny = std::clamp(static_cast<int>(std::lround(H / S)), 1, H);
  const double step_x = static_cast<double>(W) / nx, step_y = static_cast<double>(H) / ny;
  const bool perturb = std::min(step_x, step_y) >= 3.0;
  auto gradient = [&](int y, int x) {
    if (x < 1 || y < 1 || x >= W - 1 || y >= H - 1) return std::numeric_limits<double>::infinity();
    return lab_dist2(lab_at(y, x + 1), lab_at(y, x - 1)) + lab_dist2(lab_at(y + 1, x), lab_at(y - 1, x));
  };
  std::vector<Center> centers;
  centers.reserve(static_cast<std::size_t>(nx) * ny);
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) {
      int cx = std::min(W - 1, static_cast<int>((i + 0.5) * step_x));
      int cy = std::min(H - 1, static_cast<int>((j + 0.5) * step_y));
      if (perturb) {
        double best = gradient(cy, cx);
        int bx = cx, by = cy;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const double g = gradient(cy + dy, cx + dx);
            if (g < best) best = g, bx = cx + dx, by = cy + dy;
          }
        }
        cx = bx, cy = by;
      }
      centers.push_back({lab_at(cy, cx), static_cast<double>(cx), static_cast<double>(cy)});
    }
  }

  const double spatial_weight = (params.compactness / S) * (params.compactness / S);
  std::vector<std::int32_t> label(n, -1);
  std::vector<double> dist(n);
  const int reach = static_cast<int>(std::ceil(S));
  for (int iter = 0; iter < std::max(1, params.max_iter); ++iter) {
    std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
    std::vector<std::int32_t> next(n, -1);
    for (std::size_t k = 0; k < centers.size(); ++k) {
      const Center& c = centers[k];
      const int cx = static_cast<int>(std::lround(c.x)), cy = static_cast<int>(std::lround(c.y));
      const int xa = std::max(0, cx - reach), xb = std::min(W - 1, cx + reach);
      const int ya = std::max(0, cy - reach), yb = std::min(H - 1, cy + reach);
      for (int y = ya; y <= yb; ++y) {
        for (int x = xa; x <= xb; ++x) {
          const std::size_t p = static_cast<std::size_t>(y) * W + x;
          const double dxy2 = (x - c.x) * (x - c.x) + (y - c.y) * (y - c.y);
          const double D = lab_dist2(lab[p], c.lab) + dxy2 * spatial_weight;
          if (D < dist[p]) dist[p] = D, next[p] = static_cast<std::int32_t>(k);
        }
      }
    }
    // Pixels outside every window fall back to the globally nearest center.
    for (std::size_t p = 0; p < n; ++p) {
      if (next[p] >= 0) continue;
      const int x = static_cast<int>(p % W), y = static_cast<int>(p / W);
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < centers.size(); ++k) {
        const Center& c = centers[k];
        const double D = lab_dist2(lab[p], c.lab) + ((x - c.x) * (x - c.x) + (y - c.y) * (y - c.y)) * spatial_weight;
        if (D < best) best = D, next[p] = static_cast<std::int32_t>(k);
      }
    }
    const bool converged = next == label;
    label = std::move(next);
    if (converged) break;

    std::vector<Center> sums(centers.size(), Center{{0, 0, 0}, 0, 0});
    std::vector<std::size_t> counts(centers.size(), 0);
    for (std::size_t p = 0; p < n; ++p) {
      Center& s = sums[label[p]];
      s.lab.L += lab[p].L;
      s.lab.a += lab[p].a;
      s.lab.b += lab[p].b;
      s.x += static_cast<double>(p % W);
      s.y += static_cast<double>(p / W);
      ++counts[label[p]];
    }
    for (std::size_t k = 0; k < centers.size(); ++k) {
      if (counts[k] == 0) continue;
      const double inv = 1.0 / static_cast<double>(counts[k]);
      centers[k] = {{sums[k].lab.L * inv, sums[k].lab.a * inv, sums[k].lab.b * inv}, sums[k].x * inv, sums[k].y * inv};
    }
  }
  return enforce_connectivity(make_superpixel_map(H, W, label, params.regions));
}

SuperpixelMap enforce_connectivity(const SuperpixelMap& map) {
  const std::size_t k = std::max<std::size_t>(1, map.requested_regions ? map.requested_regions : map.regions.size());
  return enforce_connectivity(map, map.labels.size() / k / 4);
}

SuperpixelMap enforce_connectivity(const SuperpixelMap& map, std::size_t min_size) {
  const int H = map.height, W = map.width;
  const std::size_t n = map.labels.size();
  // 1. Label 4-connected components of equal region id.
  std::vector<std::int32_t> comp(n, -1);
  std::vector<std::size_t> comp_size;
  std::vector<std::uint32_t> stack;
  for (std::size_t start = 0; start < n; ++start) {
    if (comp[start] >= 0) continue;
    const auto id = static_cast<std::int32_t>(comp_size.size());
    const std::int32_t region = map.labels[start];
    std::size_t count = 0;
    comp[start] = id;
    stack.push_back(static_cast<std::uint32_t>(start));
    while (!stack.empty()) {
      const std::uint32_t p = stack.back();
      stack.pop_back();
      ++count;
      const int x = static_cast<int>(p % W), y = static_cast<int>(p / W);
      const std::array<std::pair<int, int>, 4> nbrs{{{x - 1, y}, {x + 1, y}, {x, y - 1}, {x, y + 1}}};
      for (auto [qx, qy] : nbrs) {
        if (qx < 0 || qy < 0 || qx >= W || qy >= H) continue;
        const std::size_t q = static_cast<std::size_t>(qy) * W + qx;
        if (comp[q] < 0 && map.labels[q] == region) {
          comp[q] = id;
          stack.push_back(static_cast<std::uint32_t>(q));
        }
      }
    }
    comp_size.push_back(count);
  }

  // 2. Component adjacency.
  const std::size_t nc = comp_size.size();
  std::vector<std::vector<std::uint32_t>> adjacent(nc);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * W + x;
      if (x + 1 < W && comp[p + 1] != comp[p]) {
        adjacent[comp[p]].push_back(comp[p + 1]);
        adjacent[comp[p + 1]].push_back(comp[p]);
      }
      if (y + 1 < H && comp[p + W] != comp[p]) {
        adjacent[comp[p]].push_back(comp[p + W]);
        adjacent[comp[p + W]].push_back(comp[p]);
      }
    }
  }
  for (auto& a : adjacent) {
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
  }

  // 3. Merge undersized components into their largest neighbour until stable.
  Components uf;
  uf.parent.resize(nc);
  std::iota(uf.parent.begin(), uf.parent.end(), 0u);
  uf.size = comp_size;
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::uint32_t c = 0; c < nc; ++c) {
      if (uf.find(c) != c || uf.size[c] >= min_size) continue;
      std::uint32_t best = c;
      std::size_t best_size = 0;
      for (std::uint32_t nb : adjacent[c]) {
        const std::uint32_t r = uf.find(nb);
        if (r == c) continue;
        if (uf.size[r] > best_size || (uf.size[r] == best_size && r < best)) best = r, best_size = uf.size[r];
      }
      if (best == c) continue;
      uf.parent[c] = best;
      uf.size[best] += uf.size[c];
      adjacent[best].insert(adjacent[best].end(), adjacent[c].begin(), adjacent[c].end());
      adjacent[c].clear();
      changed = true;
    }
  }

  std::vector<std::int32_t> raw(n);
  for (std::size_t p = 0; p < n; ++p) raw[p] = static_cast<std::int32_t>(uf.find(static_cast<std::uint32_t>(comp[p])));
  return make_superpixel_map(H, W, raw, map.requested_regions);
}

std::size_t boundary_length(const SuperpixelMap& map) {
  std::size_t count = 0;
  for (int y = 0; y < map.height; ++y) {
    for (int x = 0; x < map.width; ++x) {
      if (x + 1 < map.width && map.at(y, x) != map.at(y, x + 1)) ++count;
      if (y + 1 < map.height && map.at(y, x) != map.at(y + 1, x)) ++count;
    }
  }
  return count;
}

bool is_four_connected(const SuperpixelMap& map) {
  // Connectivity pass with no merging must reproduce the region count.
  const SuperpixelMap split = enforce_connectivity(map, 0);
  return split.regions.size() == map.regions.size();
}

void save_label_map(const std::filesystem::path& stem, const SuperpixelMap& map, double compactness) {
  auto bin = stem;
  bin += ".labels";
  std::ofstream out(bin, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + bin.string());
  out.write(reinterpret_cast<const char*>(map.labels.data()),
            static_cast<std::streamsize>(map.labels.size() * sizeof(std::int32_t)));
  auto side = stem;
  side += ".json";
  nlohmann::json meta{{"height", map.height},
                      {"width", map.width},
                      {"K", map.requested_regions},
                      {"c", compactness},
                      {"regions", map.regions.size()}};
  std::ofstream js(side);
  js << meta.dump(2) << '\n';
  if (!out || !js) throw std::runtime_error("failed writing label map " + stem.string());
}

SuperpixelMap load_label_map(const std::filesystem::path& stem) {
  auto side = stem;
  side += ".json";
  std::ifstream js(side);
  if (!js) throw std::runtime_error("missing label map sidecar " + side.string());
  const auto meta = nlohmann::json::parse(js);
  const int h = meta.at("height").get<int>(), w = meta.at("width").get<int>();
  auto bin = stem;
  bin += ".labels";
  std::ifstream in(bin, std::ios::binary);
  if (!in) throw std::runtime_error("missing label map " + bin.string());
  std::vector<std::int32_t> raw(static_cast<std::size_t>(h) * w);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(std::int32_t)));
  if (!in) throw std::runtime_error("truncated label map " + bin.string());
  return make_superpixel_map(h, w, raw, meta.at("K").get<std::size_t>());
}

ImageRGB boundary_overlay(const ImageRGB& img, const SuperpixelMap& map, Rgb color) {
  ImageRGB out = img;
  for (int y = 0; y < map.height; ++y) {
    for (int x = 0; x < map.width; ++x) {
      const auto id = map.at(y, x);
      const bool edge = (x + 1 < map.width && map.at(y, x + 1) != id) || (y + 1 < map.height && map.at(y + 1, x) != id);
      if (edge) out.set(y, x, color);
    }
  }
  return out;
}

}  // namespace mixmil
