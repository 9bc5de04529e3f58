#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mixmil/instances.hpp"
#include "mixmil/tensor.hpp"

namespace mixmil {

struct ModelConfig {
  std::size_t d = 64;          // token / feature width
  std::size_t blocks = 2;      // L
  std::size_t heads = 4;
  std::size_t slide_labels = 4;     // l
  std::size_t instance_classes = 4; // C
  double pe_weight = 0.1;      // w
  double pos_divisor = 100.0;
  double max_pos = 200.0;
  std::size_t head_hidden = 0;  // 0 selects d / 4
  double dropout = 0.1;

  std::size_t hidden() const { return head_hidden ? head_hidden : std::max<std::size_t>(1, d / 4); }
  /// Throws std::invalid_argument naming the broken invariant.
  void validate() const;
};

/// 2-D sinusoidal encoding of a centroid: the row (height) half first, then
/// the column half, each d/2 wide with interleaved sin/cos pairs.
std::vector<double> sinusoidal_pe(double p_x, double p_y, const ModelConfig& cfg);

/// h = z + w * s.
std::vector<double> add_pe(std::span<const double> z, std::span<const double> s, double w);

struct BlockWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor w1, b1, w2, b2;
};

struct HeadWeights {
  Tensor w1, b1, w2, b2;
};

struct ModelWeights {
  Tensor class_token;  // 1 x d
  std::vector<BlockWeights> blocks;
  Tensor final_gain, final_bias;
  HeadWeights slide_head;
  HeadWeights instance_head;

  /// Randomly initialised (Xavier-uniform matrices, zero biases, unit gains).
  static ModelWeights init(const ModelConfig& cfg, std::uint64_t seed);
  /// Every tensor zero except layer-norm gains, which are one.
  static ModelWeights zeros(const ModelConfig& cfg);

  /// Stable parameter names in a fixed order.
  std::vector<std::pair<std::string, Tensor>> named() const;
  std::vector<Tensor> parameters() const;
  ModelWeights clone() const;
  /// Copies values from `other` into this set's tensors, in place.
  void assign_from(const ModelWeights& other);
};

enum class Mode { train, eval };

struct ForwardOutput {
  Tensor class_output;      // 1 x d
  Tensor instance_outputs;  // N_un x d
};

/// Token assembly (features + w * PE, class token prepended), L pre-norm
/// blocks, final layer norm, and the split into class / instance outputs.
/// `rng` is only consulted for dropout in train mode.
ForwardOutput forward(const Tensor& tokens, std::span<const Centroid> centroids, const ModelWeights& weights,
                      const ModelConfig& cfg, Mode mode = Mode::eval, std::mt19937_64* rng = nullptr);

/// Two-layer GELU MLP producing l slide logits.
Tensor slide_head(const Tensor& class_output, const ModelWeights& weights);
/// Shared two-layer GELU MLP producing C logits per instance.
Tensor instance_head(const Tensor& instance_outputs, const ModelWeights& weights);

/// Checkpoint directory: manifest.json plus one tensor container per named weight.
void save_checkpoint(const std::filesystem::path& dir, const ModelWeights& weights, const ModelConfig& cfg,
                     const ClassSet& classes, std::size_t step);
struct Checkpoint {
  ModelConfig config;
  ModelWeights weights;
  ClassSet classes;
  std::size_t step = 0;
};
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace mixmil
