#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mixmil/instances.hpp"
#include "mixmil/model.hpp"
#include "mixmil/tensor.hpp"

namespace mixmil {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Reduction { mean, sum };
enum class ClassWeighting { inverse_frequency, none };
/// Validation quantity watched by early stopping: the full objective or the slide term alone.
enum class ValMonitor { total, slide };

struct TrainConfig {
  double mask_ratio = 0.5;   // m
  double lambda = 0.5;
  double lr = 2e-4;
  double weight_decay = 1e-5;
  std::size_t grad_accum = 8;
  std::size_t patience = 20;
  std::size_t max_epochs = 200;
  std::uint64_t seed = 0;
  Reduction instance_reduction = Reduction::mean;
  ClassWeighting class_weights = ClassWeighting::inverse_frequency;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t lookahead_k = 6;  // 0 disables lookahead
  double lookahead_alpha = 0.5;
  ValMonitor monitor = ValMonitor::total;

  void validate() const;
};

// ---- masking -------------------------------------------------------------

/// Called with the bag-local index of every instance label read while masking.
using LabelProbe = std::function<void(std::size_t instance)>;

struct MaskedBag {
  std::vector<std::size_t> indices;  // ascending
  Tensor features;                   // N_un x d
  std::optional<std::vector<int>> labels;
  std::vector<Centroid> centroids;
};

/// Unmasked count for N instances at ratio m: (1-m)N, rounded stochastically
/// (floor plus a Bernoulli draw on the fractional part) so its mean is exact; at least 1.
std::size_t unmasked_count(std::size_t n, double m, std::mt19937_64& rng);

/// Uniform sample of instances without replacement, ascending order.
MaskedBag random_mask(const Bag& bag, double m, std::mt19937_64& rng, const LabelProbe& probe = {});
/// All instances, as used for evaluation.
MaskedBag unmasked(const Bag& bag);

// ---- losses --------------------------------------------------------------

/// Weighted multi-label BCE on logits, averaged over the l labels.
Tensor slide_loss(const Tensor& logits, std::span<const int> target, std::span<const double> class_weights);

/// Weighted cross entropy per instance; `labels` are class indices. Result has shape [N].
Tensor instance_loss(const Tensor& logits, std::span<const std::size_t> labels, std::span<const double> class_weights);

/// lambda * slide + (1 - lambda) * reduce(instance). An undefined instance
/// tensor contributes nothing.
Tensor total_loss(const Tensor& slide, const Tensor& instance, double lambda, Reduction reduction);

// ---- optimizer -----------------------------------------------------------

/// Adam with decoupled weight decay wrapped in Lookahead (Ranger composition).
class RangerOptimizer {
 public:
  explicit RangerOptimizer(const TrainConfig& cfg);

  /// Applies one update to `params` (leaf tensors, updated in place). Throws
  /// std::runtime_error naming the parameter if a gradient is not finite.
  void step(std::span<const std::pair<std::string, Tensor>> params, const Gradients& grads);
  std::size_t steps() const { return step_; }

 private:
  struct Slot {
    std::vector<double> m, v, slow;
  };
  TrainConfig cfg_;
  std::size_t step_ = 0;
  std::map<std::string, Slot> slots_;
};

// ---- metrics -------------------------------------------------------------

struct AucReport {
  std::vector<std::optional<double>> per_class;  // nullopt: only one label value present
  double macro = 0.0;
};

/// One-vs-rest ROC AUC per class via midrank statistics; degenerate classes are
/// excluded from the macro mean.
AucReport macro_auc(std::span<const std::vector<double>> scores, std::span<const std::vector<int>> labels);
/// Midrank AUC of one score column; nullopt when labels are all equal.
std::optional<double> binary_auc(std::span<const double> scores, std::span<const int> labels);

struct MetricsReport {
  std::vector<std::string> class_names;
  std::vector<std::optional<double>> per_class_auc;
  std::optional<double> macro_auc;
  std::vector<double> train_losses;
  std::vector<double> val_losses;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  int fold = -1;
  std::uint64_t seed = 0;
  std::string config_hash;
  bool instance_head_trained = true;
};

// ---- splits --------------------------------------------------------------

/// Patient-level stratified folds; returns patient ids per fold.
std::vector<std::vector<std::string>> stratified_kfold(std::span<const Bag> bags, std::size_t k, std::uint64_t seed);

struct Split {
  std::vector<std::size_t> train, val, test;  // bag indices
};
/// Fold `test_fold` of a k-fold patient split is the test set; the remaining
/// patients are split 4:1 (stratified) into train and validation.
Split make_split(std::span<const Bag> bags, std::size_t k, std::size_t test_fold, std::uint64_t seed);

// ---- training ------------------------------------------------------------

struct ClassWeights {
  std::vector<double> slide;
  std::vector<double> instance;
};
ClassWeights compute_class_weights(std::span<const Bag> bags, std::span<const std::size_t> subset,
                                   std::size_t slide_labels, std::size_t instance_classes, ClassWeighting mode);

struct TrainHooks {
  /// Called for every instance label read during a training pass.
  std::function<void(std::size_t epoch, std::size_t bag, std::size_t instance)> on_label_read;
  /// Called with the unmasked indices drawn for a bag in an epoch.
  std::function<void(std::size_t epoch, std::size_t bag, const std::vector<std::size_t>&)> on_mask;
  std::function<void(std::size_t epoch, double train_loss, double val_loss)> on_epoch;
};

struct TrainResult {
  ModelWeights best;
  MetricsReport report;  // losses, epochs; AUC fields are filled by evaluate()
  ClassWeights class_weights;
};

/// Loss of one bag under the given weights (no parameter update).
Tensor bag_loss(const MaskedBag& bag, const std::vector<int>& slide_label, const ModelWeights& weights,
                const ModelConfig& mcfg, const TrainConfig& tcfg, const ClassWeights& cw, Mode mode,
                std::mt19937_64* rng);

TrainResult train(std::span<const Bag> bags, const Split& split, const ModelConfig& mcfg, const TrainConfig& tcfg,
                  const TrainHooks& hooks = {});

struct SlidePrediction {
  std::string slide_id;
  std::vector<double> slide_probabilities;
  std::vector<int> instance_classes;
  std::vector<std::vector<double>> instance_probabilities;
};
SlidePrediction predict(const Bag& bag, const ModelWeights& weights, const ModelConfig& cfg);

/// Macro AUC over the given bags (evaluation mode, all instances).
AucReport evaluate(std::span<const Bag> bags, std::span<const std::size_t> subset, const ModelWeights& weights,
                   const ModelConfig& cfg);

}  // namespace mixmil
