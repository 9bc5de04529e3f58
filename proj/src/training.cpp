#include "mixmil/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <unordered_map>

namespace mixmil {

void TrainConfig::validate() const {
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) throw ConfigError("train.mask_ratio must be in [0, 1)");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("train.lambda must be in [0, 1]");
  if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
  if (grad_accum == 0) throw ConfigError("train.grad_accum must be >= 1");
  if (max_epochs == 0) throw ConfigError("train.max_epochs must be >= 1");
  if (lookahead_k > 0 && !(lookahead_alpha > 0.0 && lookahead_alpha <= 1.0)) {
    throw ConfigError("train.lookahead_alpha must be in (0, 1]");
  }
}

// ---- masking -------------------------------------------------------------

std::size_t unmasked_count(std::size_t n, double m, std::mt19937_64& rng) {
  const double exact = (1.0 - m) * static_cast<double>(n);
  double whole = std::floor(exact);
  double frac = exact - whole;
  // Absorb representation error, e.g. (1 - 0.1) * 10 = 9.000000000000002.
  if (frac < 1e-9) {
    frac = 0.0;
  } else if (frac > 1.0 - 1e-9) {
    whole += 1.0;
    frac = 0.0;
  }
  auto count = static_cast<std::size_t>(whole);
  if (frac > 0.0 && std::uniform_real_distribution<double>(0.0, 1.0)(rng) < frac) ++count;
  return std::clamp<std::size_t>(count, 1, n);
}

namespace {

MaskedBag gather(const Bag& bag, std::vector<std::size_t> indices, const LabelProbe& probe) {
  MaskedBag out;
  out.features = indices.size() == bag.size() ? bag.features : select_rows(bag.features, indices);
  for (std::size_t i : indices) out.centroids.push_back(bag.centroids[i]);
  if (bag.instance_labels) {
    out.labels.emplace();
    out.labels->reserve(indices.size());
    for (std::size_t i : indices) {
      if (probe) probe(i);
      out.labels->push_back((*bag.instance_labels)[i]);
    }
  }
  out.indices = std::move(indices);
  return out;
}

}  // namespace

MaskedBag random_mask(const Bag& bag, double m, std::mt19937_64& rng, const LabelProbe& probe) {
  const std::size_t n = bag.size();
  if (n == 0) throw std::invalid_argument("random_mask: empty bag");
  const std::size_t keep = unmasked_count(n, m, rng);
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  if (keep == n) return gather(bag, std::move(all), probe);
  std::vector<std::size_t> chosen;
  chosen.reserve(keep);
  // Selection sampling keeps the population order.
  std::sample(all.begin(), all.end(), std::back_inserter(chosen), keep, rng);
  return gather(bag, std::move(chosen), probe);
}

MaskedBag unmasked(const Bag& bag) {
  std::vector<std::size_t> all(bag.size());
  std::iota(all.begin(), all.end(), 0);
  return gather(bag, std::move(all), {});
}

// ---- losses --------------------------------------------------------------

Tensor slide_loss(const Tensor& logits, std::span<const int> target, std::span<const double> class_weights) {
  const std::size_t l = logits.size();
  if (target.size() != l || class_weights.size() != l) {
    throw DimensionError("slide_loss: " + std::to_string(l) + " logits, " + std::to_string(target.size()) +
                         " targets, " + std::to_string(class_weights.size()) + " weights");
  }
  const Tensor flat = logits.rank() == 1 ? logits : reshape(logits, {l});
  std::vector<double> y(target.begin(), target.end());
  const Tensor y_t({l}, std::move(y));
  const Tensor w_t({l}, std::vector<double>(class_weights.begin(), class_weights.end()));
  // -[y log s(x) + (1-y) log(1-s(x))] = softplus(x) - y x
  const Tensor per_class = sub(softplus(flat), mul(flat, y_t));
  return scale(sum(mul(per_class, w_t)), 1.0 / static_cast<double>(l));
}

Tensor instance_loss(const Tensor& logits, std::span<const std::size_t> labels, std::span<const double> class_weights) {
  if (logits.rank() != 2 || logits.rows() != labels.size()) {
    throw DimensionError("instance_loss: logits " + shape_string(logits.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  if (class_weights.size() != logits.cols()) throw DimensionError("instance_loss: class weight count");
  std::vector<double> neg_w(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) neg_w[i] = -class_weights[labels[i]];
  const Tensor picked = gather_rows(log_softmax(logits, 1), labels);
  return mul(picked, Tensor({labels.size()}, std::move(neg_w)));
}

Tensor total_loss(const Tensor& slide, const Tensor& instance, double lambda, Reduction reduction) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must be in [0, 1]");
  const Tensor weighted_slide = scale(slide, lambda);
  if (!instance.defined()) return weighted_slide;
  const Tensor reduced = reduction == Reduction::mean ? mean(instance) : sum(instance);
  return add(weighted_slide, scale(reduced, 1.0 - lambda));
}

// ---- optimizer -----------------------------------------------------------

RangerOptimizer::RangerOptimizer(const TrainConfig& cfg) : cfg_(cfg) {}

void RangerOptimizer::step(std::span<const std::pair<std::string, Tensor>> params, const Gradients& grads) {
  for (const auto& [name, p] : params) {
    const auto& g = grads.at(p.id()).data();
    for (double v : g)
      if (!std::isfinite(v)) throw std::runtime_error("non-finite gradient for parameter '" + name + "'");
  }
  ++step_;
  const double t = static_cast<double>(step_);
  const double bias1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bias2 = 1.0 - std::pow(cfg_.beta2, t);
  const bool sync = cfg_.lookahead_k > 0 && step_ % cfg_.lookahead_k == 0;
  for (const auto& [name, p] : params) {
    Tensor param = p;
    auto w = param.mutable_data();
    const auto g = grads.at(p.id()).data();
    Slot& s = slots_[name];
    if (s.m.empty()) {
      s.m.assign(w.size(), 0.0);
      s.v.assign(w.size(), 0.0);
      s.slow.assign(w.begin(), w.end());
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] -= cfg_.lr * cfg_.weight_decay * w[i];
      s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g[i];
      s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double m_hat = s.m[i] / bias1;
      const double v_hat = s.v[i] / bias2;
      w[i] -= cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.adam_eps);
    }
    if (sync) {
      for (std::size_t i = 0; i < w.size(); ++i) {
        s.slow[i] += cfg_.lookahead_alpha * (w[i] - s.slow[i]);
        w[i] = s.slow[i];
      }
    }
  }
}

// ---- metrics -------------------------------------------------------------

std::optional<double> binary_auc(std::span<const double> scores, std::span<const int> labels) {
  const std::size_t n = scores.size();
  if (labels.size() != n) throw DimensionError("binary_auc: score/label length mismatch");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t t = i; t <= j; ++t) rank[order[t]] = midrank;
    i = j + 1;
  }
  double pos = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] == 1) {
      pos += 1.0;
      rank_sum += rank[i];
    }
  }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0.0 || neg == 0.0) return std::nullopt;
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

AucReport macro_auc(std::span<const std::vector<double>> scores, std::span<const std::vector<int>> labels) {
  if (scores.size() != labels.size()) throw DimensionError("macro_auc: score/label slide counts differ");
  if (scores.size() < 2) throw MetricError("macro_auc needs at least 2 slides");
  const std::size_t l = scores[0].size();
  AucReport report;
  double total = 0.0;
  std::size_t defined = 0;
  std::vector<double> col(scores.size());
  std::vector<int> lab(scores.size());
  for (std::size_t c = 0; c < l; ++c) {
    for (std::size_t s = 0; s < scores.size(); ++s) {
      if (scores[s].size() != l || labels[s].size() != l) throw DimensionError("macro_auc: ragged input");
      col[s] = scores[s][c];
      lab[s] = labels[s][c];
    }
    report.per_class.push_back(binary_auc(col, lab));
    if (report.per_class.back()) {
      total += *report.per_class.back();
      ++defined;
    }
  }
  if (defined == 0) throw MetricError("macro AUC undefined: every class has a single label value");
  report.macro = total / static_cast<double>(defined);
  return report;
}

// ---- splits --------------------------------------------------------------

namespace {

struct Patient {
  std::string id;
  std::vector<std::size_t> bags;
  std::vector<int> class_counts;
  std::uint64_t key = 0;
};

int max_positive(const std::vector<int>& label) {
  for (std::size_t c = label.size(); c-- > 0;)
    if (label[c] == 1) return static_cast<int>(c);
  return -1;
}

std::uint64_t bit_pattern(const std::vector<int>& label) {
  std::uint64_t key = 0;
  for (std::size_t c = 0; c < label.size(); ++c)
    if (label[c] == 1) key |= (std::uint64_t{1} << c);
  return key;
}

std::vector<Patient> group_patients(std::span<const Bag> bags, std::span<const std::size_t> subset) {
  std::vector<Patient> patients;
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t b : subset) {
    const Bag& bag = bags[b];
    auto [it, inserted] = index.emplace(bag.patient_id, patients.size());
    if (inserted) {
      patients.push_back({bag.patient_id, {}, std::vector<int>(bag.slide_label.size(), 0), 0});
    }
    Patient& p = patients[it->second];
    p.bags.push_back(b);
    for (std::size_t c = 0; c < bag.slide_label.size(); ++c) p.class_counts[c] += bag.slide_label[c];
  }
  for (auto& p : patients) {
    // Key: label pattern of the most severe slide (ties: larger pattern).
    const std::vector<int>* worst = nullptr;
    for (std::size_t b : p.bags) {
      const auto& lab = bags[b].slide_label;
      if (!worst || max_positive(lab) > max_positive(*worst) ||
          (max_positive(lab) == max_positive(*worst) && bit_pattern(lab) > bit_pattern(*worst)))
        worst = &lab;
    }
    p.key = bit_pattern(*worst);
  }
  return patients;
}

// Greedy patient-to-fold assignment balancing stratum counts, per-class slide
// counts and fold sizes against their k-way targets.
std::vector<std::vector<std::size_t>> assign_folds(std::vector<Patient>& patients, std::size_t k, std::uint64_t seed) {
  if (patients.size() < k) {
    throw ConfigError("stratified_kfold: " + std::to_string(patients.size()) + " patients for " + std::to_string(k) +
                      " folds");
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(patients.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  std::map<std::uint64_t, std::size_t> stratum_size;
  for (const auto& p : patients) ++stratum_size[p.key];
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& pa = patients[a];
    const auto& pb = patients[b];
    if (stratum_size[pa.key] != stratum_size[pb.key]) return stratum_size[pa.key] < stratum_size[pb.key];
    if (pa.key != pb.key) return pa.key < pb.key;
    return pa.bags.size() > pb.bags.size();
  });

  const std::size_t classes = patients.front().class_counts.size();
  const double kd = static_cast<double>(k);
  std::vector<double> class_target(classes, 0.0);
  double slide_target = 0.0;
  for (const auto& p : patients) {
    for (std::size_t c = 0; c < classes; ++c) class_target[c] += p.class_counts[c] / kd;
    slide_target += static_cast<double>(p.bags.size()) / kd;
  }

  std::vector<std::map<std::uint64_t, double>> fold_strata(k);
  std::vector<std::vector<double>> fold_classes(k, std::vector<double>(classes, 0.0));
  std::vector<double> fold_slides(k, 0.0);
  std::vector<std::vector<std::size_t>> folds(k);
  auto delta = [](double current, double add, double target) { return add * (2.0 * (current - target) + add); };

  for (std::size_t idx : order) {
    const Patient& p = patients[idx];
    const double stratum_target = static_cast<double>(stratum_size[p.key]) / kd;
    std::size_t best = 0;
    double best_cost = std::numeric_limits<double>::infinity();
    for (std::size_t f = 0; f < k; ++f) {
      double cost = delta(fold_strata[f][p.key], 1.0, stratum_target);
      for (std::size_t c = 0; c < classes; ++c) cost += delta(fold_classes[f][c], p.class_counts[c], class_target[c]);
      cost += delta(fold_slides[f], static_cast<double>(p.bags.size()), slide_target);
      const bool better = cost < best_cost - 1e-12 ||
                          (std::abs(cost - best_cost) <= 1e-12 && folds[f].size() < folds[best].size());
      if (better) best_cost = cost, best = f;
    }
    fold_strata[best][p.key] += 1.0;
    for (std::size_t c = 0; c < classes; ++c) fold_classes[best][c] += p.class_counts[c];
    fold_slides[best] += static_cast<double>(p.bags.size());
    folds[best].push_back(idx);
  }

  // Local search: single moves and pairwise swaps while the squared deviation drops.
  auto fold_cost = [&](std::size_t f) {
    double c = 0.0;
    for (const auto& [key, n] : fold_strata[f]) {
      const double d = n - static_cast<double>(stratum_size[key]) / kd;
      c += d * d;
    }
    for (std::size_t j = 0; j < classes; ++j) c += (fold_classes[f][j] - class_target[j]) * (fold_classes[f][j] - class_target[j]);
    return c + (fold_slides[f] - slide_target) * (fold_slides[f] - slide_target);
  };
  auto shift = [&](const Patient& p, std::size_t f, double sign) {
    fold_strata[f][p.key] += sign;
    for (std::size_t j = 0; j < classes; ++j) fold_classes[f][j] += sign * p.class_counts[j];
    fold_slides[f] += sign * static_cast<double>(p.bags.size());
  };
  std::vector<std::size_t> fold_of(patients.size());
  for (std::size_t f = 0; f < k; ++f)
    for (std::size_t idx : folds[f]) fold_of[idx] = f;
  std::vector<std::size_t> fold_count(k);
  for (std::size_t f = 0; f < k; ++f) fold_count[f] = folds[f].size();
  for (int pass = 0; pass < 100; ++pass) {
    bool improved = false;
    for (std::size_t a : order) {
      const std::size_t fa = fold_of[a];
      if (fold_count[fa] <= 1) continue;
      for (std::size_t fb = 0; fb < k; ++fb) {
        if (fb == fa) continue;
        const double before = fold_cost(fa) + fold_cost(fb);
        shift(patients[a], fa, -1.0);
        shift(patients[a], fb, 1.0);
        if (fold_cost(fa) + fold_cost(fb) < before - 1e-9) {
          fold_of[a] = fb;
          --fold_count[fa];
          ++fold_count[fb];
          improved = true;
          break;
        }
        shift(patients[a], fb, -1.0);
        shift(patients[a], fa, 1.0);
      }
    }
    for (std::size_t ia = 0; ia < order.size(); ++ia) {
      for (std::size_t ib = ia + 1; ib < order.size(); ++ib) {
        const std::size_t a = order[ia], b = order[ib];
        const std::size_t fa = fold_of[a], fb = fold_of[b];
        if (fa == fb) continue;
        const double before = fold_cost(fa) + fold_cost(fb);
        shift(patients[a], fa, -1.0);
        shift(patients[a], fb, 1.0);
        shift(patients[b], fb, -1.0);
        shift(patients[b], fa, 1.0);
        if (fold_cost(fa) + fold_cost(fb) < before - 1e-9) {
          std::swap(fold_of[a], fold_of[b]);
          improved = true;
          continue;
        }
        shift(patients[b], fa, -1.0);
        shift(patients[b], fb, 1.0);
        shift(patients[a], fb, -1.0);
        shift(patients[a], fa, 1.0);
      }
    }
    if (!improved) break;
  }
  for (auto& f : folds) f.clear();
  for (std::size_t idx : order) folds[fold_of[idx]].push_back(idx);

  for (const auto& f : folds)
    if (f.empty()) throw ConfigError("stratified_kfold: a fold ended up empty");
  return folds;
}

}  // namespace

std::vector<std::vector<std::string>> stratified_kfold(std::span<const Bag> bags, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("stratified_kfold: k must be at least 2");
  std::vector<std::size_t> all(bags.size());
  std::iota(all.begin(), all.end(), 0);
  auto patients = group_patients(bags, all);
  const auto folds = assign_folds(patients, k, seed);
  std::vector<std::vector<std::string>> out(k);
  for (std::size_t f = 0; f < k; ++f)
    for (std::size_t idx : folds[f]) out[f].push_back(patients[idx].id);
  return out;
}

Split make_split(std::span<const Bag> bags, std::size_t k, std::size_t test_fold, std::uint64_t seed) {
  if (test_fold >= k) throw ConfigError("test fold index out of range");
  std::vector<std::size_t> all(bags.size());
  std::iota(all.begin(), all.end(), 0);
  auto patients = group_patients(bags, all);
  const auto outer = assign_folds(patients, k, seed);
  Split split;
  std::vector<std::size_t> rest;
  for (std::size_t f = 0; f < k; ++f) {
    for (std::size_t idx : outer[f]) {
      auto& target = f == test_fold ? split.test : rest;
      target.insert(target.end(), patients[idx].bags.begin(), patients[idx].bags.end());
    }
  }
  std::sort(rest.begin(), rest.end());
  auto inner_patients = group_patients(bags, rest);
  const auto inner = assign_folds(inner_patients, std::min<std::size_t>(5, inner_patients.size()), seed + 1);
  for (std::size_t f = 0; f < inner.size(); ++f) {
    for (std::size_t idx : inner[f]) {
      auto& target = f == 0 ? split.val : split.train;
      target.insert(target.end(), inner_patients[idx].bags.begin(), inner_patients[idx].bags.end());
    }
  }
  for (auto* v : {&split.train, &split.val, &split.test}) std::sort(v->begin(), v->end());
  return split;
}

// ---- training ------------------------------------------------------------

ClassWeights compute_class_weights(std::span<const Bag> bags, std::span<const std::size_t> subset,
                                   std::size_t slide_labels, std::size_t instance_classes, ClassWeighting mode) {
  ClassWeights cw{std::vector<double>(slide_labels, 1.0), std::vector<double>(instance_classes, 1.0)};
  if (mode == ClassWeighting::none || subset.empty()) return cw;
  auto normalise = [](std::vector<double>& w) {
    const double m = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());
    for (double& v : w) v /= m;
  };
  const double n = static_cast<double>(subset.size());
  for (std::size_t c = 0; c < slide_labels; ++c) {
    double pos = 0.0;
    for (std::size_t b : subset) pos += bags[b].slide_label.at(c);
    cw.slide[c] = 1.0 / std::max(pos / n, 1.0 / n);
  }
  normalise(cw.slide);
  std::vector<double> counts(instance_classes, 0.0);
  double labelled = 0.0;
  for (std::size_t b : subset) {
    if (!bags[b].instance_labels) continue;
    for (int y : *bags[b].instance_labels) {
      if (y == kNoLabel) continue;
      counts.at(static_cast<std::size_t>(y)) += 1.0;
      labelled += 1.0;
    }
  }
  if (labelled > 0.0) {
    for (std::size_t c = 0; c < instance_classes; ++c) cw.instance[c] = labelled / std::max(counts[c], 1.0);
    normalise(cw.instance);
  }
  return cw;
}

Tensor bag_loss(const MaskedBag& bag, const std::vector<int>& slide_label, const ModelWeights& weights,
                const ModelConfig& mcfg, const TrainConfig& tcfg, const ClassWeights& cw, Mode mode,
                std::mt19937_64* rng) {
  const ForwardOutput out = forward(bag.features, bag.centroids, weights, mcfg, mode, rng);
  const Tensor ls = slide_loss(slide_head(out.class_output, weights), slide_label, cw.slide);
  Tensor li;
  if (tcfg.lambda < 1.0 && bag.labels) {
    std::vector<std::size_t> rows, targets;
    for (std::size_t i = 0; i < bag.labels->size(); ++i) {
      const int y = (*bag.labels)[i];
      if (y == kNoLabel) continue;
      rows.push_back(i);
      targets.push_back(static_cast<std::size_t>(y));
    }
    if (!rows.empty()) {
      const Tensor tokens = rows.size() == bag.labels->size() ? out.instance_outputs : select_rows(out.instance_outputs, rows);
      li = instance_loss(instance_head(tokens, weights), targets, cw.instance);
    }
  }
  return total_loss(ls, li, tcfg.lambda, tcfg.instance_reduction);
}

TrainResult train(std::span<const Bag> bags, const Split& split, const ModelConfig& mcfg, const TrainConfig& tcfg,
                  const TrainHooks& hooks) {
  mcfg.validate();
  tcfg.validate();
  if (split.train.empty() || split.val.empty()) throw ConfigError("training needs non-empty train and validation splits");
  for (auto* part : {&split.train, &split.val}) {
    for (std::size_t b : *part) {
      const Bag& bag = bags[b];
      if (bag.feature_dim() != mcfg.d) {
        throw ConfigError("bag " + bag.slide_id + " has feature dimension " + std::to_string(bag.feature_dim()) +
                          ", model expects " + std::to_string(mcfg.d));
      }
      if (bag.slide_label.size() != mcfg.slide_labels) throw ConfigError("bag " + bag.slide_id + " slide label length");
    }
  }

  TrainResult result;
  result.class_weights =
      compute_class_weights(bags, split.train, mcfg.slide_labels, mcfg.instance_classes, tcfg.class_weights);
  const ClassWeights& cw = result.class_weights;
  ModelWeights weights = ModelWeights::init(mcfg, tcfg.seed);
  const auto named = weights.named();
  const auto params = weights.parameters();
  RangerOptimizer optimizer(tcfg);
  std::mt19937_64 rng(tcfg.seed ^ 0x9e3779b97f4a7c15ULL);

  std::vector<std::vector<double>> acc(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) acc[i].assign(params[i].size(), 0.0);
  std::size_t pending = 0;
  auto apply = [&] {
    Gradients g;
    for (std::size_t i = 0; i < params.size(); ++i) {
      std::vector<double> avg(acc[i].size());
      for (std::size_t j = 0; j < avg.size(); ++j) avg[j] = acc[i][j] / static_cast<double>(pending);
      g.emplace(params[i].id(), Tensor(params[i].shape(), std::move(avg)));
      std::fill(acc[i].begin(), acc[i].end(), 0.0);
    }
    optimizer.step(named, g);
    pending = 0;
  };

  double best_val = std::numeric_limits<double>::infinity();
  std::size_t wait = 0;
  result.best = weights.clone();
  MetricsReport& report = result.report;
  report.seed = tcfg.seed;
  report.instance_head_trained = tcfg.lambda < 1.0;

  for (std::size_t epoch = 0; epoch < tcfg.max_epochs; ++epoch) {
    std::vector<std::size_t> order = split.train;
    std::shuffle(order.begin(), order.end(), rng);
    double train_sum = 0.0;
    for (std::size_t b : order) {
      LabelProbe probe;
      if (hooks.on_label_read) probe = [&, epoch, b](std::size_t i) { hooks.on_label_read(epoch, b, i); };
      const MaskedBag masked = random_mask(bags[b], tcfg.mask_ratio, rng, probe);
      if (hooks.on_mask) hooks.on_mask(epoch, b, masked.indices);
      const Tensor loss = bag_loss(masked, bags[b].slide_label, weights, mcfg, tcfg, cw, Mode::train, &rng);
      const Gradients g = backward(loss, params);
      for (std::size_t i = 0; i < params.size(); ++i) {
        const auto gd = g.at(params[i].id()).data();
        for (std::size_t j = 0; j < gd.size(); ++j) acc[i][j] += gd[j];
      }
      train_sum += loss.item();
      if (++pending == tcfg.grad_accum) apply();
    }
    if (pending > 0) apply();

    double val_sum = 0.0;
    TrainConfig val_cfg = tcfg;
    if (tcfg.monitor == ValMonitor::slide) val_cfg.lambda = 1.0;
    {
      NoGradGuard no_grad;
      for (std::size_t b : split.val) {
        val_sum += bag_loss(unmasked(bags[b]), bags[b].slide_label, weights, mcfg, val_cfg, cw, Mode::eval, nullptr).item();
      }
    }
    const double train_loss = train_sum / static_cast<double>(split.train.size());
    const double val_loss = val_sum / static_cast<double>(split.val.size());
    report.train_losses.push_back(train_loss);
    report.val_losses.push_back(val_loss);
    report.epochs_run = epoch + 1;
    if (hooks.on_epoch) hooks.on_epoch(epoch, train_loss, val_loss);

    if (val_loss < best_val) {
      best_val = val_loss;
      report.best_epoch = epoch;
      result.best.assign_from(weights);
      wait = 0;
    } else if (++wait >= tcfg.patience) {
      break;
    }
  }
  return result;
}

SlidePrediction predict(const Bag& bag, const ModelWeights& weights, const ModelConfig& cfg) {
  NoGradGuard no_grad;
  const ForwardOutput out = forward(bag.features, bag.centroids, weights, cfg, Mode::eval);
  SlidePrediction pred;
  pred.slide_id = bag.slide_id;
  const Tensor probs = sigmoid(slide_head(out.class_output, weights));
  pred.slide_probabilities.assign(probs.data().begin(), probs.data().end());
  const Tensor inst = softmax(instance_head(out.instance_outputs, weights), 1);
  const std::size_t c = inst.cols();
  for (std::size_t i = 0; i < inst.rows(); ++i) {
    std::vector<double> row(inst.data().begin() + i * c, inst.data().begin() + (i + 1) * c);
    pred.instance_classes.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    pred.instance_probabilities.push_back(std::move(row));
  }
  return pred;
}

AucReport evaluate(std::span<const Bag> bags, std::span<const std::size_t> subset, const ModelWeights& weights,
                   const ModelConfig& cfg) {
  std::vector<std::vector<double>> scores;
  std::vector<std::vector<int>> labels;
  for (std::size_t b : subset) {
    scores.push_back(predict(bags[b], weights, cfg).slide_probabilities);
    labels.push_back(bags[b].slide_label);
  }
  return macro_auc(scores, labels);
}

}  // namespace mixmil
