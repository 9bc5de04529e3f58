#include "mixmil/model.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iostream>

#include "json.hpp"
#include "mixmil/tensor_io.hpp"

namespace mixmil {

void ModelConfig::validate() const {
  if (d == 0 || d % 2 != 0) throw std::invalid_argument("model.d must be positive and even");
  if (heads == 0 || d % heads != 0) throw std::invalid_argument("model.d must be divisible by model.heads");
  if (blocks == 0) throw std::invalid_argument("model.blocks must be at least 1");
  if (slide_labels == 0 || instance_classes == 0) throw std::invalid_argument("label counts must be positive");
  if (pe_weight < 0) throw std::invalid_argument("model.pe_weight must be >= 0");
  if (max_pos < 1) throw std::invalid_argument("model.max_pos must be >= 1");
  if (pos_divisor <= 0) throw std::invalid_argument("model.pos_divisor must be positive");
  if (dropout < 0 || dropout >= 1) throw std::invalid_argument("model.dropout must be in [0, 1)");
}

namespace {

std::atomic<bool> g_warned_clamp{false};

void encode_axis(double pos, std::size_t half, double* out) {
  for (std::size_t k = 0; k < half; ++k) {
    const std::size_t j = k / 2;
    const double angle = pos / std::pow(10000.0, 2.0 * static_cast<double>(j) / static_cast<double>(half));
    out[k] = (k % 2 == 0) ? std::sin(angle) : std::cos(angle);
  }
}

double clamp_pos(double pixels, const ModelConfig& cfg) {
  const double pos = pixels / cfg.pos_divisor;
  if (pos < 0.0 || pos > cfg.max_pos) {
    if (!g_warned_clamp.exchange(true)) {
      std::cerr << "warning: positional encoding input " << pos << " clamped to [0, " << cfg.max_pos << "]\n";
    }
    return std::clamp(pos, 0.0, cfg.max_pos);
  }
  return pos;
}

Tensor xavier(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  std::vector<double> v(fan_in * fan_out);
  for (auto& x : v) x = dist(rng);
  return Tensor({fan_in, fan_out}, std::move(v), true);
}

Tensor param_zeros(Shape s) { return Tensor::zeros(std::move(s), true); }
Tensor param_ones(Shape s) { return Tensor::full(std::move(s), 1.0, true); }

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_rowwise(matmul(x, w), b); }

Tensor mlp(const Tensor& x, const HeadWeights& h) { return linear(gelu(linear(x, h.w1, h.b1)), h.w2, h.b2); }

Tensor attention(const Tensor& x, const BlockWeights& b, std::size_t heads) {
  const std::size_t d = x.cols(), dh = d / heads;
  const Tensor q = linear(x, b.wq, b.bq);
  const Tensor k = linear(x, b.wk, b.bk);
  const Tensor v = linear(x, b.wv, b.bv);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> per_head;
  per_head.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = slice_cols(q, h * dh, dh);
    const Tensor kh = slice_cols(k, h * dh, dh);
    const Tensor vh = slice_cols(v, h * dh, dh);
    const Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    per_head.push_back(matmul(softmax(scores, 1), vh));
  }
  return linear(concat_cols(per_head), b.wo, b.bo);
}

}  // namespace

std::vector<double> sinusoidal_pe(double p_x, double p_y, const ModelConfig& cfg) {
  const std::size_t half = cfg.d / 2;
  std::vector<double> s(cfg.d, 0.0);
  encode_axis(clamp_pos(p_y, cfg), half, s.data());
  encode_axis(clamp_pos(p_x, cfg), half, s.data() + half);
  return s;
}

std::vector<double> add_pe(std::span<const double> z, std::span<const double> s, double w) {
  if (z.size() != s.size()) {
    throw DimensionError("add_pe: token has " + std::to_string(z.size()) + " entries, encoding " +
                         std::to_string(s.size()));
  }
  std::vector<double> h(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) h[i] = z[i] + w * s[i];
  return h;
}

ModelWeights ModelWeights::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = cfg.d, ff = 4 * cfg.d, hid = cfg.hidden();
  ModelWeights w;
  std::normal_distribution<double> token_dist(0.0, 0.02);
  std::vector<double> token(d);
  for (auto& t : token) t = token_dist(rng);
  w.class_token = Tensor({1, d}, std::move(token), true);
  for (std::size_t l = 0; l < cfg.blocks; ++l) {
    BlockWeights b;
    b.ln1_gain = param_ones({d});
    b.ln1_bias = param_zeros({d});
    b.wq = xavier(d, d, rng);
    b.bq = param_zeros({d});
    b.wk = xavier(d, d, rng);
    b.bk = param_zeros({d});
    b.wv = xavier(d, d, rng);
    b.bv = param_zeros({d});
    b.wo = xavier(d, d, rng);
    b.bo = param_zeros({d});
    b.ln2_gain = param_ones({d});
    b.ln2_bias = param_zeros({d});
    b.w1 = xavier(d, ff, rng);
    b.b1 = param_zeros({ff});
    b.w2 = xavier(ff, d, rng);
    b.b2 = param_zeros({d});
    w.blocks.push_back(std::move(b));
  }
  w.final_gain = param_ones({d});
  w.final_bias = param_zeros({d});
  w.slide_head = {xavier(d, hid, rng), param_zeros({hid}), xavier(hid, cfg.slide_labels, rng),
                  param_zeros({cfg.slide_labels})};
  w.instance_head = {xavier(d, hid, rng), param_zeros({hid}), xavier(hid, cfg.instance_classes, rng),
                     param_zeros({cfg.instance_classes})};
  return w;
}

ModelWeights ModelWeights::zeros(const ModelConfig& cfg) {
  ModelWeights w = init(cfg, 0);
  for (auto& [name, t] : w.named()) {
    const bool gain = name.ends_with("gain");
    for (auto& v : t.mutable_data()) v = gain ? 1.0 : 0.0;
  }
  return w;
}

std::vector<std::pair<std::string, Tensor>> ModelWeights::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("class_token", class_token);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& b = blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.emplace_back(p + "ln1.gain", b.ln1_gain);
    out.emplace_back(p + "ln1.bias", b.ln1_bias);
    out.emplace_back(p + "attn.wq", b.wq);
    out.emplace_back(p + "attn.bq", b.bq);
    out.emplace_back(p + "attn.wk", b.wk);
    out.emplace_back(p + "attn.bk", b.bk);
    out.emplace_back(p + "attn.wv", b.wv);
    out.emplace_back(p + "attn.bv", b.bv);
    out.emplace_back(p + "attn.wo", b.wo);
    out.emplace_back(p + "attn.bo", b.bo);
    out.emplace_back(p + "ln2.gain", b.ln2_gain);
    out.emplace_back(p + "ln2.bias", b.ln2_bias);
    out.emplace_back(p + "ffn.w1", b.w1);
    out.emplace_back(p + "ffn.b1", b.b1);
    out.emplace_back(p + "ffn.w2", b.w2);
    out.emplace_back(p + "ffn.b2", b.b2);
  }
  out.emplace_back("final_ln.gain", final_gain);
  out.emplace_back("final_ln.bias", final_bias);
  out.emplace_back("slide_head.w1", slide_head.w1);
  out.emplace_back("slide_head.b1", slide_head.b1);
  out.emplace_back("slide_head.w2", slide_head.w2);
  out.emplace_back("slide_head.b2", slide_head.b2);
  out.emplace_back("instance_head.w1", instance_head.w1);
  out.emplace_back("instance_head.b1", instance_head.b1);
  out.emplace_back("instance_head.w2", instance_head.w2);
  out.emplace_back("instance_head.b2", instance_head.b2);
  return out;
}

std::vector<Tensor> ModelWeights::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named()) out.push_back(t);
  return out;
}

ModelWeights ModelWeights::clone() const {
  ModelWeights w = *this;
  w.class_token = class_token.clone();
  for (auto& b : w.blocks) {
    for (Tensor* t : {&b.ln1_gain, &b.ln1_bias, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo, &b.ln2_gain,
                      &b.ln2_bias, &b.w1, &b.b1, &b.w2, &b.b2})
      *t = t->clone();
  }
  w.final_gain = final_gain.clone();
  w.final_bias = final_bias.clone();
  for (HeadWeights* h : {&w.slide_head, &w.instance_head}) {
    h->w1 = h->w1.clone();
    h->b1 = h->b1.clone();
    h->w2 = h->w2.clone();
    h->b2 = h->b2.clone();
  }
  return w;
}

void ModelWeights::assign_from(const ModelWeights& other) {
  auto mine = named();
  const auto theirs = other.named();
  if (mine.size() != theirs.size()) throw DimensionError("assign_from: parameter count mismatch");
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (mine[i].second.shape() != theirs[i].second.shape()) {
      throw DimensionError("assign_from: shape mismatch for " + mine[i].first);
    }
    auto dst = mine[i].second.mutable_data();
    const auto src = theirs[i].second.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

ForwardOutput forward(const Tensor& tokens, std::span<const Centroid> centroids, const ModelWeights& weights,
                      const ModelConfig& cfg, Mode mode, std::mt19937_64* rng) {
  if (tokens.rank() != 2 || tokens.cols() != cfg.d) {
    throw DimensionError("forward: tokens " + shape_string(tokens.shape()) + " do not have width " +
                         std::to_string(cfg.d));
  }
  const std::size_t n = tokens.rows();
  if (centroids.size() != n) {
    throw DimensionError("forward: " + std::to_string(n) + " tokens but " + std::to_string(centroids.size()) +
                         " centroids");
  }
  const bool drop = mode == Mode::train && cfg.dropout > 0.0;
  if (drop && !rng) throw ContractError("forward: train mode with dropout needs an rng");

  Tensor h = tokens;
  if (cfg.pe_weight != 0.0) {
    std::vector<double> pe;
    pe.reserve(n * cfg.d);
    for (const auto& c : centroids) {
      const auto s = sinusoidal_pe(c.x, c.y, cfg);
      pe.insert(pe.end(), s.begin(), s.end());
    }
    h = add(tokens, scale(Tensor({n, cfg.d}, std::move(pe)), cfg.pe_weight));
  }
  const std::vector<Tensor> parts{weights.class_token, h};
  Tensor x = concat_rows(parts);
  for (const auto& b : weights.blocks) {
    Tensor a = attention(layernorm(x, b.ln1_gain, b.ln1_bias), b, cfg.heads);
    if (drop) a = dropout(a, cfg.dropout, *rng);
    x = add(x, a);
    Tensor f = linear(gelu(linear(layernorm(x, b.ln2_gain, b.ln2_bias), b.w1, b.b1)), b.w2, b.b2);
    if (drop) f = dropout(f, cfg.dropout, *rng);
    x = add(x, f);
  }
  x = layernorm(x, weights.final_gain, weights.final_bias);
  return {slice_rows(x, 0, 1), slice_rows(x, 1, n)};
}

Tensor slide_head(const Tensor& class_output, const ModelWeights& weights) { return mlp(class_output, weights.slide_head); }

Tensor instance_head(const Tensor& instance_outputs, const ModelWeights& weights) {
  return mlp(instance_outputs, weights.instance_head);
}

// ---- checkpoints ---------------------------------------------------------

namespace {

nlohmann::json config_json(const ModelConfig& c) {
  return {{"d", c.d},
          {"blocks", c.blocks},
          {"heads", c.heads},
          {"slide_labels", c.slide_labels},
          {"instance_classes", c.instance_classes},
          {"pe_weight", c.pe_weight},
          {"pos_divisor", c.pos_divisor},
          {"max_pos", c.max_pos},
          {"head_hidden", c.hidden()},
          {"dropout", c.dropout}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d = j.at("d");
  c.blocks = j.at("blocks");
  c.heads = j.at("heads");
  c.slide_labels = j.at("slide_labels");
  c.instance_classes = j.at("instance_classes");
  c.pe_weight = j.at("pe_weight");
  c.pos_divisor = j.at("pos_divisor");
  c.max_pos = j.at("max_pos");
  c.head_hidden = j.at("head_hidden");
  c.dropout = j.at("dropout");
  return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const ModelWeights& weights, const ModelConfig& cfg,
                     const ClassSet& classes, std::size_t step) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest{{"config", config_json(cfg)}, {"class_set", classes.names()}, {"step", step}};
  auto& names = manifest["weights"] = nlohmann::json::array();
  for (const auto& [name, t] : weights.named()) {
    save_tensor(dir / (name + ".tensor"), t);
    names.push_back(name);
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("no checkpoint manifest in " + dir.string());
  const auto manifest = nlohmann::json::parse(in);
  Checkpoint ck;
  ck.config = config_from_json(manifest.at("config"));
  ck.classes = ClassSet(manifest.at("class_set").get<std::vector<std::string>>());
  ck.step = manifest.at("step");
  ck.weights = ModelWeights::init(ck.config, 0);
  for (auto& [name, t] : ck.weights.named()) {
    const Tensor stored = load_tensor(dir / (name + ".tensor"));
    if (stored.shape() != t.shape()) {
      throw std::runtime_error("checkpoint weight " + name + " has shape " + shape_string(stored.shape()) +
                               ", expected " + shape_string(t.shape()));
    }
    std::copy(stored.data().begin(), stored.data().end(), t.mutable_data().begin());
  }
  return ck;
}

}  // namespace mixmil
