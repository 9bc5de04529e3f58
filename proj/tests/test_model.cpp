#include <doctest.h>

#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "mixmil/model.hpp"
#include "mixmil/tensor_io.hpp"

using namespace mixmil;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.d = 32;
  cfg.blocks = 2;
  cfg.heads = 4;
  cfg.slide_labels = 4;
  cfg.instance_classes = 4;
  cfg.dropout = 0.0;
  return cfg;
}

std::vector<Centroid> random_centroids(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 896.0);
  std::vector<Centroid> c(n);
  for (auto& p : c) p = {u(rng), u(rng)};
  return c;
}

std::vector<double> row(const Tensor& t, std::size_t r) {
  const auto d = t.data();
  return {d.begin() + r * t.cols(), d.begin() + (r + 1) * t.cols()};
}

// Plain layer norm with unit gain and zero bias.
std::vector<double> reference_layernorm(const std::vector<double>& x) {
  const double n = static_cast<double>(x.size());
  const double mu = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= n;
  std::vector<double> out;
  for (double v : x) out.push_back((v - mu) / std::sqrt(var + 1e-5));
  return out;
}

}  // namespace

TEST_CASE("positional encoding reference values") {
  ModelConfig cfg;
  cfg.d = 4;
  cfg.heads = 1;
  const auto s = sinusoidal_pe(100.0, 100.0, cfg);
  REQUIRE(s.size() == 4);
  CHECK(s[0] == doctest::Approx(0.8415).epsilon(1e-4));
  CHECK(s[1] == doctest::Approx(0.5403).epsilon(1e-4));
  CHECK(s[2] == doctest::Approx(0.8415).epsilon(1e-4));
  CHECK(s[3] == doctest::Approx(0.5403).epsilon(1e-4));
  const auto origin = sinusoidal_pe(0.0, 0.0, cfg);
  CHECK(origin == std::vector<double>{0.0, 1.0, 0.0, 1.0});
}

TEST_CASE("positional encoding puts the row half first") {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.heads = 1;
  const auto s = sinusoidal_pe(0.0, 250.0, cfg);
  CHECK(s[0] == doctest::Approx(std::sin(2.5)));
  CHECK(s[4] == 0.0);
  CHECK(s[5] == 1.0);
  // Second frequency of the row half: 2.5 / 10000^(2/4).
  CHECK(s[2] == doctest::Approx(std::sin(2.5 / 100.0)));
}

TEST_CASE("positional encoding pairs lie on the unit circle") {
  ModelConfig cfg;
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 20000.0);
  for (int t = 0; t < 20; ++t) {
    const auto s = sinusoidal_pe(u(rng), u(rng), cfg);
    for (std::size_t j = 0; j < s.size(); j += 2) CHECK(s[j] * s[j] + s[j + 1] * s[j + 1] == doctest::Approx(1.0));
  }
}

TEST_CASE("positions beyond the range are clamped") {
  ModelConfig cfg;
  CHECK(sinusoidal_pe(1e7, 0.0, cfg) == sinusoidal_pe(cfg.max_pos * cfg.pos_divisor, 0.0, cfg));
  CHECK(sinusoidal_pe(-50.0, 0.0, cfg) == sinusoidal_pe(0.0, 0.0, cfg));
}

TEST_CASE("add_pe identities and shape contract") {
  const std::vector<double> z{1.0, -2.0, 3.0, 0.5};
  const std::vector<double> s{0.0, 1.0, 0.0, 1.0};
  CHECK(add_pe(z, s, 0.0) == z);
  CHECK(add_pe(z, std::vector<double>(4, 0.0), 0.1) == z);
  CHECK(add_pe(z, s, 0.5) == std::vector<double>{1.0, -1.5, 3.0, 1.0});
  CHECK_THROWS_AS(add_pe(z, std::vector<double>(3, 0.0), 0.1), DimensionError);
}

TEST_CASE("forward output shapes") {
  const ModelConfig cfg = small_config();
  std::mt19937_64 rng(2);
  const ModelWeights w = ModelWeights::init(cfg, 7);
  for (std::size_t n : {1u, 5u, 12u}) {
    const auto out = forward(testutil::random_tensor({n, cfg.d}, rng, false), random_centroids(n, rng), w, cfg);
    CHECK(out.class_output.shape() == Shape{1, cfg.d});
    CHECK(out.instance_outputs.shape() == Shape{n, cfg.d});
    CHECK(slide_head(out.class_output, w).shape() == Shape{1, cfg.slide_labels});
    CHECK(instance_head(out.instance_outputs, w).shape() == Shape{n, cfg.instance_classes});
  }
}

TEST_CASE("forward rejects mismatched inputs") {
  const ModelConfig cfg = small_config();
  std::mt19937_64 rng(3);
  const ModelWeights w = ModelWeights::init(cfg, 7);
  CHECK_THROWS_AS(forward(testutil::random_tensor({3, 16}, rng, false), random_centroids(3, rng), w, cfg), DimensionError);
  CHECK_THROWS_AS(forward(testutil::random_tensor({3, 32}, rng, false), random_centroids(2, rng), w, cfg), DimensionError);
  ModelConfig drop = cfg;
  drop.dropout = 0.1;
  CHECK_THROWS_AS(forward(testutil::random_tensor({3, 32}, rng, false), random_centroids(3, rng), w, drop, Mode::train),
                  ContractError);
}

TEST_CASE("zero weights with one block reduce to a layer norm of the tokens") {
  ModelConfig cfg = small_config();
  cfg.blocks = 1;
  cfg.pe_weight = 0.1;
  std::mt19937_64 rng(4);
  const Tensor z = testutil::random_tensor({3, cfg.d}, rng, false);
  const auto c = random_centroids(3, rng);
  const ModelWeights w = ModelWeights::zeros(cfg);
  const auto out = forward(z, c, w, cfg);
  for (double v : out.class_output.data()) CHECK(v == 0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto h = add_pe(row(z, i), sinusoidal_pe(c[i].x, c[i].y, cfg), cfg.pe_weight);
    const auto expect = reference_layernorm(h);
    const auto got = row(out.instance_outputs, i);
    for (std::size_t k = 0; k < cfg.d; ++k) CHECK(got[k] == doctest::Approx(expect[k]).epsilon(1e-9));
  }
  const Tensor slide = slide_head(out.class_output, w);
  const Tensor prob = sigmoid(slide);
  for (double v : prob.data()) CHECK(v == 0.5);
  const Tensor inst = softmax(instance_head(out.instance_outputs, w), 1);
  for (double v : inst.data()) CHECK(v == doctest::Approx(0.25));
}

TEST_CASE("without positional weight the centroids do not matter") {
  ModelConfig cfg = small_config();
  cfg.pe_weight = 0.0;
  std::mt19937_64 rng(5);
  const ModelWeights w = ModelWeights::init(cfg, 9);
  const Tensor z = testutil::random_tensor({4, cfg.d}, rng, false);
  const auto a = forward(z, random_centroids(4, rng), w, cfg);
  const auto b = forward(z, random_centroids(4, rng), w, cfg);
  CHECK(testutil::values(a.class_output) == testutil::values(b.class_output));
  CHECK(testutil::values(a.instance_outputs) == testutil::values(b.instance_outputs));
}

TEST_CASE("instance permutation permutes instance outputs and keeps the class output") {
  const ModelConfig cfg = small_config();
  std::mt19937_64 rng(6);
  const ModelWeights w = ModelWeights::init(cfg, 11);
  const std::size_t n = 6;
  const Tensor z = testutil::random_tensor({n, cfg.d}, rng, false);
  const auto c = random_centroids(n, rng);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0u);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<Centroid> pc;
  for (auto p : perm) pc.push_back(c[p]);
  const Tensor pz = select_rows(z, perm);
  const auto a = forward(z, c, w, cfg);
  const auto b = forward(pz, pc, w, cfg);
  for (std::size_t k = 0; k < cfg.d; ++k) CHECK(b.class_output.at(k) == doctest::Approx(a.class_output.at(k)).epsilon(1e-10));
  for (std::size_t i = 0; i < n; ++i) {
    const auto ra = row(a.instance_outputs, perm[i]);
    const auto rb = row(b.instance_outputs, i);
    for (std::size_t k = 0; k < cfg.d; ++k) CHECK(rb[k] == doctest::Approx(ra[k]).epsilon(1e-10));
  }
}

TEST_CASE("dropout only acts in train mode") {
  ModelConfig cfg = small_config();
  cfg.dropout = 0.3;
  std::mt19937_64 rng(7);
  const ModelWeights w = ModelWeights::init(cfg, 13);
  const Tensor z = testutil::random_tensor({4, cfg.d}, rng, false);
  const auto c = random_centroids(4, rng);
  const auto e1 = forward(z, c, w, cfg, Mode::eval);
  const auto e2 = forward(z, c, w, cfg, Mode::eval);
  CHECK(testutil::values(e1.class_output) == testutil::values(e2.class_output));
  std::mt19937_64 drng(1);
  const auto t = forward(z, c, w, cfg, Mode::train, &drng);
  CHECK(testutil::values(t.class_output) != testutil::values(e1.class_output));
}

TEST_CASE("head gradients match finite differences") {
  const ModelConfig cfg = small_config();
  std::mt19937_64 rng(8);
  const ModelWeights w = ModelWeights::init(cfg, 15);
  const Tensor x = testutil::random_tensor({3, cfg.d}, rng, false);
  std::vector<Tensor> sp{w.slide_head.w1, w.slide_head.b1, w.slide_head.w2, w.slide_head.b2};
  CHECK(finite_diff_check([&] { return sum(softplus(slide_head(slice_rows(x, 0, 1), w))); }, sp) < 1e-4);
  std::vector<Tensor> ip{w.instance_head.w1, w.instance_head.b1, w.instance_head.w2, w.instance_head.b2};
  CHECK(finite_diff_check([&] { return sum(log_softmax(instance_head(x, w), 1)); }, ip) < 1e-4);
}

TEST_CASE("full model gradients match finite differences") {
  const ModelConfig cfg = small_config();
  std::mt19937_64 rng(9);
  const ModelWeights w = ModelWeights::init(cfg, 17);
  const Tensor z = testutil::random_tensor({5, cfg.d}, rng, true);
  const auto c = random_centroids(5, rng);
  const Tensor ps = testutil::random_tensor({1, cfg.slide_labels}, rng, false);
  const Tensor pi = testutil::random_tensor({5, cfg.instance_classes}, rng, false);
  auto loss = [&] {
    const auto out = forward(z, c, w, cfg);
    return add(sum(mul(slide_head(out.class_output, w), ps)), sum(mul(instance_head(out.instance_outputs, w), pi)));
  };
  std::vector<Tensor> params = w.parameters();
  params.push_back(z);
  CHECK(finite_diff_check(loss, params) < 1e-4);
}

TEST_CASE("parameter naming, cloning and assignment") {
  const ModelConfig cfg = small_config();
  ModelWeights a = ModelWeights::init(cfg, 1);
  const ModelWeights b = ModelWeights::init(cfg, 2);
  const auto names = a.named();
  CHECK(names.front().first == "class_token");
  CHECK(names.back().first == "instance_head.b2");
  CHECK(names.size() == 1 + 16 * cfg.blocks + 2 + 8);
  CHECK(a.parameters().size() == names.size());

  const ModelWeights copy = a.clone();
  a.assign_from(b);
  for (std::size_t i = 0; i < names.size(); ++i) {
    CHECK(testutil::values(a.named()[i].second) == testutil::values(b.named()[i].second));
  }
  CHECK(testutil::values(copy.class_token) != testutil::values(a.class_token));

  ModelConfig other = cfg;
  other.blocks = 1;
  CHECK_THROWS_AS(a.assign_from(ModelWeights::init(other, 3)), DimensionError);
}

TEST_CASE("init is deterministic per seed") {
  const ModelConfig cfg = small_config();
  CHECK(testutil::values(ModelWeights::init(cfg, 5).blocks[0].wq) == testutil::values(ModelWeights::init(cfg, 5).blocks[0].wq));
  CHECK(testutil::values(ModelWeights::init(cfg, 5).blocks[0].wq) != testutil::values(ModelWeights::init(cfg, 6).blocks[0].wq));
}

TEST_CASE("config validation") {
  ModelConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = ModelConfig{};
  cfg.d = 7;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = ModelConfig{};
  CHECK(cfg.hidden() == 16);
}

TEST_CASE("checkpoint round trip") {
  const auto dir = testutil::scratch_dir("checkpoint");
  ModelConfig cfg = small_config();
  cfg.pe_weight = 0.25;
  const ModelWeights w = ModelWeights::init(cfg, 21);
  const ClassSet classes({"A", "B", "C", "D"});
  save_checkpoint(dir / "ck", w, cfg, classes, 42);
  const Checkpoint back = load_checkpoint(dir / "ck");
  CHECK(back.step == 42);
  CHECK(back.classes == classes);
  CHECK(back.config.d == cfg.d);
  CHECK(back.config.blocks == cfg.blocks);
  CHECK(back.config.pe_weight == cfg.pe_weight);
  const auto a = w.named();
  const auto b = back.weights.named();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(testutil::values(a[i].second) == testutil::values(b[i].second));
  }
  CHECK_THROWS(load_checkpoint(dir / "missing"));
}

TEST_CASE("checkpoint with a wrong tensor shape is rejected") {
  const auto dir = testutil::scratch_dir("checkpoint_bad");
  const ModelConfig cfg = small_config();
  save_checkpoint(dir / "ck", ModelWeights::init(cfg, 1), cfg, ClassSet(), 0);
  save_tensor(dir / "ck" / "class_token.tensor", Tensor({1, 3}, {1, 2, 3}));
  CHECK_THROWS(load_checkpoint(dir / "ck"));
}
