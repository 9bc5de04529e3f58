#include <doctest.h>

#include <fstream>
#include <json.hpp>
#include <sstream>

#include "helpers.hpp"
#include "mixmil/tensor_io.hpp"

using namespace mixmil;

TEST_CASE("f64 round trip is exact") {
  std::mt19937_64 rng(1);
  const Tensor t = testutil::random_tensor({3, 5}, rng, false);
  std::stringstream buf;
  write_tensor(buf, t, DType::f64);
  const Tensor back = read_tensor(buf);
  CHECK(back.shape() == t.shape());
  CHECK(testutil::values(back) == testutil::values(t));
}

TEST_CASE("header is a JSON line with shape, dtype and byte order") {
  const Tensor t({2, 2}, {1, 2, 3, 4});
  std::stringstream buf;
  write_tensor(buf, t, DType::f32);
  std::string header;
  std::getline(buf, header);
  const auto j = nlohmann::json::parse(header);
  CHECK(j.at("shape") == nlohmann::json::array({2, 2}));
  CHECK(j.at("dtype") == "f32");
  CHECK(j.at("byte_order") == "little");
  std::string payload((std::istreambuf_iterator<char>(buf)), std::istreambuf_iterator<char>());
  CHECK(payload.size() == 4 * sizeof(float));
}

TEST_CASE("f32 round trip loses only float precision") {
  const Tensor t({3}, {0.1, -2.5, 1e-3});
  std::stringstream buf;
  write_tensor(buf, t, DType::f32);
  const Tensor back = read_tensor(buf);
  for (std::size_t i = 0; i < 3; ++i) CHECK(back.at(i) == static_cast<double>(static_cast<float>(t.at(i))));
}

TEST_CASE("truncated payload is rejected") {
  const Tensor t({4}, {1, 2, 3, 4});
  std::stringstream buf;
  write_tensor(buf, t, DType::f64);
  std::string s = buf.str();
  s.resize(s.size() - 3);
  std::stringstream cut(s);
  CHECK_THROWS(read_tensor(cut));
}

TEST_CASE("file helpers") {
  const auto dir = testutil::scratch_dir("tensor_io");
  const Tensor t({1, 3}, {7, 8, 9});
  save_tensor(dir / "t.tensor", t);
  CHECK(testutil::values(load_tensor(dir / "t.tensor")) == std::vector<double>{7, 8, 9});
  CHECK_THROWS(load_tensor(dir / "missing.tensor"));
}
