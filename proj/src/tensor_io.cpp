#include "mixmil/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "json.hpp"

namespace mixmil {

static_assert(std::endian::native == std::endian::little, "tensor container assumes a little-endian host");

void write_tensor(std::ostream& out, const Tensor& t, DType dtype) {
  nlohmann::json header;
  header["shape"] = t.shape();
  header["dtype"] = dtype == DType::f32 ? "f32" : "f64";
  header["byte_order"] = "little";
  out << header.dump() << '\n';
  const auto data = t.data();
  if (dtype == DType::f64) {
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  } else {
    std::vector<float> narrow(data.begin(), data.end());
    out.write(reinterpret_cast<const char*>(narrow.data()),
              static_cast<std::streamsize>(narrow.size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("tensor container: write failed");
}

Tensor read_tensor(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("tensor container: missing header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("tensor container: bad header: ") + e.what());
  }
  if (header.value("byte_order", "") != "little") throw std::runtime_error("tensor container: unsupported byte order");
  const Shape shape = header.at("shape").get<Shape>();
  const std::string dtype = header.at("dtype").get<std::string>();
  const std::size_t n = shape_product(shape);
  std::vector<double> values(n);
  if (dtype == "f64") {
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * sizeof(double)));
  } else if (dtype == "f32") {
    std::vector<float> narrow(n);
    in.read(reinterpret_cast<char*>(narrow.data()), static_cast<std::streamsize>(n * sizeof(float)));
    std::copy(narrow.begin(), narrow.end(), values.begin());
  } else {
    throw std::runtime_error("tensor container: unknown dtype '" + dtype + "'");
  }
  if (!in) throw std::runtime_error("tensor container: truncated payload");
  return Tensor(shape, std::move(values));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t, DType dtype) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_tensor(out, t, dtype);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return read_tensor(in);
}

}  // namespace mixmil
