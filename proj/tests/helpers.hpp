#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "mixmil/tensor.hpp"

namespace testutil {

inline mixmil::Tensor random_tensor(mixmil::Shape shape, std::mt19937_64& rng, bool requires_grad = true,
                                    double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(mixmil::shape_product(shape));
  for (double& x : v) x = n(rng);
  return mixmil::Tensor(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<double> values(const mixmil::Tensor& t) { return {t.data().begin(), t.data().end()}; }

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("mixmil_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
