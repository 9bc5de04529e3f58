#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "mixmil/tensor.hpp"

namespace mixmil {

enum class DType { f32, f64 };

/// Tensor container: one line of JSON `{"shape":[...],"dtype":"f32|f64","byte_order":"little"}`
/// terminated by '\n', followed by the raw row-major payload.
void write_tensor(std::ostream& out, const Tensor& t, DType dtype = DType::f64);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& t, DType dtype = DType::f64);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace mixmil
