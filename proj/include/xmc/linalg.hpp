#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace xmc {

// Row-major dense matrix of 32-bit floats. Storage is single precision;
// the ops below accumulate in double.
struct FloatMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  FloatMatrix() = default;
  FloatMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

  std::span<const float> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  std::span<float> row(std::size_t i) { return {data.data() + i * cols, cols}; }

  bool operator==(const FloatMatrix&) const = default;
};

double dot(std::span<const float> a, std::span<const float> b);
double l2_norm(std::span<const float> v);
double squared_l2_distance(std::span<const float> a, std::span<const float> b);
bool all_finite(std::span<const float> v);

}  // namespace xmc
