#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "iam/error.hpp"

namespace iam {

template <typename S>
bool all_finite(std::span<const S> v) {
  for (const S x : v) {
    if (!std::isfinite(static_cast<double>(x))) return false;
  }
  return true;
}

template <typename S>
void require_finite(std::span<const S> v, const char* what) {
  if (!all_finite(v)) throw NumericError(std::string("non-finite value in ") + what);
}

// Row-major dense matrix. Shape is fixed at construction.
template <typename S>
struct Mat {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<S> a;

  Mat() = default;
  Mat(size_t r, size_t c) : rows(r), cols(c), a(r * c, S(0)) {}

  S& at(size_t r, size_t c) { return a[r * cols + c]; }
  S at(size_t r, size_t c) const { return a[r * cols + c]; }

  std::span<const S> row(size_t r) const { return {a.data() + r * cols, cols}; }
  std::span<S> row(size_t r) { return {a.data() + r * cols, cols}; }
};

template <typename S>
std::vector<double> to_double(std::span<const S> v) {
  return std::vector<double>(v.begin(), v.end());
}

template <typename To, typename From>
std::vector<To> cast_vec(std::span<const From> v) {
  std::vector<To> out(v.size());
  for (size_t i = 0; i < v.size(); ++i) out[i] = static_cast<To>(v[i]);
  return out;
}

}  // namespace iam
