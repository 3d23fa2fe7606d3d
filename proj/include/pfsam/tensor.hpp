#pragma once

#include <cstddef>
#include <initializer_list>
#include <utility>
#include <vector>

#include "pfsam/errors.hpp"

namespace pfsam::diff {

// Dense row-major matrix of 64-bit reals. Rank is fixed at two: vectors are
// 1xN or Nx1 and scalars 1x1.
struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
  Tensor(std::size_t r, std::size_t c, std::vector<double> data)
      : rows(r), cols(c), v(std::move(data)) {
    if (v.size() != rows * cols)
      throw UsageError("tensor data size does not match extents");
  }

  static Tensor zeros(std::size_t r, std::size_t c) { return Tensor(r, c); }
  static Tensor full(std::size_t r, std::size_t c, double x) {
    Tensor t(r, c);
    for (auto& e : t.v) e = x;
    return t;
  }
  static Tensor row(std::initializer_list<double> xs) {
    return Tensor(1, xs.size(), std::vector<double>(xs));
  }
  static Tensor row(std::vector<double> xs) {
    std::size_t n = xs.size();
    return Tensor(1, n, std::move(xs));
  }
  static Tensor column(std::vector<double> xs) {
    std::size_t n = xs.size();
    return Tensor(n, 1, std::move(xs));
  }

  double& at(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return v[i * cols + j]; }

  std::size_t size() const { return v.size(); }
  bool is_scalar() const { return rows == 1 && cols == 1; }
  bool same_shape(const Tensor& o) const {
    return rows == o.rows && cols == o.cols;
  }
};

}  // namespace pfsam::diff
