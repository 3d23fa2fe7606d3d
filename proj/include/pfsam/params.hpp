#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "pfsam/errors.hpp"

namespace pfsam {

struct Segment {
  std::string name;
  std::size_t offset = 0;
  std::size_t extent = 0;
};

// Flat 64-bit real vector with a named segment map; the single currency of
// all perturbation and optimizer math. Segments tile the vector exactly.
class ParameterVector {
 public:
  ParameterVector() = default;
  ParameterVector(std::vector<double> values, std::vector<Segment> segments);

  static ParameterVector zeros_like(const ParameterVector& other);

  std::size_t size() const { return values_.size(); }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  const std::vector<Segment>& segments() const { return segments_; }
  const Segment& segment(const std::string& name) const;
  std::span<double> span(const Segment& s) {
    return {values_.data() + s.offset, s.extent};
  }
  std::span<const double> span(const Segment& s) const {
    return {values_.data() + s.offset, s.extent};
  }
  std::span<double> span(const std::string& name) { return span(segment(name)); }
  std::span<const double> span(const std::string& name) const {
    return span(segment(name));
  }

  bool same_layout(const ParameterVector& other) const;

 private:
  std::vector<double> values_;
  std::vector<Segment> segments_;
};

inline double dot(const ParameterVector& a, const ParameterVector& b) {
  if (a.size() != b.size()) throw UsageError("dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(const ParameterVector& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * a[i];
  return std::sqrt(s);
}

// out = a + c * b
inline ParameterVector add_scaled(const ParameterVector& a,
                                  const ParameterVector& b, double c) {
  if (a.size() != b.size()) throw UsageError("add_scaled: dimension mismatch");
  ParameterVector out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += c * b[i];
  return out;
}

inline ParameterVector scaled(const ParameterVector& a, double c) {
  ParameterVector out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
  return out;
}

}  // namespace pfsam
