// Test-only oracles, independent of the implementation paths they check.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "pfsam/params.hpp"

namespace oracles {

// Central finite differences on a flat parameter vector.
inline pfsam::ParameterVector fd_gradient(
    const std::function<double(const pfsam::ParameterVector&)>& f,
    const pfsam::ParameterVector& at, double h = 1e-5) {
  pfsam::ParameterVector g = pfsam::ParameterVector::zeros_like(at);
  pfsam::ParameterVector x = at;
  for (std::size_t i = 0; i < at.size(); ++i) {
    double orig = x[i];
    x[i] = orig + h;
    double fp = f(x);
    x[i] = orig - h;
    double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double rel_error(const pfsam::ParameterVector& a,
                        const pfsam::ParameterVector& b) {
  double diff = 0.0, norm = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    norm += b[i] * b[i];
  }
  return std::sqrt(diff) / (std::sqrt(norm) + 1e-12);
}

// O(k^2) pair enumeration of Kendall tau-b with tie corrections.
inline std::optional<double> kendall_bruteforce(std::span<const double> x,
                                                std::span<const double> y) {
  const std::size_t k = x.size();
  std::int64_t concordant = 0, discordant = 0, tx = 0, ty = 0, txy = 0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i + 1; j < k; ++j) {
      bool tied_x = x[i] == x[j];
      bool tied_y = y[i] == y[j];
      if (tied_x && tied_y) {
        ++tx, ++ty, ++txy;
      } else if (tied_x) {
        ++tx;
      } else if (tied_y) {
        ++ty;
      } else {
        double s = (x[i] - x[j]) * (y[i] - y[j]);
        if (s > 0) ++concordant;
        else ++discordant;
      }
    }
  }
  const std::int64_t n0 = static_cast<std::int64_t>(k) *
                          static_cast<std::int64_t>(k - 1) / 2;
  if (n0 == tx || n0 == ty) return std::nullopt;
  return static_cast<double>(concordant - discordant) /
         std::sqrt(static_cast<double>(n0 - tx) * static_cast<double>(n0 - ty));
}

// Plug-in H(code | label) in bits from the joint histogram; equals the
// conditional mutual information of a deterministic snapshot.
inline double cond_entropy_hist(std::span<const std::uint64_t> codes,
                                std::span<const std::int32_t> labels) {
  std::map<std::pair<std::int32_t, std::uint64_t>, double> joint;
  std::map<std::int32_t, double> marg;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    joint[{labels[i], codes[i]}] += 1.0;
    marg[labels[i]] += 1.0;
  }
  const double n = static_cast<double>(codes.size());
  double h = 0.0;
  for (const auto& [key, c] : joint) {
    double p_joint = c / n;
    double p_cond = c / marg[key.first];
    h -= p_joint * std::log2(p_cond);
  }
  return h;
}

// Plug-in I(code; label) in bits via sum p log p/(px py), a different route
// than H(Y) - H(Y|X).
inline double mutual_information_hist(std::span<const std::uint64_t> codes,
                                      std::span<const std::int32_t> labels) {
  std::map<std::pair<std::int32_t, std::uint64_t>, double> joint;
  std::map<std::int32_t, double> py;
  std::map<std::uint64_t, double> pc;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    joint[{labels[i], codes[i]}] += 1.0;
    py[labels[i]] += 1.0;
    pc[codes[i]] += 1.0;
  }
  const double n = static_cast<double>(codes.size());
  double mi = 0.0;
  for (const auto& [key, c] : joint) {
    double p = c / n;
    mi += p * std::log2(p / ((py[key.first] / n) * (pc[key.second] / n)));
  }
  return mi;
}

// Symmetric matrix with a prescribed spectrum: A = Q diag(eigs) Q^T with Q a
// random orthogonal matrix (Gram-Schmidt on a Gaussian matrix).
inline std::vector<std::vector<double>> matrix_with_spectrum(
    const std::vector<double>& eigs, std::uint64_t seed) {
  const std::size_t d = eigs.size();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> q(d, std::vector<double>(d));
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) q[i][j] = normal(rng);
    for (std::size_t p = 0; p < i; ++p) {
      double proj = 0.0;
      for (std::size_t j = 0; j < d; ++j) proj += q[i][j] * q[p][j];
      for (std::size_t j = 0; j < d; ++j) q[i][j] -= proj * q[p][j];
    }
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) norm += q[i][j] * q[i][j];
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < d; ++j) q[i][j] /= norm;
  }
  std::vector<std::vector<double>> a(d, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = 0; k < d; ++k)
        a[i][j] += q[k][i] * eigs[k] * q[k][j];
  return a;
}

}  // namespace oracles
