#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "specmc/errors.hpp"
#include "specmc/parallel.hpp"
#include "specmc/types.hpp"

namespace specmc {

inline constexpr double kCalibrationConditionLimit = 1e12;
inline constexpr std::size_t kMaxCalibrationSpecies = 8;

namespace detail {

// Eigenvalues and eigenvectors of a small symmetric matrix (cyclic Jacobi).
// a is row-major m x m and is destroyed; vectors come back as columns of v.
inline void jacobi_eigen(std::vector<double>& a, std::size_t m,
                         std::vector<double>& eigenvalues,
                         std::vector<double>& v) {
  v.assign(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i) v[i * m + i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < m; ++p)
      for (std::size_t q = p + 1; q < m; ++q) off += a[p * m + q] * a[p * m + q];
    if (off < 1e-300) break;
    for (std::size_t p = 0; p < m; ++p) {
      for (std::size_t q = p + 1; q < m; ++q) {
        const double apq = a[p * m + q];
        if (apq == 0.0) continue;
        const double app = a[p * m + p];
        const double aqq = a[q * m + q];
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < m; ++k) {
          const double akp = a[k * m + p];
          const double akq = a[k * m + q];
          a[k * m + p] = c * akp - s * akq;
          a[k * m + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < m; ++k) {
          const double apk = a[p * m + k];
          const double aqk = a[q * m + k];
          a[p * m + k] = c * apk - s * aqk;
          a[q * m + k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < m; ++k) {
          const double vkp = v[k * m + p];
          const double vkq = v[k * m + q];
          v[k * m + p] = c * vkp - s * vkq;
          v[k * m + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  eigenvalues.resize(m);
  for (std::size_t i = 0; i < m; ++i) eigenvalues[i] = a[i * m + i];
}

// In-place Cholesky of a positive-definite row-major m x m matrix; returns
// false when a pivot collapses.
inline bool cholesky(std::vector<double>& g, std::size_t m) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = g[i * m + j];
      for (std::size_t k = 0; k < j; ++k) s -= g[i * m + k] * g[j * m + k];
      if (i == j) {
        if (!(s > 0.0)) return false;
        g[i * m + i] = std::sqrt(s);
      } else {
        g[i * m + j] = s / g[j * m + j];
      }
    }
  }
  return true;
}

inline void cholesky_solve(const std::vector<double>& l, std::size_t m,
                           std::span<double> b) {
  for (std::size_t i = 0; i < m; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= l[i * m + k] * b[k];
    b[i] = s / l[i * m + i];
  }
  for (std::size_t ii = m; ii-- > 0;) {
    double s = b[ii];
    for (std::size_t k = ii + 1; k < m; ++k) s -= l[k * m + ii] * b[k];
    b[ii] = s / l[ii * m + ii];
  }
}

inline std::vector<double> normal_matrix(std::span<const LabeledSample> samples,
                                         std::size_t m) {
  std::vector<double> g(m * m, 0.0);
  for (const auto& s : samples) {
    for (std::size_t i = 0; i < m; ++i) {
      const double ci = s.conc.values[i];
      for (std::size_t j = i; j < m; ++j) g[i * m + j] += ci * s.conc.values[j];
    }
  }
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < i; ++j) g[i * m + j] = g[j * m + i];
  return g;
}

}  // namespace detail

// Identifiability diagnostics of a concentration design.
struct ConditionReport {
  double condition_number = 0.0;              // of the normal matrix; inf if singular
  std::vector<double> column_norms;           // per species, over all samples
  std::size_t sample_count = 0;
};

inline ConditionReport condition_report(std::span<const LabeledSample> samples) {
  if (samples.empty()) throw usage_error("condition report needs at least one sample");
  const std::size_t m = samples.front().conc.size();
  for (const auto& s : samples) {
    if (s.conc.size() != m) throw usage_error("samples disagree on species count");
  }
  auto g = detail::normal_matrix(samples, m);
  ConditionReport report;
  report.sample_count = samples.size();
  report.column_norms.resize(m);
  for (std::size_t i = 0; i < m; ++i) report.column_norms[i] = std::sqrt(g[i * m + i]);
  std::vector<double> eigenvalues, vectors;
  detail::jacobi_eigen(g, m, eigenvalues, vectors);
  const double lmax = *std::max_element(eigenvalues.begin(), eigenvalues.end());
  const double lmin = *std::min_element(eigenvalues.begin(), eigenvalues.end());
  if (!(lmin > 0.0) || lmax / lmin > std::numeric_limits<double>::max()) {
    report.condition_number = std::numeric_limits<double>::infinity();
  } else {
    report.condition_number = lmax / lmin;
  }
  return report;
}

// Least-squares extinction profiles, one independent M x M solve per
// wavelength: minimize sum_s (A_s[j]/l - sum_i eps_i(j) C_{s,i})^2.
inline ExtinctionProfileSet fit_extinction(std::span<const LabeledSample> samples,
                                           PathLength l,
                                           std::vector<std::string> species) {
  if (species.empty()) throw usage_error("fit needs species names");
  const std::size_t m = species.size();
  if (m > kMaxCalibrationSpecies) {
    throw usage_error("fit supports at most " +
                      std::to_string(kMaxCalibrationSpecies) + " species");
  }
  if (samples.size() < m) {
    throw usage_error("fit needs at least as many samples as species");
  }
  const GridPtr grid = samples.front().spectrum.grid;
  const std::size_t n_wl = grid->size();
  for (const auto& s : samples) {
    if (s.conc.size() != m) throw usage_error("sample species count mismatch");
    if (!same_grid(s.spectrum.grid, grid)) {
      throw usage_error("samples live on different grids");
    }
  }

  auto g = detail::normal_matrix(samples, m);
  {
    auto g_copy = g;
    std::vector<double> eigenvalues, vectors;
    detail::jacobi_eigen(g_copy, m, eigenvalues, vectors);
    const double lmax = *std::max_element(eigenvalues.begin(), eigenvalues.end());
    const double lmin = *std::min_element(eigenvalues.begin(), eigenvalues.end());
    if (!(lmin > 0.0) || lmax / lmin > kCalibrationConditionLimit) {
      // The eigenvector of the smallest eigenvalue points at the species
      // combination the design cannot identify; name its largest component.
      std::size_t worst_eig = static_cast<std::size_t>(
          std::min_element(eigenvalues.begin(), eigenvalues.end()) -
          eigenvalues.begin());
      std::size_t worst_species = 0;
      double best = -1.0;
      for (std::size_t i = 0; i < m; ++i) {
        const double c = std::abs(vectors[i * m + worst_eig]);
        if (c > best) {
          best = c;
          worst_species = i;
        }
      }
      throw calibration_error(
          "concentration design cannot identify species '" +
          species[worst_species] + "' (normal-matrix condition number " +
          (lmin > 0.0 ? std::to_string(lmax / lmin) : std::string("inf")) + ")");
    }
  }
  if (!detail::cholesky(g, m)) {
    throw calibration_error("normal matrix is not positive definite");
  }

  std::vector<double> eps(m * n_wl, 0.0);
  parallel_for(n_wl, [&](std::size_t begin, std::size_t end) {
    std::vector<double> rhs(m);
    for (std::size_t j = begin; j < end; ++j) {
      std::fill(rhs.begin(), rhs.end(), 0.0);
      for (const auto& s : samples) {
        const double y = s.spectrum.values[j] / l.cm;
        for (std::size_t i = 0; i < m; ++i) rhs[i] += s.conc.values[i] * y;
      }
      detail::cholesky_solve(g, m, rhs);
      for (std::size_t i = 0; i < m; ++i) eps[i * n_wl + j] = rhs[i];
    }
  });
  return ExtinctionProfileSet(grid, std::move(species), std::move(eps));
}

}  // namespace specmc
