#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "specmc/errors.hpp"
#include "specmc/types.hpp"

namespace specmc {

// Beer-Lambert mixing: A(lambda) = l * sum_i eps_i(lambda) * C_i.
inline AbsorbanceSpectrum absorbance_mix(const ExtinctionProfileSet& eps,
                                         const ConcentrationVector& conc,
                                         PathLength l = PathLength{}) {
  if (conc.size() != eps.species_count()) {
    throw usage_error("concentration vector length does not match species count");
  }
  const std::size_t n = eps.grid_size();
  std::vector<double> a(n, 0.0);
  for (std::size_t i = 0; i < eps.species_count(); ++i) {
    const double ci = conc.values[i];
    if (ci == 0.0) continue;
    const double* row = eps.eps.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) a[j] += row[j] * ci;
  }
  for (std::size_t j = 0; j < n; ++j) a[j] *= l.cm;
  return AbsorbanceSpectrum(eps.grid, std::move(a));
}

// I = I0 / 10^A.
inline IntensitySpectrum absorbance_to_intensity(
    const AbsorbanceSpectrum& a, double i0 = kDefaultIncidentIntensity) {
  if (!(i0 > 0.0)) throw usage_error("incident intensity must be positive");
  std::vector<double> out(a.size());
  for (std::size_t j = 0; j < a.size(); ++j) {
    out[j] = i0 * std::pow(10.0, -a.values[j]);
  }
  return IntensitySpectrum(a.grid, std::move(out));
}

// A = log10(I0 / I); intensities must stay positive.
inline AbsorbanceSpectrum intensity_to_absorbance(
    const IntensitySpectrum& i, double i0 = kDefaultIncidentIntensity) {
  if (!(i0 > 0.0)) throw usage_error("incident intensity must be positive");
  std::vector<double> out(i.size());
  for (std::size_t j = 0; j < i.size(); ++j) {
    if (!(i.values[j] > 0.0)) {
      throw domain_error("nonpositive intensity at grid index " + std::to_string(j));
    }
    out[j] = std::log10(i0 / i.values[j]);
  }
  return AbsorbanceSpectrum(i.grid, std::move(out));
}

// Gaussian absorption band, a desk-scale stand-in for a measured profile.
inline ExtinctionProfileSet synthetic_extinction_profile(
    GridPtr grid, std::string species_name, double peak_nm, double peak_eps,
    double width_nm) {
  if (!grid) throw usage_error("synthetic profile needs a grid");
  if (!(peak_eps > 0.0)) throw usage_error("peak extinction must be positive");
  if (!(width_nm > 0.0)) throw usage_error("band width must be positive");
  if (peak_nm < grid->min_nm() || peak_nm > grid->max_nm()) {
    throw usage_error("band peak lies outside the wavelength grid");
  }
  std::vector<double> eps(grid->size());
  for (std::size_t j = 0; j < grid->size(); ++j) {
    const double d = ((*grid)[j] - peak_nm) / width_nm;
    eps[j] = peak_eps * std::exp(-0.5 * d * d);
  }
  return ExtinctionProfileSet(std::move(grid), {std::move(species_name)},
                              std::move(eps));
}

// Concatenates single- or multi-species profile sets sharing one grid.
inline ExtinctionProfileSet join_profiles(
    const std::vector<ExtinctionProfileSet>& sets) {
  if (sets.empty()) throw usage_error("no profiles to join");
  std::vector<std::string> names;
  std::vector<double> eps;
  for (const auto& s : sets) {
    if (!same_grid(s.grid, sets.front().grid)) {
      throw usage_error("profiles to join live on different grids");
    }
    names.insert(names.end(), s.species.begin(), s.species.end());
    eps.insert(eps.end(), s.eps.begin(), s.eps.end());
  }
  return ExtinctionProfileSet(sets.front().grid, std::move(names), std::move(eps));
}

inline constexpr std::size_t kMinDownsampledLength = 16;

// Keeps the first wavelength of every factor-wide window; trailing remainder
// is dropped.
inline GridPtr downsample_grid(const GridPtr& grid, std::size_t factor) {
  if (!grid) throw usage_error("downsample needs a grid");
  if (factor < 1) throw usage_error("downsample factor must be >= 1");
  const std::size_t out_len = grid->size() / factor;
  if (out_len < kMinDownsampledLength) {
    throw usage_error("downsampled grid would be shorter than " +
                      std::to_string(kMinDownsampledLength) + " points");
  }
  if (factor == 1) return grid;
  std::vector<double> wl(out_len);
  for (std::size_t k = 0; k < out_len; ++k) wl[k] = (*grid)[k * factor];
  return make_grid(std::move(wl));
}

// Block mean over each factor-wide window, paired with downsample_grid.
inline std::vector<double> downsample_block_mean(std::span<const double> v,
                                                 std::size_t factor) {
  const std::size_t out_len = v.size() / factor;
  std::vector<double> out(out_len);
  for (std::size_t k = 0; k < out_len; ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < factor; ++j) s += v[k * factor + j];
    out[k] = s / static_cast<double>(factor);
  }
  return out;
}

inline AbsorbanceSpectrum downsample(const AbsorbanceSpectrum& s,
                                     std::size_t factor,
                                     GridPtr target_grid = nullptr) {
  GridPtr g = target_grid ? std::move(target_grid) : downsample_grid(s.grid, factor);
  if (factor == 1) return AbsorbanceSpectrum(std::move(g), s.values);
  return AbsorbanceSpectrum(std::move(g), downsample_block_mean(s.values, factor));
}

namespace detail {
inline std::string format_sig(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}
}  // namespace detail

// CSV layout: header "wavelength_nm,eps_<species>,...", one row per grid
// point, >= 9 significant digits.
inline void write_extinction_csv(const ExtinctionProfileSet& p,
                                 const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot open " + path.string() + " for writing");
  out << "wavelength_nm";
  for (const auto& s : p.species) out << ",eps_" << s;
  out << "\n";
  for (std::size_t j = 0; j < p.grid_size(); ++j) {
    out << detail::format_sig((*p.grid)[j]);
    for (std::size_t i = 0; i < p.species_count(); ++i) {
      out << ',' << detail::format_sig(p.at(i, j));
    }
    out << "\n";
  }
  if (!out) throw io_error("write failed for " + path.string());
}

inline ExtinctionProfileSet read_extinction_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw format_error("empty extinction CSV");
  std::vector<std::string> species;
  {
    std::stringstream hs(line);
    std::string cell;
    bool first = true;
    while (std::getline(hs, cell, ',')) {
      if (first) {
        if (cell != "wavelength_nm") {
          throw format_error("extinction CSV header must start with wavelength_nm");
        }
        first = false;
        continue;
      }
      if (cell.rfind("eps_", 0) != 0 || cell.size() <= 4) {
        throw format_error("bad extinction CSV column name: " + cell);
      }
      species.push_back(cell.substr(4));
    }
    if (first || species.empty()) {
      throw format_error("extinction CSV has no species columns");
    }
  }
  std::vector<double> wl;
  std::vector<std::vector<double>> cols(species.size());
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string cell;
    std::size_t col = 0;
    while (std::getline(ls, cell, ',')) {
      double v = 0.0;
      try {
        v = std::stod(cell);
      } catch (const std::exception&) {
        throw format_error("bad number in extinction CSV line " +
                           std::to_string(line_no));
      }
      if (col == 0) {
        wl.push_back(v);
      } else if (col <= species.size()) {
        cols[col - 1].push_back(v);
      }
      ++col;
    }
    if (col != species.size() + 1) {
      throw format_error("wrong column count in extinction CSV line " +
                         std::to_string(line_no));
    }
  }
  if (wl.size() < 2) throw format_error("extinction CSV has fewer than 2 rows");
  std::vector<double> eps;
  eps.reserve(species.size() * wl.size());
  for (const auto& c : cols) eps.insert(eps.end(), c.begin(), c.end());
  return ExtinctionProfileSet(make_grid(std::move(wl)), std::move(species),
                              std::move(eps));
}

}  // namespace specmc
