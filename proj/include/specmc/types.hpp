#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "specmc/errors.hpp"

namespace specmc {

// Spectrometer reference values used as defaults throughout: a blank sample
// reads full scale on the detector.
inline constexpr double kDefaultIncidentIntensity = 45000.0;

// Strictly increasing wavelength axis in nanometres, shared by all spectra
// and profiles that live on it.
class WavelengthGrid {
 public:
  explicit WavelengthGrid(std::vector<double> wavelengths_nm)
      : wl_(std::move(wavelengths_nm)) {
    if (wl_.size() < 2) throw usage_error("wavelength grid needs at least 2 points");
    for (std::size_t i = 0; i < wl_.size(); ++i) {
      if (!std::isfinite(wl_[i])) throw usage_error("wavelength grid has non-finite value");
      if (i > 0 && wl_[i] <= wl_[i - 1]) {
        throw usage_error("wavelength grid must be strictly increasing");
      }
    }
  }

  static WavelengthGrid uniform(double min_nm, double max_nm, std::size_t count) {
    if (count < 2) throw usage_error("wavelength grid needs at least 2 points");
    if (!(min_nm < max_nm)) throw usage_error("wavelength range must be increasing");
    std::vector<double> wl(count);
    const double step = (max_nm - min_nm) / static_cast<double>(count - 1);
    for (std::size_t i = 0; i < count; ++i) {
      wl[i] = min_nm + step * static_cast<double>(i);
    }
    wl.back() = max_nm;
    return WavelengthGrid(std::move(wl));
  }

  std::size_t size() const { return wl_.size(); }
  double operator[](std::size_t i) const { return wl_[i]; }
  double min_nm() const { return wl_.front(); }
  double max_nm() const { return wl_.back(); }
  std::span<const double> values() const { return wl_; }

  bool same_axis(const WavelengthGrid& other) const { return wl_ == other.wl_; }

 private:
  std::vector<double> wl_;
};

using GridPtr = std::shared_ptr<const WavelengthGrid>;

inline GridPtr make_grid(std::vector<double> wavelengths_nm) {
  return std::make_shared<const WavelengthGrid>(std::move(wavelengths_nm));
}

inline GridPtr make_uniform_grid(double min_nm, double max_nm, std::size_t count) {
  return std::make_shared<const WavelengthGrid>(
      WavelengthGrid::uniform(min_nm, max_nm, count));
}

// Full-resolution default axis: 3648 points across 400-850 nm.
inline GridPtr default_grid() { return make_uniform_grid(400.0, 850.0, 3648); }

inline bool same_grid(const GridPtr& a, const GridPtr& b) {
  if (a == b) return true;
  if (!a || !b) return false;
  return a->same_axis(*b);
}

// Dimensionless absorbance per grid point.
struct AbsorbanceSpectrum {
  GridPtr grid;
  std::vector<double> values;

  AbsorbanceSpectrum() = default;
  AbsorbanceSpectrum(GridPtr g, std::vector<double> v)
      : grid(std::move(g)), values(std::move(v)) {
    if (!grid) throw usage_error("absorbance spectrum needs a grid");
    if (values.size() != grid->size()) {
      throw usage_error("absorbance length does not match grid length");
    }
  }
  std::size_t size() const { return values.size(); }
};

// Detector counts per grid point (arbitrary units).
struct IntensitySpectrum {
  GridPtr grid;
  std::vector<double> values;

  IntensitySpectrum() = default;
  IntensitySpectrum(GridPtr g, std::vector<double> v)
      : grid(std::move(g)), values(std::move(v)) {
    if (!grid) throw usage_error("intensity spectrum needs a grid");
    if (values.size() != grid->size()) {
      throw usage_error("intensity length does not match grid length");
    }
  }
  std::size_t size() const { return values.size(); }
};

// Per-species concentrations in mol/L, ordered to match a profile set.
struct ConcentrationVector {
  std::vector<double> values;

  ConcentrationVector() = default;
  explicit ConcentrationVector(std::vector<double> v) : values(std::move(v)) {}
  std::size_t size() const { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }
};

// Optical path length through the flow cell, in centimetres.
struct PathLength {
  double cm = 0.25;

  PathLength() = default;
  explicit PathLength(double length_cm) : cm(length_cm) {
    if (!(cm > 0.0) || !std::isfinite(cm)) {
      throw usage_error("path length must be positive");
    }
  }
};

// Molar extinction coefficients eps[species][wavelength] in L mol^-1 cm^-1.
// Fitted profiles may contain small negatives; synthesized ones are >= 0.
struct ExtinctionProfileSet {
  GridPtr grid;
  std::vector<std::string> species;
  std::vector<double> eps;  // row-major, species_count() x grid->size()

  ExtinctionProfileSet() = default;
  ExtinctionProfileSet(GridPtr g, std::vector<std::string> names,
                       std::vector<double> coefficients)
      : grid(std::move(g)), species(std::move(names)), eps(std::move(coefficients)) {
    if (!grid) throw usage_error("extinction profile set needs a grid");
    if (species.empty()) throw usage_error("extinction profile set needs at least one species");
    if (eps.size() != species.size() * grid->size()) {
      throw usage_error("extinction matrix shape does not match species x grid");
    }
    for (double e : eps) {
      if (!std::isfinite(e)) throw usage_error("extinction coefficient is non-finite");
    }
  }

  std::size_t species_count() const { return species.size(); }
  std::size_t grid_size() const { return grid ? grid->size() : 0; }
  double at(std::size_t species_i, std::size_t wavelength_j) const {
    return eps[species_i * grid_size() + wavelength_j];
  }
  std::span<const double> row(std::size_t species_i) const {
    return std::span<const double>(eps).subspan(species_i * grid_size(), grid_size());
  }
};

// Ground-truth concentrations paired with the spectrum they produced.
struct LabeledSample {
  ConcentrationVector conc;
  AbsorbanceSpectrum spectrum;
};

}  // namespace specmc
