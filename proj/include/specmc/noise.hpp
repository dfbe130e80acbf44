#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "specmc/errors.hpp"
#include "specmc/random.hpp"
#include "specmc/types.hpp"

namespace specmc {

// Two readings of the published noise law. "amplitude" treats the linear
// law as the relative standard deviation (matches the stated 2% / 0.5%
// endpoints); "as_printed" takes the formula literally as a variance.
enum class NoiseLaw { amplitude, as_printed };

inline NoiseLaw noise_law_from_string(const std::string& s) {
  if (s == "amplitude") return NoiseLaw::amplitude;
  if (s == "as-printed" || s == "as_printed") return NoiseLaw::as_printed;
  throw usage_error("unknown noise law: " + s);
}

inline const char* to_string(NoiseLaw law) {
  return law == NoiseLaw::amplitude ? "amplitude" : "as-printed";
}

// Intensity-dependent sensor noise: relative std e_max at the detector floor
// i_min, falling linearly to e_min at full scale i_max.
struct NoiseParams {
  double e_max = 0.02;
  double e_min = 0.005;
  double i_min = 3000.0;
  double i_max = 45000.0;
  double i0 = kDefaultIncidentIntensity;
  NoiseLaw law = NoiseLaw::amplitude;

  // e_min == e_max (including both zero) gives a flat noise floor and is
  // allowed; it is how noise is switched off or held constant.
  void validate() const {
    if (!(0.0 <= e_min && e_min <= e_max && e_max < 1.0)) {
      throw usage_error("noise fractions must satisfy 0 <= e_min <= e_max < 1");
    }
    if (!(0.0 < i_min && i_min < i_max)) {
      throw usage_error("intensity bounds must satisfy 0 < i_min < i_max");
    }
    if (!(i0 > 0.0)) throw usage_error("incident intensity must be positive");
  }
};

// (I - I_min) / (I_max - I_min), clamped to [0, 1].
inline double normalize_intensity(double i_value, const NoiseParams& p) {
  const double norm = (i_value - p.i_min) / (p.i_max - p.i_min);
  return std::clamp(norm, 0.0, 1.0);
}

// Relative std of the intensity perturbation at a normalized intensity.
inline double noise_fraction(double i_norm, const NoiseParams& p) {
  i_norm = std::clamp(i_norm, 0.0, 1.0);
  if (p.law == NoiseLaw::as_printed) {
    return std::sqrt(i_norm * (p.e_max - p.e_min) + p.e_max);
  }
  return p.e_max - i_norm * (p.e_max - p.e_min);
}

// Per-wavelength map: clean absorbance plus one standard-normal draw z gives
// the noisy absorbance. The multiplicative factor (1 + sigma*z) is clamped
// at 1e-6 so pathological draws cannot push the log out of domain.
inline double noisy_absorbance(double a, double z, const NoiseParams& p) {
  const double intensity = p.i0 * std::pow(10.0, -a);
  const double sigma = noise_fraction(normalize_intensity(intensity, p), p);
  const double factor = std::max(1.0 + sigma * z, 1e-6);
  if (factor == 1.0) return a;  // zero perturbation is exactly the identity
  return std::log10(p.i0 / (intensity * factor));
}

// Applies sensor noise in the intensity domain, one independent draw per
// wavelength, in ascending grid order.
inline AbsorbanceSpectrum apply_sensor_noise(const AbsorbanceSpectrum& clean,
                                             const NoiseParams& p,
                                             RandomSource& rng) {
  p.validate();
  std::vector<double> out(clean.size());
  for (std::size_t j = 0; j < clean.size(); ++j) {
    if (!std::isfinite(clean.values[j])) {
      throw usage_error("noise input absorbance is non-finite at index " +
                        std::to_string(j));
    }
    out[j] = noisy_absorbance(clean.values[j], rng.normal(), p);
  }
  return AbsorbanceSpectrum(clean.grid, std::move(out));
}

}  // namespace specmc
