#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "specmc/noise.hpp"
#include "specmc/spectral.hpp"

namespace {

using namespace specmc;

TEST(NormalizeIntensity, EndpointsAndMidpoint) {
  NoiseParams p;
  EXPECT_DOUBLE_EQ(normalize_intensity(3000.0, p), 0.0);
  EXPECT_DOUBLE_EQ(normalize_intensity(45000.0, p), 1.0);
  EXPECT_DOUBLE_EQ(normalize_intensity(24000.0, p), 0.5);
}

TEST(NormalizeIntensity, ClampsOutsideRange) {
  NoiseParams p;
  EXPECT_DOUBLE_EQ(normalize_intensity(100.0, p), 0.0);
  EXPECT_DOUBLE_EQ(normalize_intensity(90000.0, p), 1.0);
}

TEST(NoiseFraction, DefaultEndpointsAndMidpoint) {
  NoiseParams p;
  EXPECT_DOUBLE_EQ(noise_fraction(0.0, p), 0.02);
  EXPECT_DOUBLE_EQ(noise_fraction(1.0, p), 0.005);
  EXPECT_DOUBLE_EQ(noise_fraction(0.5, p), 0.0125);
}

TEST(NoiseFraction, StrictlyDecreasing) {
  NoiseParams p;
  double prev = noise_fraction(0.0, p);
  for (int k = 1; k <= 20; ++k) {
    const double cur = noise_fraction(k / 20.0, p);
    EXPECT_LT(cur, prev);
    prev = cur;
  }
}

TEST(NoiseFraction, AsPrintedVariantDiffers) {
  NoiseParams p;
  p.law = NoiseLaw::as_printed;
  EXPECT_DOUBLE_EQ(noise_fraction(0.0, p), std::sqrt(0.02));
  EXPECT_DOUBLE_EQ(noise_fraction(1.0, p), std::sqrt(0.035));
}

TEST(ApplySensorNoise, ZeroSigmaIsIdentity) {
  NoiseParams p;
  p.e_max = 0.0;
  p.e_min = 0.0;
  auto grid = make_uniform_grid(400.0, 850.0, 64);
  RandomSource vals(3);
  std::vector<double> a(grid->size());
  for (auto& v : a) v = vals.uniform(0.0, 1.5);
  AbsorbanceSpectrum clean(grid, a);
  RandomSource rng(42);
  auto noisy = apply_sensor_noise(clean, p, rng);
  for (std::size_t j = 0; j < clean.size(); ++j) {
    EXPECT_DOUBLE_EQ(noisy.values[j], clean.values[j]);
  }
}

TEST(ApplySensorNoise, SameSeedSameSpectrum) {
  NoiseParams p;
  auto grid = make_uniform_grid(400.0, 850.0, 128);
  AbsorbanceSpectrum clean(grid, std::vector<double>(grid->size(), 0.4));
  RandomSource rng1(99), rng2(99);
  auto n1 = apply_sensor_noise(clean, p, rng1);
  auto n2 = apply_sensor_noise(clean, p, rng2);
  EXPECT_EQ(n1.values, n2.values);
}

TEST(ApplySensorNoise, MatchesPerWavelengthFormula) {
  // output[j] must be a function of (input[j], z[j]) alone, with the variate
  // stream consumed in grid order, one normal per wavelength.
  NoiseParams p;
  auto grid = make_uniform_grid(400.0, 850.0, 64);
  RandomSource vals(17);
  std::vector<double> a(grid->size());
  for (auto& v : a) v = vals.uniform(0.0, 1.5);
  AbsorbanceSpectrum clean(grid, a);

  RandomSource stream(1234);
  std::vector<double> z(grid->size());
  for (auto& v : z) v = stream.normal();

  RandomSource rng(1234);
  auto noisy = apply_sensor_noise(clean, p, rng);
  for (std::size_t j = 0; j < clean.size(); ++j) {
    EXPECT_DOUBLE_EQ(noisy.values[j], noisy_absorbance(a[j], z[j], p));
  }
}

TEST(ApplySensorNoise, CommutesWithPermutation) {
  NoiseParams p;
  auto grid = make_uniform_grid(400.0, 850.0, 64);
  RandomSource vals(29);
  std::vector<double> a(grid->size());
  for (auto& v : a) v = vals.uniform(0.0, 1.5);

  RandomSource stream(555);
  std::vector<double> z(grid->size());
  for (auto& v : z) v = stream.normal();

  // reversal as the permutation; matching variate stream reversed alongside
  std::vector<double> a_rev(a.rbegin(), a.rend());
  std::vector<double> z_rev(z.rbegin(), z.rend());
  for (std::size_t j = 0; j < a.size(); ++j) {
    EXPECT_DOUBLE_EQ(noisy_absorbance(a[j], z[j], p),
                     noisy_absorbance(a_rev[a.size() - 1 - j], z_rev[a.size() - 1 - j], p));
  }
}

TEST(ApplySensorNoise, PathologicalDrawIsClamped) {
  NoiseParams p;
  const double a = 0.0;
  const double out = noisy_absorbance(a, -1e6, p);  // 1 + sigma*z far below 0
  EXPECT_TRUE(std::isfinite(out));
  EXPECT_DOUBLE_EQ(out, std::log10(1.0 / 1e-6));
}

// Empirical mean and std of the relative intensity perturbation at fixed
// normalized intensities, >= 1e5 draws each.
TEST(NoiseStatistics, MeanAndStdMatchTheLaw) {
  NoiseParams p;
  const std::size_t draws = 100000;
  for (double i_norm : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    // invert the normalization to find the absorbance giving this intensity
    const double intensity = p.i_min + i_norm * (p.i_max - p.i_min);
    const double a = std::log10(p.i0 / intensity);
    RandomSource rng(77);
    double sum = 0.0, sum_sq = 0.0;
    for (std::size_t k = 0; k < draws; ++k) {
      const double noisy_a = noisy_absorbance(a, rng.normal(), p);
      const double noisy_i = p.i0 * std::pow(10.0, -noisy_a);
      const double rel = noisy_i / intensity - 1.0;
      sum += rel;
      sum_sq += rel * rel;
    }
    const double mean = sum / draws;
    const double var = sum_sq / draws - mean * mean;
    const double sigma = noise_fraction(i_norm, p);
    EXPECT_NEAR(std::sqrt(var), sigma, 0.05 * sigma) << "i_norm=" << i_norm;
    EXPECT_LE(std::abs(mean), 3.0 * sigma / std::sqrt(static_cast<double>(draws)))
        << "i_norm=" << i_norm;
  }
}

TEST(NoiseParams, ValidationRejectsBadRanges) {
  NoiseParams p;
  p.e_min = 0.03;  // above e_max
  EXPECT_THROW(p.validate(), usage_error);
  p = NoiseParams{};
  p.i_min = 50000.0;
  EXPECT_THROW(p.validate(), usage_error);
  p = NoiseParams{};
  p.e_max = p.e_min = 0.01;  // flat law is allowed
  EXPECT_NO_THROW(p.validate());
}

TEST(NoiseLawParsing, RoundTrips) {
  EXPECT_EQ(noise_law_from_string("amplitude"), NoiseLaw::amplitude);
  EXPECT_EQ(noise_law_from_string("as-printed"), NoiseLaw::as_printed);
  EXPECT_THROW(noise_law_from_string("bogus"), usage_error);
}

}  // namespace
