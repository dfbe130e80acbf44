#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "specmc/errors.hpp"
#include "specmc/noise.hpp"
#include "specmc/parallel.hpp"
#include "specmc/random.hpp"
#include "specmc/spectral.hpp"
#include "specmc/types.hpp"

namespace specmc {

enum class Provenance : std::uint8_t {
  experimental = 0,
  sim_clean = 1,
  sim_noisy = 2,
};

inline const char* to_string(Provenance p) {
  switch (p) {
    case Provenance::experimental: return "experimental";
    case Provenance::sim_clean: return "sim_clean";
    case Provenance::sim_noisy: return "sim_noisy";
  }
  return "unknown";
}

// Stratified concentration sampling: a mixed cloud overshooting the
// experimental range, pure single-species axes, and blanks.
struct SamplingPlan {
  std::size_t n_total = 12000;
  std::vector<double> c_max = {7e-5, 2.5e-4};  // mol/L, species order
  double overshoot = 1.3;
  double mixed_fraction = 0.70;
  double pure_fraction_per_species = 0.125;
  double blank_fraction = 0.05;
  std::uint64_t seed = 0;

  std::size_t species_count() const { return c_max.size(); }

  void validate() const {
    const std::size_t m = species_count();
    if (m == 0) throw usage_error("sampling plan needs at least one species");
    if (n_total < m + 1) throw usage_error("n_total must be at least species count + 1");
    if (!(overshoot >= 1.0)) throw usage_error("overshoot factor must be >= 1");
    for (double c : c_max) {
      if (!(c > 0.0)) throw usage_error("per-species c_max must be positive");
    }
    if (mixed_fraction < 0.0 || pure_fraction_per_species < 0.0 || blank_fraction < 0.0) {
      throw usage_error("stratum fractions must be nonnegative");
    }
    const double sum = mixed_fraction +
                       pure_fraction_per_species * static_cast<double>(m) +
                       blank_fraction;
    if (std::abs(sum - 1.0) > 1e-9) {
      throw usage_error("stratum fractions must sum to 1 (got " + std::to_string(sum) + ")");
    }
  }
};

struct Dataset {
  GridPtr grid;
  std::vector<std::string> species;
  std::vector<LabeledSample> samples;
  Provenance provenance = Provenance::sim_clean;

  std::size_t size() const { return samples.size(); }
  std::size_t species_count() const { return species.size(); }
};

// Largest-remainder apportionment of n into the plan's strata, ordered
// mixed, pure per species, blank.
inline std::vector<std::size_t> stratum_counts(const SamplingPlan& plan) {
  plan.validate();
  const std::size_t m = plan.species_count();
  std::vector<double> fractions;
  fractions.push_back(plan.mixed_fraction);
  for (std::size_t i = 0; i < m; ++i) fractions.push_back(plan.pure_fraction_per_species);
  fractions.push_back(plan.blank_fraction);

  const double n = static_cast<double>(plan.n_total);
  std::vector<std::size_t> counts(fractions.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < fractions.size(); ++k) {
    const double exact = fractions[k] * n;
    counts[k] = static_cast<std::size_t>(std::floor(exact));
    assigned += counts[k];
    remainders.emplace_back(exact - std::floor(exact), k);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < plan.n_total; ++k) {
    counts[remainders[k % remainders.size()].second] += 1;
    ++assigned;
  }
  return counts;
}

inline std::vector<ConcentrationVector> sample_concentrations(
    const SamplingPlan& plan, RandomSource& rng) {
  const auto counts = stratum_counts(plan);
  const std::size_t m = plan.species_count();
  std::vector<ConcentrationVector> out;
  out.reserve(plan.n_total);

  for (std::size_t k = 0; k < counts[0]; ++k) {  // mixed
    std::vector<double> c(m);
    for (std::size_t i = 0; i < m; ++i) {
      c[i] = rng.uniform(0.0, plan.overshoot * plan.c_max[i]);
    }
    out.emplace_back(std::move(c));
  }
  for (std::size_t i = 0; i < m; ++i) {  // pure axes
    for (std::size_t k = 0; k < counts[1 + i]; ++k) {
      std::vector<double> c(m, 0.0);
      c[i] = rng.uniform(0.0, plan.overshoot * plan.c_max[i]);
      out.emplace_back(std::move(c));
    }
  }
  for (std::size_t k = 0; k < counts[1 + m]; ++k) {  // blanks
    out.emplace_back(std::vector<double>(m, 0.0));
  }
  shuffle(out, rng);
  return out;
}

// Renders each sampled concentration through the Beer-Lambert law; when
// noise params are given, each spectrum gets an independent per-sample
// stream so the result does not depend on worker count.
inline Dataset generate_simulated_dataset(const ExtinctionProfileSet& eps,
                                          const SamplingPlan& plan,
                                          PathLength l,
                                          const std::optional<NoiseParams>& noise,
                                          RandomSource& rng) {
  if (plan.species_count() != eps.species_count()) {
    throw usage_error("sampling plan species count does not match profiles");
  }
  if (noise) noise->validate();
  auto concs = sample_concentrations(plan, rng);
  const std::uint64_t noise_base = rng.next_u64();

  Dataset ds;
  ds.grid = eps.grid;
  ds.species = eps.species;
  ds.provenance = noise ? Provenance::sim_noisy : Provenance::sim_clean;
  ds.samples.resize(concs.size());
  parallel_for(concs.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t k = begin; k < end; ++k) {
      auto spectrum = absorbance_mix(eps, concs[k], l);
      if (noise) {
        RandomSource sample_rng(derive_seed(noise_base, k));
        spectrum = apply_sensor_noise(spectrum, *noise, sample_rng);
      }
      ds.samples[k] = LabeledSample{std::move(concs[k]), std::move(spectrum)};
    }
  });
  return ds;
}

// Seeded uniform shuffle; first floor(fraction * N) samples go to train.
inline std::pair<Dataset, Dataset> split(const Dataset& ds, double train_fraction,
                                         std::uint64_t seed) {
  if (ds.samples.empty()) throw usage_error("cannot split an empty dataset");
  if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) {
    throw usage_error("train fraction must lie in [0, 1]");
  }
  std::vector<std::size_t> order(ds.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  RandomSource rng(seed);
  shuffle(order, rng);

  const auto n_train = static_cast<std::size_t>(
      std::floor(train_fraction * static_cast<double>(ds.samples.size())));
  Dataset train{ds.grid, ds.species, {}, ds.provenance};
  Dataset val{ds.grid, ds.species, {}, ds.provenance};
  train.samples.reserve(n_train);
  val.samples.reserve(ds.samples.size() - n_train);
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_train ? train : val).samples.push_back(ds.samples[order[i]]);
  }
  return {std::move(train), std::move(val)};
}

// ---------------------------------------------------------------------------
// SPCD binary container. Layout, all little-endian:
//   magic "SPCD" | u16 version=1 | u8 provenance | u32 L | u32 M | u32 N
//   L x f64 wavelengths
//   M x (u32 byte length, UTF-8 species name)
//   N x (M x f64 concentrations, L x f64 absorbances)
// ---------------------------------------------------------------------------

namespace detail {

inline void put_bytes(std::string& buf, const void* p, std::size_t n) {
  buf.append(static_cast<const char*>(p), n);
}

inline void put_u16(std::string& buf, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>(v >> 8)};
  put_bytes(buf, b, 2);
}

inline void put_u32(std::string& buf, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  put_bytes(buf, b, 4);
}

inline void put_f64(std::string& buf, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  put_bytes(buf, b, 8);
}

class ByteReader {
 public:
  ByteReader(const std::string& data, const std::string& what)
      : data_(data), what_(what) {}

  void need(std::size_t n) {
    if (pos_ + n > data_.size()) {
      throw truncation_error(what_ + " is truncated (wanted " + std::to_string(n) +
                             " bytes at offset " + std::to_string(pos_) + ")");
    }
  }
  std::uint16_t u16() {
    need(2);
    auto b = bytes(2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  }
  std::uint32_t u32() {
    need(4);
    auto b = bytes(4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) |
           (static_cast<std::uint32_t>(b[3]) << 24);
  }
  std::uint8_t u8() {
    need(1);
    return bytes(1)[0];
  }
  double f64() {
    need(8);
    auto b = bytes(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  const unsigned char* bytes(std::size_t n) {
    const auto* p = reinterpret_cast<const unsigned char*>(data_.data() + pos_);
    pos_ += n;
    return p;
  }
  const std::string& data_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_file_bytes(const std::filesystem::path& path,
                                   const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error(std::string("cannot open ") + what + " " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  if (in.bad()) throw io_error(std::string("read failed for ") + path.string());
  return data;
}

inline void write_file_bytes(const std::filesystem::path& path,
                             const std::string& data, const char* what) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error(std::string("cannot open ") + what + " " + path.string() +
                           " for writing");
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw io_error(std::string("write failed for ") + path.string());
}

}  // namespace detail

inline constexpr char kDatasetMagic[4] = {'S', 'P', 'C', 'D'};
inline constexpr std::uint16_t kDatasetVersion = 1;

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  if (!ds.grid) throw usage_error("dataset has no grid");
  const std::size_t l = ds.grid->size();
  const std::size_t m = ds.species.size();
  std::string buf;
  buf.reserve(32 + 8 * l + ds.samples.size() * 8 * (m + l));
  detail::put_bytes(buf, kDatasetMagic, 4);
  detail::put_u16(buf, kDatasetVersion);
  buf.push_back(static_cast<char>(ds.provenance));
  detail::put_u32(buf, static_cast<std::uint32_t>(l));
  detail::put_u32(buf, static_cast<std::uint32_t>(m));
  detail::put_u32(buf, static_cast<std::uint32_t>(ds.samples.size()));
  for (std::size_t j = 0; j < l; ++j) detail::put_f64(buf, (*ds.grid)[j]);
  for (const auto& name : ds.species) {
    detail::put_u32(buf, static_cast<std::uint32_t>(name.size()));
    detail::put_bytes(buf, name.data(), name.size());
  }
  for (const auto& s : ds.samples) {
    if (s.conc.size() != m || s.spectrum.size() != l) {
      throw usage_error("dataset sample shape mismatch while saving");
    }
    for (double c : s.conc.values) detail::put_f64(buf, c);
    for (double a : s.spectrum.values) detail::put_f64(buf, a);
  }
  detail::write_file_bytes(path, buf, "dataset");
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  const std::string data = detail::read_file_bytes(path, "dataset");
  detail::ByteReader r(data, "dataset file " + path.string());
  if (r.str(4) != std::string(kDatasetMagic, 4)) {
    throw format_error("not a SPCD dataset: bad magic in " + path.string());
  }
  const auto version = r.u16();
  if (version != kDatasetVersion) {
    throw format_error("unsupported SPCD version " + std::to_string(version));
  }
  const auto prov = r.u8();
  if (prov > 2) throw format_error("unknown provenance tag " + std::to_string(prov));
  const std::size_t l = r.u32();
  const std::size_t m = r.u32();
  const std::size_t n = r.u32();
  if (l < 2 || m == 0) throw format_error("SPCD header has degenerate shapes");

  std::vector<double> wl(l);
  for (std::size_t j = 0; j < l; ++j) wl[j] = r.f64();
  Dataset ds;
  ds.grid = make_grid(std::move(wl));
  ds.provenance = static_cast<Provenance>(prov);
  ds.species.reserve(m);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t len = r.u32();
    ds.species.push_back(r.str(len));
  }
  ds.samples.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<double> conc(m);
    for (std::size_t i = 0; i < m; ++i) conc[i] = r.f64();
    std::vector<double> a(l);
    for (std::size_t j = 0; j < l; ++j) a[j] = r.f64();
    ds.samples.push_back(LabeledSample{ConcentrationVector(std::move(conc)),
                                       AbsorbanceSpectrum(ds.grid, std::move(a))});
  }
  if (!r.at_end()) {
    throw format_error("trailing bytes after SPCD payload in " + path.string());
  }
  return ds;
}

// Inspection export: conc_<species>,...,A_0,...,A_{L-1}.
inline void export_dataset_csv(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot open " + path.string() + " for writing");
  for (std::size_t i = 0; i < ds.species.size(); ++i) {
    out << (i ? "," : "") << "conc_" << ds.species[i];
  }
  for (std::size_t j = 0; j < ds.grid->size(); ++j) out << ",A_" << j;
  out << "\n";
  for (const auto& s : ds.samples) {
    for (std::size_t i = 0; i < s.conc.size(); ++i) {
      out << (i ? "," : "") << detail::format_sig(s.conc.values[i]);
    }
    for (double a : s.spectrum.values) out << ',' << detail::format_sig(a);
    out << "\n";
  }
  if (!out) throw io_error("write failed for " + path.string());
}

}  // namespace specmc
