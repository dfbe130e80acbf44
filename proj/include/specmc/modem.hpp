#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "specmc/errors.hpp"
#include "specmc/fcnn.hpp"
#include "specmc/noise.hpp"
#include "specmc/random.hpp"
#include "specmc/spectral.hpp"
#include "specmc/training.hpp"
#include "specmc/types.hpp"

namespace specmc {

enum class CskScheme { bcsk, qcsk };

inline CskScheme scheme_from_string(const std::string& s) {
  if (s == "bcsk" || s == "BCSK") return CskScheme::bcsk;
  if (s == "qcsk" || s == "QCSK") return CskScheme::qcsk;
  throw usage_error("unknown modulation scheme: " + s);
}

inline const char* to_string(CskScheme s) {
  return s == CskScheme::bcsk ? "bcsk" : "qcsk";
}

inline int bits_per_symbol(CskScheme s) { return s == CskScheme::bcsk ? 1 : 2; }

// Info-molecule and solvent pump rates for one concentration level, uL/min.
struct LevelFlow {
  double info_ul_min = 0.0;
  double solvent_ul_min = 0.0;
  double total() const { return info_ul_min + solvent_ul_min; }
};

struct TransmitterConfig {
  int species_index = 0;
  double stock_mol_per_l = 0.0;
  double bit_interval_s = 900.0;  // 15 min
  double duty_cycle = 1.0;
  double start_offset_s = 0.0;
  CskScheme scheme = CskScheme::bcsk;
  std::vector<LevelFlow> levels;  // level index -> pump rates

  // Level 0 of either scheme is the idle state (all solvent).
  static std::vector<LevelFlow> bcsk_levels(double flow_ul_min) {
    return {{0.0, flow_ul_min}, {flow_ul_min, 0.0}};
  }
  static std::vector<LevelFlow> qcsk_levels(double max_flow_ul_min) {
    const double step = max_flow_ul_min / 3.0;
    return {{0.0, max_flow_ul_min},
            {step, max_flow_ul_min - step},
            {2.0 * step, max_flow_ul_min - 2.0 * step},
            {max_flow_ul_min, 0.0}};
  }

  double total_flow() const { return levels.empty() ? 0.0 : levels.front().total(); }

  void validate() const {
    if (!(bit_interval_s > 0.0)) throw usage_error("bit interval must be positive");
    if (!(duty_cycle > 0.0 && duty_cycle <= 1.0)) {
      throw usage_error("duty cycle must lie in (0, 1]");
    }
    if (start_offset_s < 0.0) throw usage_error("start offset must be >= 0");
    if (!(stock_mol_per_l >= 0.0)) throw usage_error("stock concentration must be >= 0");
    if (species_index < 0) throw usage_error("species index must be >= 0");
    const std::size_t expect = scheme == CskScheme::bcsk ? 2 : 4;
    if (levels.size() != expect) {
      throw usage_error(std::string(to_string(scheme)) + " needs exactly " +
                        std::to_string(expect) + " flow levels");
    }
    for (const auto& lv : levels) {
      if (lv.info_ul_min < 0.0 || lv.solvent_ul_min < 0.0) {
        throw usage_error("pump flow rates must be >= 0");
      }
      if (std::abs(lv.total() - levels.front().total()) > 1e-9) {
        throw usage_error("per-level total flow must be constant within a transmitter");
      }
    }
  }
};

// Piecewise-constant pump schedule over [0, horizon).
struct FlowSegment {
  double t_begin_s = 0.0;
  double t_end_s = 0.0;
  double info_ul_min = 0.0;
  double solvent_ul_min = 0.0;
};

struct FlowTrace {
  std::vector<FlowSegment> segments;  // contiguous, sorted
  double horizon_s = 0.0;

  LevelFlow flow_at(double t) const {
    // segments are half-open [begin, end); lookups use interior points
    for (auto it = segments.rbegin(); it != segments.rend(); ++it) {
      if (t >= it->t_begin_s) return {it->info_ul_min, it->solvent_ul_min};
    }
    if (!segments.empty()) {
      return {segments.front().info_ul_min, segments.front().solvent_ul_min};
    }
    return {0.0, 0.0};
  }
};

namespace detail {

inline void append_segment(FlowTrace& trace, double begin, double end,
                           const LevelFlow& flow) {
  if (!(end > begin)) return;
  if (!trace.segments.empty()) {
    auto& last = trace.segments.back();
    if (last.t_end_s == begin && last.info_ul_min == flow.info_ul_min &&
        last.solvent_ul_min == flow.solvent_ul_min) {
      last.t_end_s = end;  // coalesce equal adjacent segments
      return;
    }
  }
  trace.segments.push_back({begin, end, flow.info_ul_min, flow.solvent_ul_min});
}

inline void check_bit_string(std::string_view bits) {
  for (char c : bits) {
    if (c != '0' && c != '1') {
      throw usage_error("bit strings may contain only '0' and '1'");
    }
  }
}

}  // namespace detail

// Symbol levels carried by a bit string: one bit per BCSK symbol, consecutive
// pairs (high bit first) per QCSK symbol.
inline std::vector<int> levels_for_bits(CskScheme scheme, std::string_view bits) {
  detail::check_bit_string(bits);
  std::vector<int> levels;
  if (scheme == CskScheme::bcsk) {
    levels.reserve(bits.size());
    for (char c : bits) levels.push_back(c - '0');
  } else {
    if (bits.size() % 2 != 0) {
      throw usage_error("QCSK needs an even number of bits");
    }
    levels.reserve(bits.size() / 2);
    for (std::size_t k = 0; k < bits.size(); k += 2) {
      levels.push_back(2 * (bits[k] - '0') + (bits[k + 1] - '0'));
    }
  }
  return levels;
}

// Two simultaneous bit sequences as one dibit stream: symbol k carries
// (seq_a[k], seq_b[k]) with seq_a as the high bit.
inline std::string interleave_dibits(std::string_view seq_a, std::string_view seq_b) {
  if (seq_a.size() != seq_b.size()) {
    throw usage_error("dibit streams must have equal length");
  }
  detail::check_bit_string(seq_a);
  detail::check_bit_string(seq_b);
  std::string out;
  out.reserve(2 * seq_a.size());
  for (std::size_t k = 0; k < seq_a.size(); ++k) {
    out.push_back(seq_a[k]);
    out.push_back(seq_b[k]);
  }
  return out;
}

// Pump schedule for a bit string: each symbol holds its level for the active
// part of the interval, then idles; solvent keeps the total flow constant.
inline FlowTrace encode_bits(const TransmitterConfig& tx, std::string_view bits) {
  tx.validate();
  const auto levels = levels_for_bits(tx.scheme, bits);
  const LevelFlow idle{0.0, tx.total_flow()};
  FlowTrace trace;
  trace.horizon_s = tx.start_offset_s +
                    static_cast<double>(levels.size()) * tx.bit_interval_s;
  detail::append_segment(trace, 0.0, tx.start_offset_s, idle);
  for (std::size_t k = 0; k < levels.size(); ++k) {
    const double begin = tx.start_offset_s + static_cast<double>(k) * tx.bit_interval_s;
    const double active_end = begin + tx.duty_cycle * tx.bit_interval_s;
    const double end = begin + tx.bit_interval_s;
    detail::append_segment(trace, begin, active_end, tx.levels[levels[k]]);
    detail::append_segment(trace, active_end, end, idle);
  }
  return trace;
}

// Pads a trace with the idle state up to a later horizon.
inline FlowTrace extend_trace(FlowTrace trace, const TransmitterConfig& tx,
                              double horizon_s) {
  if (horizon_s < trace.horizon_s - 1e-9) {
    throw usage_error("cannot shrink a flow trace");
  }
  detail::append_segment(trace, trace.horizon_s, horizon_s, {0.0, tx.total_flow()});
  trace.horizon_s = std::max(trace.horizon_s, horizon_s);
  return trace;
}

// Per-species concentration at the junction outlet, piecewise constant.
struct MixedConcentration {
  std::vector<double> breakpoints;          // ascending, last = horizon
  std::vector<std::vector<double>> conc;    // per segment, per species (mol/L)
  std::size_t species_count = 0;
  double horizon_s = 0.0;

  std::size_t segment_at(double t) const {
    // interior lookup; segments are [breakpoints[i], breakpoints[i+1])
    std::size_t lo = 0;
    for (std::size_t i = 0; i + 1 < breakpoints.size(); ++i) {
      if (t >= breakpoints[i]) lo = i;
    }
    return lo;
  }
};

// Dilution at the junction: each species reaches the receiver at
// stock * q_info / q_total, with q_total summed over every pump.
inline MixedConcentration mix_at_junction(std::span<const FlowTrace> traces,
                                          std::span<const TransmitterConfig> txs,
                                          std::size_t species_count) {
  if (traces.size() != txs.size() || traces.empty()) {
    throw usage_error("need one flow trace per transmitter");
  }
  const double horizon = traces.front().horizon_s;
  for (const auto& t : traces) {
    if (std::abs(t.horizon_s - horizon) > 1e-9) {
      throw usage_error("flow traces do not share a time horizon");
    }
  }
  for (const auto& tx : txs) {
    if (static_cast<std::size_t>(tx.species_index) >= species_count) {
      throw usage_error("transmitter species index out of range");
    }
  }
  std::vector<double> cuts;
  for (const auto& t : traces) {
    for (const auto& s : t.segments) cuts.push_back(s.t_begin_s);
  }
  cuts.push_back(horizon);
  std::sort(cuts.begin(), cuts.end());
  std::vector<double> breaks;
  for (double c : cuts) {
    if (breaks.empty() || c - breaks.back() > 1e-9) breaks.push_back(c);
  }
  if (breaks.size() < 2) {
    // zero-length horizon: an empty transmission
    MixedConcentration mixed;
    mixed.species_count = species_count;
    mixed.horizon_s = horizon;
    mixed.breakpoints = {0.0, horizon};
    mixed.conc.push_back(std::vector<double>(species_count, 0.0));
    return mixed;
  }

  MixedConcentration mixed;
  mixed.species_count = species_count;
  mixed.horizon_s = horizon;
  mixed.breakpoints = breaks;
  for (std::size_t i = 0; i + 1 < breaks.size(); ++i) {
    const double mid = 0.5 * (breaks[i] + breaks[i + 1]);
    double q_total = 0.0;
    std::vector<double> q_info(txs.size());
    for (std::size_t k = 0; k < txs.size(); ++k) {
      const auto flow = traces[k].flow_at(mid);
      q_info[k] = flow.info_ul_min;
      q_total += flow.total();
    }
    if (!(q_total > 0.0)) {
      throw domain_error("total junction flow is zero at t = " +
                         std::to_string(mid) + " s");
    }
    std::vector<double> c(species_count, 0.0);
    for (std::size_t k = 0; k < txs.size(); ++k) {
      c[txs[k].species_index] += txs[k].stock_mol_per_l * q_info[k] / q_total;
    }
    mixed.conc.push_back(std::move(c));
  }
  return mixed;
}

// Expected receiver-side concentration of every level of every transmitter,
// assuming all transmitters run their constant total flows.
inline std::vector<std::vector<double>> reference_levels(
    std::span<const TransmitterConfig> txs) {
  double q_total = 0.0;
  for (const auto& tx : txs) {
    tx.validate();
    q_total += tx.total_flow();
  }
  if (!(q_total > 0.0)) throw usage_error("total junction flow is zero");
  std::vector<std::vector<double>> out;
  for (const auto& tx : txs) {
    std::vector<double> levels;
    for (const auto& lv : tx.levels) {
      levels.push_back(tx.stock_mol_per_l * lv.info_ul_min / q_total);
    }
    out.push_back(std::move(levels));
  }
  return out;
}

// Receiver-side observation: optional first-order mixing lag, periodic
// sampling, Beer-Lambert rendering, optional sensor noise.
struct LinkConfig {
  std::vector<TransmitterConfig> transmitters;
  double sampling_period_s = 10.0;
  double smoothing_tau_s = 0.0;
  std::optional<NoiseParams> noise;
  ExtinctionProfileSet eps;
  PathLength path{};

  void validate() const {
    if (!(sampling_period_s > 0.0)) throw usage_error("sampling period must be positive");
    if (smoothing_tau_s < 0.0) throw usage_error("smoothing time constant must be >= 0");
    if (noise) noise->validate();
    for (const auto& tx : transmitters) tx.validate();
  }
};

struct ObservedSeries {
  std::vector<double> times_s;
  std::vector<AbsorbanceSpectrum> spectra;
  std::vector<ConcentrationVector> true_conc;  // post-lag, at the flow cell
  double horizon_s = 0.0;
};

inline ObservedSeries channel_observe(const MixedConcentration& mixed,
                                      const LinkConfig& link, RandomSource& rng) {
  link.validate();
  if (link.eps.species_count() != mixed.species_count) {
    throw usage_error("profile species count does not match the mixed series");
  }
  ObservedSeries out;
  out.horizon_s = mixed.horizon_s;
  const double dt = link.sampling_period_s;

  // exact first-order response toward the piecewise-constant input; the lag
  // state starts settled at the first segment's value
  std::vector<double> state = mixed.conc.empty()
                                  ? std::vector<double>(mixed.species_count, 0.0)
                                  : mixed.conc.front();
  double state_t = 0.0;
  std::size_t seg = 0;
  auto advance_within = [&](double to) {  // to stays inside the current segment
    if (link.smoothing_tau_s > 0.0) {
      if (to > state_t) {
        const double decay = std::exp(-(to - state_t) / link.smoothing_tau_s);
        for (std::size_t s = 0; s < state.size(); ++s) {
          state[s] = mixed.conc[seg][s] + (state[s] - mixed.conc[seg][s]) * decay;
        }
      }
    } else {
      state = mixed.conc[seg];
    }
    state_t = to;
  };

  for (double t = 0.0; t < mixed.horizon_s - 1e-9; t += dt) {
    while (seg + 2 < mixed.breakpoints.size() && mixed.breakpoints[seg + 1] <= t) {
      advance_within(mixed.breakpoints[seg + 1]);
      ++seg;  // a sample on a boundary reads the newly started segment
    }
    advance_within(t);
    ConcentrationVector conc(state);
    auto spectrum = absorbance_mix(link.eps, conc, link.path);
    if (link.noise) spectrum = apply_sensor_noise(spectrum, *link.noise, rng);
    out.times_s.push_back(t);
    out.true_conc.push_back(std::move(conc));
    out.spectra.push_back(std::move(spectrum));
  }
  return out;
}

// Per-sample concentrations over time, mol/L; either model predictions or
// the channel truth.
struct ConcentrationSeries {
  std::vector<double> times_s;
  std::vector<std::vector<double>> values;  // [sample][species]
  double horizon_s = 0.0;
};

inline ConcentrationSeries true_series(const ObservedSeries& obs) {
  ConcentrationSeries s;
  s.times_s = obs.times_s;
  s.horizon_s = obs.horizon_s;
  for (const auto& c : obs.true_conc) s.values.push_back(c.values);
  return s;
}

inline ConcentrationSeries predict_series(const FcnnModel& model,
                                          const ObservedSeries& obs) {
  ConcentrationSeries s;
  s.times_s = obs.times_s;
  s.horizon_s = obs.horizon_s;
  s.values = predict_all(model, obs.spectra);
  return s;
}

// Genie-aided demodulation plan: the receiver knows each transmitter's
// timing and the concentration each level should produce.
struct DemodPlan {
  std::vector<double> ref_levels_mol_per_l;
  int frame_count = 0;
};

struct FrameDecision {
  int tx = 0;
  int frame = 0;
  double t_begin_s = 0.0;
  double t_end_s = 0.0;
  double mean_conc = 0.0;
  int level = 0;
};

struct DecodedMessage {
  std::vector<std::string> bits_per_tx;
  std::vector<std::vector<double>> frame_means;  // mol/L, per tx per frame
  std::vector<FrameDecision> decisions;
  std::vector<double> ber_per_tx;  // filled by score_against
  double ber_overall = -1.0;
};

inline const char* level_bits(CskScheme scheme, int level) {
  static const char* bcsk[] = {"0", "1"};
  static const char* qcsk[] = {"00", "01", "10", "11"};
  return scheme == CskScheme::bcsk ? bcsk[level] : qcsk[level];
}

// Frames are computed per transmitter, so desynchronized symbol boundaries
// never disturb each other. Decision rule: nearest reference level, ties
// toward the lower level.
inline DecodedMessage demodulate(const ConcentrationSeries& series,
                                 std::span<const TransmitterConfig> txs,
                                 std::span<const DemodPlan> plans) {
  if (txs.size() != plans.size()) {
    throw usage_error("need one demodulation plan per transmitter");
  }
  DecodedMessage msg;
  for (std::size_t k = 0; k < txs.size(); ++k) {
    const auto& tx = txs[k];
    const auto& plan = plans[k];
    if (plan.ref_levels_mol_per_l.size() !=
        static_cast<std::size_t>(tx.scheme == CskScheme::bcsk ? 2 : 4)) {
      throw usage_error("reference level count does not match the scheme");
    }
    const double frames_end =
        tx.start_offset_s + plan.frame_count * tx.bit_interval_s;
    if (frames_end > series.horizon_s + 1e-9) {
      throw usage_error("frame " + std::to_string(plan.frame_count - 1) +
                        " of transmitter " + std::to_string(k) +
                        " extends past the observed series");
    }
    std::string bits;
    std::vector<double> means;
    for (int f = 0; f < plan.frame_count; ++f) {
      const double begin = tx.start_offset_s + f * tx.bit_interval_s;
      const double end = begin + tx.bit_interval_s;
      double sum = 0.0;
      std::size_t count = 0;
      for (std::size_t i = 0; i < series.times_s.size(); ++i) {
        const double t = series.times_s[i];
        if (t >= begin - 1e-9 && t < end - 1e-9) {
          sum += series.values[i][tx.species_index];
          ++count;
        }
      }
      if (count == 0) {
        throw usage_error("no samples fall inside frame " + std::to_string(f) +
                          " of transmitter " + std::to_string(k));
      }
      const double mean = sum / static_cast<double>(count);
      // a level held for the active fraction of the interval averages to
      // duty_cycle * level concentration over the whole frame
      int level = 0;
      double best = std::abs(mean - tx.duty_cycle * plan.ref_levels_mol_per_l[0]);
      for (std::size_t l = 1; l < plan.ref_levels_mol_per_l.size(); ++l) {
        const double d = std::abs(mean - tx.duty_cycle * plan.ref_levels_mol_per_l[l]);
        if (d < best) {
          best = d;
          level = static_cast<int>(l);
        }
      }
      bits += level_bits(tx.scheme, level);
      means.push_back(mean);
      msg.decisions.push_back({static_cast<int>(k), f, begin, end, mean, level});
    }
    msg.bits_per_tx.push_back(std::move(bits));
    msg.frame_means.push_back(std::move(means));
  }
  return msg;
}

// Hamming distance over equal-length bit strings, as a fraction.
inline double ber(std::string_view decoded, std::string_view truth) {
  if (decoded.size() != truth.size() || decoded.empty()) {
    throw usage_error("BER needs equal-length nonempty bit strings");
  }
  std::size_t errors = 0;
  for (std::size_t i = 0; i < decoded.size(); ++i) {
    if (decoded[i] != truth[i]) ++errors;
  }
  return static_cast<double>(errors) / static_cast<double>(decoded.size());
}

inline void score_against(DecodedMessage& msg,
                          std::span<const std::string> truth_bits) {
  if (truth_bits.size() != msg.bits_per_tx.size()) {
    throw usage_error("need one truth bit string per transmitter");
  }
  msg.ber_per_tx.clear();
  std::size_t errors = 0, total = 0;
  for (std::size_t k = 0; k < truth_bits.size(); ++k) {
    msg.ber_per_tx.push_back(ber(msg.bits_per_tx[k], truth_bits[k]));
    for (std::size_t i = 0; i < truth_bits[k].size(); ++i) {
      if (msg.bits_per_tx[k][i] != truth_bits[k][i]) ++errors;
      ++total;
    }
  }
  msg.ber_overall = static_cast<double>(errors) / static_cast<double>(total);
}

// MSB-first 7-bit character codes.
inline std::string ascii7_encode(std::string_view text) {
  std::string bits;
  bits.reserve(7 * text.size());
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (u >= 128) throw usage_error("only 7-bit characters can be encoded");
    for (int b = 6; b >= 0; --b) bits.push_back((u >> b) & 1 ? '1' : '0');
  }
  return bits;
}

inline std::string ascii7_decode(std::string_view bits) {
  detail::check_bit_string(bits);
  if (bits.size() % 7 != 0) {
    throw usage_error("bit count must be a multiple of 7");
  }
  std::string text;
  for (std::size_t k = 0; k < bits.size(); k += 7) {
    unsigned value = 0;
    for (int b = 0; b < 7; ++b) value = (value << 1) | (bits[k + b] == '1' ? 1u : 0u);
    text.push_back(static_cast<char>(value));
  }
  return text;
}

}  // namespace specmc
