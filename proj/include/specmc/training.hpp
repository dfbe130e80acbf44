#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "specmc/dataset.hpp"
#include "specmc/errors.hpp"
#include "specmc/fcnn.hpp"
#include "specmc/parallel.hpp"
#include "specmc/random.hpp"

namespace specmc {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0.0)) throw usage_error("learning rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw usage_error("Adam betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) throw usage_error("Adam epsilon must be positive");
  }
};

// First/second moment accumulators mirroring the parameter tensors.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t t = 0;
};

inline AdamState adam_state_like(FcnnParams& params, const FcnnConfig& cfg) {
  AdamState state;
  for (const auto& ref : tensor_refs(params, cfg)) {
    state.m.emplace_back(ref.data->size(), 0.0);
    state.v.emplace_back(ref.data->size(), 0.0);
  }
  return state;
}

inline void adam_step(FcnnParams& params, FcnnParams& grads, AdamState& state,
                      const AdamHyper& hyper, const FcnnConfig& cfg) {
  hyper.validate();
  auto p_refs = tensor_refs(params, cfg);
  auto g_refs = tensor_refs(grads, cfg);
  if (state.m.size() != p_refs.size()) {
    throw usage_error("Adam state does not match the parameter set");
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.t));
  for (std::size_t t = 0; t < p_refs.size(); ++t) {
    auto& theta = *p_refs[t].data;
    const auto& g = *g_refs[t].data;
    auto& m = state.m[t];
    auto& v = state.v[t];
    if (g.size() != theta.size() || m.size() != theta.size()) {
      throw usage_error("Adam tensor shape mismatch at " + p_refs[t].name);
    }
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
      v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      theta[i] -= hyper.lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Training schedule
// ---------------------------------------------------------------------------

struct PhasePlan {
  std::vector<double> phase_lrs = {1e-3, 1e-4, 1e-5};
  int epochs_per_phase = 200;
  int steps_per_epoch = 100;
  int batch_size = 10;
  std::uint64_t seed = 0;

  void validate() const {
    if (phase_lrs.empty()) throw usage_error("phase plan needs at least one phase");
    for (double lr : phase_lrs) {
      if (!(lr > 0.0)) throw usage_error("phase learning rates must be positive");
    }
    if (epochs_per_phase < 0) throw usage_error("epochs per phase must be >= 0");
    if (steps_per_epoch < 1) throw usage_error("steps per epoch must be >= 1");
    if (batch_size < 1) throw usage_error("batch size must be >= 1");
  }
};

struct EpochRecord {
  int phase = 0;  // 1-based
  int epoch = 0;  // 1-based within the phase
  double train_mse = 0.0;
  double val_mse = 0.0;
};

namespace detail {

struct PreparedDataset {
  const Dataset* ds = nullptr;
  std::vector<std::vector<double>> targets_internal;
};

inline PreparedDataset prepare(const Dataset& ds, const FcnnConfig& cfg,
                               const char* what) {
  if (ds.samples.empty()) {
    throw usage_error(std::string(what) + " dataset is empty");
  }
  if (static_cast<int>(ds.grid->size()) != cfg.input_length) {
    throw usage_error(std::string(what) + " dataset grid length " +
                      std::to_string(ds.grid->size()) +
                      " does not match model input length " +
                      std::to_string(cfg.input_length));
  }
  if (static_cast<int>(ds.species.size()) != cfg.output_dim) {
    throw usage_error(std::string(what) + " dataset species count mismatch");
  }
  PreparedDataset p;
  p.ds = &ds;
  p.targets_internal.resize(ds.samples.size());
  for (std::size_t k = 0; k < ds.samples.size(); ++k) {
    auto& t = p.targets_internal[k];
    t.resize(cfg.output_dim);
    for (int m = 0; m < cfg.output_dim; ++m) {
      t[m] = ds.samples[k].conc.values[m] / cfg.target_scale;
    }
  }
  return p;
}

// Mean squared error in internal units over a whole dataset, eval mode.
// Per-sample errors are stored by index and reduced in order, so the result
// does not depend on the worker count.
inline double dataset_mse(const FcnnParams& params, const FcnnConfig& cfg,
                          const PreparedDataset& prep) {
  const auto& samples = prep.ds->samples;
  std::vector<double> per_sample(samples.size());
  parallel_for(samples.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t k = begin; k < end; ++k) {
      auto pred = forward_eval(params, cfg, samples[k].spectrum.values);
      double s = 0.0;
      for (int m = 0; m < cfg.output_dim; ++m) {
        const double d = pred[m] - prep.targets_internal[k][m];
        s += d * d;
      }
      per_sample[k] = s;
    }
  });
  double total = 0.0;
  for (double s : per_sample) total += s;
  return total / (static_cast<double>(samples.size()) * cfg.output_dim);
}

}  // namespace detail

struct PhaseResult {
  FcnnModel best;
  double best_val_mse = 0.0;
  std::vector<EpochRecord> history;
};

// One optimization phase: uniform-with-replacement batches, Adam updates,
// validation MSE at every epoch end, lowest-validation checkpoint returned.
// The incoming parameters participate as the initial checkpoint, so a phase
// can never hand over something worse than it received.
inline PhaseResult train_phase(const FcnnModel& start, const Dataset& train_ds,
                               const Dataset& val_ds, const AdamHyper& hyper,
                               int epochs, int steps_per_epoch, int batch_size,
                               RandomSource& rng, int phase_index = 1) {
  hyper.validate();
  const FcnnConfig& cfg = start.config;
  cfg.validate();
  auto train_prep = detail::prepare(train_ds, cfg, "training");
  auto val_prep = detail::prepare(val_ds, cfg, "validation");

  PhaseResult result;
  result.best = start;
  result.best_val_mse = detail::dataset_mse(start.params, cfg, val_prep);

  FcnnParams params = start.params;
  AdamState state = adam_state_like(params, cfg);
  const std::size_t n_train = train_ds.samples.size();

  std::vector<std::size_t> batch_index(batch_size);
  std::vector<std::vector<std::uint8_t>> masks(batch_size);
  std::vector<ForwardTrace> traces(batch_size);
  std::vector<FcnnParams> grad_scratch;
  FcnnParams grads = zero_params(cfg);

  for (int epoch = 1; epoch <= epochs; ++epoch) {
    double loss_sum = 0.0;
    for (int step = 0; step < steps_per_epoch; ++step) {
      // deterministic draw order: indices first, then one mask per sample
      for (int b = 0; b < batch_size; ++b) batch_index[b] = rng.index(n_train);
      for (int b = 0; b < batch_size; ++b) masks[b] = draw_dropout_mask(cfg, rng);

      TrainingBatch batch;
      batch.spectra.resize(batch_size);
      batch.targets_internal.resize(batch_size);
      for (int b = 0; b < batch_size; ++b) {
        batch.spectra[b] = train_ds.samples[batch_index[b]].spectrum.values;
        batch.targets_internal[b] = train_prep.targets_internal[batch_index[b]];
      }
      parallel_for(batch_size, [&](std::size_t begin, std::size_t end) {
        for (std::size_t b = begin; b < end; ++b) {
          forward_with_mask(params, cfg, batch.spectra[b], masks[b], &traces[b]);
        }
      });
      {
        std::vector<std::vector<double>> preds(batch_size);
        for (int b = 0; b < batch_size; ++b) preds[b] = traces[b].prediction;
        loss_sum += mse_loss(preds, batch.targets_internal);
      }
      backward_into(params, cfg, batch, traces, grad_scratch, grads);
      adam_step(params, grads, state, hyper, cfg);
    }
    EpochRecord record;
    record.phase = phase_index;
    record.epoch = epoch;
    record.train_mse = loss_sum / steps_per_epoch;
    record.val_mse = detail::dataset_mse(params, cfg, val_prep);
    result.history.push_back(record);
    if (record.val_mse < result.best_val_mse) {
      result.best_val_mse = record.val_mse;
      result.best.params = params;
    }
  }
  return result;
}

struct TrainResult {
  FcnnModel model;
  std::vector<EpochRecord> history;
  std::vector<double> phase_lrs;
  double final_val_mse = 0.0;
};

// Consecutive phases with decreasing learning rates; each phase starts from
// the best checkpoint of the previous one.
inline TrainResult train_full(const FcnnConfig& cfg, const Dataset& train_ds,
                              const Dataset& val_ds, const PhasePlan& plan) {
  plan.validate();
  cfg.validate();
  TrainResult result;
  result.phase_lrs = plan.phase_lrs;

  FcnnModel model;
  model.config = cfg;
  model.species = train_ds.species;
  model.params = init_params(cfg, plan.seed);
  RandomSource rng(derive_seed(plan.seed, 0x7261696e));

  double best_val = 0.0;
  for (std::size_t k = 0; k < plan.phase_lrs.size(); ++k) {
    AdamHyper hyper;
    hyper.lr = plan.phase_lrs[k];
    auto phase = train_phase(model, train_ds, val_ds, hyper, plan.epochs_per_phase,
                             plan.steps_per_epoch, plan.batch_size, rng,
                             static_cast<int>(k) + 1);
    model = std::move(phase.best);
    best_val = phase.best_val_mse;
    result.history.insert(result.history.end(), phase.history.begin(),
                          phase.history.end());
  }
  result.model = std::move(model);
  result.final_val_mse = best_val;
  return result;
}

inline void write_history_csv(const std::vector<EpochRecord>& history,
                              const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot open " + path.string() + " for writing");
  out << "phase,epoch,train_mse,val_mse\n";
  for (const auto& r : history) {
    out << r.phase << ',' << r.epoch << ',' << detail::format_sig(r.train_mse)
        << ',' << detail::format_sig(r.val_mse) << "\n";
  }
  if (!out) throw io_error("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Evaluation metrics (all in mol/L)
// ---------------------------------------------------------------------------

// Eval-mode predictions for a batch of spectra, in mol/L.
inline std::vector<std::vector<double>> predict_all(
    const FcnnModel& model, std::span<const AbsorbanceSpectrum> spectra) {
  std::vector<std::vector<double>> preds(spectra.size());
  parallel_for(spectra.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t k = begin; k < end; ++k) {
      auto p = forward_eval(model.params, model.config, spectra[k].values);
      for (auto& v : p) v *= model.config.target_scale;
      preds[k] = std::move(p);
    }
  });
  return preds;
}

struct EvalMetrics {
  double mse = 0.0;                // mean over samples and species, (mol/L)^2
  std::vector<double> rmse;        // per species, mol/L
  double d = 0.0;                  // coefficient of determination
};

inline EvalMetrics evaluate(const FcnnModel& model, const Dataset& ds) {
  if (ds.samples.empty()) throw usage_error("evaluation dataset is empty");
  if (static_cast<int>(ds.grid->size()) != model.config.input_length) {
    throw usage_error("dataset grid does not match the model input length");
  }
  if (ds.species != model.species) {
    throw usage_error("dataset species do not match the model");
  }
  std::vector<AbsorbanceSpectrum> spectra;
  spectra.reserve(ds.samples.size());
  for (const auto& s : ds.samples) spectra.push_back(s.spectrum);
  auto preds = predict_all(model, spectra);

  const int m_dim = model.config.output_dim;
  EvalMetrics metrics;
  metrics.rmse.assign(m_dim, 0.0);
  std::vector<double> flat_pred, flat_truth;
  flat_pred.reserve(ds.samples.size() * m_dim);
  flat_truth.reserve(ds.samples.size() * m_dim);
  double total = 0.0;
  for (std::size_t k = 0; k < ds.samples.size(); ++k) {
    for (int m = 0; m < m_dim; ++m) {
      const double truth = ds.samples[k].conc.values[m];
      const double err = preds[k][m] - truth;
      metrics.rmse[m] += err * err;
      total += err * err;
      flat_pred.push_back(preds[k][m]);
      flat_truth.push_back(truth);
    }
  }
  const double n = static_cast<double>(ds.samples.size());
  for (auto& r : metrics.rmse) r = std::sqrt(r / n);
  metrics.mse = total / (n * m_dim);
  metrics.d = coefficient_of_determination(flat_pred, flat_truth);
  return metrics;
}

// Zero-concentration spectra for the detection floor: one clean blank plus
// noise-augmented replicas.
inline std::vector<AbsorbanceSpectrum> blank_ensemble(
    const GridPtr& grid, std::size_t count, const std::optional<NoiseParams>& noise,
    std::uint64_t seed) {
  if (count < 1) throw usage_error("blank ensemble needs at least one spectrum");
  std::vector<AbsorbanceSpectrum> out;
  out.reserve(count);
  AbsorbanceSpectrum clean(grid, std::vector<double>(grid->size(), 0.0));
  out.push_back(clean);
  RandomSource rng(seed);
  for (std::size_t k = 1; k < count; ++k) {
    if (noise) {
      out.push_back(apply_sensor_noise(clean, *noise, rng));
    } else {
      out.push_back(clean);
    }
  }
  return out;
}

// Highest prediction over the blank ensemble, per species.
inline std::vector<double> min_detectable_concentration(
    const FcnnModel& model, std::span<const AbsorbanceSpectrum> blanks) {
  if (blanks.empty()) throw usage_error("blank ensemble is empty");
  auto preds = predict_all(model, blanks);
  std::vector<double> floor(model.config.output_dim,
                            -std::numeric_limits<double>::infinity());
  for (const auto& p : preds) {
    for (int m = 0; m < model.config.output_dim; ++m) {
      floor[m] = std::max(floor[m], p[m]);
    }
  }
  return floor;
}

// RMSE restricted to samples whose true concentration exceeds that species'
// detection floor. Species with no qualifying samples come back flagged
// (nullopt) rather than as an error.
struct DetectionErrorReport {
  std::vector<std::optional<double>> rmse;  // per species, mol/L
  std::vector<std::size_t> counts;          // qualifying samples per species
};

inline DetectionErrorReport detection_error(const FcnnModel& model,
                                            const Dataset& ds,
                                            std::span<const double> min_detectable) {
  if (ds.samples.empty()) throw usage_error("detection error needs a nonempty dataset");
  if (min_detectable.size() != static_cast<std::size_t>(model.config.output_dim)) {
    throw usage_error("detection floor width does not match the model");
  }
  std::vector<AbsorbanceSpectrum> spectra;
  spectra.reserve(ds.samples.size());
  for (const auto& s : ds.samples) spectra.push_back(s.spectrum);
  auto preds = predict_all(model, spectra);

  DetectionErrorReport report;
  const int m_dim = model.config.output_dim;
  report.counts.assign(m_dim, 0);
  std::vector<double> sums(m_dim, 0.0);
  for (std::size_t k = 0; k < ds.samples.size(); ++k) {
    for (int m = 0; m < m_dim; ++m) {
      const double truth = ds.samples[k].conc.values[m];
      if (truth > min_detectable[m]) {
        const double err = preds[k][m] - truth;
        sums[m] += err * err;
        report.counts[m] += 1;
      }
    }
  }
  for (int m = 0; m < m_dim; ++m) {
    if (report.counts[m] == 0) {
      report.rmse.push_back(std::nullopt);
    } else {
      report.rmse.push_back(std::sqrt(sums[m] / report.counts[m]));
    }
  }
  return report;
}

}  // namespace specmc
