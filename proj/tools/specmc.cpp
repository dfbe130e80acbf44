// specmc: simulate dye-mixture spectra, train the fractal regression network,
// and run concentration-shift-keying links end to end.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "specmc/calibration.hpp"
#include "specmc/checkpoint.hpp"
#include "specmc/config.hpp"
#include "specmc/dataset.hpp"
#include "specmc/modem.hpp"
#include "specmc/noise.hpp"
#include "specmc/spectral.hpp"
#include "specmc/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace specmc;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitIo = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDomain = 3;

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required = true) {
  auto* c = cmd->add_option("--config", args.config_path, "run configuration file");
  if (config_required) c->required();
  cmd->add_option("--out", args.out_dir, "output directory")->required();
  cmd->add_option("--seed", args.seed, "override the configured seed");
  cmd->add_flag("--quiet", args.quiet, "suppress progress output");
}

void echo_config(const RunConfig& cfg, const fs::path& out_dir) {
  std::ofstream out(out_dir / "resolved_config.cfg");
  if (!out) throw io_error("cannot write resolved config under " + out_dir.string());
  out << cfg.serialize();
}

fs::path prepare_out_dir(const std::string& dir) {
  if (dir.empty()) throw usage_error("--out must not be empty");
  fs::path p(dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw io_error("cannot create output directory " + p.string());
  return p;
}

NoiseParams noise_from(const RunConfig& cfg, const std::string& section) {
  NoiseParams p;
  p.e_max = cfg.get_double(section + ".e_max", p.e_max);
  p.e_min = cfg.get_double(section + ".e_min", p.e_min);
  p.i_min = cfg.get_double(section + ".i_min", p.i_min);
  p.i_max = cfg.get_double(section + ".i_max", p.i_max);
  p.i0 = cfg.get_double(section + ".i0", p.i0);
  p.law = noise_law_from_string(cfg.get_string(section + ".law", "amplitude"));
  p.validate();
  return p;
}

std::optional<NoiseParams> optional_noise(const RunConfig& cfg) {
  if (!cfg.has_section("noise")) return std::nullopt;
  if (!cfg.get_bool("noise.enabled", true)) return std::nullopt;
  return noise_from(cfg, "noise");
}

// Channel chemistry: a fitted CSV or synthetic Gaussian bands on a grid.
ExtinctionProfileSet profiles_from(const RunConfig& cfg) {
  if (cfg.has("profiles.csv")) {
    return read_extinction_csv(cfg.get_string("profiles.csv"));
  }
  auto species_sections = cfg.sections_under("profiles");
  if (species_sections.empty()) {
    throw usage_error("config needs profiles.csv or [profiles.<species>] sections");
  }
  const auto points = static_cast<std::size_t>(cfg.get_int("grid.points", 456));
  const double min_nm = cfg.get_double("grid.min_nm", 400.0);
  const double max_nm = cfg.get_double("grid.max_nm", 850.0);
  auto grid = make_uniform_grid(min_nm, max_nm, points);
  std::vector<ExtinctionProfileSet> bands;
  for (const auto& section : species_sections) {
    const std::string name = section.substr(std::string("profiles.").size());
    bands.push_back(synthetic_extinction_profile(
        grid, name, cfg.get_double(section + ".peak_nm"),
        cfg.get_double(section + ".peak_eps"),
        cfg.get_double(section + ".width_nm")));
  }
  return join_profiles(bands);
}

PathLength path_length_from(const RunConfig& cfg) {
  return PathLength(cfg.get_double("beer_lambert.path_length_cm", 0.25));
}

// ---------------------------------------------------------------------------
// fit-extinction
// ---------------------------------------------------------------------------

int cmd_fit_extinction(const CommonArgs& args) {
  auto cfg = RunConfig::parse_file(args.config_path);
  auto out_dir = prepare_out_dir(args.out_dir);
  echo_config(cfg, out_dir);

  auto ds = load_dataset(cfg.get_string("fit.dataset"));
  PathLength l(cfg.get_double("fit.path_length_cm", 0.25));
  auto report = condition_report(ds.samples);
  auto fitted = fit_extinction(ds.samples, l, ds.species);

  const auto csv_path = out_dir / cfg.get_string("fit.profiles_csv", "extinction.csv");
  write_extinction_csv(fitted, csv_path);

  json report_json;
  report_json["condition_number"] = std::isfinite(report.condition_number)
                                        ? json(report.condition_number)
                                        : json("inf");
  report_json["sample_count"] = report.sample_count;
  json norms;
  for (std::size_t i = 0; i < ds.species.size(); ++i) {
    norms[ds.species[i]] = report.column_norms[i];
  }
  report_json["column_norms"] = norms;
  const auto report_path = out_dir / cfg.get_string("fit.report_json", "condition.json");
  std::ofstream rep(report_path);
  if (!rep) throw io_error("cannot write " + report_path.string());
  rep << report_json.dump(2) << "\n";

  if (!args.quiet) {
    std::printf("fit-extinction: %zu samples, %zu species, condition %.6g\n",
                ds.samples.size(), ds.species.size(), report.condition_number);
    std::printf("wrote %s and %s\n", csv_path.c_str(), report_path.c_str());
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// gen-dataset
// ---------------------------------------------------------------------------

int cmd_gen_dataset(const CommonArgs& args) {
  auto cfg = RunConfig::parse_file(args.config_path);
  if (args.seed) cfg.set("plan.seed", std::to_string(*args.seed));
  auto out_dir = prepare_out_dir(args.out_dir);
  echo_config(cfg, out_dir);

  auto eps = profiles_from(cfg);
  SamplingPlan plan;
  plan.n_total = static_cast<std::size_t>(cfg.get_int("plan.n_total", 12000));
  if (cfg.has("plan.c_max")) {
    plan.c_max = cfg.get_double_list("plan.c_max");
  }
  plan.overshoot = cfg.get_double("plan.overshoot", plan.overshoot);
  plan.mixed_fraction = cfg.get_double("plan.mixed_fraction", plan.mixed_fraction);
  plan.pure_fraction_per_species =
      cfg.get_double("plan.pure_fraction", plan.pure_fraction_per_species);
  plan.blank_fraction = cfg.get_double("plan.blank_fraction", plan.blank_fraction);
  plan.seed = cfg.get_u64("plan.seed", 0);
  if (plan.c_max.size() != eps.species_count()) {
    throw usage_error("plan.c_max length does not match the profile species");
  }

  auto noise = optional_noise(cfg);
  RandomSource rng(plan.seed);
  auto ds = generate_simulated_dataset(eps, plan, path_length_from(cfg), noise, rng);

  const auto ds_path = out_dir / cfg.get_string("output.dataset", "dataset.spcd");
  save_dataset(ds, ds_path);
  if (cfg.has("output.csv")) {
    export_dataset_csv(ds, out_dir / cfg.get_string("output.csv"));
  }

  if (!args.quiet) {
    auto counts = stratum_counts(plan);
    std::printf("gen-dataset: %zu samples (%s), grid %zu points\n", ds.size(),
                to_string(ds.provenance), ds.grid->size());
    std::printf("strata: mixed %zu", counts[0]);
    for (std::size_t i = 0; i < eps.species_count(); ++i) {
      std::printf(", pure-%s %zu", eps.species[i].c_str(), counts[1 + i]);
    }
    std::printf(", blank %zu\n", counts[1 + eps.species_count()]);
    std::printf("wrote %s\n", ds_path.c_str());
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const CommonArgs& args) {
  auto cfg = RunConfig::parse_file(args.config_path);
  if (args.seed) cfg.set("plan.seed", std::to_string(*args.seed));
  auto out_dir = prepare_out_dir(args.out_dir);
  echo_config(cfg, out_dir);

  auto ds = load_dataset(cfg.get_string("train.dataset"));
  const double fraction = cfg.get_double("train.split_fraction", 0.8);
  const auto split_seed = cfg.get_u64("train.split_seed", 0);
  auto [train_ds, val_ds] = split(ds, fraction, split_seed);

  FcnnConfig model_cfg;
  model_cfg.input_length = static_cast<int>(ds.grid->size());
  model_cfg.output_dim = static_cast<int>(ds.species.size());
  if (cfg.has("model.block_filters")) {
    model_cfg.block_filters = cfg.get_int_list("model.block_filters");
  }
  model_cfg.kernel_size = static_cast<int>(cfg.get_int("model.kernel_size", 3));
  if (cfg.has("model.dilations")) {
    model_cfg.dilations = cfg.get_int_list("model.dilations");
  }
  model_cfg.pool_size = static_cast<int>(cfg.get_int("model.pool_size", 2));
  model_cfg.dropout_rate = cfg.get_double("model.dropout_rate", 0.5);
  model_cfg.target_scale = cfg.get_double("model.target_scale", 1e-5);
  model_cfg.validate();

  PhasePlan plan;
  if (cfg.has("plan.lrs")) plan.phase_lrs = cfg.get_double_list("plan.lrs");
  plan.epochs_per_phase = static_cast<int>(cfg.get_int("plan.epochs_per_phase", 200));
  plan.steps_per_epoch = static_cast<int>(cfg.get_int("plan.steps_per_epoch", 100));
  plan.batch_size = static_cast<int>(cfg.get_int("plan.batch_size", 10));
  plan.seed = cfg.get_u64("plan.seed", 0);
  plan.validate();

  if (!args.quiet) {
    std::printf("train: %zu train / %zu val samples, %d phases x %d epochs\n",
                train_ds.size(), val_ds.size(),
                static_cast<int>(plan.phase_lrs.size()), plan.epochs_per_phase);
  }
  auto result = train_full(model_cfg, train_ds, val_ds, plan);

  const auto model_path = out_dir / cfg.get_string("output.checkpoint", "model.fcnn");
  save_model(result.model, model_path, plan.seed);
  write_history_csv(result.history,
                    out_dir / cfg.get_string("output.history", "history.csv"));

  auto metrics = evaluate(result.model, val_ds);
  if (!args.quiet) {
    std::printf("final validation mse (mol/L)^2: %.9g\n", metrics.mse);
    std::printf("final validation D: %.9g\n", metrics.d);
    std::printf("wrote %s\n", model_path.c_str());
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const CommonArgs& args, const std::string& model_arg,
             const std::string& data_arg) {
  RunConfig cfg;
  if (!args.config_path.empty()) cfg = RunConfig::parse_file(args.config_path);
  auto out_dir = prepare_out_dir(args.out_dir);
  echo_config(cfg, out_dir);

  const std::string model_path =
      !model_arg.empty() ? model_arg : cfg.get_string("eval.model");
  const std::string data_path =
      !data_arg.empty() ? data_arg : cfg.get_string("eval.dataset");
  auto model = load_model(model_path);
  auto ds = load_dataset(data_path);

  auto metrics = evaluate(model, ds);
  const auto blank_count =
      static_cast<std::size_t>(cfg.get_int("eval.blank_count", 100));
  const auto blank_seed = cfg.get_u64("eval.blank_seed", 0);
  auto blanks = blank_ensemble(ds.grid, blank_count, optional_noise(cfg), blank_seed);
  auto floor = min_detectable_concentration(model, blanks);
  auto det = detection_error(model, ds, floor);

  json out;
  out["mse"] = metrics.mse;
  json rmse, min_det, det_err, det_counts;
  for (std::size_t i = 0; i < model.species.size(); ++i) {
    rmse[model.species[i]] = metrics.rmse[i];
    min_det[model.species[i]] = floor[i];
    det_err[model.species[i]] =
        det.rmse[i] ? json(*det.rmse[i]) : json(nullptr);
    det_counts[model.species[i]] = det.counts[i];
  }
  out["rmse"] = rmse;
  out["d"] = metrics.d;
  out["min_detectable"] = min_det;
  out["detection_error"] = det_err;
  out["detection_error_counts"] = det_counts;

  const auto metrics_path = out_dir / cfg.get_string("output.metrics", "metrics.json");
  std::ofstream mf(metrics_path);
  if (!mf) throw io_error("cannot write " + metrics_path.string());
  mf << out.dump(2) << "\n";
  if (!args.quiet) {
    std::printf("eval: %zu samples, D = %.9g\n", ds.size(), metrics.d);
    std::printf("wrote %s\n", metrics_path.c_str());
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// simulate-link
// ---------------------------------------------------------------------------

struct TxSetup {
  TransmitterConfig tx;
  std::string bits;   // bit stream as fed to encode_bits
  std::string label;  // species name
};

TxSetup tx_from(const RunConfig& cfg, const std::string& section,
                const std::vector<std::string>& species) {
  TxSetup setup;
  auto& tx = setup.tx;
  setup.label = cfg.get_string(section + ".species");
  auto it = std::find(species.begin(), species.end(), setup.label);
  if (it == species.end()) {
    throw usage_error(section + ".species '" + setup.label +
                      "' is not among the channel species");
  }
  tx.species_index = static_cast<int>(it - species.begin());
  tx.stock_mol_per_l = cfg.get_double(section + ".stock");
  tx.bit_interval_s = cfg.get_double(section + ".bit_interval_s");
  tx.duty_cycle = cfg.get_double(section + ".duty_cycle", 1.0);
  tx.start_offset_s = cfg.get_double(section + ".start_offset_s", 0.0);
  tx.scheme = scheme_from_string(cfg.get_string(section + ".scheme", "bcsk"));

  if (cfg.has(section + ".info_flows")) {
    auto info = cfg.get_double_list(section + ".info_flows");
    auto solvent = cfg.get_double_list(section + ".solvent_flows");
    if (info.size() != solvent.size()) {
      throw usage_error(section + ": info_flows and solvent_flows differ in length");
    }
    for (std::size_t i = 0; i < info.size(); ++i) {
      tx.levels.push_back({info[i], solvent[i]});
    }
  } else if (tx.scheme == CskScheme::bcsk) {
    tx.levels = TransmitterConfig::bcsk_levels(cfg.get_double(section + ".flow"));
  } else {
    tx.levels = TransmitterConfig::qcsk_levels(cfg.get_double(section + ".max_flow"));
  }
  tx.validate();

  if (cfg.has(section + ".bits")) {
    setup.bits = cfg.get_string(section + ".bits");
  } else if (cfg.has(section + ".bits_a")) {
    setup.bits = interleave_dibits(cfg.get_string(section + ".bits_a"),
                                   cfg.get_string(section + ".bits_b"));
  } else {
    const std::string message = cfg.get_string(section + ".message");
    if (tx.scheme == CskScheme::bcsk) {
      setup.bits = ascii7_encode(message);
    } else {
      if (message.size() % 2 != 0) {
        throw usage_error(section +
                          ": a QCSK message needs an even letter count "
                          "(first half rides the high bits)");
      }
      const auto half = message.size() / 2;
      setup.bits = interleave_dibits(ascii7_encode(message.substr(0, half)),
                                     ascii7_encode(message.substr(half)));
    }
  }
  return setup;
}

// De-interleaves a decoded QCSK stream back into its two simultaneous
// sequences, then into text when 7-aligned.
std::string decoded_text(CskScheme scheme, const std::string& bits) {
  try {
    if (scheme == CskScheme::bcsk) {
      return bits.size() % 7 == 0 ? ascii7_decode(bits) : std::string{};
    }
    std::string a, b;
    for (std::size_t k = 0; k + 1 < bits.size(); k += 2) {
      a.push_back(bits[k]);
      b.push_back(bits[k + 1]);
    }
    if (a.size() % 7 != 0) return {};
    return ascii7_decode(a) + ascii7_decode(b);
  } catch (const usage_error&) {
    return {};
  }
}

int cmd_simulate_link(const CommonArgs& args) {
  auto cfg = RunConfig::parse_file(args.config_path);
  if (args.seed) cfg.set("link.seed", std::to_string(*args.seed));
  auto out_dir = prepare_out_dir(args.out_dir);
  echo_config(cfg, out_dir);

  LinkConfig link;
  link.eps = profiles_from(cfg);
  link.path = path_length_from(cfg);
  link.sampling_period_s = cfg.get_double("link.sampling_period_s", 10.0);
  link.smoothing_tau_s = cfg.get_double("link.smoothing_tau_s", 0.0);
  link.noise = optional_noise(cfg);

  const auto& species = link.eps.species;
  std::vector<TxSetup> setups;
  for (const auto& section : cfg.sections_under("tx")) {
    setups.push_back(tx_from(cfg, section, species));
  }
  if (setups.empty()) throw usage_error("config defines no [tx.*] transmitters");
  for (const auto& s : setups) link.transmitters.push_back(s.tx);

  // encode and pad to a common horizon
  std::vector<FlowTrace> traces;
  double horizon = 0.0;
  for (const auto& s : setups) {
    traces.push_back(encode_bits(s.tx, s.bits));
    horizon = std::max(horizon, traces.back().horizon_s);
  }
  for (std::size_t k = 0; k < traces.size(); ++k) {
    traces[k] = extend_trace(std::move(traces[k]), setups[k].tx, horizon);
  }
  auto mixed = mix_at_junction(traces, link.transmitters, species.size());
  RandomSource rng(cfg.get_u64("link.seed", 0));
  auto observed = channel_observe(mixed, link, rng);

  // predictions: the trained model, or the channel truth for oracle runs
  const std::string predictor = cfg.get_string("link.predictor", "model");
  ConcentrationSeries preds;
  std::optional<FcnnModel> model;
  if (predictor == "oracle") {
    preds = true_series(observed);
  } else if (predictor == "model") {
    model = load_model(cfg.get_string("link.model"));
    if (model->species != species) {
      throw usage_error("model species do not match the channel species");
    }
    if (model->config.input_length != static_cast<int>(link.eps.grid_size())) {
      throw usage_error("model input length does not match the channel grid");
    }
    preds = predict_series(*model, observed);
  } else {
    throw usage_error("link.predictor must be 'model' or 'oracle'");
  }

  auto refs = reference_levels(link.transmitters);
  std::vector<DemodPlan> plans;
  for (std::size_t k = 0; k < setups.size(); ++k) {
    const int frames = static_cast<int>(
        levels_for_bits(setups[k].tx.scheme, setups[k].bits).size());
    plans.push_back({refs[k], frames});
  }
  auto decoded = demodulate(preds, link.transmitters, plans);
  std::vector<std::string> truth;
  for (const auto& s : setups) truth.push_back(s.bits);
  score_against(decoded, truth);

  // trace CSV: time, true and predicted concentration per species
  {
    const auto path = out_dir / cfg.get_string("output.trace_csv", "trace.csv");
    std::ofstream out(path);
    if (!out) throw io_error("cannot write " + path.string());
    out << "time_s";
    for (const auto& sp : species) out << ",true_" << sp;
    for (const auto& sp : species) out << ",pred_" << sp;
    out << "\n";
    for (std::size_t i = 0; i < observed.times_s.size(); ++i) {
      out << detail::format_sig(observed.times_s[i]);
      for (std::size_t s = 0; s < species.size(); ++s) {
        out << ',' << detail::format_sig(observed.true_conc[i].values[s]);
      }
      for (std::size_t s = 0; s < species.size(); ++s) {
        out << ',' << detail::format_sig(preds.values[i][s]);
      }
      out << "\n";
    }
  }
  // per-frame decisions CSV
  {
    const auto path = out_dir / cfg.get_string("output.decisions_csv", "decisions.csv");
    std::ofstream out(path);
    if (!out) throw io_error("cannot write " + path.string());
    out << "tx,species,frame,t_begin_s,t_end_s,mean_conc,level,bits\n";
    for (const auto& d : decoded.decisions) {
      out << d.tx << ',' << setups[d.tx].label << ',' << d.frame << ','
          << detail::format_sig(d.t_begin_s) << ',' << detail::format_sig(d.t_end_s)
          << ',' << detail::format_sig(d.mean_conc) << ',' << d.level << ','
          << level_bits(setups[d.tx].tx.scheme, d.level) << "\n";
    }
  }
  // summary JSON
  json summary;
  std::string message;
  std::size_t bits_total = 0;
  json txs_json = json::array();
  for (std::size_t k = 0; k < setups.size(); ++k) {
    json t;
    t["species"] = setups[k].label;
    t["scheme"] = to_string(setups[k].tx.scheme);
    t["bits_sent"] = setups[k].bits;
    t["bits_decoded"] = decoded.bits_per_tx[k];
    t["bit_count"] = decoded.bits_per_tx[k].size();
    t["ber"] = decoded.ber_per_tx[k];
    txs_json.push_back(t);
    bits_total += decoded.bits_per_tx[k].size();
    message += decoded_text(setups[k].tx.scheme, decoded.bits_per_tx[k]);
  }
  summary["transmitters"] = txs_json;
  summary["bits_total"] = bits_total;
  summary["ber_overall"] = decoded.ber_overall;
  summary["message_decoded"] = message;
  const auto summary_path = out_dir / cfg.get_string("output.summary", "summary.json");
  {
    std::ofstream out(summary_path);
    if (!out) throw io_error("cannot write " + summary_path.string());
    out << summary.dump(2) << "\n";
  }
  if (!args.quiet) {
    std::printf("simulate-link: %zu transmitters, %zu samples, BER %.4g\n",
                setups.size(), observed.times_s.size(), decoded.ber_overall);
    if (!message.empty()) std::printf("decoded message: %s\n", message.c_str());
    std::printf("wrote %s\n", summary_path.c_str());
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"molecular-communication spectroscopy toolkit"};
  app.require_subcommand(1);

  CommonArgs fit_args, gen_args, train_args, eval_args, link_args;
  std::string eval_model, eval_data;

  auto* fit = app.add_subcommand("fit-extinction",
                                 "fit per-wavelength extinction profiles");
  add_common(fit, fit_args);
  auto* gen = app.add_subcommand("gen-dataset", "generate a simulated dataset");
  add_common(gen, gen_args);
  auto* train = app.add_subcommand("train", "train the regression network");
  add_common(train, train_args);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  add_common(eval, eval_args, /*config_required=*/false);
  eval->add_option("--model", eval_model, "checkpoint path (overrides config)");
  eval->add_option("--data", eval_data, "dataset path (overrides config)");
  auto* link = app.add_subcommand("simulate-link", "run a CSK link end to end");
  add_common(link, link_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (fit->parsed()) return cmd_fit_extinction(fit_args);
    if (gen->parsed()) return cmd_gen_dataset(gen_args);
    if (train->parsed()) return cmd_train(train_args);
    if (eval->parsed()) return cmd_eval(eval_args, eval_model, eval_data);
    if (link->parsed()) return cmd_simulate_link(link_args);
  } catch (const usage_error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const calibration_error& e) {
    std::fprintf(stderr, "calibration error: %s\n", e.what());
    return kExitDomain;
  } catch (const domain_error& e) {
    std::fprintf(stderr, "domain error: %s\n", e.what());
    return kExitDomain;
  } catch (const io_error& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kExitIo;
  } catch (const format_error& e) {
    std::fprintf(stderr, "file format error: %s\n", e.what());
    return kExitIo;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitIo;
  }
  return kExitConfig;
}
