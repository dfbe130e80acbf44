#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "specmc/errors.hpp"
#include "specmc/parallel.hpp"
#include "specmc/random.hpp"

namespace specmc {

// ---------------------------------------------------------------------------
// Configuration and parameter containers
// ---------------------------------------------------------------------------

// 1-D fractal regression network: four dilated-convolution blocks with
// channel-halving merges and a 1x1 shortcut, each followed by max pooling,
// then flatten -> dropout -> linear head.
struct FcnnConfig {
  int input_length = 3648;
  int output_dim = 2;
  std::vector<int> block_filters = {16, 32, 64, 128};
  int kernel_size = 3;
  std::vector<int> dilations = {1, 2, 4};
  int pool_size = 2;
  double dropout_rate = 0.5;
  double target_scale = 1e-5;  // mol/L represented by one internal unit

  int block_count() const { return static_cast<int>(block_filters.size()); }

  // Feature length entering block b (0-based): pooled b times.
  int length_before_block(int b) const {
    int n = input_length;
    for (int k = 0; k < b; ++k) n /= pool_size;
    return n;
  }

  int channels_before_block(int b) const {
    return b == 0 ? 1 : block_filters[b - 1];
  }

  int flatten_dim() const {
    return block_filters.back() * length_before_block(block_count());
  }

  void validate() const {
    if (input_length < 2) throw usage_error("input length must be >= 2");
    if (output_dim < 1) throw usage_error("output dimension must be >= 1");
    if (block_filters.empty()) throw usage_error("need at least one block");
    for (int f : block_filters) {
      if (f < 1) throw usage_error("block filter counts must be positive");
    }
    if (kernel_size < 1 || kernel_size % 2 == 0) {
      throw usage_error("kernel size must be odd and positive");
    }
    if (dilations.empty()) throw usage_error("need at least one dilation");
    for (int d : dilations) {
      if (d < 1) throw usage_error("dilations must be positive");
    }
    if (pool_size < 2) throw usage_error("pool size must be >= 2");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
      throw usage_error("dropout rate must lie in [0, 1)");
    }
    if (!(target_scale > 0.0)) throw usage_error("target scale must be positive");
    int min_len = kernel_size;
    for (int b = 0; b < block_count(); ++b) min_len *= pool_size;
    if (input_length < min_len) {
      throw usage_error("input length " + std::to_string(input_length) +
                        " too short for " + std::to_string(block_count()) +
                        " pooled blocks (need >= " + std::to_string(min_len) + ")");
    }
    for (int b = 0; b < block_count(); ++b) {
      if (length_before_block(b) < pool_size) {
        throw usage_error("feature length collapses before block " + std::to_string(b));
      }
    }
    if (flatten_dim() < 1) throw usage_error("flatten width collapses to zero");
  }
};

// Channels x length feature map, row-major with contiguous rows.
struct FeatureMap {
  int channels = 0;
  int length = 0;
  std::vector<double> v;

  FeatureMap() = default;
  FeatureMap(int c, int n) : channels(c), length(n), v(static_cast<std::size_t>(c) * n, 0.0) {}

  double* row(int c) { return v.data() + static_cast<std::size_t>(c) * length; }
  const double* row(int c) const { return v.data() + static_cast<std::size_t>(c) * length; }
  void zero() { std::fill(v.begin(), v.end(), 0.0); }
};

struct ConvParams {
  int out_channels = 0;
  int in_channels = 0;
  int kernel = 0;
  std::vector<double> w;  // [out][in][k]
  std::vector<double> b;  // [out]

  ConvParams() = default;
  ConvParams(int out, int in, int k)
      : out_channels(out), in_channels(in), kernel(k),
        w(static_cast<std::size_t>(out) * in * k, 0.0), b(out, 0.0) {}
};

struct BlockParams {
  std::vector<ConvParams> convs;  // one per dilation, chained
  ConvParams shortcut;            // 1x1, linear
};

struct FcnnParams {
  std::vector<BlockParams> blocks;
  std::vector<double> head_w;  // [output_dim][flatten_dim]
  std::vector<double> head_b;  // [output_dim]
};

inline FcnnParams zero_params(const FcnnConfig& cfg) {
  cfg.validate();
  FcnnParams p;
  p.blocks.resize(cfg.block_count());
  for (int b = 0; b < cfg.block_count(); ++b) {
    const int f = cfg.block_filters[b];
    const int c_in = cfg.channels_before_block(b);
    auto& block = p.blocks[b];
    block.convs.reserve(cfg.dilations.size());
    for (std::size_t i = 0; i < cfg.dilations.size(); ++i) {
      block.convs.emplace_back(2 * f, i == 0 ? c_in : f, cfg.kernel_size);
    }
    block.shortcut = ConvParams(f, c_in, 1);
  }
  p.head_w.assign(static_cast<std::size_t>(cfg.output_dim) * cfg.flatten_dim(), 0.0);
  p.head_b.assign(cfg.output_dim, 0.0);
  return p;
}

// Flat, ordered view over every tensor; defines checkpoint and optimizer
// traversal order.
struct TensorRef {
  std::string name;
  std::vector<double>* data;
  std::vector<std::size_t> shape;
};

inline std::vector<TensorRef> tensor_refs(FcnnParams& p, const FcnnConfig& cfg) {
  std::vector<TensorRef> refs;
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    auto& block = p.blocks[b];
    for (std::size_t i = 0; i < block.convs.size(); ++i) {
      auto& conv = block.convs[i];
      const std::string base = "block" + std::to_string(b) + ".conv" + std::to_string(i);
      refs.push_back({base + ".weight", &conv.w,
                      {static_cast<std::size_t>(conv.out_channels),
                       static_cast<std::size_t>(conv.in_channels),
                       static_cast<std::size_t>(conv.kernel)}});
      refs.push_back({base + ".bias", &conv.b,
                      {static_cast<std::size_t>(conv.out_channels)}});
    }
    const std::string base = "block" + std::to_string(b) + ".shortcut";
    refs.push_back({base + ".weight", &block.shortcut.w,
                    {static_cast<std::size_t>(block.shortcut.out_channels),
                     static_cast<std::size_t>(block.shortcut.in_channels),
                     static_cast<std::size_t>(block.shortcut.kernel)}});
    refs.push_back({base + ".bias", &block.shortcut.b,
                    {static_cast<std::size_t>(block.shortcut.out_channels)}});
  }
  refs.push_back({"head.weight", &p.head_w,
                  {static_cast<std::size_t>(cfg.output_dim),
                   static_cast<std::size_t>(cfg.flatten_dim())}});
  refs.push_back({"head.bias", &p.head_b,
                  {static_cast<std::size_t>(cfg.output_dim)}});
  return refs;
}

// Fan-balanced uniform init, biases zero, deterministic per seed.
inline FcnnParams init_params(const FcnnConfig& cfg, std::uint64_t seed) {
  FcnnParams p = zero_params(cfg);
  RandomSource rng(seed);
  auto fill_conv = [&rng](ConvParams& conv) {
    const double fan_in = static_cast<double>(conv.in_channels) * conv.kernel;
    const double fan_out = static_cast<double>(conv.out_channels) * conv.kernel;
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    for (auto& w : conv.w) w = rng.uniform(-a, a);
  };
  for (auto& block : p.blocks) {
    for (auto& conv : block.convs) fill_conv(conv);
    fill_conv(block.shortcut);
  }
  const double a = std::sqrt(6.0 / (cfg.flatten_dim() + cfg.output_dim));
  for (auto& w : p.head_w) w = rng.uniform(-a, a);
  return p;
}

// ---------------------------------------------------------------------------
// Layer kernels
// ---------------------------------------------------------------------------

enum class Activation { linear, relu };

namespace detail {

// Lane-blocked dot product: eight independent accumulation chains so the
// compiler can vectorize without reassociating a single FP sum. The
// summation order is fixed, so results stay deterministic.
inline double dot8(const double* __restrict a, const double* __restrict b,
                   int n) {
  double lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int l = 0; l < 8; ++l) lane[l] += a[i + l] * b[i + l];
  }
  for (int l = 0; i < n; ++i, ++l) lane[l] += a[i] * b[i];
  return ((lane[0] + lane[1]) + (lane[2] + lane[3])) +
         ((lane[4] + lane[5]) + (lane[6] + lane[7]));
}

inline double sum8(const double* __restrict a, int n) {
  double lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int l = 0; l < 8; ++l) lane[l] += a[i + l];
  }
  for (int l = 0; i < n; ++i, ++l) lane[l] += a[i];
  return ((lane[0] + lane[1]) + (lane[2] + lane[3])) +
         ((lane[4] + lane[5]) + (lane[6] + lane[7]));
}

}  // namespace detail

// Dilated cross-correlation with zero "same" padding; output length equals
// input length. Kernel size 3 takes a fused single-pass path.
inline FeatureMap conv1d_same(const FeatureMap& x, const ConvParams& conv,
                              int dilation, Activation act) {
  if (x.channels != conv.in_channels) {
    throw usage_error("conv input channel mismatch");
  }
  const int n = x.length;
  const int k_half = (conv.kernel - 1) / 2;
  FeatureMap out(conv.out_channels, n);
  for (int f = 0; f < conv.out_channels; ++f) {
    double* __restrict out_row = out.row(f);
    std::fill(out_row, out_row + n, conv.b[f]);
    const double* wf = conv.w.data() +
                       static_cast<std::size_t>(f) * conv.in_channels * conv.kernel;
    for (int c = 0; c < conv.in_channels; ++c) {
      const double* __restrict x_row = x.row(c);
      if (conv.kernel == 3) {
        const double w0 = wf[c * 3 + 0];
        const double w1 = wf[c * 3 + 1];
        const double w2 = wf[c * 3 + 2];
        const int d = dilation;
        const int lo = std::min(d, n);
        const int hi = std::max(lo, n - d);
        for (int i = 0; i < lo; ++i) {
          double s = w1 * x_row[i];
          if (i + d < n) s += w2 * x_row[i + d];
          out_row[i] += s;
        }
        for (int i = lo; i < hi; ++i) {
          out_row[i] += w0 * x_row[i - d] + w1 * x_row[i] + w2 * x_row[i + d];
        }
        for (int i = hi; i < n; ++i) {
          double s = w1 * x_row[i];
          if (i - d >= 0) s += w0 * x_row[i - d];
          out_row[i] += s;
        }
      } else {
        for (int k = 0; k < conv.kernel; ++k) {
          const int off = dilation * (k - k_half);
          const double w = wf[c * conv.kernel + k];
          const int lo = std::max(0, -off);
          const int hi = std::min(n, n - off);
          for (int i = lo; i < hi; ++i) out_row[i] += w * x_row[i + off];
        }
      }
    }
    if (act == Activation::relu) {
      for (int i = 0; i < n; ++i) out_row[i] = out_row[i] > 0.0 ? out_row[i] : 0.0;
    }
  }
  return out;
}

namespace detail {

// d(loss)/d(input) of conv1d_same given the gradient at its pre-activation
// output; accumulates into g_x.
inline void conv1d_input_grad(const ConvParams& conv, int dilation,
                              const FeatureMap& g_out, FeatureMap& g_x) {
  const int n = g_out.length;
  const int k_half = (conv.kernel - 1) / 2;
  for (int f = 0; f < conv.out_channels; ++f) {
    const double* __restrict g_row = g_out.row(f);
    const double* wf = conv.w.data() +
                       static_cast<std::size_t>(f) * conv.in_channels * conv.kernel;
    for (int c = 0; c < conv.in_channels; ++c) {
      double* __restrict gx_row = g_x.row(c);
      if (conv.kernel == 3) {
        // forward taps sit at offsets {-d, 0, +d}; the transpose flips them
        const double w0 = wf[c * 3 + 0];
        const double w1 = wf[c * 3 + 1];
        const double w2 = wf[c * 3 + 2];
        const int d = dilation;
        const int lo = std::min(d, n);
        const int hi = std::max(lo, n - d);
        for (int j = 0; j < lo; ++j) {
          double s = w1 * g_row[j];
          if (j + d < n) s += w0 * g_row[j + d];
          gx_row[j] += s;
        }
        for (int j = lo; j < hi; ++j) {
          gx_row[j] += w0 * g_row[j + d] + w1 * g_row[j] + w2 * g_row[j - d];
        }
        for (int j = hi; j < n; ++j) {
          double s = w1 * g_row[j];
          if (j - d >= 0) s += w2 * g_row[j - d];
          gx_row[j] += s;
        }
      } else {
        for (int k = 0; k < conv.kernel; ++k) {
          const int off = dilation * (k - k_half);
          const double w = wf[c * conv.kernel + k];
          const int lo = std::max(0, -off);
          const int hi = std::min(n, n - off);
          for (int i = lo; i < hi; ++i) gx_row[i + off] += w * g_row[i];
        }
      }
    }
  }
}

// d(loss)/d(weights, bias) of conv1d_same; accumulates into g_conv.
inline void conv1d_param_grad(const FeatureMap& x, int dilation,
                              const FeatureMap& g_out, const ConvParams& conv,
                              ConvParams& g_conv) {
  const int n = g_out.length;
  const int k_half = (conv.kernel - 1) / 2;
  for (int f = 0; f < conv.out_channels; ++f) {
    const double* g_row = g_out.row(f);
    g_conv.b[f] += sum8(g_row, n);
    double* gw = g_conv.w.data() +
                 static_cast<std::size_t>(f) * conv.in_channels * conv.kernel;
    for (int c = 0; c < conv.in_channels; ++c) {
      const double* x_row = x.row(c);
      for (int k = 0; k < conv.kernel; ++k) {
        const int off = dilation * (k - k_half);
        const int lo = std::max(0, -off);
        const int hi = std::min(n, n - off);
        if (hi > lo) {
          gw[c * conv.kernel + k] += dot8(g_row + lo, x_row + lo + off, hi - lo);
        }
      }
    }
  }
}

}  // namespace detail

// Channel-halving merge: out[c] = x[c] + x[c + C/2].
inline FeatureMap half_sum(const FeatureMap& x) {
  if (x.channels % 2 != 0) throw usage_error("half_sum needs an even channel count");
  const int f = x.channels / 2;
  FeatureMap out(f, x.length);
  for (int c = 0; c < f; ++c) {
    const double* lo = x.row(c);
    const double* hi = x.row(c + f);
    double* o = out.row(c);
    for (int i = 0; i < x.length; ++i) o[i] = lo[i] + hi[i];
  }
  return out;
}

// Non-overlapping window max; trailing remainder dropped. When src_index is
// given it records the absolute argmax per output element (first max wins).
inline FeatureMap maxpool(const FeatureMap& x, int size,
                          std::vector<std::int32_t>* src_index = nullptr) {
  if (size < 1) throw usage_error("pool size must be positive");
  if (x.length < size) throw usage_error("feature length shorter than pool window");
  const int n_out = x.length / size;
  FeatureMap out(x.channels, n_out);
  if (src_index) src_index->assign(static_cast<std::size_t>(x.channels) * n_out, 0);
  for (int c = 0; c < x.channels; ++c) {
    const double* in_row = x.row(c);
    double* out_row = out.row(c);
    for (int m = 0; m < n_out; ++m) {
      int best = m * size;
      double best_v = in_row[best];
      for (int i = 1; i < size; ++i) {
        const double v = in_row[m * size + i];
        if (v > best_v) {
          best_v = v;
          best = m * size + i;
        }
      }
      out_row[m] = best_v;
      if (src_index) {
        (*src_index)[static_cast<std::size_t>(c) * n_out + m] = best;
      }
    }
  }
  return out;
}

// Per-block activations cached for the backward pass.
struct BlockTrace {
  FeatureMap input;                      // feature map entering the block
  std::vector<FeatureMap> path_out;      // post-ReLU conv outputs, 2F x N
  std::vector<FeatureMap> merged;        // half-sum outputs p_i, F x N
  std::vector<std::int32_t> pool_src;    // argmax of the pool after the block
  int pre_pool_length = 0;
};

struct ForwardTrace {
  std::vector<BlockTrace> blocks;
  std::vector<double> flat;          // post-pool flatten, pre-dropout
  std::vector<std::uint8_t> mask;    // dropout keep mask (train mode)
  std::vector<double> dropped;       // head input
  std::vector<double> prediction;    // internal units
};

// Chained dilated paths joined with the shortcut by elementwise addition:
// p1 = hs(conv_d1(x)), p2 = hs(conv_d2(p1)), ..., out = sum(p_i) + conv1x1(x).
inline FeatureMap fractal_block_forward(const FeatureMap& x,
                                        const BlockParams& block,
                                        const std::vector<int>& dilations,
                                        BlockTrace* trace = nullptr) {
  if (block.convs.size() != dilations.size()) {
    throw usage_error("block has " + std::to_string(block.convs.size()) +
                      " convolution paths but " + std::to_string(dilations.size()) +
                      " dilations");
  }
  FeatureMap acc = conv1d_same(x, block.shortcut, 1, Activation::linear);
  const FeatureMap* u = &x;
  if (trace) {
    trace->path_out.clear();
    trace->merged.clear();
  }
  for (std::size_t i = 0; i < dilations.size(); ++i) {
    FeatureMap y = conv1d_same(*u, block.convs[i], dilations[i], Activation::relu);
    FeatureMap p = half_sum(y);
    for (std::size_t k = 0; k < acc.v.size(); ++k) acc.v[k] += p.v[k];
    if (trace) {
      trace->path_out.push_back(std::move(y));
      trace->merged.push_back(std::move(p));
      u = &trace->merged.back();
    } else {
      static thread_local FeatureMap scratch;
      scratch = std::move(p);
      u = &scratch;
    }
  }
  return acc;
}

namespace detail {

inline std::vector<double> head_forward(const FcnnParams& p, const FcnnConfig& cfg,
                                        std::span<const double> z) {
  std::vector<double> pred(cfg.output_dim);
  const std::size_t j_dim = z.size();
  for (int m = 0; m < cfg.output_dim; ++m) {
    const double* w = p.head_w.data() + static_cast<std::size_t>(m) * j_dim;
    double s = p.head_b[m];
    for (std::size_t j = 0; j < j_dim; ++j) s += w[j] * z[j];
    pred[m] = s;
  }
  return pred;
}

inline std::vector<double> forward_impl(const FcnnParams& p, const FcnnConfig& cfg,
                                        std::span<const double> spectrum,
                                        const std::vector<std::uint8_t>* mask,
                                        ForwardTrace* trace) {
  if (static_cast<int>(spectrum.size()) != cfg.input_length) {
    throw usage_error("spectrum length " + std::to_string(spectrum.size()) +
                      " does not match configured input length " +
                      std::to_string(cfg.input_length));
  }
  FeatureMap fm(1, cfg.input_length);
  std::copy(spectrum.begin(), spectrum.end(), fm.v.begin());
  if (trace) trace->blocks.resize(cfg.block_count());
  for (int b = 0; b < cfg.block_count(); ++b) {
    BlockTrace* bt = trace ? &trace->blocks[b] : nullptr;
    if (bt) bt->input = std::move(fm);
    const FeatureMap& x = bt ? bt->input : fm;
    FeatureMap block_out = fractal_block_forward(x, p.blocks[b], cfg.dilations, bt);
    if (bt) bt->pre_pool_length = block_out.length;
    fm = maxpool(block_out, cfg.pool_size, bt ? &bt->pool_src : nullptr);
  }
  std::vector<double> flat = std::move(fm.v);

  std::vector<double> z;
  if (mask) {
    const double keep = 1.0 - cfg.dropout_rate;
    z.resize(flat.size());
    for (std::size_t j = 0; j < flat.size(); ++j) {
      z[j] = (*mask)[j] ? flat[j] / keep : 0.0;
    }
  } else {
    z = flat;
  }
  auto pred = head_forward(p, cfg, z);
  if (trace) {
    trace->flat = std::move(flat);
    if (mask) trace->mask = *mask;
    trace->dropped = std::move(z);
    trace->prediction = pred;
  }
  return pred;
}

}  // namespace detail

// Deterministic inference pass; returns concentrations in internal units.
inline std::vector<double> forward_eval(const FcnnParams& p, const FcnnConfig& cfg,
                                        std::span<const double> spectrum) {
  return detail::forward_impl(p, cfg, spectrum, nullptr, nullptr);
}

inline std::vector<std::uint8_t> draw_dropout_mask(const FcnnConfig& cfg,
                                                   RandomSource& rng) {
  std::vector<std::uint8_t> mask(cfg.flatten_dim());
  for (auto& m : mask) m = rng.uniform() >= cfg.dropout_rate ? 1 : 0;
  return mask;
}

// Training pass with inverted dropout; the mask comes from rng (one mask per
// call) and everything the backward pass needs lands in the trace.
inline std::vector<double> forward_train(const FcnnParams& p, const FcnnConfig& cfg,
                                         std::span<const double> spectrum,
                                         RandomSource& rng, ForwardTrace& trace) {
  auto mask = draw_dropout_mask(cfg, rng);
  return detail::forward_impl(p, cfg, spectrum, &mask, &trace);
}

// Training pass with a caller-supplied dropout mask (replayed passes).
inline std::vector<double> forward_with_mask(const FcnnParams& p, const FcnnConfig& cfg,
                                             std::span<const double> spectrum,
                                             const std::vector<std::uint8_t>& mask,
                                             ForwardTrace* trace = nullptr) {
  if (static_cast<int>(mask.size()) != cfg.flatten_dim()) {
    throw usage_error("dropout mask length does not match flatten width");
  }
  return detail::forward_impl(p, cfg, spectrum, &mask, trace);
}

// Mean over batch and outputs of the squared error.
inline double mse_loss(const std::vector<std::vector<double>>& preds,
                       const std::vector<std::vector<double>>& targets) {
  if (preds.size() != targets.size() || preds.empty()) {
    throw usage_error("loss needs equally sized, nonempty batches");
  }
  double s = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < preds.size(); ++k) {
    if (preds[k].size() != targets[k].size()) {
      throw usage_error("loss prediction/target width mismatch");
    }
    for (std::size_t m = 0; m < preds[k].size(); ++m) {
      const double d = preds[k][m] - targets[k][m];
      s += d * d;
      ++count;
    }
  }
  return s / static_cast<double>(count);
}

struct TrainingBatch {
  std::vector<std::vector<double>> spectra;           // raw absorbance
  std::vector<std::vector<double>> targets_internal;  // concentrations / target_scale
};

namespace detail {

// Backpropagates through one block: consumes d(loss)/d(block output) and the
// cached activations, accumulates parameter gradients, returns
// d(loss)/d(block input).
inline FeatureMap block_backward(const FeatureMap& g_out, const BlockTrace& bt,
                                 const BlockParams& block,
                                 const std::vector<int>& dilations,
                                 BlockParams& g_block) {
  const int n = g_out.length;
  FeatureMap g_in(bt.input.channels, n);

  conv1d_param_grad(bt.input, 1, g_out, block.shortcut, g_block.shortcut);
  conv1d_input_grad(block.shortcut, 1, g_out, g_in);

  const int paths = static_cast<int>(dilations.size());
  FeatureMap g_p = g_out;  // gradient reaching the last merge output
  for (int i = paths - 1; i >= 0; --i) {
    const FeatureMap& y = bt.path_out[i];
    const int f = y.channels / 2;
    // expand through the half-sum (both halves receive the merged gradient),
    // then gate by the ReLU that produced y
    FeatureMap g_y(y.channels, n);
    for (int c = 0; c < y.channels; ++c) {
      const double* src = g_p.row(c < f ? c : c - f);
      const double* y_row = y.row(c);
      double* dst = g_y.row(c);
      for (int k = 0; k < n; ++k) dst[k] = y_row[k] > 0.0 ? src[k] : 0.0;
    }
    const FeatureMap& u = (i == 0) ? bt.input : bt.merged[i - 1];
    conv1d_param_grad(u, dilations[i], g_y, block.convs[i], g_block.convs[i]);
    if (i > 0) {
      FeatureMap g_u(block.convs[i].in_channels, n);
      conv1d_input_grad(block.convs[i], dilations[i], g_y, g_u);
      // the preceding merge output feeds both this conv and the final Add
      g_p = g_out;
      for (std::size_t k = 0; k < g_p.v.size(); ++k) g_p.v[k] += g_u.v[k];
    } else {
      conv1d_input_grad(block.convs[i], dilations[i], g_y, g_in);
    }
  }
  return g_in;
}

inline void sample_backward(const FcnnParams& p, const FcnnConfig& cfg,
                            const ForwardTrace& trace,
                            std::span<const double> target,
                            double loss_scale, FcnnParams& grads) {
  const std::size_t j_dim = trace.dropped.size();
  std::vector<double> g_pred(cfg.output_dim);
  for (int m = 0; m < cfg.output_dim; ++m) {
    g_pred[m] = loss_scale * 2.0 * (trace.prediction[m] - target[m]);
  }
  // head
  std::vector<double> g_z(j_dim, 0.0);
  for (int m = 0; m < cfg.output_dim; ++m) {
    const double g = g_pred[m];
    grads.head_b[m] += g;
    double* gw = grads.head_w.data() + static_cast<std::size_t>(m) * j_dim;
    const double* w = p.head_w.data() + static_cast<std::size_t>(m) * j_dim;
    const double* z = trace.dropped.data();
    for (std::size_t j = 0; j < j_dim; ++j) {
      gw[j] += g * z[j];
      g_z[j] += g * w[j];
    }
  }
  // dropout
  std::vector<double> g_flat(j_dim);
  if (!trace.mask.empty()) {
    const double keep = 1.0 - cfg.dropout_rate;
    for (std::size_t j = 0; j < j_dim; ++j) {
      g_flat[j] = trace.mask[j] ? g_z[j] / keep : 0.0;
    }
  } else {
    g_flat = g_z;
  }
  // unflatten to the pooled output of the last block
  const int last = cfg.block_count() - 1;
  FeatureMap g_pooled(cfg.block_filters[last],
                      cfg.length_before_block(cfg.block_count()));
  std::copy(g_flat.begin(), g_flat.end(), g_pooled.v.begin());

  for (int b = last; b >= 0; --b) {
    const BlockTrace& bt = trace.blocks[b];
    FeatureMap g_block_out(g_pooled.channels, bt.pre_pool_length);
    const int n_out = g_pooled.length;
    for (int c = 0; c < g_pooled.channels; ++c) {
      const double* g_row = g_pooled.row(c);
      double* dst = g_block_out.row(c);
      const std::int32_t* src = bt.pool_src.data() + static_cast<std::size_t>(c) * n_out;
      for (int m = 0; m < n_out; ++m) dst[src[m]] += g_row[m];
    }
    g_pooled = block_backward(g_block_out, bt, p.blocks[b], cfg.dilations,
                              grads.blocks[b]);
  }
}

}  // namespace detail

inline void zero_fill(FcnnParams& p) {
  for (auto& block : p.blocks) {
    for (auto& conv : block.convs) {
      std::fill(conv.w.begin(), conv.w.end(), 0.0);
      std::fill(conv.b.begin(), conv.b.end(), 0.0);
    }
    std::fill(block.shortcut.w.begin(), block.shortcut.w.end(), 0.0);
    std::fill(block.shortcut.b.begin(), block.shortcut.b.end(), 0.0);
  }
  std::fill(p.head_w.begin(), p.head_w.end(), 0.0);
  std::fill(p.head_b.begin(), p.head_b.end(), 0.0);
}

inline void accumulate_params(FcnnParams& acc, const FcnnParams& x) {
  for (std::size_t b = 0; b < acc.blocks.size(); ++b) {
    for (std::size_t i = 0; i < acc.blocks[b].convs.size(); ++i) {
      auto& conv = acc.blocks[b].convs[i];
      const auto& other = x.blocks[b].convs[i];
      for (std::size_t k = 0; k < conv.w.size(); ++k) conv.w[k] += other.w[k];
      for (std::size_t k = 0; k < conv.b.size(); ++k) conv.b[k] += other.b[k];
    }
    auto& s = acc.blocks[b].shortcut;
    const auto& os = x.blocks[b].shortcut;
    for (std::size_t k = 0; k < s.w.size(); ++k) s.w[k] += os.w[k];
    for (std::size_t k = 0; k < s.b.size(); ++k) s.b[k] += os.b[k];
  }
  for (std::size_t k = 0; k < acc.head_w.size(); ++k) acc.head_w[k] += x.head_w[k];
  for (std::size_t k = 0; k < acc.head_b.size(); ++k) acc.head_b[k] += x.head_b[k];
}

// Exact gradient of the batch MSE with respect to every parameter, written
// into caller-owned buffers so training steps reuse them. Samples run in
// parallel into private buffers reduced in sample order, so the result is
// independent of the worker count.
inline void backward_into(const FcnnParams& p, const FcnnConfig& cfg,
                          const TrainingBatch& batch,
                          std::span<const ForwardTrace> traces,
                          std::vector<FcnnParams>& scratch, FcnnParams& grads) {
  const std::size_t n = batch.targets_internal.size();
  if (n == 0 || traces.size() != n) {
    throw usage_error("backward needs one trace per batch sample");
  }
  for (std::size_t k = 0; k < n; ++k) {
    if (traces[k].prediction.size() != static_cast<std::size_t>(cfg.output_dim) ||
        batch.targets_internal[k].size() != static_cast<std::size_t>(cfg.output_dim)) {
      throw usage_error("trace/batch output width mismatch");
    }
  }
  const double loss_scale = 1.0 / static_cast<double>(n * cfg.output_dim);
  while (scratch.size() < n) scratch.push_back(zero_params(cfg));
  parallel_for(n, [&](std::size_t begin, std::size_t end) {
    for (std::size_t k = begin; k < end; ++k) {
      zero_fill(scratch[k]);
      detail::sample_backward(p, cfg, traces[k], batch.targets_internal[k],
                              loss_scale, scratch[k]);
    }
  });
  zero_fill(grads);
  for (std::size_t k = 0; k < n; ++k) accumulate_params(grads, scratch[k]);
}

inline FcnnParams backward(const FcnnParams& p, const FcnnConfig& cfg,
                           const TrainingBatch& batch,
                           std::span<const ForwardTrace> traces) {
  FcnnParams grads = zero_params(cfg);
  std::vector<FcnnParams> scratch;
  backward_into(p, cfg, batch, traces, scratch, grads);
  return grads;
}

// Goodness-of-fit with a stabilizer against constant targets: pooled sums
// over every (sample, species) entry.
inline double coefficient_of_determination(std::span<const double> preds,
                                           std::span<const double> targets,
                                           double theta = 1e-7) {
  if (preds.size() != targets.size() || preds.empty()) {
    throw usage_error("coefficient of determination needs matched nonempty inputs");
  }
  double mean = 0.0;
  for (double t : targets) mean += t;
  mean /= static_cast<double>(targets.size());
  double num = 0.0, denom = theta;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double e = targets[i] - preds[i];
    const double s = targets[i] - mean;
    num += e * e;
    denom += s * s;
  }
  return 1.0 - num / denom;
}

// Trained network plus the metadata needed to interpret its outputs.
struct FcnnModel {
  FcnnConfig config;
  std::vector<std::string> species;
  FcnnParams params;
};

}  // namespace specmc
