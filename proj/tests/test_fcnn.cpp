#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "specmc/fcnn.hpp"
#include "specmc/random.hpp"

namespace {

using namespace specmc;

FcnnConfig tiny_config() {
  FcnnConfig cfg;
  cfg.input_length = 64;
  cfg.output_dim = 2;
  cfg.block_filters = {2, 2, 2, 2};
  return cfg;
}

std::vector<double> random_spectrum(int n, RandomSource& rng) {
  std::vector<double> x(n);
  for (auto& v : x) v = rng.uniform(0.0, 1.5);
  return x;
}

TEST(InitParams, DeterministicZeroBiasBounded) {
  auto cfg = tiny_config();
  auto p1 = init_params(cfg, 7);
  auto p2 = init_params(cfg, 7);
  auto refs1 = tensor_refs(p1, cfg);
  auto refs2 = tensor_refs(p2, cfg);
  ASSERT_EQ(refs1.size(), refs2.size());
  for (std::size_t t = 0; t < refs1.size(); ++t) {
    EXPECT_EQ(*refs1[t].data, *refs2[t].data) << refs1[t].name;
  }
  for (const auto& block : p1.blocks) {
    for (const auto& conv : block.convs) {
      for (double b : conv.b) EXPECT_EQ(b, 0.0);
      const double bound = std::sqrt(
          6.0 / (conv.in_channels * conv.kernel + conv.out_channels * conv.kernel));
      for (double w : conv.w) EXPECT_LT(std::abs(w), bound);
    }
    for (double b : block.shortcut.b) EXPECT_EQ(b, 0.0);
  }
  for (double b : p1.head_b) EXPECT_EQ(b, 0.0);
  auto p3 = init_params(cfg, 8);
  EXPECT_NE(p1.head_w, p3.head_w);
}

TEST(Conv1d, IdentityKernelPassesInputThrough) {
  ConvParams conv(1, 1, 3);
  conv.w = {0.0, 1.0, 0.0};
  FeatureMap x(1, 8);
  for (int i = 0; i < 8; ++i) x.v[i] = 0.5 * i - 1.0;
  auto out = conv1d_same(x, conv, 1, Activation::linear);
  EXPECT_EQ(out.v, x.v);
}

TEST(Conv1d, ZeroInputGivesReluOfBias) {
  ConvParams conv(2, 1, 3);
  conv.w.assign(conv.w.size(), 0.3);
  conv.b = {0.7, -0.4};
  FeatureMap x(1, 6);
  auto out = conv1d_same(x, conv, 1, Activation::relu);
  for (int i = 0; i < 6; ++i) {
    EXPECT_DOUBLE_EQ(out.row(0)[i], 0.7);
    EXPECT_DOUBLE_EQ(out.row(1)[i], 0.0);
  }
}

// Direct-summation oracle for the dilated zero-padded cross-correlation.
double conv_oracle(const FeatureMap& x, const ConvParams& conv, int dilation,
                   int f, int n) {
  const int half = (conv.kernel - 1) / 2;
  double s = conv.b[f];
  for (int c = 0; c < conv.in_channels; ++c) {
    for (int k = 0; k < conv.kernel; ++k) {
      const int idx = n + dilation * (k - half);
      if (idx >= 0 && idx < x.length) {
        s += conv.w[(static_cast<std::size_t>(f) * conv.in_channels + c) * conv.kernel + k] *
             x.row(c)[idx];
      }
    }
  }
  return s;
}

TEST(Conv1d, DilatedMatchesBruteForceOracle) {
  RandomSource rng(13);
  ConvParams conv(3, 2, 3);
  for (auto& w : conv.w) w = rng.uniform(-1.0, 1.0);
  for (auto& b : conv.b) b = rng.uniform(-0.5, 0.5);
  FeatureMap x(2, 20);
  for (auto& v : x.v) v = rng.uniform(-1.0, 1.0);
  for (int dilation : {1, 2, 4}) {
    auto out = conv1d_same(x, conv, dilation, Activation::linear);
    ASSERT_EQ(out.length, 20);
    for (int f = 0; f < 3; ++f) {
      for (int n = 0; n < 20; ++n) {
        const double expect = conv_oracle(x, conv, dilation, f, n);
        // same taps, different FP grouping: agree to a few ulps
        EXPECT_NEAR(out.row(f)[n], expect, 1e-14 * std::max(1.0, std::abs(expect)))
            << "d=" << dilation << " f=" << f << " n=" << n;
      }
    }
  }
}

TEST(HalfSum, BasicsAndErrors) {
  FeatureMap x(4, 3);
  for (int c = 0; c < 4; ++c) {
    for (int i = 0; i < 3; ++i) x.row(c)[i] = 10.0 * c + i;
  }
  auto out = half_sum(x);
  EXPECT_EQ(out.channels, 2);
  for (int c = 0; c < 2; ++c) {
    for (int i = 0; i < 3; ++i) {
      EXPECT_DOUBLE_EQ(out.row(c)[i], x.row(c)[i] + x.row(c + 2)[i]);
    }
  }
  // zero second half passes the first half through
  FeatureMap y(4, 3);
  for (int i = 0; i < 3; ++i) {
    y.row(0)[i] = 1.5;
    y.row(1)[i] = -2.0;
  }
  auto out2 = half_sum(y);
  for (int i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(out2.row(0)[i], 1.5);
    EXPECT_DOUBLE_EQ(out2.row(1)[i], -2.0);
  }
  // opposite halves cancel
  FeatureMap z(2, 3);
  for (int i = 0; i < 3; ++i) {
    z.row(0)[i] = 3.0 + i;
    z.row(1)[i] = -(3.0 + i);
  }
  auto out3 = half_sum(z);
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(out3.row(0)[i], 0.0);

  FeatureMap odd(3, 2);
  EXPECT_THROW(half_sum(odd), usage_error);
}

TEST(HalfSum, ThirtyTwoChannelsBecomeSixteen) {
  FeatureMap x(32, 5);
  EXPECT_EQ(half_sum(x).channels, 16);
}

TEST(FractalBlock, ZeroInputZeroBiasGivesZero) {
  FcnnConfig cfg = tiny_config();
  auto p = init_params(cfg, 3);
  FeatureMap x(1, 64);
  auto out = fractal_block_forward(x, p.blocks[0], cfg.dilations);
  for (double v : out.v) EXPECT_EQ(v, 0.0);
}

TEST(FractalBlock, OutputShapeIsBlockFiltersByInputLength) {
  FcnnConfig cfg;
  cfg.input_length = 96;
  cfg.block_filters = {16, 32, 64, 128};
  auto p = init_params(cfg, 3);
  RandomSource rng(4);
  FeatureMap x(1, 96);
  for (auto& v : x.v) v = rng.uniform(0.0, 1.0);
  auto out = fractal_block_forward(x, p.blocks[0], cfg.dilations);
  EXPECT_EQ(out.channels, 16);
  EXPECT_EQ(out.length, 96);
}

TEST(Maxpool, BasicsShapesAndErrors) {
  FeatureMap x(1, 4);
  x.v = {1.0, 3.0, 2.0, 5.0};
  auto out = maxpool(x, 2);
  EXPECT_EQ(out.length, 2);
  EXPECT_DOUBLE_EQ(out.v[0], 3.0);
  EXPECT_DOUBLE_EQ(out.v[1], 5.0);

  FeatureMap c(2, 6);
  for (auto& v : c.v) v = 0.25;
  auto out2 = maxpool(c, 2);
  for (double v : out2.v) EXPECT_DOUBLE_EQ(v, 0.25);

  FeatureMap tiny(1, 1);
  EXPECT_THROW(maxpool(tiny, 2), usage_error);
}

TEST(Maxpool, FullResolutionLengthAfterFourPools) {
  int n = 3648;
  for (int k = 0; k < 4; ++k) n /= 2;
  EXPECT_EQ(n, 228);
  FcnnConfig cfg;  // defaults: L = 3648, filters up to 128
  EXPECT_EQ(cfg.length_before_block(4), 228);
  EXPECT_EQ(cfg.flatten_dim(), 29184);
}

TEST(Forward, EvalModeIsBitwiseDeterministic) {
  auto cfg = tiny_config();
  auto p = init_params(cfg, 21);
  RandomSource rng(5);
  auto x = random_spectrum(cfg.input_length, rng);
  auto y1 = forward_eval(p, cfg, x);
  auto y2 = forward_eval(p, cfg, x);
  EXPECT_EQ(y1, y2);
  EXPECT_EQ(y1.size(), 2u);
}

TEST(Forward, RejectsLengthMismatch) {
  auto cfg = tiny_config();
  auto p = init_params(cfg, 21);
  std::vector<double> x(cfg.input_length + 1, 0.0);
  EXPECT_THROW(forward_eval(p, cfg, x), usage_error);
}

TEST(Forward, ShapeLawAcrossBlocks) {
  RandomSource rng(77);
  for (int trial = 0; trial < 4; ++trial) {
    FcnnConfig cfg;
    cfg.input_length = 256 + static_cast<int>(rng.index(200));
    cfg.block_filters = {3, 5, 4, 6};
    cfg.output_dim = 2;
    auto p = init_params(cfg, trial);
    auto x = random_spectrum(cfg.input_length, rng);
    ForwardTrace trace;
    RandomSource drop(trial + 100);
    forward_train(p, cfg, x, drop, trace);
    int expect_len = cfg.input_length;
    for (int b = 0; b < cfg.block_count(); ++b) {
      EXPECT_EQ(trace.blocks[b].input.channels, cfg.channels_before_block(b));
      EXPECT_EQ(trace.blocks[b].input.length, expect_len);
      EXPECT_EQ(trace.blocks[b].pre_pool_length, expect_len);
      expect_len /= cfg.pool_size;
    }
    EXPECT_EQ(static_cast<int>(trace.flat.size()),
              cfg.block_filters.back() * expect_len);
  }
}

TEST(MseLoss, MatchesSummationOracle) {
  RandomSource rng(31);
  std::vector<std::vector<double>> preds(6), targets(6);
  for (int k = 0; k < 6; ++k) {
    for (int m = 0; m < 3; ++m) {
      preds[k].push_back(rng.uniform(-2.0, 2.0));
      targets[k].push_back(rng.uniform(-2.0, 2.0));
    }
  }
  double s = 0.0;
  for (int k = 0; k < 6; ++k)
    for (int m = 0; m < 3; ++m) s += std::pow(preds[k][m] - targets[k][m], 2);
  const double oracle = s / 18.0;
  EXPECT_NEAR(mse_loss(preds, targets), oracle, 1e-12 * std::max(1.0, oracle));

  EXPECT_DOUBLE_EQ(mse_loss(targets, targets), 0.0);
  auto shifted = targets;
  for (auto& row : shifted)
    for (auto& v : row) v += 1.0;
  EXPECT_NEAR(mse_loss(shifted, targets), 1.0, 1e-12);
}

TEST(Backward, ZeroErrorBatchHasZeroGradient) {
  auto cfg = tiny_config();
  auto p = init_params(cfg, 9);
  RandomSource rng(2);
  TrainingBatch batch;
  std::vector<ForwardTrace> traces(3);
  RandomSource drop(55);
  for (int k = 0; k < 3; ++k) {
    batch.spectra.push_back(random_spectrum(cfg.input_length, rng));
    auto pred = forward_train(p, cfg, batch.spectra.back(), drop, traces[k]);
    batch.targets_internal.push_back(pred);  // zero residual
  }
  auto grads = backward(p, cfg, batch, traces);
  for (double g : grads.head_b) EXPECT_EQ(g, 0.0);
  for (double g : grads.head_w) EXPECT_EQ(g, 0.0);
  for (const auto& block : grads.blocks) {
    for (const auto& conv : block.convs) {
      for (double g : conv.w) EXPECT_EQ(g, 0.0);
    }
  }
}

struct FdCheckStats {
  double max_rel = 0.0;
  std::string worst;
};

// Central finite differences over every parameter, replaying the recorded
// dropout masks so both sides see the same network.
FdCheckStats finite_difference_check(const FcnnConfig& cfg, std::uint64_t seed,
                                     double step) {
  auto params = init_params(cfg, seed);
  RandomSource rng(derive_seed(seed, 1));
  // jitter the biases: a zero-bias net has dead receptive fields exactly on
  // the ReLU kink, where central differences and the subgradient disagree
  for (auto& block : params.blocks) {
    for (auto& conv : block.convs) {
      for (auto& b : conv.b) b = rng.uniform(-0.1, 0.1);
    }
    for (auto& b : block.shortcut.b) b = rng.uniform(-0.1, 0.1);
  }
  for (auto& b : params.head_b) b = rng.uniform(-0.1, 0.1);
  TrainingBatch batch;
  const int batch_size = 2;
  std::vector<ForwardTrace> traces(batch_size);
  RandomSource drop(derive_seed(seed, 2));
  for (int k = 0; k < batch_size; ++k) {
    batch.spectra.push_back(random_spectrum(cfg.input_length, rng));
    std::vector<double> target(cfg.output_dim);
    for (auto& t : target) t = rng.uniform(-2.0, 2.0);
    batch.targets_internal.push_back(target);
    forward_train(params, cfg, batch.spectra[k], drop, traces[k]);
  }
  auto grads = backward(params, cfg, batch, traces);

  auto batch_loss = [&](const FcnnParams& p) {
    std::vector<std::vector<double>> preds;
    for (int k = 0; k < batch_size; ++k) {
      preds.push_back(forward_with_mask(p, cfg, batch.spectra[k], traces[k].mask));
    }
    return mse_loss(preds, batch.targets_internal);
  };

  FdCheckStats stats;
  auto work = params;
  auto work_refs = tensor_refs(work, cfg);
  auto grad_refs = tensor_refs(grads, cfg);
  for (std::size_t t = 0; t < work_refs.size(); ++t) {
    auto& data = *work_refs[t].data;
    const auto& g = *grad_refs[t].data;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double keep = data[i];
      data[i] = keep + step;
      const double lp = batch_loss(work);
      data[i] = keep - step;
      const double lm = batch_loss(work);
      data[i] = keep;
      const double numeric = (lp - lm) / (2.0 * step);
      const double analytic = g[i];
      const double scale = std::max(std::abs(numeric), std::abs(analytic));
      if (scale < 1e-7) continue;  // below finite-difference noise floor
      const double rel = std::abs(numeric - analytic) / scale;
      if (rel > stats.max_rel) {
        stats.max_rel = rel;
        stats.worst = work_refs[t].name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return stats;
}

TEST(Backward, MatchesCentralFiniteDifferences) {
  auto cfg = tiny_config();
  auto stats = finite_difference_check(cfg, 42, 1e-6);
  EXPECT_LT(stats.max_rel, 1e-4) << "worst entry: " << stats.worst;
}

TEST(Backward, DuplicatingTheBatchKeepsTheMeanGradient) {
  auto cfg = tiny_config();
  auto p = init_params(cfg, 4);
  RandomSource rng(8);
  TrainingBatch batch;
  std::vector<ForwardTrace> traces(2);
  RandomSource drop(3);
  for (int k = 0; k < 2; ++k) {
    batch.spectra.push_back(random_spectrum(cfg.input_length, rng));
    batch.targets_internal.push_back({rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)});
    forward_train(p, cfg, batch.spectra[k], drop, traces[k]);
  }
  auto single = backward(p, cfg, batch, traces);

  TrainingBatch doubled = batch;
  doubled.spectra.insert(doubled.spectra.end(), batch.spectra.begin(),
                         batch.spectra.end());
  doubled.targets_internal.insert(doubled.targets_internal.end(),
                                  batch.targets_internal.begin(),
                                  batch.targets_internal.end());
  std::vector<ForwardTrace> traces2 = traces;
  traces2.insert(traces2.end(), traces.begin(), traces.end());
  auto twice = backward(p, cfg, doubled, traces2);

  auto refs1 = tensor_refs(single, cfg);
  auto refs2 = tensor_refs(twice, cfg);
  for (std::size_t t = 0; t < refs1.size(); ++t) {
    for (std::size_t i = 0; i < refs1[t].data->size(); ++i) {
      const double a = (*refs1[t].data)[i];
      const double b = (*refs2[t].data)[i];
      EXPECT_NEAR(a, b, 1e-12 * std::max(1.0, std::abs(a))) << refs1[t].name;
    }
  }
}

TEST(Dropout, InvertedMaskIsUnbiased) {
  FcnnConfig cfg = tiny_config();  // dropout 0.5, flatten 8 entries
  RandomSource rng(101);
  const int n_masks = 10000;
  const int width = cfg.flatten_dim();
  std::vector<double> x(width);
  for (auto& v : x) v = 1.0 + rng.uniform(0.0, 2.0);
  std::vector<double> mean(width, 0.0);
  const double keep = 1.0 - cfg.dropout_rate;
  for (int t = 0; t < n_masks; ++t) {
    auto mask = draw_dropout_mask(cfg, rng);
    for (int j = 0; j < width; ++j) {
      mean[j] += mask[j] ? x[j] / keep : 0.0;
    }
  }
  double rel_sum = 0.0;
  for (int j = 0; j < width; ++j) {
    mean[j] /= n_masks;
    const double rel = std::abs(mean[j] - x[j]) / x[j];
    rel_sum += (mean[j] - x[j]) / x[j];
    EXPECT_LT(rel, 0.05) << "entry " << j;  // ~3 MC sigmas headroom
  }
  EXPECT_LT(std::abs(rel_sum) / width, 0.01);  // aggregate bias within 1%
}

TEST(CoefficientOfDetermination, KnownCases) {
  std::vector<double> targets = {1.0, 2.0, 3.0, 4.0};
  EXPECT_DOUBLE_EQ(coefficient_of_determination(targets, targets), 1.0);

  // predictions pinned at the target mean: D = theta / (theta + S) - 1 + 1
  std::vector<double> at_mean(4, 2.5);
  double s = 0.0;
  for (double t : targets) s += (t - 2.5) * (t - 2.5);
  const double theta = 1e-7;
  EXPECT_NEAR(coefficient_of_determination(at_mean, targets, theta),
              1.0 - s / (theta + s), 1e-15);
  EXPECT_NEAR(coefficient_of_determination(at_mean, targets, theta), 0.0, 1e-6);

  // constant targets with exact predictions: theta prevents 0/0
  std::vector<double> constant(5, 3.3);
  EXPECT_DOUBLE_EQ(coefficient_of_determination(constant, constant), 1.0);
}

TEST(CoefficientOfDetermination, BoundedAndStrictlyDecreasing) {
  RandomSource rng(88);
  std::vector<double> targets(10), preds(10);
  for (int i = 0; i < 10; ++i) {
    targets[i] = rng.uniform(-5.0, 5.0);
    preds[i] = rng.uniform(-5.0, 5.0);
  }
  double d = coefficient_of_determination(preds, targets);
  EXPECT_LE(d, 1.0);
  // move one prediction further from its target: D must strictly drop
  auto worse = preds;
  worse[3] += (worse[3] >= targets[3] ? 1.0 : -1.0) * 0.5;
  EXPECT_LT(coefficient_of_determination(worse, targets), d);
}

}  // namespace
