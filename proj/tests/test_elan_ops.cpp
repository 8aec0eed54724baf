#include <gtest/gtest.h>

#include <random>

#include "elan/elan_ops.hpp"
#include "elan/network.hpp"
#include "elan/testing/criteria.hpp"
#include "elan/train.hpp"
#include "test_util.hpp"

using namespace elan;
using elan::test::rand;

namespace {

template <class T>
AsaWeights<T> random_asa(std::size_t in, std::size_t out, std::mt19937_64& rng, bool theta = true) {
  AsaWeights<T> w;
  if (theta) {
    w.theta.emplace(out, in, 1);
    init_conv(*w.theta, rng);
    w.bn_theta.emplace(out);
    elan::testing::detail::randomize_bn(*w.bn_theta, rng);
  }
  w.g = ConvParams<T>(out, in, 1);
  init_conv(w.g, rng);
  w.bn_g.emplace(out);
  elan::testing::detail::randomize_bn(*w.bn_g, rng);
  return w;
}

template <class T, class W>
Tensor<T> infer(const Tensor<T>& x, W&& run) {
  Tape<T> tape(false);
  return run(tape, tape.constant(x)).value();
}

Tensor<double> project(const Tensor<double>& x, const ConvParams<double>& c, const BnParams<double>& bn) {
  return batch_norm(conv2d(x, c), bn, false);
}

}  // namespace

// ---------------------------------------------------------------- spatial shift

TEST(SpatialShift, ZerosStayZeros) {
  const auto y = spatial_shift_5group(Tensor<float>(Shape{2, 10, 4, 4}));
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(SpatialShift, ConstantChannelsShowDirectionAndZeroFill) {
  Tensor<float> x(Shape{1, 5, 3, 3});
  for (std::size_t c = 0; c < 5; ++c)
    for (std::size_t i = 0; i < 9; ++i) x.plane(0, c)[i] = float(c);
  const auto y = spatial_shift_5group(x);
  for (std::size_t i = 0; i < 3; ++i) {
    // channel 0 moves left: its vacated column is the right edge
    EXPECT_EQ(y(0, 0, i, 2), 0.0f);
    // channel 1 moves right
    EXPECT_EQ(y(0, 1, i, 0), 0.0f);
    EXPECT_EQ(y(0, 1, i, 1), 1.0f);
    EXPECT_EQ(y(0, 1, i, 2), 1.0f);
    // channel 2 moves up, channel 3 down
    EXPECT_EQ(y(0, 2, 2, i), 0.0f);
    EXPECT_EQ(y(0, 2, 0, i), 2.0f);
    EXPECT_EQ(y(0, 3, 0, i), 0.0f);
    EXPECT_EQ(y(0, 3, 2, i), 3.0f);
  }
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(y.plane(0, 4)[i], 4.0f);
}

TEST(SpatialShift, ChannelZeroInteriorMovesOnePixelLeft) {
  const auto x = rand(Shape{1, 5, 3, 3}, 1);
  const auto y = spatial_shift_5group(x);
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ(y(0, 0, r, 0), x(0, 0, r, 1));
    EXPECT_EQ(y(0, 0, r, 1), x(0, 0, r, 2));
    EXPECT_EQ(y(0, 0, r, 2), 0.0);
  }
}

TEST(SpatialShift, RejectsFewerThanFiveChannels) {
  EXPECT_THROW(spatial_shift_5group(Tensor<float>(Shape{1, 4, 3, 3})), ShapeError);
}

TEST(SpatialShift, CostsNoMacs) {
  ScopedMacCounter counter;
  spatial_shift_5group(Tensor<float>(Shape{1, 10, 8, 8}));
  EXPECT_EQ(counter.counts().total(), 0u);
}

TEST(SpatialShift, RemainderChannelsStayPut) {
  const auto x = rand(Shape{1, 13, 4, 4}, 2);
  const auto y = spatial_shift_5group(x);
  // 13 channels: groups of 2, the last group holds channels 8..12
  for (std::size_t c = 8; c < 13; ++c)
    for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(y.plane(0, c)[i], x.plane(0, c)[i]);
}

// ---------------------------------------------------------------- shift conv

TEST(ShiftConv, MatchesSparseThreeByThreeConvolution) {
  std::mt19937_64 rng(3);
  for (std::size_t c : {5, 10, 12, 23}) {
    const auto x = random_tensor<float>(Shape{2, c, 6, 7}, rng);
    ConvParams<float> p(9, c, 1);
    fill_uniform(p.weight, rng);
    fill_uniform(p.bias, rng);
    const auto want = elan::testing::conv2d_oracle(x, elan::testing::sparse_shift_kernel(p.weight), p.bias);
    EXPECT_LT(max_relative_error(shift_conv(x, p).cast<double>(), want), 1e-6) << c;
    // shift followed by a plain 1x1 conv is the same thing
    EXPECT_TRUE(bit_equal(conv2d(spatial_shift_5group(x), p), shift_conv(x, p)));
  }
}

TEST(ShiftConv, IdentityOnUnshiftedGroup) {
  const auto x = rand(Shape{1, 7, 4, 5}, 4);
  ConvParams<double> p(3, 7, 1);
  for (std::size_t o = 0; o < 3; ++o) p.weight(o, 4 + o, 0, 0) = 1.0;
  const auto y = shift_conv(x, p);
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(y.plane(0, o)[i], x.plane(0, 4 + o)[i]);
}

TEST(ShiftConv, ParametersAndMacsEqualPointwiseConv) {
  for (std::size_t c : {5, 16, 60}) {
    ConvParams<float> p(c, c, 1);
    EXPECT_EQ(p.param_count(), c * c + c);
    Tensor<float> x(Shape{1, c, 6, 6});
    ScopedMacCounter a;
    shift_conv(x, p);
    const auto shifted = a.counts().total();
    a.reset();
    conv2d(x, p);
    EXPECT_EQ(shifted, a.counts().total());
  }
}

TEST(ShiftConv, RejectsNonPointwiseAndChannelMismatch) {
  Tensor<float> x(Shape{1, 6, 4, 4});
  EXPECT_THROW(shift_conv(x, ConvParams<float>(6, 6, 3)), ShapeError);
  EXPECT_THROW(shift_conv(x, ConvParams<float>(6, 7, 1)), ShapeError);
}

// ---------------------------------------------------------------- local feature block

TEST(LocalFeatureBlock, ZeroWeightsGiveIdentity) {
  const auto x = rand(Shape{2, 6, 5, 5}, 5);
  EXPECT_TRUE(bit_equal(local_feature_block(x, ConvParams<double>(12, 6, 1), ConvParams<double>(6, 12, 1)), x));
}

TEST(LocalFeatureBlock, PreservesShapeForRandomConfigs) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<std::size_t> d(1, 9);
  for (int i = 0; i < 20; ++i) {
    const std::size_t c = 5 + d(rng), e = 1 + i % 3;
    const Shape s{d(rng) % 3 + 1, c, d(rng), d(rng)};
    ConvParams<float> w1(c * e, c, 1), w2(c, c * e, 1);
    init_conv(w1, rng);
    init_conv(w2, rng);
    EXPECT_EQ(local_feature_block(random_tensor<float>(s, rng), w1, w2).shape(), s);
  }
}

TEST(LocalFeatureBlock, ZeroWeightJacobianIsIdentityByFiniteDifferences) {
  const auto x = rand(Shape{1, 5, 3, 3}, 7);
  const ConvParams<double> w1(10, 5, 1), w2(5, 10, 1);
  auto x_probe = x;
  const double h = 1e-3;
  for (std::size_t j = 0; j < x.size(); ++j) {
    x_probe[j] = x[j] + h;
    const auto up = local_feature_block(x_probe, w1, w2);
    x_probe[j] = x[j] - h;
    const auto down = local_feature_block(x_probe, w1, w2);
    x_probe[j] = x[j];
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR((up[i] - down[i]) / (2 * h), i == j ? 1.0 : 0.0, 1e-9);
  }
}

TEST(LocalFeatureBlock, RejectsChannelMismatch) {
  EXPECT_THROW(local_feature_block(Tensor<float>(Shape{1, 6, 2, 2}), ConvParams<float>(12, 5, 1),
                                   ConvParams<float>(6, 12, 1)),
               ShapeError);
  EXPECT_THROW(local_feature_block(Tensor<float>(Shape{1, 6, 2, 2}), ConvParams<float>(12, 6, 1),
                                   ConvParams<float>(5, 12, 1)),
               ShapeError);
}

// ---------------------------------------------------------------- windows

TEST(WindowPartition, FourByFourWithTwoGivesFourWindows) {
  const auto [w, layout] = window_partition(rand(Shape{1, 3, 4, 4}, 11), 2);
  EXPECT_EQ(layout.num_windows(), 4u);
  EXPECT_EQ(w.shape(), (Shape{4, 1, 4, 3}));
}

TEST(WindowPartition, RoundtripIsBitExact) {
  std::mt19937_64 rng(12);
  for (std::size_t M : {1, 2, 4, 8})
    for (std::size_t heads : {1, 2}) {
      const auto x = random_tensor<float>(Shape{2, 6, 16, 8}, rng);
      const auto [w, layout] = window_partition(x, M, heads);
      EXPECT_TRUE(bit_equal(window_reverse(w, layout), x));
    }
}

TEST(WindowPartition, ContentsMatchIndexArithmetic) {
  const auto x = rand(Shape{1, 5, 12, 8}, 13);
  const std::size_t M = 4;
  const auto [w, layout] = window_partition(x, M);
  for (std::size_t wy = 0; wy < 3; ++wy)
    for (std::size_t wx = 0; wx < 2; ++wx)
      for (std::size_t t = 0; t < M * M; ++t)
        for (std::size_t c = 0; c < 5; ++c)
          EXPECT_EQ(w(wy * 2 + wx, 0, t, c), elan::testing::window_token_oracle(x, M, wy, wx, t, c));
}

TEST(WindowPartition, NonDivisibleExtentRejected) {
  EXPECT_THROW(window_partition(Tensor<float>(Shape{1, 2, 6, 8}), 4), ShapeError);
  EXPECT_THROW(window_partition(Tensor<float>(Shape{1, 3, 8, 8}), 4, 2), ShapeError);
  const auto [w, layout] = window_partition(Tensor<float>(Shape{1, 2, 8, 8}), 4);
  EXPECT_THROW(window_reverse(Tensor<float>(Shape{1, 1, 16, 2}), layout), ShapeError);
}

// ---------------------------------------------------------------- circular shift

TEST(CircularShift, ZeroOffsetIsIdentity) {
  const auto x = rand(Shape{1, 3, 5, 6}, 14);
  EXPECT_TRUE(bit_equal(circular_shift(x, 0, 0), x));
}

TEST(CircularShift, TwoByTwoDiagonal) {
  Tensor<int> x(Shape{1, 1, 2, 2}, std::vector<int>{1, 2, 3, 4});
  const auto y = circular_shift(x, 1, 1);
  EXPECT_EQ(y(0, 0, 1, 1), 1);  // (0,0) moved to (1,1)
  EXPECT_EQ(y(0, 0, 0, 0), 4);  // (1,1) wrapped to (0,0)
  EXPECT_EQ(y(0, 0, 1, 0), 2);
  EXPECT_EQ(y(0, 0, 0, 1), 3);
}

TEST(CircularShift, RandomRoundtripsAreBitExact) {
  std::mt19937_64 rng(15);
  std::uniform_int_distribution<std::size_t> d(1, 12);
  std::uniform_int_distribution<std::ptrdiff_t> o(-30, 30);
  for (int i = 0; i < 100; ++i) {
    const auto x = random_tensor<float>(Shape{d(rng) % 3 + 1, d(rng) % 4 + 1, d(rng), d(rng)}, rng);
    const auto dy = o(rng), dx = o(rng);
    EXPECT_TRUE(bit_equal(inverse_circular_shift(circular_shift(x, dy, dx), dy, dx), x));
  }
}

TEST(CircularShift, OffsetsWrapModuloExtent) {
  const auto x = rand(Shape{1, 2, 5, 7}, 16);
  EXPECT_TRUE(bit_equal(circular_shift(x, 5, 7), x));
  EXPECT_TRUE(bit_equal(circular_shift(x, 6, -6), circular_shift(x, 1, 1)));
}

// ---------------------------------------------------------------- padding

TEST(PadToWindows, DivisibleInputIsUntouched) {
  const auto x = rand(Shape{1, 2, 16, 32}, 17);
  const auto [p, rec] = pad_to_windows(x, {4, 8, 16});
  EXPECT_TRUE(rec.empty());
  EXPECT_TRUE(bit_equal(p, x));
}

TEST(PadToWindows, TwentyPadsToThirtyTwo) {
  const auto [p, rec] = pad_to_windows(rand(Shape{1, 1, 20, 20}, 18), {4, 8, 16});
  EXPECT_EQ(p.h(), 32u);
  EXPECT_EQ(p.w(), 32u);
  EXPECT_EQ(rec.height, 20u);
  EXPECT_EQ(rec.padded_width, 32u);
}

TEST(PadToWindows, PadsToLeastCommonMultiple) {
  const auto [p, rec] = pad_to_windows(Tensor<float>(Shape{1, 1, 7, 13}), {2, 3});
  EXPECT_EQ(p.h(), 12u);
  EXPECT_EQ(p.w(), 18u);
}

TEST(PadToWindows, ReflectsWithoutRepeatingTheEdge) {
  const auto x = rand(Shape{1, 1, 5, 5}, 19);
  const auto [p, rec] = pad_to_windows(x, {8});
  EXPECT_EQ(p(0, 0, 5, 0), x(0, 0, 3, 0));
  EXPECT_EQ(p(0, 0, 0, 6), x(0, 0, 0, 2));
  EXPECT_EQ(p(0, 0, 7, 7), x(0, 0, 1, 1));
}

TEST(PadToWindows, PadThenCropRoundtripsBitExact) {
  std::mt19937_64 rng(20);
  std::uniform_int_distribution<std::size_t> d(1, 40);
  for (int i = 0; i < 50; ++i) {
    const auto x = random_tensor<float>(Shape{1, 2, d(rng), d(rng)}, rng);
    const auto [p, rec] = pad_to_windows(x, {4, 8, 16});
    EXPECT_EQ(p.h() % 16, 0u);
    EXPECT_TRUE(bit_equal(crop(p, rec), x));
  }
}

// ---------------------------------------------------------------- ASA

TEST(Asa, WindowOfOneReturnsValues) {
  std::mt19937_64 rng(21);
  const auto w = random_asa<double>(6, 4, rng);
  const auto x = rand(Shape{1, 6, 3, 5}, 22);
  Tape<double> tape(false);
  const auto r = asa_compute(tape, tape.constant(x), w, 1, 1, false);
  for (double s : r.scores.weights.value().data()) EXPECT_EQ(s, 1.0);
  EXPECT_LT(max_abs_difference(r.out.value(), project(x, w.g, *w.bn_g)), 1e-15);
}

TEST(Asa, IdenticalTokensGiveUniformScores) {
  std::mt19937_64 rng(23);
  const auto w = random_asa<double>(4, 4, rng);
  Tensor<double> x(Shape{1, 4, 8, 8});
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 64; ++i) x.plane(0, c)[i] = 0.3 * double(c) - 0.4;
  for (std::size_t M : {2, 4}) {
    Tape<double> tape(false);
    const auto r = asa_compute(tape, tape.constant(x), w, M, 1, false);
    for (double s : r.scores.weights.value().data()) EXPECT_NEAR(s, 1.0 / double(M * M), 1e-15);
  }
}

TEST(Asa, TwoByTwoMatchesDenseAttention) {
  std::mt19937_64 rng(24);
  const auto w = random_asa<double>(5, 3, rng);
  const auto x = rand(Shape{1, 5, 2, 2}, 25);
  Tape<double> tape(false);
  const auto r = asa_compute(tape, tape.constant(x), w, 2, 1, false);
  const auto want = elan::testing::dense_attention_oracle(project(x, *w.theta, *w.bn_theta), project(x, w.g, *w.bn_g));
  EXPECT_LT(max_relative_error(r.out.value(), want), 1e-6);
}

TEST(Asa, ScoreRowsSumToOneAndLogitsAreSymmetric) {
  std::mt19937_64 rng(26);
  const auto w = random_asa<float>(8, 6, rng);
  const auto x = random_tensor<float>(Shape{2, 8, 8, 8}, rng, -2, 2);
  Tape<float> tape(false);
  const auto r = asa_compute(tape, tape.constant(x), w, 4, 2, false);
  const auto& s = r.scores.weights.value();
  const auto& l = r.logits.value();
  const std::size_t L = 16;
  for (std::size_t b = 0; b < s.n(); ++b)
    for (std::size_t i = 0; i < L; ++i) {
      double sum = 0;
      for (std::size_t j = 0; j < L; ++j) {
        sum += s(b, 0, i, j);
        EXPECT_NEAR(l(b, 0, i, j), l(b, 0, j, i), 1e-6);
      }
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
}

TEST(Asa, NonDivisibleExtentAndMissingThetaRejected) {
  std::mt19937_64 rng(27);
  const auto w = random_asa<float>(4, 4, rng);
  Tape<float> tape(false);
  EXPECT_THROW(asa_compute(tape, tape.constant(Tensor<float>(Shape{1, 4, 6, 6})), w, 4, 1, false), ShapeError);
  const auto reuse_only = random_asa<float>(4, 4, rng, false);
  EXPECT_THROW(asa_compute(tape, tape.constant(Tensor<float>(Shape{1, 4, 8, 8})), reuse_only, 4, 1, false),
               ConfigError);
}

TEST(AsaReuse, SameInputReproducesComputeBitForBit) {
  std::mt19937_64 rng(28);
  const auto w = random_asa<float>(10, 5, rng);
  const auto x = random_tensor<float>(Shape{1, 10, 8, 8}, rng);
  Tape<float> tape(false);
  const auto xv = tape.constant(x);
  const auto r = asa_compute(tape, xv, w, 4, 1, false);
  EXPECT_TRUE(bit_equal(asa_reuse(tape, xv, w, r.scores, false).value(), r.out.value()));
}

TEST(AsaReuse, SkipsExactlyThetaAndScoreMacs) {
  std::mt19937_64 rng(29);
  const std::size_t C = 12, ck = 4, H = 8, W = 16, M = 4;
  const auto w = random_asa<float>(C, ck, rng);
  const auto x = random_tensor<float>(Shape{1, C, H, W}, rng);
  Tape<float> tape(false);
  const auto xv = tape.constant(x);
  ScopedMacCounter counter;
  const auto r = asa_compute(tape, xv, w, M, 1, false);
  const MacCounts compute = counter.counts();
  counter.reset();
  asa_reuse(tape, xv, w, r.scores, false);
  const MacCounts reuse = counter.counts();
  const std::uint64_t theta = C * ck * H * W, qk = M * M * H * W * ck;
  EXPECT_EQ(compute.total() - reuse.total(), theta + qk);
  EXPECT_EQ(compute.score_path, theta + qk);
  EXPECT_EQ(reuse.score_path, 0u);
}

TEST(AsaReuse, MismatchedLayoutRejected) {
  std::mt19937_64 rng(30);
  const auto w = random_asa<float>(4, 4, rng);
  Tape<float> tape(false);
  const auto r = asa_compute(tape, tape.constant(Tensor<float>(Shape{1, 4, 8, 8})), w, 4, 1, false);
  EXPECT_THROW(asa_reuse(tape, tape.constant(Tensor<float>(Shape{1, 4, 4, 4})), w, r.scores, false), ShapeError);
  EXPECT_THROW(asa_reuse(tape, tape.constant(Tensor<float>(Shape{1, 4, 8, 12})), w, r.scores, false), ShapeError);
  EXPECT_THROW(asa_reuse(tape, tape.constant(Tensor<float>(Shape{2, 4, 8, 8})), w, r.scores, false), ShapeError);
}

// ---------------------------------------------------------------- GMSA

TEST(Gmsa, SingleGlobalWindowMatchesDenseAttention) {
  std::mt19937_64 rng(31);
  const auto cfg = GmsaConfig::equal_split(6, {8});
  auto w = make_gmsa_weights<double>(cfg, 6, true, rng);
  elan::testing::detail::randomize_bn(*w.groups[0].bn_theta, rng);
  elan::testing::detail::randomize_bn(*w.groups[0].bn_g, rng);
  const auto x = rand(Shape{1, 6, 8, 8}, 32);
  const auto& g = w.groups[0];
  const auto attn = elan::testing::dense_attention_oracle(project(x, *g.theta, *g.bn_theta), project(x, g.g, *g.bn_g));
  auto want = elan::testing::conv2d_oracle(attn, w.merge.weight, w.merge.bias);
  for (std::size_t i = 0; i < want.size(); ++i) want[i] += x[i];
  const auto& cw = w;
  for (const auto phase : {ShiftPhase::none(), ShiftPhase::half_window(8)}) {
    const auto got = infer(x, [&](Tape<double>& t, Var<double> v) {
      return gmsa(t, v, cfg, cw, phase, nullptr, false).out;
    });
    EXPECT_LT(max_relative_error(got, want), 1e-6) << phase.str();
  }
}

TEST(Gmsa, ZeroMergeIsIdentity) {
  std::mt19937_64 rng(33);
  const auto cfg = GmsaConfig::equal_split(9, {2, 4, 8});
  auto w = make_gmsa_weights<float>(cfg, 9, true, rng);
  w.merge = ConvParams<float>(9, 9, 1);
  const auto& cw = w;
  const auto x = random_tensor<float>(Shape{1, 9, 12, 20}, rng);
  for (const auto phase : {ShiftPhase::none(), ShiftPhase::half_window(8)}) {
    const auto got = infer(x, [&](Tape<float>& t, Var<float> v) { return gmsa(t, v, cfg, cw, phase, nullptr, false).out; });
    EXPECT_TRUE(bit_equal(got, x)) << phase.str();
  }
}

TEST(Gmsa, AttentionCoreMacsForThreeWaySplit) {
  EXPECT_EQ(gmsa_core_macs_formula({4, 8, 16}, 32, 32, 60), 13'762'560u);
  std::mt19937_64 rng(34);
  const auto cfg = GmsaConfig::equal_split(60, {4, 8, 16});
  const auto w = make_gmsa_weights<float>(cfg, 60, true, rng);
  const auto x = random_tensor<float>(Shape{1, 60, 32, 32}, rng);
  ScopedMacCounter counter;
  infer(x, [&](Tape<float>& t, Var<float> v) { return gmsa(t, v, cfg, w, ShiftPhase::none(), nullptr, false).out; });
  EXPECT_EQ(counter.counts().matmul, 13'762'560u);
}

TEST(Gmsa, InstrumentedCoreMacsEqualFormulaForEqualSplits) {
  std::mt19937_64 rng(35);
  struct Case {
    std::vector<std::size_t> windows;
    std::size_t c, h, w;
  };
  for (const auto& k : std::vector<Case>{{{2}, 4, 8, 8}, {{2, 4}, 8, 8, 16}, {{4, 8}, 6, 16, 8}, {{2, 4, 8}, 12, 8, 24}}) {
    const auto cfg = GmsaConfig::equal_split(k.c, k.windows);
    const auto w = make_gmsa_weights<float>(cfg, k.c, true, rng);
    const auto x = random_tensor<float>(Shape{1, k.c, k.h, k.w}, rng);
    ScopedMacCounter counter;
    infer(x, [&](Tape<float>& t, Var<float> v) { return gmsa(t, v, cfg, w, ShiftPhase::none(), nullptr, false).out; });
    EXPECT_EQ(counter.counts().matmul, gmsa_core_macs_formula(k.windows, k.h, k.w, k.c)) << k.c;
  }
}

TEST(Gmsa, PadsNonDivisibleInputsAndKeepsShape) {
  std::mt19937_64 rng(36);
  const auto cfg = GmsaConfig::equal_split(6, {2, 4});
  const auto w = make_gmsa_weights<float>(cfg, 6, true, rng);
  const auto x = random_tensor<float>(Shape{1, 6, 7, 10}, rng);
  const auto y = infer(x, [&](Tape<float>& t, Var<float> v) {
    return gmsa(t, v, cfg, w, ShiftPhase::half_window(4), nullptr, false).out;
  });
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_TRUE(y.all_finite());
}

TEST(Gmsa, SharedScoresOnSameInputMatchComputedOutput) {
  std::mt19937_64 rng(37);
  const auto cfg = GmsaConfig::equal_split(8, {2, 4});
  const auto w = make_gmsa_weights<float>(cfg, 8, true, rng);
  const auto x = random_tensor<float>(Shape{1, 8, 8, 8}, rng);
  Tape<float> tape(false);
  const auto xv = tape.constant(x);
  const auto phase = ShiftPhase::half_window(4);
  const auto first = gmsa(tape, xv, cfg, w, phase, nullptr, false);
  const auto second = gmsa(tape, xv, cfg, w, phase, &first.scores, false);
  EXPECT_TRUE(bit_equal(second.out.value(), first.out.value()));
  EXPECT_TRUE(second.logits.empty());
}

TEST(Gmsa, InvalidConfigAndSharedMismatchRejected) {
  std::mt19937_64 rng(38);
  auto cfg = GmsaConfig::equal_split(8, {2, 4});
  const auto w = make_gmsa_weights<float>(cfg, 8, true, rng);
  Tape<float> tape(false);
  const auto x = tape.constant(Tensor<float>(Shape{1, 8, 8, 8}));
  EXPECT_THROW(gmsa(tape, tape.constant(Tensor<float>(Shape{1, 9, 8, 8})), cfg, w, ShiftPhase::none(), nullptr, false),
               ConfigError);
  const auto r = gmsa(tape, x, cfg, w, ShiftPhase::none(), nullptr, false);
  EXPECT_THROW(gmsa(tape, x, cfg, w, ShiftPhase::half_window(4), &r.scores, false), ShapeError);
  auto fewer = r.scores;
  fewer.groups.pop_back();
  EXPECT_THROW(gmsa(tape, x, cfg, w, ShiftPhase::none(), &fewer, false), ShapeError);
  auto swapped = r.scores;
  std::swap(swapped.groups[0], swapped.groups[1]);
  EXPECT_THROW(gmsa(tape, x, cfg, w, ShiftPhase::none(), &swapped, false), ShapeError);
  GmsaConfig bad{{2, 4}, {4}, 1};
  EXPECT_THROW(bad.validate(4), ConfigError);
  EXPECT_THROW(GmsaConfig::equal_split(8, {}), ConfigError);
  GmsaConfig heads{{2, 4}, {4, 4}, 3};
  EXPECT_THROW(heads.validate(8), ConfigError);
}

TEST(Gmsa, EqualSplitGivesRemainderToLastGroup) {
  const auto cfg = GmsaConfig::equal_split(62, {4, 8, 16});
  EXPECT_EQ(cfg.group_channels, (std::vector<std::size_t>{20, 20, 22}));
}

// ---------------------------------------------------------------- ELAB

TEST(Elab, ZeroWeightsGiveIdentity) {
  const auto cfg = GmsaConfig::equal_split(10, {2, 4});
  ElabWeights<float> w;
  w.expand = ConvParams<float>(20, 10, 1);
  w.reduce = ConvParams<float>(10, 20, 1);
  w.attention.merge = ConvParams<float>(10, 10, 1);
  for (std::size_t k = 0; k < 2; ++k) {
    AsaWeights<float> a;
    a.theta.emplace(5, 10, 1);
    a.bn_theta.emplace(5);
    a.g = ConvParams<float>(5, 10, 1);
    a.bn_g.emplace(5);
    w.attention.groups.push_back(a);
  }
  std::mt19937_64 rng(39);
  const auto x = random_tensor<float>(Shape{1, 10, 8, 8}, rng);
  const auto& cw = w;
  for (const auto phase : {ShiftPhase::none(), ShiftPhase::half_window(4)}) {
    const auto y =
        infer(x, [&](Tape<float>& t, Var<float> v) { return elab_forward(t, v, cfg, cw, phase, nullptr, false).out; });
    EXPECT_TRUE(bit_equal(y, x));
  }
}

TEST(Elab, PreservesShapeForRandomConfigs) {
  std::mt19937_64 rng(40);
  std::uniform_int_distribution<std::size_t> d(1, 20);
  for (int i = 0; i < 12; ++i) {
    const std::size_t C = 6 + 2 * (d(rng) % 6);
    const auto cfg = GmsaConfig::equal_split(C, i % 2 ? std::vector<std::size_t>{2, 4} : std::vector<std::size_t>{4});
    ElabWeights<float> w;
    w.expand = ConvParams<float>(2 * C, C, 1);
    w.reduce = ConvParams<float>(C, 2 * C, 1);
    init_conv(w.expand, rng);
    init_conv(w.reduce, rng);
    w.attention = make_gmsa_weights<float>(cfg, C, true, rng);
    const auto x = random_tensor<float>(Shape{1, C, d(rng), d(rng)}, rng);
    const auto& cw = w;
    const auto y = infer(x, [&](Tape<float>& t, Var<float> v) {
      return elab_forward(t, v, cfg, cw, ShiftPhase::half_window(cfg.max_window()), nullptr, false).out;
    });
    EXPECT_EQ(y.shape(), x.shape());
  }
}

// Full-block check on a score-reusing ELAB: 64-bit central differences, step 1e-3.
TEST(Elab, ReusingBlockAgainstFiniteDifferences) {
  std::mt19937_64 rng(41);
  const auto cfg = GmsaConfig::equal_split(8, {2, 4});
  auto make = [&](bool theta) {
    ElabWeights<double> w;
    w.expand = ConvParams<double>(16, 8, 1);
    w.reduce = ConvParams<double>(8, 16, 1);
    init_conv(w.expand, rng);
    init_conv(w.reduce, rng);
    w.attention = make_gmsa_weights<double>(cfg, 8, theta, rng);
    for (auto& g : w.attention.groups) {
      if (g.bn_theta) elan::testing::detail::randomize_bn(*g.bn_theta, rng);
      elan::testing::detail::randomize_bn(*g.bn_g, rng);
    }
    return w;
  };
  const auto first = make(true);
  auto second = make(false);
  const auto& cs = second;
  const auto x = random_tensor<double>(Shape{1, 8, 8, 8}, rng);
  auto run = [&](Tape<double>& t) {
    const auto a = elab_forward(t, t.constant(x), cfg, first, ShiftPhase::none(), nullptr, true);
    return elab_forward(t, a.out, cfg, cs, ShiftPhase::none(), &a.scores, true).out;
  };
  auto predict = [&] {
    Tape<double> t(false);
    return run(t).value();
  };
  Tensor<double> target = predict();
  for (std::size_t i = 0; i < target.size(); ++i) target[i] += i % 2 ? 0.5 : -0.5;
  Tape<double> tape;
  tape.backward(l1_loss(tape, run(tape), target));
  std::vector<Tensor<double>*> params;
  std::vector<Tensor<double>> analytic;
  auto take = [&](Tensor<double>& t) {
    params.push_back(&t);
    analytic.push_back(tape.gradient(t));
  };
  take(second.expand.weight), take(second.expand.bias), take(second.reduce.weight), take(second.reduce.bias);
  for (auto& g : second.attention.groups) take(g.g.weight), take(g.g.bias), take(g.bn_g->gamma), take(g.bn_g->beta);
  take(second.attention.merge.weight), take(second.attention.merge.bias);
  const auto loss = [&] { return l1_loss(predict(), target); };
  const auto r = elan::testing::finite_difference_check(params, analytic, loss, 1e-3, 1e-6, 1e-4);
  // Diagnostic only: step 1e-5 keeps the differences off ReLU kinks.
  const auto fine = elan::testing::finite_difference_check(params, analytic, loss, 1e-5, 1e-6, 1e-4);
  EXPECT_TRUE(elan::test::gradients_ok(r)) << "; at step 1e-5 the max relative error is " << fine.max_relative_error;
}
