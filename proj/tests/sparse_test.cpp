#include <gtest/gtest.h>

#include "dynhead/conv.hpp"
#include "dynhead/gates.hpp"
#include "dynhead/ops.hpp"
#include "dynhead/sparse.hpp"
#include "oracles.hpp"

using namespace dynhead;

namespace {

Tensor random_mask(Rng& rng, int b, int h, int w, double density) {
    Tensor m = Tensor::zeros({b, 1, h, w});
    for (auto& v : m.values_mut()) v = rng.uniform() < density ? 1.0 : 0.0;
    return m;
}

} // namespace

TEST(DilateMask, ZeroMapStaysZero) {
    Tape tape;
    GatingMap m{Tensor::zeros({1, 1, 5, 5})};
    Tensor d = dilate_mask(tape, m, 2);
    for (double v : d.values()) EXPECT_EQ(v, 0.0);
}

TEST(DilateMask, SinglePositiveGrowsToReceptiveField) {
    Tape tape;
    Tensor g = Tensor::zeros({1, 1, 7, 7});
    g.at(0, 0, 3, 3) = 0.6;
    Tensor d = dilate_mask(tape, GatingMap{g}, 1);
    for (int y = 0; y < 7; ++y)
        for (int x = 0; x < 7; ++x) {
            const bool inside = std::abs(y - 3) <= 1 && std::abs(x - 3) <= 1;
            EXPECT_EQ(d.at(0, 0, y, x), inside ? 0.6 : 0.0);
        }
}

TEST(DilateMask, MatchesBruteForceWindowMax) {
    Rng rng(41);
    for (int depth = 1; depth <= 3; ++depth) {
        Tensor g = rng.tensor_uniform({2, 1, 9, 9}, 0.0, 1.0);
        Tape tape;
        Tensor d = dilate_mask(tape, GatingMap{g}, depth);
        EXPECT_EQ(oracles::max_abs_diff(d, oracles::window_max_reference(g, depth)), 0.0);
    }
}

TEST(DilateMask, DensityMonotoneInDepth) {
    Rng rng(42);
    Tensor g = random_mask(rng, 1, 12, 12, 0.1);
    double prev = -1.0;
    for (int depth = 1; depth <= 4; ++depth) {
        Tape tape;
        SpatialMask m = quantize_mask(dilate_mask(tape, GatingMap{g}, depth));
        EXPECT_GE(m.density(), prev);
        prev = m.density();
    }
}

TEST(DilateMask, SupersetOfGateSupport) {
    Rng rng(43);
    Tensor g = rng.tensor_uniform({1, 1, 8, 8}, 0.0, 1.0);
    for (auto& v : g.values_mut())
        if (v < 0.7) v = 0.0;
    Tape tape;
    SpatialMask m = quantize_mask(dilate_mask(tape, GatingMap{g}, 1));
    for (std::int64_t i = 0; i < g.numel(); ++i)
        if (g.values()[i] > 0.0) EXPECT_EQ(m.values.values()[i], 1.0);
}

TEST(QuantizeMask, ThresholdAtExactlyZero) {
    Tensor all03 = Tensor::filled({1, 1, 2, 2}, 0.3);
    SpatialMask m1 = quantize_mask(all03);
    for (double v : m1.values.values()) EXPECT_EQ(v, 1.0);

    SpatialMask m2 = quantize_mask(Tensor::zeros({1, 1, 2, 2}));
    for (double v : m2.values.values()) EXPECT_EQ(v, 0.0);

    Tensor mixed = Tensor::from_values({1, 1, 1, 3}, {0.0, 1e-9, 0.7});
    SpatialMask m3 = quantize_mask(mixed);
    EXPECT_EQ(m3.values.values()[0], 0.0);
    EXPECT_EQ(m3.values.values()[1], 1.0);
    EXPECT_EQ(m3.values.values()[2], 1.0);

    EXPECT_THROW(quantize_mask(Tensor::from_values({1, 1, 1, 1}, {-0.1})), std::invalid_argument);
}

TEST(SparseConv, FullMaskIsBitwiseEqualToDense) {
    Rng rng(44);
    Tensor x = rng.tensor_uniform({2, 4, 6, 6}, -1.0, 1.0);
    Tensor w = rng.tensor_uniform({4, 4, 3, 3}, -1.0, 1.0);
    Tensor b = rng.tensor_uniform({1, 4, 1, 1}, -1.0, 1.0);
    SpatialMask full{Tensor::filled({2, 1, 6, 6}, 1.0)};
    Tape tape;
    Tensor dense = conv2d(tape, x, w, b, 1);
    Tensor sparse = sparse_conv2d(tape, x, w, b, 1, full);
    for (std::int64_t i = 0; i < dense.numel(); ++i)
        EXPECT_EQ(sparse.values()[i], dense.values()[i]);
}

TEST(SparseConv, EmptyMaskDoesNoWork) {
    Rng rng(45);
    Tensor x = rng.tensor_uniform({1, 4, 5, 5}, -1.0, 1.0);
    Tensor w = rng.tensor_uniform({4, 4, 3, 3}, -1.0, 1.0);
    SpatialMask empty{Tensor::zeros({1, 1, 5, 5})};
    Tape tape;
    Tensor out = sparse_conv2d(tape, x, w, {}, 1, empty);
    for (double v : out.values()) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(count_sparse_macs(w.shape(), 1, empty), 0);
    std::int64_t counter = 0;
    oracles::sparse_conv2d_instrumented(x, w, {}, 1, empty.values, &counter);
    EXPECT_EQ(counter, 0);
}

TEST(SparseConv, MatchesDenseThenMaskOracle) {
    Rng rng(46);
    for (int trial = 0; trial < 200; ++trial) {
        const int c = 2 * (1 + static_cast<int>(rng.uniform_int(3)));
        const int groups = trial % 2 == 0 ? 1 : c;
        const int h = 3 + static_cast<int>(rng.uniform_int(5));
        const int w = 3 + static_cast<int>(rng.uniform_int(5));
        Tensor x = rng.tensor_uniform({1, c, h, w}, -1.0, 1.0);
        Tensor wt = rng.tensor_uniform({c, c / groups, 3, 3}, -1.0, 1.0);
        Tensor bias = trial % 3 == 0 ? rng.tensor_uniform({1, c, 1, 1}, -1.0, 1.0) : Tensor{};
        SpatialMask mask{random_mask(rng, 1, h, w, rng.uniform(0.1, 0.9))};

        Tape tape;
        Tensor sparse = sparse_conv2d(tape, x, wt, bias, groups, mask);
        Tensor dense_masked = mul_map(tape, conv2d(tape, x, wt, bias, groups), mask.values);
        EXPECT_LT(oracles::max_abs_diff(sparse, dense_masked), 1e-12);
    }
}

TEST(SparseConv, RejectsResolutionMismatch) {
    Tape tape;
    Tensor x = Tensor::zeros({1, 2, 4, 4});
    Tensor w = Tensor::zeros({2, 2, 3, 3});
    SpatialMask bad{Tensor::zeros({1, 1, 5, 4})};
    EXPECT_THROW(sparse_conv2d(tape, x, w, {}, 1, bad), std::invalid_argument);
}

TEST(SparseConvMacs, FullMaskFormula) {
    SpatialMask full{Tensor::filled({1, 1, 6, 5}, 1.0)};
    // c_in = c_out = 8, groups = 1
    EXPECT_EQ(count_sparse_macs({8, 8, 3, 3}, 1, full), 6 * 5 * 8 * 8 * 9);
}

TEST(SparseConvMacs, MatchesInstrumentedOracle) {
    Rng rng(47);
    for (int trial = 0; trial < 20; ++trial) {
        const int c = 4;
        const int groups = trial % 2 == 0 ? 1 : c;
        Tensor x = rng.tensor_uniform({2, c, 6, 6}, -1.0, 1.0);
        Tensor w = rng.tensor_uniform({c, c / groups, 3, 3}, -1.0, 1.0);
        SpatialMask mask{random_mask(rng, 2, 6, 6, rng.uniform(0.0, 1.0))};
        std::int64_t counter = 0;
        oracles::sparse_conv2d_instrumented(x, w, {}, groups, mask.values, &counter);
        EXPECT_EQ(count_sparse_macs(w.shape(), groups, mask), counter);
    }
}

TEST(SparseConvMacs, CostProportionalToDensityExactly) {
    Rng rng(48);
    SpatialMask mask{random_mask(rng, 1, 8, 8, 0.37)};
    const Shape ws{8, 8, 3, 3};
    const std::int64_t sparse = count_sparse_macs(ws, 1, mask);
    SpatialMask full{Tensor::filled({1, 1, 8, 8}, 1.0)};
    const std::int64_t dense = count_sparse_macs(ws, 1, full);
    // sparse / dense == enabled / total as exact integers
    EXPECT_EQ(sparse * (8 * 8), dense * mask.enabled());
}

TEST(SparseConv, BackwardMatchesDenseThenMaskComposition) {
    Rng rng(49);
    Tensor x = rng.tensor_uniform({1, 4, 5, 5}, -1.0, 1.0);
    Tensor w = rng.tensor_uniform({4, 4, 3, 3}, -0.5, 0.5);
    Tensor b = rng.tensor_uniform({1, 4, 1, 1}, -0.5, 0.5);
    SpatialMask mask{random_mask(rng, 1, 5, 5, 0.5)};

    Tensor x2 = x.clone(), w2 = w.clone(), b2 = b.clone();
    Tape t1;
    Tensor loss1 = sum_all(t1, relu(t1, sparse_conv2d(t1, x, w, b, 1, mask)));
    t1.backward(loss1);
    Tape t2;
    Tensor loss2 =
        sum_all(t2, relu(t2, mul_map(t2, conv2d(t2, x2, w2, b2, 1), mask.values)));
    t2.backward(loss2);

    for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(x.grad()[i], x2.grad()[i], 1e-12);
    for (std::int64_t i = 0; i < w.numel(); ++i) EXPECT_NEAR(w.grad()[i], w2.grad()[i], 1e-12);
    for (std::int64_t i = 0; i < b.numel(); ++i) EXPECT_NEAR(b.grad()[i], b2.grad()[i], 1e-12);

    // and against finite differences of the sparse path itself
    auto forward = [&]() {
        Tape t;
        return sum_all(t, relu(t, sparse_conv2d(t, x, w, b, 1, mask))).values()[0];
    };
    double worst = 0.0;
    for (std::int64_t i = 0; i < w.numel(); i += 7) {
        const double num = oracles::finite_diff(forward, w, i);
        worst = std::max(worst, oracles::rel_err(w.grad()[i], num));
    }
    EXPECT_LT(worst, 1e-5);
}

TEST(SpatialMask, DensityAndPerSampleCounts) {
    Tensor v = Tensor::zeros({2, 1, 2, 2});
    v.at(0, 0, 0, 0) = 1.0;
    v.at(1, 0, 1, 1) = 1.0;
    v.at(1, 0, 0, 1) = 1.0;
    SpatialMask m{v, 1, 0, 2};
    EXPECT_EQ(m.enabled(), 3);
    EXPECT_EQ(m.enabled_in_sample(0), 1);
    EXPECT_EQ(m.enabled_in_sample(1), 2);
    EXPECT_DOUBLE_EQ(m.density(), 3.0 / 8.0);
    EXPECT_EQ(m.scale, 1);
    EXPECT_EQ(m.path, 2);
}
