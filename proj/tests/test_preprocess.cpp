#include <gtest/gtest.h>

#include <cmath>
#include <stdexcept>

#include "sagelab/analysis.hpp"
#include "sagelab/attention_ref.hpp"
#include "sagelab/preprocess.hpp"

using namespace sagelab;

namespace {

AttentionInputs random_inputs(std::size_t n, std::size_t d, double sigma, std::uint64_t seed) {
    Rng rng(seed);
    Matrix q = gaussian_matrix(n, d, sigma, rng), k = gaussian_matrix(n, d, sigma, rng);
    Matrix v = gaussian_matrix(n, d, 1.0, rng), d_o = gaussian_matrix(n, d, 1.0, rng);
    return AttentionInputs::make(q, k, v, d_o);
}

Matrix add_to_rows(const Matrix& m, const Vector& row_const) {
    Matrix out = m;
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (double& v : out.row(r)) v += row_const[r];
    return out;
}

}  // namespace

TEST(KSmooth, IdenticalRowsVanish) {
    Matrix k{{1, 2, 3}, {1, 2, 3}, {1, 2, 3}};
    auto sm = k_smooth(k);
    EXPECT_EQ(sm.value, Matrix(3, 3));
    EXPECT_EQ(sm.artifacts.mu_k, (Vector{1, 2, 3}));
}

TEST(KSmooth, ZeroMeanIsFixedPoint) {
    Matrix k{{1, -2}, {-1, 2}};
    EXPECT_EQ(k_smooth(k).value, k);
}

TEST(KSmooth, SoftmaxInvariant) {
    const auto in = random_inputs(32, 8, 2.0, 5);
    const Matrix k_sm = k_smooth(in.k + Matrix(32, 8, 3.0)).value;
    const Matrix k_off = in.k + Matrix(32, 8, 3.0);
    const Matrix p0 = row_softmax(in.head_dim_scale * matmul(in.q, transpose(k_off)));
    const Matrix p1 = row_softmax(in.head_dim_scale * matmul(in.q, transpose(k_sm)));
    EXPECT_LE(max_abs(p0 - p1), 1e-10);
}

TEST(QSmooth, SingleBlockIsGlobalMean) {
    Matrix q{{1, 4}, {3, 0}};
    auto sm = q_smooth_blockwise(q, 2);
    EXPECT_EQ(sm.value, (Matrix{{-1, 2}, {1, -2}}));
    ASSERT_EQ(sm.artifacts.mu_q_blocks.size(), 1u);
    EXPECT_EQ(sm.artifacts.mu_q_blocks[0], (Vector{2, 2}));
}

TEST(QSmooth, ConstantBlocksVanishAndReconstruct) {
    Matrix q{{1, 1}, {1, 1}, {5, -2}, {5, -2}};
    EXPECT_EQ(q_smooth_blockwise(q, 2).value, Matrix(4, 2));

    Rng rng(9);
    const Matrix r = gaussian_matrix(12, 5, 1.0, rng);
    const auto sm = q_smooth_blockwise(r, 4);
    for (std::size_t i = 0; i < 12; ++i)
        for (std::size_t c = 0; c < 5; ++c)
            EXPECT_NEAR(sm.value(i, c) + sm.artifacts.mu_q_blocks[i / 4][c], r(i, c), 1e-15);
    EXPECT_THROW(q_smooth_blockwise(r, 5), std::invalid_argument);
}

TEST(Logits, ZeroMeansGiveScaledProduct) {
    const auto in = random_inputs(8, 4, 1.0, 1);
    SmoothingArtifacts none;
    EXPECT_EQ(logits_with_smoothing(in.q, in.k, none, 0.5), 0.5 * matmul(in.q, transpose(in.k)));
}

TEST(Logits, KSmoothingKeepsSoftmax) {
    const auto in = random_inputs(16, 8, 3.0, 2);
    const auto sp = smooth_qk(in.q, in.k, 8, {.k = true, .q = false});
    const Matrix s = logits_with_smoothing(sp.q, sp.k, sp.artifacts, in.head_dim_scale);
    EXPECT_LE(max_abs(row_softmax(s) - row_softmax(in.head_dim_scale * matmul(in.q, transpose(in.k)))), 1e-10);
}

TEST(Logits, FourTermDecompositionExact) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        auto in = random_inputs(32, 8, 2.0, seed);
        in.q = in.q + Matrix(32, 8, 1.5);
        in.k = in.k + Matrix(32, 8, -4.0);
        const auto sp = smooth_qk(in.q, in.k, 8, {.k = true, .q = true});
        const Matrix s = logits_with_smoothing(sp.q, sp.k, sp.artifacts, in.head_dim_scale);
        const Matrix full = add_to_rows(s, dropped_row_terms(sp.q, sp.artifacts, in.head_dim_scale));
        const Matrix direct = in.head_dim_scale * matmul(in.q, transpose(in.k));
        EXPECT_LE(rel_l2(direct, full), 1e-10);
    }
}

TEST(DqFromSmoothedK, HandZeroSumRow) {
    Matrix ds{{1, -1, 0, 0}};
    Matrix k{{2, 7}, {5, -1}, {0, 3}, {9, 9}};
    const Matrix k_sm = k_smooth(k).value;
    EXPECT_EQ(dq_from_smoothed_k(ds, k_sm, 1.0), matmul(ds, k));
}

TEST(DqFromSmoothedK, ZeroSumRowsIdentity) {
    Rng rng(6);
    Matrix ds = gaussian_matrix(8, 12, 1.0, rng);
    for (std::size_t r = 0; r < 8; ++r) {
        double s = 0.0;
        for (double v : ds.row(r)) s += v;
        for (double& v : ds.row(r)) v -= s / 12;
    }
    const Matrix k = gaussian_matrix(12, 4, 1.0, rng) + Matrix(12, 4, 2.0);
    EXPECT_LE(max_abs(dq_from_smoothed_k(ds, k_smooth(k).value, 1.0) - matmul(ds, k)), 1e-12);
}

TEST(DqFromSmoothedK, OracleDsIdentity) {
    const auto in = random_inputs(32, 8, 1.0, 3);
    const auto tr = attention_ref(in);
    const Matrix k_sm = k_smooth(in.k).value;
    EXPECT_LE(rel_l2(tr.dq, dq_from_smoothed_k(tr.ds, k_sm, in.head_dim_scale)), 1e-10);
}

TEST(DkBias, ZeroMeanHasNoBias) {
    const auto in = random_inputs(8, 4, 1.0, 4);
    const auto tr = attention_ref(in);
    auto sm = q_smooth_blockwise(Matrix(8, 4), 4);
    EXPECT_EQ(max_abs(dk_bias_term(tr.ds, sm.artifacts, 1.0)), 0.0);
}

TEST(DkBias, ZeroColumnSumsHaveNoBias) {
    Matrix ds{{1, -2}, {-1, 2}};
    auto sm = q_smooth_blockwise(Matrix{{3, 1}, {5, 7}}, 2);
    EXPECT_EQ(max_abs(dk_bias_term(ds, sm.artifacts, 1.0)), 0.0);
}

TEST(DkBias, TotalGradientIdentity) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        const Matrix ds = gaussian_matrix(32, 32, 1.0, rng);
        const Matrix q = gaussian_matrix(32, 8, 1.0, rng) + Matrix(32, 8, 2.0);
        const auto sm = q_smooth_blockwise(q, 8);
        const Matrix ref = 0.25 * matmul(transpose(ds), q);
        EXPECT_LE(rel_l2(ref, dk_with_bias_correction(ds, sm.value, sm.artifacts, 0.25)), 1e-12);
    }
}

TEST(DkBias, RequiresQueryArtifacts) {
    EXPECT_THROW(dk_bias_term(Matrix(2, 2), SmoothingArtifacts{}, 1.0), std::invalid_argument);
}

TEST(QkNorm, OnesRow) {
    const Matrix out = rms_norm_rows(Matrix(1, 4, 1.0), {}, 1e-6);
    for (double v : out.values()) EXPECT_DOUBLE_EQ(v, 1.0 / std::sqrt(1.0 + 1e-6));
}

TEST(QkNorm, ScaleInvariantAndLinearInGamma) {
    Rng rng(12);
    const Matrix x = gaussian_matrix(3, 16, 100.0, rng);  // mean(x^2) >> eps
    const Matrix a = rms_norm_rows(x, {}, 1e-6);
    EXPECT_LE(rel_l2(a, rms_norm_rows(1000.0 * x, {}, 1e-6)), 1e-9);
    EXPECT_EQ(rms_norm_rows(x, Vector(16, 2.0), 1e-6), 2.0 * a);
    EXPECT_THROW(rms_norm_rows(x, Vector(3, 1.0), 1e-6), std::invalid_argument);
    EXPECT_THROW(rms_norm_rows(x, {}, 0.0), std::invalid_argument);
}

TEST(QkNorm, RowRmsBounded) {
    Rng rng(14);
    const auto [qn, kn] = qk_norm(gaussian_matrix(20, 8, 30.0, rng), gaussian_matrix(20, 8, 0.01, rng), {});
    for (double r : row_rms(qn)) EXPECT_LE(r, 1.0 + 1e-6);
    for (double r : row_rms(kn)) EXPECT_LE(r, 1.0 + 1e-6);
}
