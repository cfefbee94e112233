#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <stdexcept>
#include <vector>

#include "sagelab/analysis.hpp"
#include "sagelab/quant.hpp"

using namespace sagelab;

TEST(Quant, UnitScaleAndHalfToEven) {
    QuantizedBlock q = quantize_per_block(Matrix{{127, -127}, {0, 63.5}});
    EXPECT_EQ(q.scale, 1.0);
    EXPECT_EQ(q.values, (std::vector<std::int8_t>{127, -127, 0, 64}));
    q = quantize_per_block(Matrix{{254, 1, 3, 5, -5}});
    EXPECT_EQ(q.scale, 2.0);
    EXPECT_EQ(q.values, (std::vector<std::int8_t>{127, 0, 2, 2, -2}));
}

TEST(Quant, ZeroTile) {
    QuantizedBlock q = quantize_per_block(Matrix(3, 4));
    EXPECT_EQ(q.scale, kZeroTileScale);
    EXPECT_TRUE(std::all_of(q.values.begin(), q.values.end(), [](auto v) { return v == 0; }));
    EXPECT_EQ(dequantize(q), Matrix(3, 4));
}

TEST(Quant, RejectsNonFinite) {
    Matrix x(2, 2, 1.0);
    x(0, 1) = std::numeric_limits<double>::infinity();
    EXPECT_THROW(quantize_per_block(x), std::invalid_argument);
}

TEST(Quant, DequantizeSingleEntry) {
    QuantizedBlock q{1, 1, {127}, 0.01};
    EXPECT_DOUBLE_EQ(dequantize(q)(0, 0), 1.27);
}

TEST(Quant, RoundTripBoundAndSaturation) {
    Rng rng(17);
    for (int t = 0; t < 200; ++t) {
        const Matrix x = gaussian_matrix(64, 64, 0.1 + t * 0.05, rng);
        const QuantizedBlock q = quantize_per_block(x);
        const Matrix r = dequantize(q);
        int peak = 0;
        for (auto v : q.values) peak = std::max(peak, std::abs(static_cast<int>(v)));
        ASSERT_EQ(peak, 127);
        for (std::size_t k = 0; k < x.size(); ++k)
            ASSERT_LE(std::abs(x.values()[k] - r.values()[k]), q.scale / 2 + 1e-12);
    }
}

TEST(Quant, GridInputsAreFixedPoints) {
    Rng rng(2);
    Matrix x(8, 8);
    const double s = 0.37;
    for (auto& v : x.values()) v = std::round((rng.uniform() * 2 - 1) * 127) * s;
    x(0, 0) = 127 * s;
    const Matrix once = fake_quantize(x);
    for (std::size_t k = 0; k < x.size(); ++k) EXPECT_NEAR(once.values()[k], x.values()[k], 1e-15);
    EXPECT_EQ(fake_quantize(once), once);
}

TEST(Quant, RoundTripIdempotent) {
    Rng rng(4);
    const Matrix once = fake_quantize(gaussian_matrix(16, 16, 3.0, rng));
    EXPECT_EQ(fake_quantize(once), once);
}

TEST(Quant, Fp32ScaleIsFloatRepresentable) {
    const QuantizedBlock q = quantize_per_block(Matrix{{0.1, -0.3}}, {.fp32_scale = true});
    EXPECT_EQ(q.scale, static_cast<double>(static_cast<float>(0.3 / 127)));
}

TEST(PerTokenQuant, OwnerRowAttains127) {
    const Matrix pt{{1.0, 0.5}, {0.25, 0.125}};
    const std::vector<double> rowmax{2.0, 1.0}, m{2.0, 1.0 + std::log(4.0)};
    const PerTokenQuantizedBlock q = quantize_p_per_token(pt, rowmax, m);
    EXPECT_DOUBLE_EQ(q.scales[0], 1.0 / 127);
    EXPECT_EQ(q.at(0, 0), 127);
    EXPECT_EQ(q.at(0, 1), 64);
    EXPECT_NEAR(q.scales[1], 0.25 / 127, 1e-18);
    EXPECT_EQ(q.at(1, 0), 127);
}

TEST(PerTokenQuant, SubordinateRowsDoNotClamp) {
    Rng rng(8);
    Matrix pt(4, 16);
    for (auto& v : pt.values()) v = rng.uniform() / 127.0;
    const std::vector<double> m(4, 0.0), rowmax(4, -std::log(127.0));
    const PerTokenQuantizedBlock q = quantize_p_per_token(pt, rowmax, m);
    for (std::size_t r = 0; r < 4; ++r) {
        EXPECT_NEAR(q.scales[r], 1.0 / (127.0 * 127.0), 1e-18);
        for (std::size_t c = 0; c < 16; ++c) {
            EXPECT_GE(q.at(r, c), 0);
            EXPECT_LE(std::abs(pt(r, c) - q.at(r, c) * q.scales[r]), q.scales[r] / 2 + 1e-18);
        }
    }
}

TEST(PerTokenQuant, RejectsRowMaxAboveRunningMax) {
    const std::vector<double> rowmax{1.0}, m{0.5};
    EXPECT_THROW(quantize_p_per_token(Matrix{{1.0}}, rowmax, m), std::invalid_argument);
}

TEST(QuantMatmul, GridInputsAreExact) {
    const Matrix eye = 127.0 * Matrix::identity(2);
    const Matrix x{{3, -5}, {127, 1}};
    const QuantizedBlock a = quantize_per_block(eye), b = quantize_per_block(x);
    EXPECT_EQ(quantized_matmul(a, b), matmul(eye, x));
}

TEST(QuantMatmul, MatchesDequantizedProductAllTransposes) {
    Rng rng(13);
    const Matrix a = gaussian_matrix(12, 20, 1.0, rng), b = gaussian_matrix(20, 9, 2.0, rng);
    const QuantizedBlock qa = quantize_per_block(a), qb = quantize_per_block(b);
    const QuantizedBlock qat = quantize_per_block(transpose(a)), qbt = quantize_per_block(transpose(b));
    const Matrix ref = matmul(dequantize(qa), dequantize(qb));
    EXPECT_LE(rel_l2(ref, quantized_matmul(qa, qb)), 1e-12);
    EXPECT_LE(rel_l2(matmul(transpose(dequantize(qat)), dequantize(qb)),
                     quantized_matmul(qat, qb, Trans::transpose, Trans::none)), 1e-12);
    EXPECT_LE(rel_l2(matmul(dequantize(qa), transpose(dequantize(qbt))),
                     quantized_matmul(qa, qbt, Trans::none, Trans::transpose)), 1e-12);
    EXPECT_THROW(quantized_matmul(qa, qa), std::invalid_argument);
}

TEST(QuantMatmul, PerTokenLeftOperand) {
    Rng rng(21);
    Matrix s = gaussian_matrix(8, 16, 2.0, rng);
    const Vector mx = row_max(s);
    Matrix pt(8, 16);
    for (std::size_t r = 0; r < 8; ++r)
        for (std::size_t c = 0; c < 16; ++c) pt(r, c) = std::exp(s(r, c) - mx[r]);
    const PerTokenQuantizedBlock qp = quantize_p_per_token(pt, mx, mx);
    const QuantizedBlock qv = quantize_per_block(gaussian_matrix(16, 4, 1.0, rng));
    EXPECT_LE(rel_l2(matmul(dequantize(qp), dequantize(qv)), quantized_matmul(qp, qv)), 1e-12);
}

TEST(QuantMatmul, GaussianErrorSmall) {
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed);
        const Matrix a = gaussian_matrix(64, 64, 1.0, rng), b = gaussian_matrix(64, 64, 1.0, rng);
        worst = std::max(worst, rel_l2(matmul(a, b),
                                       quantized_matmul(quantize_per_block(a), quantize_per_block(b))));
    }
    EXPECT_LE(worst, 0.03);
}

// Per-block INT8 error of a product is scale-free, so scaling both inputs by
// sigma leaves it unchanged up to rounding of the scale factor itself.
TEST(QuantMatmul, ErrorNonDecreasingInSigmaMajority) {
    const std::vector<double> sigmas{1, 3, 5, 8, 10};
    std::vector<int> votes(sigmas.size() - 1, 0);
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        std::vector<double> err;
        for (double sg : sigmas) {
            Rng rng(seed);
            const Matrix a = gaussian_matrix(64, 64, sg, rng), b = gaussian_matrix(64, 64, sg, rng);
            err.push_back(rel_l2(matmul(a, b), quantized_matmul(quantize_per_block(a), quantize_per_block(b))));
        }
        for (std::size_t k = 0; k + 1 < err.size(); ++k)
            if (err[k + 1] >= err[k] * (1 - 1e-9)) ++votes[k];
    }
    for (int v : votes) EXPECT_GT(v, 10);
}

TEST(QuantMatmul, OverflowGuard) {
    const std::size_t k = std::numeric_limits<std::int32_t>::max() / (127 * 127) + 1;
    QuantizedBlock a{1, k, std::vector<std::int8_t>(k, 1), 1.0};
    EXPECT_THROW(quantized_matmul(a, a, Trans::none, Trans::transpose), std::length_error);
}
