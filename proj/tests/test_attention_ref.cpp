#include <gtest/gtest.h>

#include <cmath>
#include <stdexcept>

#include "sagelab/analysis.hpp"
#include "sagelab/attention_ref.hpp"

using namespace sagelab;

namespace {

AttentionInputs random_inputs(std::size_t n, std::size_t d, double sigma, std::uint64_t seed) {
    Rng rng(seed);
    Matrix q = gaussian_matrix(n, d, sigma, rng), k = gaussian_matrix(n, d, sigma, rng);
    Matrix v = gaussian_matrix(n, d, 1.0, rng), d_o = gaussian_matrix(n, d, 1.0, rng);
    return AttentionInputs::make(q, k, v, d_o);
}

// Written without any of the library's attention code.
double loss(const Matrix& q, const Matrix& k, const Matrix& v, const Matrix& g) {
    const std::size_t n = q.rows(), d = q.cols();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> s(n);
        double mx = -1e300;
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < d; ++c) acc += q(i, c) * k(j, c);
            s[j] = acc * scale;
            mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (double& x : s) z += (x = std::exp(x - mx));
        for (std::size_t c = 0; c < d; ++c) {
            double o = 0.0;
            for (std::size_t j = 0; j < n; ++j) o += s[j] / z * v(j, c);
            total += o * g(i, c);
        }
    }
    return total;
}

enum class Wrt { q, k, v };

Matrix numeric_grad(const AttentionInputs& in, Wrt which) {
    const double h = 1e-5;
    AttentionInputs x = in;
    Matrix& target = which == Wrt::q ? x.q : which == Wrt::k ? x.k : x.v;
    Matrix grad(target.rows(), target.cols());
    for (std::size_t r = 0; r < target.rows(); ++r)
        for (std::size_t c = 0; c < target.cols(); ++c) {
            const double keep = target(r, c);
            target(r, c) = keep + h;
            const double up = loss(x.q, x.k, x.v, x.d_o);
            target(r, c) = keep - h;
            const double down = loss(x.q, x.k, x.v, x.d_o);
            target(r, c) = keep;
            grad(r, c) = (up - down) / (2 * h);
        }
    return grad;
}

}  // namespace

TEST(ForwardRef, SingleToken) {
    Matrix v{{3, -1, 2}};
    const auto tr = forward_ref(AttentionInputs::make(Matrix{{0.3, 1, 2}}, Matrix{{5, 1, -1}}, v, Matrix(1, 3)));
    EXPECT_EQ(tr.p, Matrix{{1.0}});
    EXPECT_EQ(tr.o, v);
}

TEST(ForwardRef, ZeroInputsAreUniform) {
    const auto tr = forward_ref(AttentionInputs::make(Matrix(4, 2), Matrix(4, 2), Matrix(4, 2), Matrix(4, 2)));
    for (double p : tr.p.values()) EXPECT_DOUBLE_EQ(p, 0.25);
    EXPECT_EQ(tr.o, Matrix(4, 2));
    for (double l : tr.lse) EXPECT_DOUBLE_EQ(l, std::log(4.0));
}

TEST(ForwardRef, RowsOfPSumToOne) {
    const auto tr = forward_ref(random_inputs(32, 8, 4.0, 1));
    for (double s : row_sums(tr.p)) EXPECT_NEAR(s, 1.0, 1e-10);
}

TEST(BackwardRef, ZeroUpstreamGradient) {
    auto in = random_inputs(8, 4, 1.0, 2);
    in.d_o = Matrix(8, 4);
    const auto tr = attention_ref(in);
    EXPECT_EQ(max_abs(tr.dq), 0.0);
    EXPECT_EQ(max_abs(tr.dk), 0.0);
    EXPECT_EQ(max_abs(tr.dv), 0.0);
    EXPECT_EQ(max_abs(tr.ds), 0.0);
}

TEST(BackwardRef, FiniteDifferences) {
    for (std::size_t n : {4, 8})
        for (std::size_t d : {2, 4})
            for (std::uint64_t seed = 1; seed <= 5; ++seed) {
                const auto in = random_inputs(n, d, 1.0, seed);
                const auto tr = attention_ref(in);
                EXPECT_LE(rel_l2(numeric_grad(in, Wrt::q), tr.dq), 1e-5) << n << "x" << d << " seed " << seed;
                EXPECT_LE(rel_l2(numeric_grad(in, Wrt::k), tr.dk), 1e-5) << n << "x" << d << " seed " << seed;
                EXPECT_LE(rel_l2(numeric_grad(in, Wrt::v), tr.dv), 1e-5) << n << "x" << d << " seed " << seed;
            }
}

TEST(BackwardRef, DsRowsSumToZero) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto tr = attention_ref(random_inputs(64, 16, 1.0, seed));
        for (double s : row_sums(tr.ds)) EXPECT_LE(std::abs(s), 1e-10);
    }
}

TEST(BackwardRef, AlternativeSoftmaxGradientForm) {
    const auto tr = attention_ref(random_inputs(24, 8, 2.0, 3));
    const Matrix pdp = hadamard(tr.p, tr.dp);
    const Vector rs = row_sums(pdp);
    Matrix alt = pdp;
    for (std::size_t i = 0; i < alt.rows(); ++i)
        for (std::size_t j = 0; j < alt.cols(); ++j) alt(i, j) -= rs[i] * tr.p(i, j);
    EXPECT_LE(max_abs(alt - tr.ds), 1e-10);
}

TEST(Inputs, ShapeValidation) {
    auto in = random_inputs(4, 2, 1.0, 1);
    in.v = Matrix(4, 3);
    EXPECT_THROW(forward_ref(in), std::invalid_argument);
}

TEST(Policy, DefaultsAndRoundTrip) {
    const PrecisionPolicy p;
    EXPECT_EQ(p, PrecisionPolicy::sagebwd());
    EXPECT_EQ(p.at(Site::dp), Precision::fp16_emulated);
    EXPECT_EQ(p.at(Site::pv), Precision::int8_per_token);
    EXPECT_EQ(parse_policy(to_string(p), PrecisionPolicy::all_exact()), p);
    const PrecisionPolicy q = parse_policy("qk=exact, dp=int8-per-block");
    EXPECT_EQ(q.qk, Precision::exact);
    EXPECT_EQ(q.dp, Precision::int8_per_block);
    EXPECT_EQ(q.dk, Precision::int8_per_block);
}

TEST(Policy, Errors) {
    EXPECT_THROW(parse_policy("qk=int8-per-token"), std::invalid_argument);
    EXPECT_THROW(parse_policy("xx=exact"), std::invalid_argument);
    EXPECT_THROW(parse_policy("qk=int4"), std::invalid_argument);
    EXPECT_THROW(parse_policy("qk"), std::invalid_argument);
    PrecisionPolicy p;
    p.block_q = 0;
    EXPECT_THROW(p.validate(), std::invalid_argument);
}

TEST(PseudoQuantized, AllExactIsBitIdentical) {
    const auto in = random_inputs(64, 16, 3.0, 4);
    const auto ref = attention_ref(in);
    const auto pq = pseudo_quantized_attention(in, PrecisionPolicy::all_exact(16, 32));
    EXPECT_EQ(pq.o, ref.o);
    EXPECT_EQ(pq.p, ref.p);
    EXPECT_EQ(pq.ds, ref.ds);
    EXPECT_EQ(pq.dq, ref.dq);
    EXPECT_EQ(pq.dk, ref.dk);
    EXPECT_EQ(pq.dv, ref.dv);
    EXPECT_EQ(pq.delta, ref.delta);
}

TEST(PseudoQuantized, SmoothingUnderExactPolicyMatchesOracle) {
    auto in = random_inputs(64, 16, 2.0, 5);
    in.q = in.q + Matrix(64, 16, 1.0);
    in.k = in.k + Matrix(64, 16, -3.0);
    const auto ref = attention_ref(in);
    const auto pq = pseudo_quantized_attention(in, PrecisionPolicy::all_exact(16, 16), {.k = true, .q = true});
    for (auto name : kTraceTensors) EXPECT_LE(rel_l2(trace_tensor(ref, name), trace_tensor(pq, name)), 1e-10) << name;
}

TEST(PseudoQuantized, DefaultPolicyErrorOrdering) {
    const auto in = random_inputs(512, 64, 5.0, 7);
    const auto ref = attention_ref(in);
    const auto pq = pseudo_quantized_attention(in, PrecisionPolicy::sagebwd(), {.k = true});
    const ErrorReport rep = compare_traces(ref, pq);
    const double o = rep.at("O").rel_l2, dv = rep.at("dV").rel_l2;
    EXPECT_GT(rep.at("dQ").rel_l2, std::max(o, dv));
    EXPECT_GT(rep.at("dK").rel_l2, std::max(o, dv));
    EXPECT_LE(rep.at("dP").rel_l2, 1e-3);
    EXPECT_GT(rep.at("dS").rel_l2, rep.at("P").rel_l2);
}

TEST(PseudoQuantized, ZeroUpstreamGradient) {
    auto in = random_inputs(64, 16, 1.0, 8);
    in.d_o = Matrix(64, 16);
    const auto pq = pseudo_quantized_attention(in, PrecisionPolicy::sagebwd(16, 16));
    EXPECT_EQ(max_abs(pq.dq), 0.0);
    EXPECT_EQ(max_abs(pq.dk), 0.0);
    EXPECT_EQ(max_abs(pq.dv), 0.0);
}

TEST(PseudoQuantized, RejectsNonDividingBlocks) {
    EXPECT_THROW(pseudo_quantized_attention(random_inputs(24, 4, 1.0, 1), PrecisionPolicy::sagebwd(16, 8)),
                 std::invalid_argument);
}
