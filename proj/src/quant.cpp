#include "sagelab/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace sagelab {

namespace {

// Largest inner dimension for which K * 127^2 still fits in int32.
constexpr std::size_t kMaxInnerDim = static_cast<std::size_t>(
    std::numeric_limits<std::int32_t>::max() / (kInt8Max * kInt8Max));

double store_scale(double s, QuantOptions opts) {
    return opts.fp32_scale ? static_cast<double>(static_cast<float>(s)) : s;
}

std::int8_t quantize_value(double v, double scale, int lo) {
    // nearbyint honours the default round-to-nearest-even mode.
    const double q = std::nearbyint(v / scale);
    return static_cast<std::int8_t>(std::clamp(q, static_cast<double>(lo), double{kInt8Max}));
}

// Row-major int8 operand already laid out as (outer x inner).
struct Packed {
    std::size_t outer = 0;
    std::size_t inner = 0;
    std::vector<std::int8_t> v;
};

Packed pack(const std::vector<std::int8_t>& values, std::size_t rows, std::size_t cols,
            bool transpose) {
    Packed p;
    if (!transpose) {
        p.outer = rows;
        p.inner = cols;
        p.v = values;
        return p;
    }
    p.outer = cols;
    p.inner = rows;
    p.v.resize(values.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) p.v[c * rows + r] = values[r * cols + c];
    return p;
}

// lhs is (M x K), rhs_t is (N x K): returns the M x N int32 product.
std::vector<std::int32_t> int_gemm_nt(const Packed& lhs, const Packed& rhs_t) {
    if (lhs.inner != rhs_t.inner) {
        throw std::invalid_argument("quantized_matmul: inner dimension mismatch " +
                                    std::to_string(lhs.inner) + " vs " +
                                    std::to_string(rhs_t.inner));
    }
    if (lhs.inner > kMaxInnerDim) {
        throw std::length_error("quantized_matmul: inner dimension would overflow int32");
    }
    const std::size_t m = lhs.outer, n = rhs_t.outer, k = lhs.inner;
    std::vector<std::int32_t> acc(m * n, 0);
    for (std::size_t i = 0; i < m; ++i) {
        const std::int8_t* a = lhs.v.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const std::int8_t* b = rhs_t.v.data() + j * k;
            std::int32_t s = 0;
            for (std::size_t t = 0; t < k; ++t)
                s += static_cast<std::int32_t>(a[t]) * static_cast<std::int32_t>(b[t]);
            acc[i * n + j] = s;
        }
    }
    return acc;
}

void require_finite(const Matrix& x, const char* what) {
    if (!all_finite(x)) throw std::invalid_argument(std::string(what) + ": non-finite input");
}

}  // namespace

QuantizedBlock quantize_per_block(const Matrix& x, QuantOptions opts) {
    require_finite(x, "quantize_per_block");
    QuantizedBlock q;
    q.rows = x.rows();
    q.cols = x.cols();
    q.values.assign(x.size(), 0);
    const double amax = max_abs(x);
    if (amax == 0.0) {
        q.scale = kZeroTileScale;
        return q;
    }
    q.scale = store_scale(amax / kInt8Max, opts);
    if (!(q.scale > 0.0) || !std::isfinite(q.scale)) {
        throw std::domain_error("quantize_per_block: scale not representable");
    }
    auto src = x.values();
    for (std::size_t k = 0; k < src.size(); ++k) q.values[k] = quantize_value(src[k], q.scale, -kInt8Max);
    return q;
}

Matrix dequantize(const QuantizedBlock& q) {
    Matrix out(q.rows, q.cols);
    auto dst = out.values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = q.values[k] * q.scale;
    return out;
}

Matrix dequantize(const PerTokenQuantizedBlock& q) {
    Matrix out(q.rows, q.cols);
    for (std::size_t r = 0; r < q.rows; ++r)
        for (std::size_t c = 0; c < q.cols; ++c) out(r, c) = q.at(r, c) * q.scales[r];
    return out;
}

PerTokenQuantizedBlock quantize_p_per_token(const Matrix& p_tilde,
                                            std::span<const double> rowmax_s,
                                            std::span<const double> running_max,
                                            QuantOptions opts) {
    if (rowmax_s.size() != p_tilde.rows() || running_max.size() != p_tilde.rows()) {
        throw std::invalid_argument("quantize_p_per_token: row vector length mismatch");
    }
    PerTokenQuantizedBlock q;
    q.rows = p_tilde.rows();
    q.cols = p_tilde.cols();
    q.values.assign(p_tilde.size(), 0);
    q.scales.resize(q.rows);
    for (std::size_t r = 0; r < q.rows; ++r) {
        if (rowmax_s[r] > running_max[r] + 1e-9) {
            throw std::invalid_argument("quantize_p_per_token: row " + std::to_string(r) +
                                        " max exceeds running max");
        }
        double s = store_scale(std::exp(rowmax_s[r] - running_max[r]) / kInt8Max, opts);
        if (!(s > 0.0)) s = kZeroTileScale;
        q.scales[r] = s;
        const auto row = p_tilde.row(r);
        for (std::size_t c = 0; c < q.cols; ++c) q.values[r * q.cols + c] = quantize_value(row[c], s, 0);
    }
    return q;
}

PerTokenQuantizedBlock quantize_per_token(const Matrix& x, QuantOptions opts) {
    require_finite(x, "quantize_per_token");
    PerTokenQuantizedBlock q;
    q.rows = x.rows();
    q.cols = x.cols();
    q.values.assign(x.size(), 0);
    q.scales.resize(q.rows);
    for (std::size_t r = 0; r < q.rows; ++r) {
        const auto row = x.row(r);
        double amax = 0.0;
        for (double v : row) amax = std::max(amax, std::abs(v));
        const double s = amax == 0.0 ? kZeroTileScale : store_scale(amax / kInt8Max, opts);
        q.scales[r] = s;
        for (std::size_t c = 0; c < q.cols; ++c) q.values[r * q.cols + c] = quantize_value(row[c], s, -kInt8Max);
    }
    return q;
}

Matrix quantized_matmul(const QuantizedBlock& a, const QuantizedBlock& b, Trans trans_a,
                        Trans trans_b) {
    const Packed lhs = pack(a.values, a.rows, a.cols, trans_a == Trans::transpose);
    // Right operand is consumed as op(B)^T, i.e. B itself when op is transpose.
    const Packed rhs = pack(b.values, b.rows, b.cols, trans_b == Trans::none);
    const auto acc = int_gemm_nt(lhs, rhs);
    const double s = a.scale * b.scale;
    Matrix out(lhs.outer, rhs.outer);
    auto dst = out.values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = acc[k] * s;
    return out;
}

Matrix quantized_matmul(const PerTokenQuantizedBlock& a, const QuantizedBlock& b, Trans trans_b) {
    const Packed lhs = pack(a.values, a.rows, a.cols, false);
    const Packed rhs = pack(b.values, b.rows, b.cols, trans_b == Trans::none);
    const auto acc = int_gemm_nt(lhs, rhs);
    Matrix out(lhs.outer, rhs.outer);
    for (std::size_t r = 0; r < out.rows(); ++r) {
        const double s = a.scales[r] * b.scale;
        auto row = out.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] = acc[r * row.size() + c] * s;
    }
    return out;
}

Matrix fake_quantize(const Matrix& x, QuantOptions opts) {
    return dequantize(quantize_per_block(x, opts));
}

}  // namespace sagelab
