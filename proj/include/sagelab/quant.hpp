// Symmetric INT8 quantization: per-block (one scale per tile), per-token
// (one scale per row, used for the softmax numerator tile), and the integer
// matmul that consumes them.
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "sagelab/matrix.hpp"

namespace sagelab {

/// Scale assigned to an all-zero tile so dequantization stays exact.
inline constexpr double kZeroTileScale = 1e-12;
inline constexpr int kInt8Max = 127;

enum class Trans { none, transpose };

struct QuantOptions {
    /// Round every scale through float, as a kernel storing FP32 scales would.
    bool fp32_scale = false;
};

struct QuantizedBlock {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::int8_t> values;  // row-major, each in [-127, 127]
    double scale = kZeroTileScale;

    std::int8_t at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

/// One scale per row. Holds a quantized softmax-numerator tile, so values
/// are in [0, 127] whenever the source is nonnegative.
struct PerTokenQuantizedBlock {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::int8_t> values;
    std::vector<double> scales;

    std::int8_t at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

/// scale = max|X| / 127, values = round_half_even(X / scale) clamped to +-127.
QuantizedBlock quantize_per_block(const Matrix& x, QuantOptions opts = {});

Matrix dequantize(const QuantizedBlock& q);
Matrix dequantize(const PerTokenQuantizedBlock& q);

/// Per-token quantization of P~ = exp(S - m) for one tile. The row scale is
/// exp(rowmax_s - m) / 127, so the entry holding the tile's row max maps to 127.
/// Throws if rowmax_s[r] exceeds running_max[r] by more than 1e-9.
PerTokenQuantizedBlock quantize_p_per_token(const Matrix& p_tilde,
                                            std::span<const double> rowmax_s,
                                            std::span<const double> running_max,
                                            QuantOptions opts = {});

/// Per-row absmax quantization of an arbitrary tile.
PerTokenQuantizedBlock quantize_per_token(const Matrix& x, QuantOptions opts = {});

/// op(A) * op(B) with int32 accumulation, rescaled by scale_a * scale_b.
Matrix quantized_matmul(const QuantizedBlock& a, const QuantizedBlock& b,
                        Trans trans_a = Trans::none, Trans trans_b = Trans::none);

/// A * op(B) with a per-row scale on A. A cannot be transposed: its scales
/// would then sit on the contracted dimension.
Matrix quantized_matmul(const PerTokenQuantizedBlock& a, const QuantizedBlock& b,
                        Trans trans_b = Trans::none);

/// quantize_per_block followed by dequantize.
Matrix fake_quantize(const Matrix& x, QuantOptions opts = {});

}  // namespace sagelab
