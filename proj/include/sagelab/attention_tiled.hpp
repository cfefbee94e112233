// Tiled INT8 attention: forward with online softmax and per-token P
// quantization, backward that recomputes logits from the retained INT8 Q/K.
//
// The default entry points run row tiles (forward, dQ) and column tiles
// (dK, dV) in parallel with OpenMP. sagelab::serial keeps the single-threaded
// loop order of the reference algorithm; both produce bit-identical results
// for any thread count.
#pragma once

#include <cstddef>
#include <vector>

#include "sagelab/attention_ref.hpp"
#include "sagelab/matrix.hpp"
#include "sagelab/preprocess.hpp"
#include "sagelab/quant.hpp"

namespace sagelab {

struct TilingConfig {
    std::size_t block_q = 64;
    std::size_t block_kv = 64;
    PrecisionPolicy policy;
    Smoothing smoothing;
    QuantOptions quant;

    /// Throws unless both blocks divide n and the policy is valid.
    void validate(std::size_t n) const;
};

/// Running (m, l, O_acc) for one block of query rows. m starts at the most
/// negative finite double and never decreases.
class OnlineSoftmax {
public:
    OnlineSoftmax(std::size_t rows, std::size_t head_dim);

    struct Step {
        Matrix p_tilde;      // exp(S - m_new)
        Vector tile_rowmax;  // rowmax(S) of this tile
        Vector correction;   // exp(m_prev - m_new)
    };

    /// Updates m and l with one logits tile: l = e^(m_prev - m) l + rowsum(P~).
    Step absorb(const Matrix& s_tile);

    /// O_acc = diag(step.correction) O_acc + pv.
    void accumulate(const Step& step, const Matrix& pv);

    /// diag(l)^-1 O_acc.
    Matrix output() const;
    /// m + log(l).
    Vector logsumexp() const;

    const Vector& running_max() const { return m_; }
    const Vector& denominator() const { return l_; }

private:
    Vector m_;
    Vector l_;
    Matrix acc_;
};

struct ForwardOutput {
    Matrix o;
    Vector lse;         // logsumexp of the unsmoothed logits
    Vector kernel_lse;  // logsumexp of the logits the kernel streamed; the backward uses this
    std::size_t block_q = 0;
    std::size_t block_kv = 0;
    // Per-block INT8 operands retained for the backward pass.
    std::vector<QuantizedBlock> q_blocks;
    std::vector<QuantizedBlock> k_blocks;
    std::vector<QuantizedBlock> v_blocks;
    // Full-precision smoothed operands, for sites the policy keeps exact.
    Matrix q_operand;
    Matrix k_operand;
    SmoothingArtifacts smoothing;
    Matrix q_bias;  // (N / block_q) x N rows of mu_{Q_i} K_sm^T; empty without Q-smoothing
};

struct Gradients {
    Matrix dq, dk, dv;
};

ForwardOutput sagebwd_forward(const AttentionInputs& in, const TilingConfig& cfg);
Gradients sagebwd_backward(const ForwardOutput& fwd, const AttentionInputs& in, const TilingConfig& cfg);

namespace serial {
ForwardOutput sagebwd_forward(const AttentionInputs& in, const TilingConfig& cfg);
Gradients sagebwd_backward(const ForwardOutput& fwd, const AttentionInputs& in, const TilingConfig& cfg);
}  // namespace serial

}  // namespace sagelab
