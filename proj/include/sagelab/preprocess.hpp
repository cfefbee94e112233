// QK-norm and Q/K mean smoothing, with the compensation terms that keep
// logits and gradients exact after smoothing.
#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "sagelab/matrix.hpp"

namespace sagelab {

/// Which operands get mean-subtracted at kernel entry.
struct Smoothing {
    bool k = false;
    bool q = false;
};

struct SmoothingArtifacts {
    Vector mu_k;                      // global per-channel key mean (empty if disabled)
    std::vector<Vector> mu_q_blocks;  // one per-channel query mean per Q block
    std::size_t block_q = 0;
    bool enabled_q = false;
    bool enabled_k = false;
};

struct SmoothedOperand {
    Matrix value;
    SmoothingArtifacts artifacts;
};

struct SmoothedPair {
    Matrix q;
    Matrix k;
    SmoothingArtifacts artifacts;
};

/// K_sm = K - 1 mu_K with mu_K the column mean over all keys.
SmoothedOperand k_smooth(const Matrix& k);

/// Q_sm = Q_i - 1 mu_{Q_i} for each block of block_q rows.
SmoothedOperand q_smooth_blockwise(const Matrix& q, std::size_t block_q);

/// Applies whichever smoothings are enabled and merges the artifacts.
SmoothedPair smooth_qk(const Matrix& q, const Matrix& k, std::size_t block_q, Smoothing mode);

/// Smoothed logits that share the original row-softmax:
/// (Q_sm K_sm^T + [Q-smoothing] 1 mu_{Q_i} K_sm^T) * head_dim_scale.
Matrix logits_with_smoothing(const Matrix& q_sm, const Matrix& k_sm,
                             const SmoothingArtifacts& artifacts, double head_dim_scale);

/// Adds 1 mu_{Q_i} K_sm^T to every row of Q block i of unscaled logits s.
/// No-op unless Q-smoothing is enabled.
void add_query_mean_bias(Matrix& s, const Matrix& k_sm, const SmoothingArtifacts& artifacts);

/// The per-row constants logits_with_smoothing leaves out:
/// (Q_sm mu_K^T + mu_{Q_i} mu_K^T) * head_dim_scale.
Vector dropped_row_terms(const Matrix& q_sm, const SmoothingArtifacts& artifacts,
                         double head_dim_scale);

/// dQ = dS K_sm * scale; equals dS K * scale whenever rows of dS sum to zero.
Matrix dq_from_smoothed_k(const Matrix& ds, const Matrix& k_sm, double head_dim_scale);

/// (dS^T 1_i) mu_{Q_i}, summed over Q blocks, times scale.
Matrix dk_bias_term(const Matrix& ds, const SmoothingArtifacts& artifacts, double head_dim_scale);

/// dK_center + dK_bias = dS^T Q_sm * scale + dk_bias_term.
Matrix dk_with_bias_correction(const Matrix& ds, const Matrix& q_sm,
                               const SmoothingArtifacts& artifacts, double head_dim_scale);

struct QkNormParams {
    Vector gamma_q;  // empty means all ones
    Vector gamma_k;
    double eps = 1e-6;
};

/// Per-row RMSNorm: x / sqrt(mean(x^2) + eps) * gamma.
Matrix rms_norm_rows(const Matrix& x, const Vector& gamma, double eps);

std::pair<Matrix, Matrix> qk_norm(const Matrix& q, const Matrix& k, const QkNormParams& params);

}  // namespace sagelab
