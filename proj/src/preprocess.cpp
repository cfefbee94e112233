#include "sagelab/preprocess.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace sagelab {

namespace {

void subtract_row_vector(Matrix& x, std::size_t r0, std::size_t nr, const Vector& mu) {
    for (std::size_t r = r0; r < r0 + nr; ++r) {
        auto row = x.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] -= mu[c];
    }
}

double dot(std::span<const double> a, const Vector& b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
    return s;
}

void check_q_artifacts(const SmoothingArtifacts& a, std::size_t n, std::size_t d) {
    if (!a.enabled_q) return;
    if (a.block_q == 0 || n % a.block_q != 0 || a.mu_q_blocks.size() != n / a.block_q) {
        throw std::invalid_argument("smoothing artifacts: Q block means inconsistent with N=" +
                                    std::to_string(n));
    }
    for (const auto& mu : a.mu_q_blocks) {
        if (mu.size() != d) throw std::invalid_argument("smoothing artifacts: mu_Q width != D");
    }
}

void check_k_artifacts(const SmoothingArtifacts& a, std::size_t d) {
    if (a.enabled_k && a.mu_k.size() != d) {
        throw std::invalid_argument("smoothing artifacts: mu_K width != D");
    }
}

}  // namespace

SmoothedOperand k_smooth(const Matrix& k) {
    SmoothedOperand out{k, {}};
    out.artifacts.enabled_k = true;
    out.artifacts.mu_k = col_means(k);
    subtract_row_vector(out.value, 0, k.rows(), out.artifacts.mu_k);
    return out;
}

SmoothedOperand q_smooth_blockwise(const Matrix& q, std::size_t block_q) {
    if (block_q == 0 || q.rows() % block_q != 0) {
        throw std::invalid_argument("q_smooth_blockwise: block_q=" + std::to_string(block_q) +
                                    " does not divide N=" + std::to_string(q.rows()));
    }
    SmoothedOperand out{q, {}};
    out.artifacts.enabled_q = true;
    out.artifacts.block_q = block_q;
    for (std::size_t r0 = 0; r0 < q.rows(); r0 += block_q) {
        Vector mu = col_means(q.block(r0, 0, block_q, q.cols()));
        subtract_row_vector(out.value, r0, block_q, mu);
        out.artifacts.mu_q_blocks.push_back(std::move(mu));
    }
    return out;
}

SmoothedPair smooth_qk(const Matrix& q, const Matrix& k, std::size_t block_q, Smoothing mode) {
    SmoothedPair out{q, k, {}};
    if (mode.k) {
        auto ks = k_smooth(k);
        out.k = std::move(ks.value);
        out.artifacts.enabled_k = true;
        out.artifacts.mu_k = std::move(ks.artifacts.mu_k);
    }
    if (mode.q) {
        auto qs = q_smooth_blockwise(q, block_q);
        out.q = std::move(qs.value);
        out.artifacts.enabled_q = true;
        out.artifacts.block_q = block_q;
        out.artifacts.mu_q_blocks = std::move(qs.artifacts.mu_q_blocks);
    }
    return out;
}

Matrix logits_with_smoothing(const Matrix& q_sm, const Matrix& k_sm,
                             const SmoothingArtifacts& artifacts, double head_dim_scale) {
    if (q_sm.cols() != k_sm.cols()) throw std::invalid_argument("logits_with_smoothing: D mismatch");
    check_q_artifacts(artifacts, q_sm.rows(), q_sm.cols());
    check_k_artifacts(artifacts, q_sm.cols());
    Matrix s = matmul(q_sm, transpose(k_sm));
    add_query_mean_bias(s, k_sm, artifacts);
    for (double& v : s.values()) v *= head_dim_scale;
    return s;
}

void add_query_mean_bias(Matrix& s, const Matrix& k_sm, const SmoothingArtifacts& artifacts) {
    if (!artifacts.enabled_q) return;
    check_q_artifacts(artifacts, s.rows(), k_sm.cols());
    if (s.cols() != k_sm.rows()) throw std::invalid_argument("add_query_mean_bias: key count mismatch");
    const std::size_t bq = artifacts.block_q;
    for (std::size_t b = 0; b < artifacts.mu_q_blocks.size(); ++b) {
        // Same bias row for every query in block b.
        Vector bias(k_sm.rows());
        for (std::size_t j = 0; j < k_sm.rows(); ++j) bias[j] = dot(k_sm.row(j), artifacts.mu_q_blocks[b]);
        for (std::size_t r = b * bq; r < (b + 1) * bq; ++r) {
            auto row = s.row(r);
            for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias[j];
        }
    }
}

Vector dropped_row_terms(const Matrix& q_sm, const SmoothingArtifacts& artifacts,
                         double head_dim_scale) {
    check_q_artifacts(artifacts, q_sm.rows(), q_sm.cols());
    check_k_artifacts(artifacts, q_sm.cols());
    Vector out(q_sm.rows(), 0.0);
    if (!artifacts.enabled_k) return out;
    for (std::size_t r = 0; r < q_sm.rows(); ++r) {
        double v = dot(q_sm.row(r), artifacts.mu_k);
        if (artifacts.enabled_q) v += dot(artifacts.mu_q_blocks[r / artifacts.block_q], artifacts.mu_k);
        out[r] = v * head_dim_scale;
    }
    return out;
}

Matrix dq_from_smoothed_k(const Matrix& ds, const Matrix& k_sm, double head_dim_scale) {
    return head_dim_scale * matmul(ds, k_sm);
}

Matrix dk_bias_term(const Matrix& ds, const SmoothingArtifacts& artifacts, double head_dim_scale) {
    if (!artifacts.enabled_q) throw std::invalid_argument("dk_bias_term: Q-smoothing artifacts missing");
    const std::size_t n = ds.rows();
    if (artifacts.mu_q_blocks.empty()) throw std::invalid_argument("dk_bias_term: no Q block means");
    const std::size_t d = artifacts.mu_q_blocks.front().size();
    check_q_artifacts(artifacts, n, d);
    Matrix out(ds.cols(), d);
    const std::size_t bq = artifacts.block_q;
    for (std::size_t b = 0; b < artifacts.mu_q_blocks.size(); ++b) {
        const Vector& mu = artifacts.mu_q_blocks[b];
        for (std::size_t j = 0; j < ds.cols(); ++j) {
            double colsum = 0.0;
            for (std::size_t r = b * bq; r < (b + 1) * bq; ++r) colsum += ds(r, j);
            auto row = out.row(j);
            for (std::size_t c = 0; c < d; ++c) row[c] += colsum * mu[c];
        }
    }
    for (double& v : out.values()) v *= head_dim_scale;
    return out;
}

Matrix dk_with_bias_correction(const Matrix& ds, const Matrix& q_sm,
                               const SmoothingArtifacts& artifacts, double head_dim_scale) {
    Matrix center = head_dim_scale * matmul(transpose(ds), q_sm);
    return center + dk_bias_term(ds, artifacts, head_dim_scale);
}

Matrix rms_norm_rows(const Matrix& x, const Vector& gamma, double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("rms_norm_rows: eps must be > 0");
    if (!gamma.empty() && gamma.size() != x.cols()) {
        throw std::invalid_argument("rms_norm_rows: gamma length != D");
    }
    Matrix out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto in = x.row(r);
        double ms = 0.0;
        for (double v : in) ms += v * v;
        ms /= static_cast<double>(in.size());
        const double inv = 1.0 / std::sqrt(ms + eps);
        auto o = out.row(r);
        for (std::size_t c = 0; c < in.size(); ++c) o[c] = in[c] * inv * (gamma.empty() ? 1.0 : gamma[c]);
    }
    return out;
}

std::pair<Matrix, Matrix> qk_norm(const Matrix& q, const Matrix& k, const QkNormParams& params) {
    return {rms_norm_rows(q, params.gamma_q, params.eps), rms_norm_rows(k, params.gamma_k, params.eps)};
}

}  // namespace sagelab
