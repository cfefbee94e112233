#include "sagelab/attention_tiled.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace sagelab {

namespace {

void add_into(Matrix& dst, std::size_t r0, const Matrix& src) {
    for (std::size_t r = 0; r < src.rows(); ++r) {
        auto d = dst.row(r0 + r);
        const auto s = src.row(r);
        for (std::size_t c = 0; c < s.size(); ++c) d[c] += s[c];
    }
}

bool is_int8(Precision p) {
    return p == Precision::int8_per_block || p == Precision::int8_per_token;
}

Matrix exact_or_fp16(Precision tag, const Matrix& product) {
    return tag == Precision::fp16_emulated ? round_to_fp16(product) : product;
}

std::vector<QuantizedBlock> quantize_row_blocks(const Matrix& x, std::size_t block, QuantOptions opts) {
    std::vector<QuantizedBlock> out;
    out.reserve(x.rows() / block);
    for (std::size_t r = 0; r < x.rows(); r += block)
        out.push_back(quantize_per_block(x.block(r, 0, block, x.cols()), opts));
    return out;
}

struct TileGrads {
    Matrix dq;  // block_q x D, before head_dim_scale
    Matrix dk;  // block_kv x D, before head_dim_scale
    Matrix dv;  // block_kv x D
};

// Everything one tile needs; shared by the serial and OpenMP drivers so both
// evaluate identical arithmetic per tile.
class TileKernel {
public:
    TileKernel(const AttentionInputs& in, const TilingConfig& cfg, const ForwardOutput& fwd)
        : in_(in), cfg_(cfg), fwd_(fwd), d_(in.head_dim()) {}

    std::size_t q_tiles() const { return in_.seq_len() / cfg_.block_q; }
    std::size_t kv_tiles() const { return in_.seq_len() / cfg_.block_kv; }

    Matrix q_rows(const Matrix& x, std::size_t i) const { return x.block(i * cfg_.block_q, 0, cfg_.block_q, d_); }
    Matrix kv_rows(const Matrix& x, std::size_t j) const { return x.block(j * cfg_.block_kv, 0, cfg_.block_kv, d_); }

    // S_ij = MM(Q_i, K_j^T) * s_Q * s_K (+ Q-smoothing bias) * head_dim_scale
    Matrix logits(std::size_t i, std::size_t j) const {
        Matrix s;
        const Precision tag = cfg_.policy.qk;
        if (is_int8(tag)) {
            s = quantized_matmul(fwd_.q_blocks[i], fwd_.k_blocks[j], Trans::none, Trans::transpose);
        } else {
            s = exact_or_fp16(tag, serial::matmul(q_rows(fwd_.q_operand, i),
                                                  transpose(kv_rows(fwd_.k_operand, j))));
        }
        if (!fwd_.q_bias.empty()) {
            const auto bias = fwd_.q_bias.row(i).subspan(j * cfg_.block_kv, cfg_.block_kv);
            for (std::size_t r = 0; r < s.rows(); ++r) {
                auto row = s.row(r);
                for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias[c];
            }
        }
        for (double& v : s.values()) v *= in_.head_dim_scale;
        return s;
    }

    Matrix pv(const OnlineSoftmax::Step& step, const Vector& running_max, std::size_t j) const {
        switch (cfg_.policy.pv) {
            case Precision::int8_per_token:
                return quantized_matmul(
                    quantize_p_per_token(step.p_tilde, step.tile_rowmax, running_max, cfg_.quant),
                    fwd_.v_blocks[j]);
            case Precision::int8_per_block:
                return quantized_matmul(quantize_per_block(step.p_tilde, cfg_.quant), fwd_.v_blocks[j]);
            case Precision::exact:
            case Precision::fp16_emulated:
                break;
        }
        return exact_or_fp16(cfg_.policy.pv, serial::matmul(step.p_tilde, kv_rows(in_.v, j)));
    }

    void forward_row_block(std::size_t i, ForwardOutput& out) const {
        OnlineSoftmax state(cfg_.block_q, d_);
        for (std::size_t j = 0; j < kv_tiles(); ++j) {
            const auto step = state.absorb(logits(i, j));
            state.accumulate(step, pv(step, state.running_max(), j));
        }
        out.o.set_block(i * cfg_.block_q, 0, state.output());
        const Vector lse = state.logsumexp();
        for (std::size_t r = 0; r < lse.size(); ++r) out.kernel_lse[i * cfg_.block_q + r] = lse[r];
    }

    // Backward-pass state computed once per call.
    void prepare_backward() {
        delta_ = row_sums(hadamard(in_.d_o, fwd_.o));
        do_blocks_ = quantize_row_blocks(in_.d_o, cfg_.block_q, cfg_.quant);
    }

    TileGrads backward_tile(std::size_t i, std::size_t j, bool want_dq, bool want_dkv) const {
        const PrecisionPolicy& pol = cfg_.policy;
        const std::size_t bq = cfg_.block_q;
        TileGrads g;

        Matrix p = logits(i, j);
        for (std::size_t r = 0; r < p.rows(); ++r)
            for (double& v : p.row(r)) v = std::exp(v - fwd_.kernel_lse[i * bq + r]);

        const Matrix d_o = q_rows(in_.d_o, i);
        if (want_dkv) {
            if (is_int8(pol.dv)) {
                g.dv = quantized_matmul(quantize_per_block(p, cfg_.quant), do_blocks_[i], Trans::transpose,
                                        Trans::none);
            } else {
                g.dv = exact_or_fp16(pol.dv, serial::matmul(transpose(p), d_o));
            }
        }

        Matrix dp;
        if (is_int8(pol.dp)) {
            dp = quantized_matmul(do_blocks_[i], fwd_.v_blocks[j], Trans::none, Trans::transpose);
        } else {
            dp = exact_or_fp16(pol.dp, serial::matmul(d_o, transpose(kv_rows(in_.v, j))));
        }

        Matrix ds(p.rows(), p.cols());
        for (std::size_t r = 0; r < ds.rows(); ++r) {
            const double dr = delta_[i * bq + r];
            for (std::size_t c = 0; c < ds.cols(); ++c) ds(r, c) = p(r, c) * (dp(r, c) - dr);
        }

        QuantizedBlock ds_hat;
        if ((want_dq && is_int8(pol.dq)) || (want_dkv && is_int8(pol.dk))) {
            ds_hat = quantize_per_block(ds, cfg_.quant);
        }
        if (want_dq) {
            if (is_int8(pol.dq)) {
                g.dq = quantized_matmul(ds_hat, fwd_.k_blocks[j]);
            } else {
                g.dq = exact_or_fp16(pol.dq, serial::matmul(ds, kv_rows(fwd_.k_operand, j)));
            }
        }
        if (want_dkv) {
            if (is_int8(pol.dk)) {
                g.dk = quantized_matmul(ds_hat, fwd_.q_blocks[i], Trans::transpose, Trans::none);
            } else {
                g.dk = exact_or_fp16(pol.dk, serial::matmul(transpose(ds), q_rows(fwd_.q_operand, i)));
            }
            if (fwd_.smoothing.enabled_q) {
                // dK_bias = (dS^T 1) mu_{Q_i}, from the unquantized dS tile.
                const Vector& mu = fwd_.smoothing.mu_q_blocks[i];
                for (std::size_t c = 0; c < ds.cols(); ++c) {
                    double colsum = 0.0;
                    for (std::size_t r = 0; r < ds.rows(); ++r) colsum += ds(r, c);
                    auto row = g.dk.row(c);
                    for (std::size_t k = 0; k < d_; ++k) row[k] += colsum * mu[k];
                }
            }
        }
        return g;
    }

    Gradients empty_grads() const {
        const std::size_t n = in_.seq_len();
        return {Matrix(n, d_), Matrix(n, d_), Matrix(n, d_)};
    }

    void finish(Gradients& g) const {
        for (double& v : g.dq.values()) v *= in_.head_dim_scale;
        for (double& v : g.dk.values()) v *= in_.head_dim_scale;
    }

    std::size_t block_q() const { return cfg_.block_q; }
    std::size_t block_kv() const { return cfg_.block_kv; }

private:
    const AttentionInputs& in_;
    const TilingConfig& cfg_;
    const ForwardOutput& fwd_;
    std::size_t d_;
    Vector delta_;
    std::vector<QuantizedBlock> do_blocks_;
};

ForwardOutput prepare_forward(const AttentionInputs& in, const TilingConfig& cfg) {
    in.validate();
    cfg.validate(in.seq_len());
    ForwardOutput out;
    out.block_q = cfg.block_q;
    out.block_kv = cfg.block_kv;
    SmoothedPair sm = smooth_qk(in.q, in.k, cfg.block_q, cfg.smoothing);
    out.q_blocks = quantize_row_blocks(sm.q, cfg.block_q, cfg.quant);
    out.k_blocks = quantize_row_blocks(sm.k, cfg.block_kv, cfg.quant);
    out.v_blocks = quantize_row_blocks(in.v, cfg.block_kv, cfg.quant);
    if (sm.artifacts.enabled_q) {
        const std::size_t n = in.seq_len();
        out.q_bias = Matrix(sm.artifacts.mu_q_blocks.size(), n);
        for (std::size_t b = 0; b < sm.artifacts.mu_q_blocks.size(); ++b) {
            const Vector& mu = sm.artifacts.mu_q_blocks[b];
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                const auto krow = sm.k.row(j);
                for (std::size_t c = 0; c < mu.size(); ++c) s += krow[c] * mu[c];
                out.q_bias(b, j) = s;
            }
        }
    }
    out.q_operand = std::move(sm.q);
    out.k_operand = std::move(sm.k);
    out.smoothing = std::move(sm.artifacts);
    out.o = Matrix(in.seq_len(), in.head_dim());
    out.kernel_lse.assign(in.seq_len(), 0.0);
    return out;
}

// Restores the row constants smoothing removed so lse refers to the true logits.
void finish_forward(ForwardOutput& out, const AttentionInputs& in) {
    const Vector dropped = dropped_row_terms(out.q_operand, out.smoothing, in.head_dim_scale);
    out.lse.resize(out.kernel_lse.size());
    for (std::size_t r = 0; r < out.lse.size(); ++r) out.lse[r] = out.kernel_lse[r] + dropped[r];
}

void check_retained(const ForwardOutput& fwd, const AttentionInputs& in, const TilingConfig& cfg) {
    in.validate();
    cfg.validate(in.seq_len());
    const std::size_t n = in.seq_len();
    if (fwd.block_q != cfg.block_q || fwd.block_kv != cfg.block_kv) {
        throw std::invalid_argument("sagebwd_backward: forward output was produced with different blocks");
    }
    if (fwd.q_blocks.size() != n / cfg.block_q || fwd.k_blocks.size() != n / cfg.block_kv ||
        fwd.v_blocks.size() != n / cfg.block_kv) {
        throw std::invalid_argument("sagebwd_backward: missing retained quantized operands");
    }
    if (!fwd.o.same_shape(in.q) || fwd.kernel_lse.size() != n || !fwd.q_operand.same_shape(in.q) ||
        !fwd.k_operand.same_shape(in.k)) {
        throw std::invalid_argument("sagebwd_backward: forward output does not match inputs");
    }
}

}  // namespace

void TilingConfig::validate(std::size_t n) const {
    if (block_q == 0 || block_kv == 0) throw std::invalid_argument("TilingConfig: block sizes must be > 0");
    if (n % block_q != 0 || n % block_kv != 0) {
        throw std::invalid_argument("TilingConfig: blocks (" + std::to_string(block_q) + ", " +
                                    std::to_string(block_kv) + ") must divide N=" + std::to_string(n));
    }
    policy.validate();
}

OnlineSoftmax::OnlineSoftmax(std::size_t rows, std::size_t head_dim)
    : m_(rows, std::numeric_limits<double>::lowest()), l_(rows, 0.0), acc_(rows, head_dim) {}

OnlineSoftmax::Step OnlineSoftmax::absorb(const Matrix& s_tile) {
    if (s_tile.rows() != m_.size()) throw std::invalid_argument("OnlineSoftmax::absorb: row count mismatch");
    Step step{Matrix(s_tile.rows(), s_tile.cols()), row_max(s_tile), Vector(m_.size())};
    for (std::size_t r = 0; r < m_.size(); ++r) {
        const double m_new = std::max(m_[r], step.tile_rowmax[r]);
        step.correction[r] = std::exp(m_[r] - m_new);
        double rowsum = 0.0;
        const auto in = s_tile.row(r);
        auto out = step.p_tilde.row(r);
        for (std::size_t c = 0; c < in.size(); ++c) {
            out[c] = std::exp(in[c] - m_new);
            rowsum += out[c];
        }
        l_[r] = step.correction[r] * l_[r] + rowsum;
        m_[r] = m_new;
    }
    return step;
}

void OnlineSoftmax::accumulate(const Step& step, const Matrix& pv) {
    if (!pv.same_shape(acc_)) throw std::invalid_argument("OnlineSoftmax::accumulate: shape mismatch");
    for (std::size_t r = 0; r < acc_.rows(); ++r) {
        auto a = acc_.row(r);
        const auto p = pv.row(r);
        for (std::size_t c = 0; c < a.size(); ++c) a[c] = step.correction[r] * a[c] + p[c];
    }
}

Matrix OnlineSoftmax::output() const {
    Matrix o = acc_;
    for (std::size_t r = 0; r < o.rows(); ++r)
        for (double& v : o.row(r)) v /= l_[r];
    return o;
}

Vector OnlineSoftmax::logsumexp() const {
    Vector out(m_.size());
    for (std::size_t r = 0; r < out.size(); ++r) out[r] = m_[r] + std::log(l_[r]);
    return out;
}

ForwardOutput sagebwd_forward(const AttentionInputs& in, const TilingConfig& cfg) {
    ForwardOutput out = prepare_forward(in, cfg);
    const TileKernel kernel(in, cfg, out);
    const auto tiles = static_cast<std::ptrdiff_t>(kernel.q_tiles());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < tiles; ++i) kernel.forward_row_block(static_cast<std::size_t>(i), out);
    finish_forward(out, in);
    return out;
}

Gradients sagebwd_backward(const ForwardOutput& fwd, const AttentionInputs& in, const TilingConfig& cfg) {
    check_retained(fwd, in, cfg);
    TileKernel kernel(in, cfg, fwd);
    kernel.prepare_backward();
    Gradients g = kernel.empty_grads();
    const auto q_tiles = static_cast<std::ptrdiff_t>(kernel.q_tiles());
    const auto kv_tiles = static_cast<std::ptrdiff_t>(kernel.kv_tiles());

    // Column tiles own dK_j and dV_j; rows are visited in ascending order.
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t j = 0; j < kv_tiles; ++j) {
        const auto jj = static_cast<std::size_t>(j);
        for (std::size_t i = 0; i < kernel.q_tiles(); ++i) {
            const TileGrads t = kernel.backward_tile(i, jj, false, true);
            add_into(g.dv, jj * kernel.block_kv(), t.dv);
            add_into(g.dk, jj * kernel.block_kv(), t.dk);
        }
    }
    // Row tiles own dQ_i; columns in ascending order, matching the serial sum.
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < q_tiles; ++i) {
        const auto ii = static_cast<std::size_t>(i);
        for (std::size_t j = 0; j < kernel.kv_tiles(); ++j) {
            add_into(g.dq, ii * kernel.block_q(), kernel.backward_tile(ii, j, true, false).dq);
        }
    }
    kernel.finish(g);
    return g;
}

namespace serial {

ForwardOutput sagebwd_forward(const AttentionInputs& in, const TilingConfig& cfg) {
    ForwardOutput out = prepare_forward(in, cfg);
    const TileKernel kernel(in, cfg, out);
    for (std::size_t i = 0; i < kernel.q_tiles(); ++i) kernel.forward_row_block(i, out);
    finish_forward(out, in);
    return out;
}

Gradients sagebwd_backward(const ForwardOutput& fwd, const AttentionInputs& in, const TilingConfig& cfg) {
    check_retained(fwd, in, cfg);
    TileKernel kernel(in, cfg, fwd);
    kernel.prepare_backward();
    Gradients g = kernel.empty_grads();
    for (std::size_t j = 0; j < kernel.kv_tiles(); ++j) {
        for (std::size_t i = 0; i < kernel.q_tiles(); ++i) {
            const TileGrads t = kernel.backward_tile(i, j, true, true);
            add_into(g.dv, j * kernel.block_kv(), t.dv);
            add_into(g.dq, i * kernel.block_q(), t.dq);
            add_into(g.dk, j * kernel.block_kv(), t.dk);
        }
    }
    kernel.finish(g);
    return g;
}

}  // namespace serial

}  // namespace sagelab
