#include "sagelab/attention_ref.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace sagelab {

namespace {

struct SiteName {
    Site site;
    std::string_view name;
};

constexpr std::array<SiteName, 6> kSiteNames = {{{Site::qk, "qk"},
                                                 {Site::pv, "pv"},
                                                 {Site::dv, "dv"},
                                                 {Site::dp, "dp"},
                                                 {Site::dq, "dq"},
                                                 {Site::dk, "dk"}}};

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
    return s;
}

// Tile shape used when an operand is quantized per block.
struct TileShape {
    std::size_t rows;
    std::size_t cols;
};

Matrix fake_quant_tiles(const Matrix& x, TileShape tile, QuantOptions opts) {
    if (x.rows() % tile.rows != 0 || x.cols() % tile.cols != 0) {
        throw std::invalid_argument("pseudo_quantized_attention: tile " + std::to_string(tile.rows) +
                                    "x" + std::to_string(tile.cols) + " does not divide " +
                                    std::to_string(x.rows()) + "x" + std::to_string(x.cols()));
    }
    Matrix out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); r += tile.rows)
        for (std::size_t c = 0; c < x.cols(); c += tile.cols)
            out.set_block(r, c, fake_quantize(x.block(r, c, tile.rows, tile.cols), opts));
    return out;
}

// One scale per (row, column tile): the per-token scheme applied to P tiles.
Matrix fake_quant_token_tiles(const Matrix& x, std::size_t tile_cols, QuantOptions opts) {
    if (x.cols() % tile_cols != 0) {
        throw std::invalid_argument("pseudo_quantized_attention: block_kv does not divide N");
    }
    Matrix out(x.rows(), x.cols());
    for (std::size_t c = 0; c < x.cols(); c += tile_cols)
        out.set_block(0, c, dequantize(quantize_per_token(x.block(0, c, x.rows(), tile_cols), opts)));
    return out;
}

Matrix apply_op(const Matrix& x, Trans t) { return t == Trans::transpose ? transpose(x) : x; }

// op(A) * op(B) at one site. Tiles describe A and B as stored, before op.
Matrix site_product(Precision tag, const Matrix& a, TileShape a_tile, Trans ta, const Matrix& b,
                    TileShape b_tile, Trans tb, QuantOptions opts) {
    switch (tag) {
        case Precision::exact:
            return matmul(apply_op(a, ta), apply_op(b, tb));
        case Precision::fp16_emulated:
            return round_to_fp16(matmul(apply_op(a, ta), apply_op(b, tb)));
        case Precision::int8_per_block:
            return matmul(apply_op(fake_quant_tiles(a, a_tile, opts), ta),
                          apply_op(fake_quant_tiles(b, b_tile, opts), tb));
        case Precision::int8_per_token:
            return matmul(apply_op(fake_quant_token_tiles(a, a_tile.cols, opts), ta),
                          apply_op(fake_quant_tiles(b, b_tile, opts), tb));
    }
    throw std::logic_error("site_product: unknown precision");
}

Vector logsumexp_rows(const Matrix& s) {
    Vector out(s.rows());
    for (std::size_t i = 0; i < s.rows(); ++i) {
        const auto row = s.row(i);
        double mx = row[0];
        for (double v : row) mx = std::max(mx, v);
        double sum = 0.0;
        for (double v : row) sum += std::exp(v - mx);
        out[i] = mx + std::log(sum);
    }
    return out;
}

Vector rowsum_product(const Matrix& a, const Matrix& b) {
    return row_sums(hadamard(a, b));
}

// dS = P o (dP - delta 1^T)
Matrix softmax_grad(const Matrix& p, const Matrix& dp, const Vector& delta) {
    Matrix ds(p.rows(), p.cols());
    for (std::size_t i = 0; i < p.rows(); ++i) {
        const auto pr = p.row(i);
        const auto dpr = dp.row(i);
        auto out = ds.row(i);
        for (std::size_t j = 0; j < out.size(); ++j) out[j] = pr[j] * (dpr[j] - delta[i]);
    }
    return ds;
}

}  // namespace

std::string_view to_string(Precision p) {
    switch (p) {
        case Precision::exact: return "exact";
        case Precision::int8_per_block: return "int8-per-block";
        case Precision::int8_per_token: return "int8-per-token";
        case Precision::fp16_emulated: return "fp16-emulated";
    }
    return "?";
}

std::string_view to_string(Site s) {
    for (const auto& sn : kSiteNames)
        if (sn.site == s) return sn.name;
    return "?";
}

Precision parse_precision(std::string_view text) {
    text = trim(text);
    for (Precision p : {Precision::exact, Precision::int8_per_block, Precision::int8_per_token,
                        Precision::fp16_emulated}) {
        if (text == to_string(p)) return p;
    }
    throw std::invalid_argument("unknown precision tag '" + std::string(text) + "'");
}

Site parse_site(std::string_view text) {
    text = trim(text);
    for (const auto& sn : kSiteNames)
        if (sn.name == text) return sn.site;
    throw std::invalid_argument("unknown matmul site '" + std::string(text) + "'");
}

PrecisionPolicy PrecisionPolicy::sagebwd(std::size_t block_q, std::size_t block_kv) {
    PrecisionPolicy p;
    p.block_q = block_q;
    p.block_kv = block_kv;
    return p;
}

PrecisionPolicy PrecisionPolicy::all_exact(std::size_t block_q, std::size_t block_kv) {
    PrecisionPolicy p;
    for (Site s : kAllSites) p.at(s) = Precision::exact;
    p.block_q = block_q;
    p.block_kv = block_kv;
    return p;
}

Precision& PrecisionPolicy::at(Site s) {
    switch (s) {
        case Site::qk: return qk;
        case Site::pv: return pv;
        case Site::dv: return dv;
        case Site::dp: return dp;
        case Site::dq: return dq;
        case Site::dk: return dk;
    }
    throw std::logic_error("PrecisionPolicy::at: unknown site");
}

Precision PrecisionPolicy::at(Site s) const { return const_cast<PrecisionPolicy*>(this)->at(s); }

void PrecisionPolicy::validate() const {
    for (Site s : kAllSites) {
        if (s != Site::pv && at(s) == Precision::int8_per_token) {
            throw std::invalid_argument("per-token quantization is only valid at the pv site, not " +
                                        std::string(to_string(s)));
        }
    }
    if (block_q == 0 || block_kv == 0) throw std::invalid_argument("policy block sizes must be > 0");
}

std::string to_string(const PrecisionPolicy& p) {
    std::string out;
    for (Site s : kAllSites) {
        if (!out.empty()) out += ',';
        out += to_string(s);
        out += '=';
        out += to_string(p.at(s));
    }
    return out;
}

PrecisionPolicy parse_policy(std::string_view text, PrecisionPolicy base) {
    while (!trim(text).empty()) {
        const auto comma = text.find(',');
        const std::string_view item = trim(text.substr(0, comma));
        text = comma == std::string_view::npos ? std::string_view{} : text.substr(comma + 1);
        if (item.empty()) continue;
        const auto eq = item.find('=');
        if (eq == std::string_view::npos) {
            throw std::invalid_argument("policy entry '" + std::string(item) + "' is not site=tag");
        }
        base.at(parse_site(item.substr(0, eq))) = parse_precision(item.substr(eq + 1));
    }
    base.validate();
    return base;
}

AttentionInputs AttentionInputs::make(Matrix q, Matrix k, Matrix v, Matrix d_o) {
    AttentionInputs in{std::move(q), std::move(k), std::move(v), std::move(d_o), 1.0};
    in.head_dim_scale = 1.0 / std::sqrt(static_cast<double>(in.q.cols()));
    in.validate();
    return in;
}

void AttentionInputs::validate() const {
    const std::size_t n = q.rows(), d = q.cols();
    if (n == 0 || d == 0) throw std::invalid_argument("AttentionInputs: empty Q");
    for (const Matrix* m : {&k, &v, &d_o}) {
        if (m->rows() != n || m->cols() != d) {
            throw std::invalid_argument("AttentionInputs: Q, K, V, dO must all be " +
                                        std::to_string(n) + "x" + std::to_string(d));
        }
    }
}

AttentionTrace forward_ref(const AttentionInputs& in) {
    in.validate();
    AttentionTrace t;
    t.s = in.head_dim_scale * matmul(in.q, transpose(in.k));
    t.p = row_softmax(t.s);
    t.o = matmul(t.p, in.v);
    t.lse = logsumexp_rows(t.s);
    return t;
}

AttentionTrace backward_ref(const AttentionInputs& in, const AttentionTrace& fwd) {
    in.validate();
    if (fwd.p.empty() || fwd.o.empty()) throw std::invalid_argument("backward_ref: forward trace incomplete");
    AttentionTrace t = fwd;
    t.delta = rowsum_product(in.d_o, t.o);
    t.dp = matmul(in.d_o, transpose(in.v));
    t.ds = softmax_grad(t.p, t.dp, t.delta);
    t.dq = in.head_dim_scale * matmul(t.ds, in.k);
    t.dk = in.head_dim_scale * matmul(transpose(t.ds), in.q);
    t.dv = matmul(transpose(t.p), in.d_o);
    return t;
}

AttentionTrace pseudo_quantized_attention(const AttentionInputs& in, const PrecisionPolicy& policy,
                                          Smoothing smoothing, QuantOptions quant) {
    in.validate();
    policy.validate();
    const std::size_t n = in.seq_len(), d = in.head_dim();
    const TileShape q_rows{policy.block_q, d};
    const TileShape kv_rows{policy.block_kv, d};
    const TileShape scores{policy.block_q, policy.block_kv};
    if (n % policy.block_q != 0 || n % policy.block_kv != 0) {
        throw std::invalid_argument("pseudo_quantized_attention: policy blocks must divide N=" +
                                    std::to_string(n));
    }

    const SmoothedPair sm = smooth_qk(in.q, in.k, policy.block_q, smoothing);
    AttentionTrace t;

    Matrix s = site_product(policy.qk, sm.q, q_rows, Trans::none, sm.k, kv_rows, Trans::transpose, quant);
    add_query_mean_bias(s, sm.k, sm.artifacts);
    t.s = in.head_dim_scale * s;
    t.p = row_softmax(t.s);
    t.lse = logsumexp_rows(t.s);
    t.o = site_product(policy.pv, t.p, scores, Trans::none, in.v, kv_rows, Trans::none, quant);

    t.delta = rowsum_product(in.d_o, t.o);
    t.dp = site_product(policy.dp, in.d_o, q_rows, Trans::none, in.v, kv_rows, Trans::transpose, quant);
    t.ds = softmax_grad(t.p, t.dp, t.delta);
    t.dq = in.head_dim_scale *
           site_product(policy.dq, t.ds, scores, Trans::none, sm.k, kv_rows, Trans::none, quant);
    Matrix dk = site_product(policy.dk, t.ds, scores, Trans::transpose, sm.q, q_rows, Trans::none, quant);
    if (sm.artifacts.enabled_q) dk = dk + dk_bias_term(t.ds, sm.artifacts, 1.0);
    t.dk = in.head_dim_scale * dk;
    t.dv = site_product(policy.dv, t.p, scores, Trans::transpose, in.d_o, q_rows, Trans::none, quant);
    return t;
}

}  // namespace sagelab
