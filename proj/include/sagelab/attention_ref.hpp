// Materializing attention oracle (forward + backward in real64) and the
// pseudo-quantized variant that injects quantize/dequantize before each
// matmul site named by a PrecisionPolicy.
#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>

#include "sagelab/matrix.hpp"
#include "sagelab/preprocess.hpp"
#include "sagelab/quant.hpp"

namespace sagelab {

enum class Precision { exact, int8_per_block, int8_per_token, fp16_emulated };

/// The six matmul sites of one attention forward + backward.
enum class Site { qk, pv, dv, dp, dq, dk };

inline constexpr std::array<Site, 6> kAllSites = {Site::qk, Site::pv, Site::dv,
                                                  Site::dp, Site::dq, Site::dk};

std::string_view to_string(Precision p);
std::string_view to_string(Site s);
Precision parse_precision(std::string_view text);
Site parse_site(std::string_view text);

struct PrecisionPolicy {
    Precision qk = Precision::int8_per_block;
    Precision pv = Precision::int8_per_token;
    Precision dv = Precision::int8_per_block;
    Precision dp = Precision::fp16_emulated;
    Precision dq = Precision::int8_per_block;
    Precision dk = Precision::int8_per_block;
    std::size_t block_q = 64;   // tile rows for per-block granularity
    std::size_t block_kv = 64;

    /// Default SageBwd assignment: dP in fp16, the rest INT8.
    static PrecisionPolicy sagebwd(std::size_t block_q = 64, std::size_t block_kv = 64);
    static PrecisionPolicy all_exact(std::size_t block_q = 64, std::size_t block_kv = 64);

    Precision& at(Site s);
    Precision at(Site s) const;

    /// Throws unless per-token appears only at pv and blocks are positive.
    void validate() const;

    bool operator==(const PrecisionPolicy&) const = default;
};

/// "qk=int8-per-block,pv=int8-per-token,..." in site order.
std::string to_string(const PrecisionPolicy& p);

/// Applies "site=tag,..." overrides on top of base. Unknown sites or tags throw.
PrecisionPolicy parse_policy(std::string_view text, PrecisionPolicy base = {});

struct AttentionInputs {
    Matrix q, k, v, d_o;
    double head_dim_scale = 1.0;

    /// Builds inputs with head_dim_scale = 1/sqrt(D).
    static AttentionInputs make(Matrix q, Matrix k, Matrix v, Matrix d_o);

    std::size_t seq_len() const { return q.rows(); }
    std::size_t head_dim() const { return q.cols(); }
    void validate() const;
};

struct AttentionTrace {
    Matrix s, p;    // N x N
    Matrix o;       // N x D
    Vector lse;     // per-row logsumexp of s
    Vector delta;   // rowsum(dO o O)
    Matrix dp, ds;  // N x N
    Matrix dq, dk, dv;
};

/// S = Q K^T * scale, P = softmax(S), O = P V, lse.
AttentionTrace forward_ref(const AttentionInputs& in);

/// Completes a forward trace with delta, dP, dS, dQ, dK, dV.
AttentionTrace backward_ref(const AttentionInputs& in, const AttentionTrace& fwd);

inline AttentionTrace attention_ref(const AttentionInputs& in) {
    return backward_ref(in, forward_ref(in));
}

/// Same dataflow as the oracle with quantize-dequantize at each site the
/// policy marks INT8 (operands split into block_q x block_kv / block x D
/// tiles), fp16 rounding of the product at fp16-emulated sites, and the
/// requested Q/K smoothing applied on entry. dO is never perturbed except
/// as an INT8 operand. Gradients are with respect to the unsmoothed Q and K.
AttentionTrace pseudo_quantized_attention(const AttentionInputs& in, const PrecisionPolicy& policy,
                                          Smoothing smoothing = {}, QuantOptions quant = {});

}  // namespace sagelab
