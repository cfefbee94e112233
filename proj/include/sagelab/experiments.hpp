// Reproducible error-analysis experiments over synthetic Gaussian attention
// inputs: the sigma_Q/sigma_K sweep, intermediate-tensor tracing, the dS
// bound check, and the smoothing ablation.
#pragma once

#include <cstddef>
#include <cstdint>
#include <istream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sagelab/analysis.hpp"
#include "sagelab/attention_ref.hpp"
#include "sagelab/attention_tiled.hpp"

namespace sagelab {

inline constexpr std::string_view kLabVersion = "0.1.0";

struct ExperimentConfig {
    std::size_t seq_len = 1024;
    std::size_t head_dim = 64;
    std::size_t block_q = 64;
    std::size_t block_kv = 64;
    std::size_t heads = 1;
    double sigma_q = 1.0;
    double sigma_k = 1.0;
    double sigma_v = 1.0;
    double sigma_do = 1.0;
    std::vector<std::uint64_t> seeds = default_seeds();
    std::vector<double> sigma_list = {1.0, 3.0, 5.0, 8.0, 10.0};
    std::size_t trials = 1000;
    bool qk_norm = false;
    double qk_norm_gamma = 1.0;  // gamma = c * ones for both Q and K
    bool k_smooth = true;
    bool q_smooth = false;
    double k_offset = 0.0;  // constant added to every key entry before smoothing
    bool fp32_scales = false;
    PrecisionPolicy policy;  // block sizes are taken from block_q / block_kv

    static std::vector<std::uint64_t> default_seeds();

    /// Throws std::invalid_argument on non-positive counts, non-dividing
    /// blocks, negative sigmas, empty seed list, or an invalid policy.
    void validate() const;

    PrecisionPolicy resolved_policy() const;
    TilingConfig tiling() const;
    Smoothing smoothing() const { return {k_smooth, q_smooth}; }

    /// Every field as (key, value text) in a fixed order; keys match the
    /// config-file format.
    std::vector<std::pair<std::string, std::string>> fields() const;

    /// fields() joined as "key=value;key=value".
    std::string echo() const;
};

/// Sets one field from its config-file key. Unknown keys throw.
void apply_config_entry(ExperimentConfig& cfg, std::string_view key, std::string_view value);

/// Flat "key = value" lines; '#' starts a comment; blank lines ignored.
ExperimentConfig parse_config(std::istream& in, ExperimentConfig base = {});
ExperimentConfig load_config(const std::string& path, ExperimentConfig base = {});

std::vector<double> parse_real_list(std::string_view text);
/// "1,2,5" or an inclusive range "1..20" (or a mix).
std::vector<std::uint64_t> parse_seed_list(std::string_view text);

/// Q, K, V, dO for one (seed, head): N(0, sigma^2) entries from
/// Rng(mix_seed(seed, head)) in that order, then k_offset and optional QK-norm.
AttentionInputs make_inputs(const ExperimentConfig& cfg, std::uint64_t seed, std::size_t head = 0);

/// Per-sample metrics for one experimental setting.
struct SettingResult {
    std::string setting;  // e.g. "sigma=5", "k-smooth"
    double sigma = 0.0;
    std::vector<std::string> tensors;
    std::vector<std::vector<TensorError>> samples;  // [tensor][sample], sample = (seed, head)

    const std::vector<TensorError>& of(std::string_view tensor) const;
    double mean_cos(std::string_view tensor) const;
    double mean_rel(std::string_view tensor) const;
};

struct ExperimentResult {
    std::string experiment;
    ExperimentConfig config;
    std::vector<SettingResult> settings;
};

struct ResultRow {
    std::string experiment;
    std::string setting;
    std::string config;
    std::string tensor;
    double cos_sim_mean = 0.0;
    double cos_sim_std = 0.0;
    double rel_l2_mean = 0.0;
    double rel_l2_std = 0.0;
    std::size_t samples = 0;
    std::string rng;
};

/// Mean and sample standard deviation per (setting, tensor), in setting then
/// tensor order.
std::vector<ResultRow> summarize(const ExperimentResult& result);

/// O, dQ, dK, dV of the tiled kernels vs the oracle, one
/// setting per sigma with sigma_q = sigma_k = sigma.
ExperimentResult run_sweep_qkstd(const ExperimentConfig& cfg, const std::vector<double>& sigma_list);

/// Pseudo-quantized trace vs oracle on every intermediate, in report column order.
ExperimentResult run_trace_components(const ExperimentConfig& cfg);

/// Tiled kernels under no smoothing, K-smoothing, and Q+K smoothing on the
/// same inputs.
ExperimentResult run_smoothing_ablation(const ExperimentConfig& cfg);

struct BoundSummary {
    std::size_t trials = 0;
    std::size_t violations = 0;
    double min_margin = 0.0;  // over trials with RMS(dS) > 0; +inf if none
    double max_margin = 0.0;
    double max_row_rms_excess = 0.0;  // max over rows of RMS(P_i) - 1/sqrt(N)
};

/// Oracle traces on `trials` instances (seed mix_seed(seeds[0], t)) checked
/// against the dS RMS bound.
BoundSummary run_bound_check(const ExperimentConfig& cfg, std::size_t trials);

}  // namespace sagelab
