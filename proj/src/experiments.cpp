#include "sagelab/experiments.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <tuple>

#include "sagelab/preprocess.hpp"

namespace sagelab {

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

std::vector<std::string_view> split(std::string_view text, char sep) {
    std::vector<std::string_view> out;
    while (true) {
        const auto pos = text.find(sep);
        out.push_back(trim(text.substr(0, pos)));
        if (pos == std::string_view::npos) break;
        text.remove_prefix(pos + 1);
    }
    return out;
}

std::string shortest(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
    text = trim(text);
    T v{};
    const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc{} || res.ptr != text.data() + text.size()) {
        throw std::invalid_argument("config: bad value '" + std::string(text) + "' for " + std::string(key));
    }
    return v;
}

bool parse_bool(std::string_view key, std::string_view text) {
    text = trim(text);
    if (text == "1" || text == "true" || text == "on" || text == "yes") return true;
    if (text == "0" || text == "false" || text == "off" || text == "no") return false;
    throw std::invalid_argument("config: bad boolean '" + std::string(text) + "' for " + std::string(key));
}

std::string join(const std::vector<std::string>& parts, char sep) {
    std::string out;
    for (const auto& p : parts) {
        if (!out.empty()) out += sep;
        out += p;
    }
    return out;
}

double mean_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

struct SampleId {
    std::uint64_t seed;
    std::size_t head;
};

std::vector<SampleId> sample_ids(const ExperimentConfig& cfg) {
    std::vector<SampleId> ids;
    for (std::uint64_t s : cfg.seeds)
        for (std::size_t h = 0; h < cfg.heads; ++h) ids.push_back({s, h});
    return ids;
}

SettingResult make_setting(std::string name, double sigma, std::vector<std::string> tensors) {
    SettingResult r;
    r.setting = std::move(name);
    r.sigma = sigma;
    r.samples.resize(tensors.size());
    r.tensors = std::move(tensors);
    return r;
}

const std::vector<std::string> kGradTensors = {"O", "dQ", "dK", "dV"};

// Tiled kernels vs oracle on one sample: errors for O, dQ, dK, dV.
std::array<TensorError, 4> tiled_vs_oracle(const AttentionInputs& in, const TilingConfig& tiling) {
    const AttentionTrace ref = attention_ref(in);
    const ForwardOutput fwd = sagebwd_forward(in, tiling);
    const Gradients g = sagebwd_backward(fwd, in, tiling);
    return {compare_tensor(ref.o, fwd.o), compare_tensor(ref.dq, g.dq), compare_tensor(ref.dk, g.dk),
            compare_tensor(ref.dv, g.dv)};
}

std::string format_sigma(double s) { return "sigma=" + shortest(s); }

}  // namespace

std::vector<std::uint64_t> ExperimentConfig::default_seeds() {
    std::vector<std::uint64_t> s(20);
    std::iota(s.begin(), s.end(), std::uint64_t{1});
    return s;
}

PrecisionPolicy ExperimentConfig::resolved_policy() const {
    PrecisionPolicy p = policy;
    p.block_q = block_q;
    p.block_kv = block_kv;
    return p;
}

TilingConfig ExperimentConfig::tiling() const {
    TilingConfig t;
    t.block_q = block_q;
    t.block_kv = block_kv;
    t.policy = resolved_policy();
    t.smoothing = smoothing();
    t.quant.fp32_scale = fp32_scales;
    return t;
}

void ExperimentConfig::validate() const {
    if (seq_len == 0 || head_dim == 0 || block_q == 0 || block_kv == 0 || heads == 0) {
        throw std::invalid_argument("config: seq_len, head_dim, block_q, block_kv, heads must be positive");
    }
    if (seq_len % block_q != 0 || seq_len % block_kv != 0) {
        throw std::invalid_argument("config: block_q and block_kv must divide seq_len");
    }
    for (double s : {sigma_q, sigma_k, sigma_v, sigma_do}) {
        if (!(s >= 0.0)) throw std::invalid_argument("config: sigmas must be >= 0");
    }
    for (double s : sigma_list) {
        if (!(s >= 0.0)) throw std::invalid_argument("config: sigma_list entries must be >= 0");
    }
    if (seeds.empty()) throw std::invalid_argument("config: at least one seed required");
    if (!std::isfinite(k_offset) || !std::isfinite(qk_norm_gamma)) {
        throw std::invalid_argument("config: k_offset and qk_norm_gamma must be finite");
    }
    resolved_policy().validate();
}

std::vector<std::pair<std::string, std::string>> ExperimentConfig::fields() const {
    std::vector<std::string> seed_text, sigma_text;
    for (auto s : seeds) seed_text.push_back(std::to_string(s));
    for (double s : sigma_list) sigma_text.push_back(shortest(s));
    auto b = [](bool v) { return std::string(v ? "true" : "false"); };
    return {
        {"seq_len", std::to_string(seq_len)},
        {"head_dim", std::to_string(head_dim)},
        {"block_q", std::to_string(block_q)},
        {"block_kv", std::to_string(block_kv)},
        {"heads", std::to_string(heads)},
        {"sigma_q", shortest(sigma_q)},
        {"sigma_k", shortest(sigma_k)},
        {"sigma_v", shortest(sigma_v)},
        {"sigma_do", shortest(sigma_do)},
        {"seeds", join(seed_text, ',')},
        {"sigma_list", join(sigma_text, ',')},
        {"trials", std::to_string(trials)},
        {"qk_norm", b(qk_norm)},
        {"qk_norm_gamma", shortest(qk_norm_gamma)},
        {"k_smooth", b(k_smooth)},
        {"q_smooth", b(q_smooth)},
        {"k_offset", shortest(k_offset)},
        {"fp32_scales", b(fp32_scales)},
        {"policy", to_string(policy)},
    };
}

std::string ExperimentConfig::echo() const {
    std::string out;
    for (const auto& [k, v] : fields()) {
        if (!out.empty()) out += ';';
        out += k + '=' + v;
    }
    return out;
}

void apply_config_entry(ExperimentConfig& cfg, std::string_view key, std::string_view value) {
    key = trim(key);
    value = trim(value);
    if (key == "seq_len") cfg.seq_len = parse_number<std::size_t>(key, value);
    else if (key == "head_dim") cfg.head_dim = parse_number<std::size_t>(key, value);
    else if (key == "block_q") cfg.block_q = parse_number<std::size_t>(key, value);
    else if (key == "block_kv") cfg.block_kv = parse_number<std::size_t>(key, value);
    else if (key == "heads") cfg.heads = parse_number<std::size_t>(key, value);
    else if (key == "sigma_q") cfg.sigma_q = parse_number<double>(key, value);
    else if (key == "sigma_k") cfg.sigma_k = parse_number<double>(key, value);
    else if (key == "sigma_v") cfg.sigma_v = parse_number<double>(key, value);
    else if (key == "sigma_do") cfg.sigma_do = parse_number<double>(key, value);
    else if (key == "seeds") cfg.seeds = parse_seed_list(value);
    else if (key == "sigma_list") cfg.sigma_list = parse_real_list(value);
    else if (key == "trials") cfg.trials = parse_number<std::size_t>(key, value);
    else if (key == "qk_norm") cfg.qk_norm = parse_bool(key, value);
    else if (key == "qk_norm_gamma") cfg.qk_norm_gamma = parse_number<double>(key, value);
    else if (key == "k_smooth") cfg.k_smooth = parse_bool(key, value);
    else if (key == "q_smooth") cfg.q_smooth = parse_bool(key, value);
    else if (key == "k_offset") cfg.k_offset = parse_number<double>(key, value);
    else if (key == "fp32_scales") cfg.fp32_scales = parse_bool(key, value);
    else if (key == "policy") cfg.policy = parse_policy(value, cfg.policy);
    else throw std::invalid_argument("config: unknown key '" + std::string(key) + "'");
}

ExperimentConfig parse_config(std::istream& in, ExperimentConfig base) {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string_view body = line;
        if (const auto hash = body.find('#'); hash != std::string_view::npos) body = body.substr(0, hash);
        body = trim(body);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string_view::npos) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
        }
        apply_config_entry(base, body.substr(0, eq), body.substr(eq + 1));
    }
    return base;
}

ExperimentConfig load_config(const std::string& path, ExperimentConfig base) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config file '" + path + "'");
    return parse_config(f, std::move(base));
}

std::vector<double> parse_real_list(std::string_view text) {
    std::vector<double> out;
    for (auto item : split(text, ',')) {
        if (item.empty()) continue;
        out.push_back(parse_number<double>("list", item));
    }
    return out;
}

std::vector<std::uint64_t> parse_seed_list(std::string_view text) {
    std::vector<std::uint64_t> out;
    for (auto item : split(text, ',')) {
        if (item.empty()) continue;
        if (const auto dots = item.find(".."); dots != std::string_view::npos) {
            const auto lo = parse_number<std::uint64_t>("seeds", item.substr(0, dots));
            const auto hi = parse_number<std::uint64_t>("seeds", item.substr(dots + 2));
            if (hi < lo) throw std::invalid_argument("seeds: empty range '" + std::string(item) + "'");
            for (std::uint64_t s = lo; s <= hi; ++s) out.push_back(s);
        } else {
            out.push_back(parse_number<std::uint64_t>("seeds", item));
        }
    }
    return out;
}

AttentionInputs make_inputs(const ExperimentConfig& cfg, std::uint64_t seed, std::size_t head) {
    Rng rng(mix_seed(seed, head));
    const std::size_t n = cfg.seq_len, d = cfg.head_dim;
    Matrix q = gaussian_matrix(n, d, cfg.sigma_q, rng);
    Matrix k = gaussian_matrix(n, d, cfg.sigma_k, rng);
    Matrix v = gaussian_matrix(n, d, cfg.sigma_v, rng);
    Matrix d_o = gaussian_matrix(n, d, cfg.sigma_do, rng);
    if (cfg.k_offset != 0.0) {
        for (double& x : k.values()) x += cfg.k_offset;
    }
    if (cfg.qk_norm) {
        QkNormParams params;
        params.gamma_q.assign(d, cfg.qk_norm_gamma);
        params.gamma_k.assign(d, cfg.qk_norm_gamma);
        std::tie(q, k) = qk_norm(q, k, params);
    }
    return AttentionInputs::make(std::move(q), std::move(k), std::move(v), std::move(d_o));
}

const std::vector<TensorError>& SettingResult::of(std::string_view tensor) const {
    for (std::size_t t = 0; t < tensors.size(); ++t)
        if (tensors[t] == tensor) return samples[t];
    throw std::out_of_range("SettingResult: no tensor '" + std::string(tensor) + "'");
}

double SettingResult::mean_cos(std::string_view tensor) const {
    std::vector<double> v;
    for (const auto& e : of(tensor)) v.push_back(e.cos_sim);
    return mean_of(v);
}

double SettingResult::mean_rel(std::string_view tensor) const {
    std::vector<double> v;
    for (const auto& e : of(tensor)) v.push_back(e.rel_l2);
    return mean_of(v);
}

std::vector<ResultRow> summarize(const ExperimentResult& result) {
    std::vector<ResultRow> rows;
    const std::string echo = result.config.echo();
    for (const auto& s : result.settings) {
        for (std::size_t t = 0; t < s.tensors.size(); ++t) {
            std::vector<double> cos, rel;
            for (const auto& e : s.samples[t]) {
                cos.push_back(e.cos_sim);
                rel.push_back(e.rel_l2);
            }
            ResultRow row;
            row.experiment = result.experiment;
            row.setting = s.setting;
            row.config = echo;
            row.tensor = s.tensors[t];
            row.cos_sim_mean = mean_of(cos);
            row.cos_sim_std = sample_std(cos);
            row.rel_l2_mean = mean_of(rel);
            row.rel_l2_std = sample_std(rel);
            row.samples = cos.size();
            row.rng = std::string(Rng::algorithm);
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

ExperimentResult run_sweep_qkstd(const ExperimentConfig& cfg, const std::vector<double>& sigma_list) {
    if (sigma_list.empty()) throw std::invalid_argument("run_sweep_qkstd: empty sigma list");
    cfg.validate();
    ExperimentResult result{"sweep-qkstd", cfg, {}};
    result.config.sigma_list = sigma_list;
    const TilingConfig tiling = cfg.tiling();
    for (double sigma : sigma_list) {
        ExperimentConfig point = cfg;
        point.sigma_q = point.sigma_k = sigma;
        point.validate();
        SettingResult setting = make_setting(format_sigma(sigma), sigma, kGradTensors);
        for (const auto& id : sample_ids(point)) {
            const auto errs = tiled_vs_oracle(make_inputs(point, id.seed, id.head), tiling);
            for (std::size_t t = 0; t < errs.size(); ++t) setting.samples[t].push_back(errs[t]);
        }
        result.settings.push_back(std::move(setting));
    }
    return result;
}

ExperimentResult run_trace_components(const ExperimentConfig& cfg) {
    cfg.validate();
    ExperimentResult result{"trace-components", cfg, {}};
    std::vector<std::string> names(kTraceTensors.begin(), kTraceTensors.end());
    SettingResult setting = make_setting(format_sigma(cfg.sigma_q), cfg.sigma_q, names);
    const PrecisionPolicy policy = cfg.resolved_policy();
    QuantOptions quant;
    quant.fp32_scale = cfg.fp32_scales;
    for (const auto& id : sample_ids(cfg)) {
        const AttentionInputs in = make_inputs(cfg, id.seed, id.head);
        const ErrorReport report =
            compare_traces(attention_ref(in), pseudo_quantized_attention(in, policy, cfg.smoothing(), quant));
        for (std::size_t t = 0; t < names.size(); ++t) setting.samples[t].push_back(report.at(names[t]));
    }
    result.settings.push_back(std::move(setting));
    return result;
}

ExperimentResult run_smoothing_ablation(const ExperimentConfig& cfg) {
    cfg.validate();
    ExperimentResult result{"ablate-smoothing", cfg, {}};
    const std::array<std::pair<const char*, Smoothing>, 3> variants = {{
        {"no-smooth", Smoothing{false, false}},
        {"k-smooth", Smoothing{true, false}},
        {"qk-smooth", Smoothing{true, true}},
    }};
    for (const auto& [name, mode] : variants) result.settings.push_back(make_setting(name, cfg.sigma_q, kGradTensors));
    for (const auto& id : sample_ids(cfg)) {
        const AttentionInputs in = make_inputs(cfg, id.seed, id.head);
        for (std::size_t v = 0; v < variants.size(); ++v) {
            TilingConfig tiling = cfg.tiling();
            tiling.smoothing = variants[v].second;
            const auto errs = tiled_vs_oracle(in, tiling);
            for (std::size_t t = 0; t < errs.size(); ++t) result.settings[v].samples[t].push_back(errs[t]);
        }
    }
    return result;
}

BoundSummary run_bound_check(const ExperimentConfig& cfg, std::size_t trials) {
    if (trials == 0) throw std::invalid_argument("run_bound_check: trials must be >= 1");
    cfg.validate();
    BoundSummary summary;
    summary.trials = trials;
    summary.min_margin = std::numeric_limits<double>::infinity();
    summary.max_margin = 0.0;
    summary.max_row_rms_excess = -std::numeric_limits<double>::infinity();
    const double inv_sqrt_n = 1.0 / std::sqrt(static_cast<double>(cfg.seq_len));
    for (std::size_t t = 0; t < trials; ++t) {
        const AttentionTrace trace = attention_ref(make_inputs(cfg, mix_seed(cfg.seeds.front(), t)));
        const BoundCheckResult r = check_ds_bound(trace);
        if (!r.holds) ++summary.violations;
        if (r.lhs > 0.0) {
            summary.min_margin = std::min(summary.min_margin, r.margin);
            summary.max_margin = std::max(summary.max_margin, r.margin);
        }
        for (double v : row_rms(trace.p)) summary.max_row_rms_excess = std::max(summary.max_row_rms_excess, v - inv_sqrt_n);
    }
    return summary;
}

}  // namespace sagelab
