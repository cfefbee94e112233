#include <omp.h>

#include <exception>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "sagelab/experiments.hpp"
#include "sagelab/report.hpp"

namespace {

constexpr const char* kFooter =
    "Only the attention error-analysis experiments are built. The tokens-per-step "
    "pretraining runs, loss curves and kernel speed measurements are not part of this tool.";

struct Options {
    std::string config_path;
    std::vector<std::pair<std::string, std::string>> overrides;  // applied after the config file
    std::string out;
    std::string format = "csv";
    int threads = 0;
};

void add_common(CLI::App* sub, Options& opt) {
    sub->add_option("--config", opt.config_path, "key=value config file (flags override it)")
        ->check(CLI::ExistingFile);
    auto value = [&](const std::string& flag, const std::string& key, const std::string& help) {
        sub->add_option_function<std::string>(
            flag, [&opt, key](const std::string& v) { opt.overrides.emplace_back(key, v); }, help);
    };
    auto toggle = [&](const std::string& flag, const std::string& key, const char* v, const std::string& help) {
        sub->add_flag_callback(flag, [&opt, key, v] { opt.overrides.emplace_back(key, v); }, help);
    };
    value("--seq-len", "seq_len", "sequence length N");
    value("--head-dim", "head_dim", "head dimension D");
    value("--block-q", "block_q", "query tile rows");
    value("--block-kv", "block_kv", "key/value tile rows");
    value("--heads", "heads", "independent heads per seed");
    value("--seeds", "seeds", "seed list, e.g. 1,2,7 or 1..20");
    value("--sigma-list", "sigma_list", "comma-separated sigma values for sweep-qkstd");
    value("--sigma-q", "sigma_q", "std of Q entries");
    value("--sigma-k", "sigma_k", "std of K entries");
    value("--sigma-v", "sigma_v", "std of V entries");
    value("--sigma-do", "sigma_do", "std of dO entries");
    value("--trials", "trials", "instances for bound-check");
    value("--k-offset", "k_offset", "constant added to every K entry");
    value("--qk-norm-gamma", "qk_norm_gamma", "QK-norm gain");
    value("--policy", "policy", "per-site precision, e.g. qk=exact,dp=fp16-emulated");
    toggle("--no-k-smooth", "k_smooth", "false", "disable K-smoothing");
    toggle("--q-smooth", "q_smooth", "true", "enable block-wise Q-smoothing");
    toggle("--qk-norm", "qk_norm", "true", "apply RMS QK-norm to generated Q and K");
    toggle("--fp32-scales", "fp32_scales", "true", "round quantization scales through float");
    sub->add_option("--out", opt.out, "output path (stdout if omitted); metadata goes to <out>.meta.json");
    sub->add_option("--format", opt.format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
    sub->add_option("--threads", opt.threads, "OpenMP threads (0 = runtime default)")->check(CLI::NonNegativeNumber);
}

sagelab::ExperimentConfig resolve(const Options& opt) {
    sagelab::ExperimentConfig cfg;
    if (!opt.config_path.empty()) cfg = sagelab::load_config(opt.config_path);
    for (const auto& [k, v] : opt.overrides) sagelab::apply_config_entry(cfg, k, v);
    cfg.validate();
    return cfg;
}

void emit(const Options& opt, const sagelab::Table& table, const std::string& experiment,
          const sagelab::ExperimentConfig& cfg) {
    const auto fmt = sagelab::parse_format(opt.format);
    if (opt.out.empty()) {
        std::cout << sagelab::render(table, fmt);
    } else {
        sagelab::write_outputs(opt.out, table, fmt, experiment, cfg);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sagelab: error analysis of trainable INT8 attention"};
    app.footer(kFooter);
    app.require_subcommand(1);

    Options opt;
    auto* sweep = app.add_subcommand("sweep-qkstd", "tiled kernels vs exact attention across sigma_Q = sigma_K");
    auto* trace = app.add_subcommand("trace-components", "pseudo-quantized intermediates vs exact attention");
    auto* bound = app.add_subcommand("bound-check", "check RMS(dS) against its max|dP - delta| bound");
    auto* ablate = app.add_subcommand("ablate-smoothing", "no smoothing vs K-smoothing vs Q+K smoothing");
    for (auto* sub : {sweep, trace, bound, ablate}) {
        add_common(sub, opt);
        sub->footer(kFooter);
    }

    CLI11_PARSE(app, argc, argv);

    try {
        if (opt.threads > 0) omp_set_num_threads(opt.threads);
        const auto cfg = resolve(opt);
        if (sweep->parsed()) {
            const auto result = sagelab::run_sweep_qkstd(cfg, cfg.sigma_list);
            emit(opt, sagelab::to_table(sagelab::summarize(result)), result.experiment, cfg);
        } else if (trace->parsed()) {
            const auto result = sagelab::run_trace_components(cfg);
            emit(opt, sagelab::to_table(sagelab::summarize(result)), result.experiment, cfg);
        } else if (ablate->parsed()) {
            const auto result = sagelab::run_smoothing_ablation(cfg);
            emit(opt, sagelab::to_table(sagelab::summarize(result)), result.experiment, cfg);
        } else {
            const auto summary = sagelab::run_bound_check(cfg, cfg.trials);
            emit(opt, sagelab::to_table(summary, cfg), "bound-check", cfg);
            if (summary.violations > 0) return 2;
        }
    } catch (const std::exception& e) {
        std::cerr << "sagelab: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
