#include "sagelab/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace sagelab {

namespace {

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

std::string cell_text(const Cell& c) {
    if (const auto* s = std::get_if<std::string>(&c)) return *s;
    if (const auto* d = std::get_if<double>(&c)) return format_real(*d);
    return std::to_string(std::get<std::uint64_t>(c));
}

nlohmann::ordered_json cell_json(const Cell& c) {
    if (const auto* s = std::get_if<std::string>(&c)) return *s;
    if (const auto* d = std::get_if<double>(&c)) {
        if (!std::isfinite(*d)) return format_real(*d);
        return std::stod(format_real(*d));
    }
    return std::get<std::uint64_t>(c);
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f << content;
    if (!f) throw std::runtime_error("write to '" + path + "' failed");
}

}  // namespace

OutputFormat parse_format(std::string_view text) {
    if (text == "csv") return OutputFormat::csv;
    if (text == "json") return OutputFormat::json;
    throw std::invalid_argument("unknown output format '" + std::string(text) + "' (csv|json)");
}

std::string format_real(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

Table to_table(const std::vector<ResultRow>& rows) {
    Table t;
    t.columns = {"experiment",  "setting",    "config",      "tensor",  "cos_sim_mean", "cos_sim_std",
                 "rel_l2_mean", "rel_l2_std", "samples", "rng"};
    for (const auto& r : rows) {
        t.rows.push_back({r.experiment, r.setting, r.config, r.tensor, r.cos_sim_mean, r.cos_sim_std,
                          r.rel_l2_mean, r.rel_l2_std, static_cast<std::uint64_t>(r.samples), r.rng});
    }
    return t;
}

Table to_table(const BoundSummary& s, const ExperimentConfig& cfg) {
    Table t;
    t.columns = {"experiment", "config",     "trials",     "violations",
                 "min_margin", "max_margin", "max_row_rms_excess", "rng"};
    t.rows.push_back({std::string("bound-check"), cfg.echo(), static_cast<std::uint64_t>(s.trials),
                      static_cast<std::uint64_t>(s.violations), s.min_margin, s.max_margin,
                      s.max_row_rms_excess, std::string(Rng::algorithm)});
    return t;
}

std::string to_csv(const Table& t) {
    std::string out;
    for (std::size_t c = 0; c < t.columns.size(); ++c) {
        if (c) out += ',';
        out += csv_escape(t.columns[c]);
    }
    out += '\n';
    for (const auto& row : t.rows) {
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (c) out += ',';
            out += csv_escape(cell_text(row[c]));
        }
        out += '\n';
    }
    return out;
}

std::string to_json(const Table& t) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& row : t.rows) {
        nlohmann::ordered_json obj;
        for (std::size_t c = 0; c < row.size(); ++c) obj[t.columns[c]] = cell_json(row[c]);
        arr.push_back(std::move(obj));
    }
    return arr.dump(2) + "\n";
}

std::string render(const Table& t, OutputFormat fmt) {
    return fmt == OutputFormat::csv ? to_csv(t) : to_json(t);
}

std::string metadata_json(std::string_view experiment, const ExperimentConfig& cfg) {
    nlohmann::ordered_json meta;
    meta["experiment"] = experiment;
    meta["lab_version"] = kLabVersion;
    meta["rng"] = Rng::algorithm;
    nlohmann::ordered_json config;
    for (const auto& [k, v] : cfg.fields()) config[k] = v;
    meta["config"] = std::move(config);
    return meta.dump(2) + "\n";
}

void write_outputs(const std::string& path, const Table& t, OutputFormat fmt, std::string_view experiment,
                   const ExperimentConfig& cfg) {
    write_file(path, render(t, fmt));
    write_file(path + ".meta.json", metadata_json(experiment, cfg));
}

}  // namespace sagelab
