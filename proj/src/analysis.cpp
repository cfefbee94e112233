#include "sagelab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace sagelab {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + std::to_string(a.rows()) +
                                    "x" + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                                    "x" + std::to_string(b.cols()));
    }
}

}  // namespace

double cosine_similarity(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "cosine_similarity");
    double dot = 0.0, na = 0.0, nb = 0.0;
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t k = 0; k < av.size(); ++k) {
        dot += av[k] * bv[k];
        na += av[k] * av[k];
        nb += bv[k] * bv[k];
    }
    if (na == 0.0 && nb == 0.0) return 1.0;
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

double rel_l2(const Matrix& ref, const Matrix& test) {
    require_same_shape(ref, test, "rel_l2");
    double diff = 0.0, norm = 0.0;
    auto rv = ref.values();
    auto tv = test.values();
    for (std::size_t k = 0; k < rv.size(); ++k) {
        const double e = rv[k] - tv[k];
        diff += e * e;
        norm += rv[k] * rv[k];
    }
    if (norm == 0.0) throw std::domain_error("rel_l2: reference has zero norm");
    return std::sqrt(diff) / std::sqrt(norm);
}

double rms(const Matrix& x) {
    if (x.empty()) throw std::invalid_argument("rms: empty input");
    double s = 0.0;
    for (double v : x.values()) s += v * v;
    return std::sqrt(s / static_cast<double>(x.size()));
}

Vector row_rms(const Matrix& m) {
    Vector out(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        double s = 0.0;
        for (double v : m.row(i)) s += v * v;
        out[i] = std::sqrt(s / static_cast<double>(m.cols()));
    }
    return out;
}

TensorError compare_tensor(const Matrix& ref, const Matrix& test) {
    return {cosine_similarity(ref, test), rel_l2(ref, test), rms(ref), rms(test)};
}

const TensorError& ErrorReport::at(std::string_view tensor) const {
    for (const auto& [name, err] : entries)
        if (name == tensor) return err;
    throw std::out_of_range("ErrorReport: no tensor '" + std::string(tensor) + "'");
}

Matrix trace_tensor(const AttentionTrace& t, std::string_view name) {
    if (name == "delta") return Matrix(1, t.delta.size(), t.delta);
    if (name == "P") return t.p;
    if (name == "dP") return t.dp;
    if (name == "dS") return t.ds;
    if (name == "O") return t.o;
    if (name == "dQ") return t.dq;
    if (name == "dK") return t.dk;
    if (name == "dV") return t.dv;
    if (name == "S") return t.s;
    throw std::out_of_range("trace_tensor: unknown tensor '" + std::string(name) + "'");
}

ErrorReport compare_traces(const AttentionTrace& ref, const AttentionTrace& test) {
    ErrorReport report;
    for (std::string_view name : kTraceTensors) {
        report.entries.emplace_back(std::string(name),
                                    compare_tensor(trace_tensor(ref, name), trace_tensor(test, name)));
    }
    return report;
}

BoundCheckResult check_ds_bound(const AttentionTrace& trace) {
    const std::size_t n = trace.ds.rows();
    if (n == 0 || !trace.dp.same_shape(trace.ds) || trace.delta.size() != n) {
        throw std::invalid_argument("check_ds_bound: trace lacks consistent dP, delta, dS");
    }
    BoundCheckResult r;
    r.lhs = rms(trace.ds);
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (double v : trace.dp.row(i)) worst = std::max(worst, std::abs(v - trace.delta[i]));
    r.rhs = worst / std::sqrt(static_cast<double>(trace.ds.cols()));
    r.holds = r.lhs <= r.rhs + 1e-15;
    r.margin = r.lhs == 0.0 ? std::numeric_limits<double>::infinity() : r.rhs / r.lhs;
    return r;
}

}  // namespace sagelab
