// Error metrics between a perturbed run and the oracle, plus the dS RMS bound.
#pragma once

#include <array>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sagelab/attention_ref.hpp"
#include "sagelab/matrix.hpp"

namespace sagelab {

/// Cosine similarity of the flattened tensors. Two all-zero tensors give 1.
double cosine_similarity(const Matrix& a, const Matrix& b);

/// ||ref - test||_F / ||ref||_F. Throws std::domain_error on a zero reference.
double rel_l2(const Matrix& ref, const Matrix& test);

/// sqrt(mean(x^2)). Throws on an empty matrix.
double rms(const Matrix& x);

struct TensorError {
    double cos_sim = 1.0;
    double rel_l2 = 0.0;
    double rms_ref = 0.0;
    double rms_test = 0.0;
};

TensorError compare_tensor(const Matrix& ref, const Matrix& test);

/// Trace tensors in report column order.
inline constexpr std::array<std::string_view, 8> kTraceTensors = {"delta", "P",  "dP", "dS",
                                                                  "O",     "dQ", "dK", "dV"};

struct ErrorReport {
    std::vector<std::pair<std::string, TensorError>> entries;

    /// Throws std::out_of_range for an unknown tensor.
    const TensorError& at(std::string_view tensor) const;
};

/// One entry per kTraceTensors; delta is compared as a 1 x N matrix.
ErrorReport compare_traces(const AttentionTrace& ref, const AttentionTrace& test);

/// Trace tensor by report name ("delta" returned as 1 x N).
Matrix trace_tensor(const AttentionTrace& t, std::string_view name);

struct BoundCheckResult {
    double lhs = 0.0;     // RMS(dS)
    double rhs = 0.0;     // max_i ||dP_i - delta_i 1||_inf / sqrt(N)
    bool holds = true;    // lhs <= rhs + 1e-15
    double margin = 0.0;  // rhs / lhs, +inf when lhs == 0
};

BoundCheckResult check_ds_bound(const AttentionTrace& trace);

/// RMS of each row of m.
Vector row_rms(const Matrix& m);

}  // namespace sagelab
