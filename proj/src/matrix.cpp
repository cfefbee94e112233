#include "sagelab/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace sagelab {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw std::invalid_argument("Matrix: data length " + std::to_string(data_.size()) +
                                    " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) throw std::invalid_argument("Matrix: ragged initializer");
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::block(std::size_t r0, std::size_t c0, std::size_t nr, std::size_t nc) const {
    if (r0 + nr > rows_ || c0 + nc > cols_) throw std::out_of_range("Matrix::block out of range");
    Matrix out(nr, nc);
    for (std::size_t r = 0; r < nr; ++r) {
        std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>((r0 + r) * cols_ + c0), nc,
                    out.data_.begin() + static_cast<std::ptrdiff_t>(r * nc));
    }
    return out;
}

void Matrix::set_block(std::size_t r0, std::size_t c0, const Matrix& src) {
    if (r0 + src.rows_ > rows_ || c0 + src.cols_ > cols_) {
        throw std::out_of_range("Matrix::set_block out of range");
    }
    for (std::size_t r = 0; r < src.rows_; ++r) {
        std::copy_n(src.data_.begin() + static_cast<std::ptrdiff_t>(r * src.cols_), src.cols_,
                    data_.begin() + static_cast<std::ptrdiff_t>((r0 + r) * cols_ + c0));
    }
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                    std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                    " vs " + std::to_string(b.rows()) + "x" +
                                    std::to_string(b.cols()));
    }
}

template <typename Op>
Matrix zip(const Matrix& a, const Matrix& b, const char* what, Op op) {
    require_same_shape(a, b, what);
    Matrix out(a.rows(), a.cols());
    auto av = a.values();
    auto bv = b.values();
    auto ov = out.values();
    for (std::size_t k = 0; k < ov.size(); ++k) ov[k] = op(av[k], bv[k]);
    return out;
}

void require_inner(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: inner dimension mismatch " +
                                    std::to_string(a.cols()) + " vs " + std::to_string(b.rows()));
    }
}

// Accumulates row i of A*B in i-k-j order. Every entry C[i][j] receives its
// products in ascending k, which is the order a plain dot product would use.
inline void matmul_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
    auto crow = c.row(i);
    const auto arow = a.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
        const double aik = arow[k];
        const auto brow = b.row(k);
        for (std::size_t j = 0; j < crow.size(); ++j) crow[j] += aik * brow[j];
    }
}

}  // namespace

Matrix operator+(const Matrix& a, const Matrix& b) {
    return zip(a, b, "add", [](double x, double y) { return x + y; });
}

Matrix operator-(const Matrix& a, const Matrix& b) {
    return zip(a, b, "subtract", [](double x, double y) { return x - y; });
}

Matrix operator*(double s, const Matrix& a) {
    Matrix out = a;
    for (double& v : out.values()) v *= s;
    return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    return zip(a, b, "hadamard", [](double x, double y) { return x * y; });
}

Vector row_sums(const Matrix& a) {
    Vector out(a.rows(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (double v : a.row(i)) out[i] += v;
    return out;
}

Vector row_max(const Matrix& a) {
    Vector out(a.rows(), -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (double v : a.row(i)) out[i] = std::max(out[i], v);
    return out;
}

Vector col_means(const Matrix& a) {
    Vector out(a.cols(), 0.0);
    if (a.rows() == 0) return out;
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const auto r = a.row(i);
        for (std::size_t j = 0; j < a.cols(); ++j) out[j] += r[j];
    }
    for (double& v : out) v /= static_cast<double>(a.rows());
    return out;
}

double frobenius_norm(const Matrix& a) {
    double s = 0.0;
    for (double v : a.values()) s += v * v;
    return std::sqrt(s);
}

double max_abs(const Matrix& a) {
    double m = 0.0;
    for (double v : a.values()) m = std::max(m, std::abs(v));
    return m;
}

bool all_finite(const Matrix& a) {
    return std::all_of(a.values().begin(), a.values().end(),
                       [](double v) { return std::isfinite(v); });
}

double Rng::uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // 1 - u lies in (0, 1], so the log is finite.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t counter) {
    std::uint64_t z = base + (counter + 1) * 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double sigma, Rng& rng) {
    if (!(sigma >= 0.0)) throw std::invalid_argument("gaussian_matrix: sigma must be >= 0");
    if (rows == 0 || cols == 0) throw std::invalid_argument("gaussian_matrix: empty shape");
    Matrix m(rows, cols);
    for (double& v : m.values()) v = sigma * rng.normal();
    return m;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    require_inner(a, b);
    Matrix c(a.rows(), b.cols());
    const auto rows = static_cast<std::ptrdiff_t>(a.rows());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < rows; ++i) matmul_row(a, b, c, static_cast<std::size_t>(i));
    return c;
}

namespace serial {

Matrix matmul(const Matrix& a, const Matrix& b) {
    require_inner(a, b);
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) matmul_row(a, b, c, i);
    return c;
}

}  // namespace serial

Matrix row_softmax(const Matrix& s) {
    Matrix p(s.rows(), s.cols());
    for (std::size_t i = 0; i < s.rows(); ++i) {
        const auto in = s.row(i);
        auto out = p.row(i);
        const double mx = *std::max_element(in.begin(), in.end());
        double sum = 0.0;
        for (std::size_t j = 0; j < in.size(); ++j) {
            out[j] = std::exp(in[j] - mx);
            sum += out[j];
        }
        for (double& v : out) v /= sum;
    }
    return p;
}

double round_to_fp16(double x) {
    constexpr double kMaxHalf = 65504.0;
    if (std::isnan(x) || x == 0.0) return x;
    const double ax = std::abs(x);
    if (ax >= kMaxHalf) return std::copysign(kMaxHalf, x);
    int e = 0;
    std::frexp(ax, &e);
    // ax in [2^(e-1), 2^e); binary16 keeps 10 fraction bits above exponent -14.
    const int exponent = std::max(e - 1, -14);
    const double quantum = std::ldexp(1.0, exponent - 10);
    const double r = std::nearbyint(ax / quantum) * quantum;
    return std::copysign(std::min(r, kMaxHalf), x);
}

Matrix round_to_fp16(const Matrix& x) {
    Matrix out = x;
    for (double& v : out.values()) v = round_to_fp16(v);
    return out;
}

}  // namespace sagelab
