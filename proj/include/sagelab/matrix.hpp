// Dense real64 matrices, deterministic Gaussian sampling, and the reference
// kernels (matmul, row softmax, binary16 rounding) every other module builds on.
#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace sagelab {

using Vector = std::vector<double>;

/// Row-major dense matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix identity(std::size_t n);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }

    /// Copy of the nr x nc sub-matrix starting at (r0, c0).
    Matrix block(std::size_t r0, std::size_t c0, std::size_t nr, std::size_t nc) const;
    void set_block(std::size_t r0, std::size_t c0, const Matrix& src);

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
    bool operator==(const Matrix& o) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix transpose(const Matrix& a);
Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& a);
Matrix hadamard(const Matrix& a, const Matrix& b);
Vector row_sums(const Matrix& a);
Vector row_max(const Matrix& a);
/// Column means as a length-cols vector (mean over rows, per channel).
Vector col_means(const Matrix& a);
double frobenius_norm(const Matrix& a);
double max_abs(const Matrix& a);
bool all_finite(const Matrix& a);

/// mt19937_64 driving a Box-Muller transform. The engine is fully specified
/// by the C++ standard; the normal transform is implemented here rather than
/// taken from std::normal_distribution, whose algorithm is unspecified.
class Rng {
public:
    static constexpr std::string_view algorithm = "mt19937_64+box-muller";

    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    double normal();
    std::uint64_t next_u64() { return engine_(); }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// splitmix64 finalizer; used to derive per-head / per-trial seeds.
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t counter);

/// Entries i.i.d. Normal(0, sigma^2), drawn row-major from rng.
Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double sigma, Rng& rng);

/// C = A * B, rows of C computed in parallel; each entry accumulates in
/// ascending inner index so the result is independent of the thread count.
Matrix matmul(const Matrix& a, const Matrix& b);

/// Row-wise softmax with per-row max subtraction.
Matrix row_softmax(const Matrix& s);

/// Nearest IEEE binary16 value (ties to even), saturating at +-65504.
double round_to_fp16(double x);
Matrix round_to_fp16(const Matrix& x);

namespace serial {
/// Single-threaded reference for sagelab::matmul.
Matrix matmul(const Matrix& a, const Matrix& b);
}  // namespace serial

}  // namespace sagelab
