#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace svc {

// Dense row-major matrix of doubles. All spectral math runs on this type.
class Matrix {
public:
    Matrix(std::size_t rows, std::size_t cols);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }

    double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }
    double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }

    std::span<const double> row(std::size_t i) const noexcept { return {data_.data() + i * cols_, cols_}; }
    std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }

    std::span<const double> values() const noexcept { return data_; }
    std::span<double> values() noexcept { return data_; }

    bool same_shape(const Matrix& other) const noexcept {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }
    bool is_finite() const noexcept;
    double frobenius_norm() const noexcept;
    Matrix transposed() const;

    static Matrix identity(std::size_t n);

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_;
    std::size_t cols_;
    std::vector<double> data_;
};

double dot(std::span<const double> a, std::span<const double> b);
double norm2_sq(std::span<const double> a);
double norm2(std::span<const double> a);

// Sum of the values after sorting them ascending; the result is independent
// of the order the caller supplies them in.
double ordered_sum(std::span<const double> values);

}  // namespace svc
