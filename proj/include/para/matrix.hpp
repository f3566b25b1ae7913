#pragma once

#include <initializer_list>
#include <vector>

#include "para/errors.hpp"

namespace para {

// Dense real matrix, row-major, 64-bit entries. The one carrier type for
// weights, adapters and factors. Zero rows or columns are allowed so that
// an empty orthonormal factor (r = 0, "reduce nothing") is representable.
class Matrix {
public:
    Matrix() = default;
    Matrix(int rows, int cols);
    Matrix(int rows, int cols, std::vector<double> data);

    static Matrix identity(int n);
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    bool empty() const { return rows_ == 0 || cols_ == 0; }

    double& operator()(int i, int j) { return data_[static_cast<std::size_t>(i) * cols_ + j]; }
    double operator()(int i, int j) const { return data_[static_cast<std::size_t>(i) * cols_ + j]; }

    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    Matrix transpose() const;

    // First n columns, in storage order.
    Matrix take_cols(int n) const;
    Matrix col(int j) const;
    static Matrix hcat(const Matrix& a, const Matrix& b);

    double frobenius_norm() const;
    double max_abs() const;
    double trace() const;
    bool all_finite() const;

    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& a);
Matrix operator*(const Matrix& a, double s);

// ||a - b||_F; zero iff equal. Shapes must match.
double frobenius_distance(const Matrix& a, const Matrix& b);
double max_abs_diff(const Matrix& a, const Matrix& b);

} // namespace para
