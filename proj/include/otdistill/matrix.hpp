#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace otdistill {

// Dense row-major matrix of 64-bit floats. The universal value type: every
// feature batch, similarity matrix, transport plan and parameter block is
// one of these. Entries are checked finite at construction; NaN/Inf anywhere
// raises NumericalError.
class Matrix {
public:
    Matrix() = default;

    // Zero-filled rows x cols.
    Matrix(std::size_t rows, std::size_t cols);

    // Takes ownership of data (row-major, size rows*cols) and validates it.
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    // Nested-list construction, mostly for tests: Matrix({{1,2},{3,4}}).
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix filled(std::size_t rows, std::size_t cols, double v);
    static Matrix identity(std::size_t n);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& at(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
    std::string shape_str() const;

    // Re-checks the finiteness invariant after in-place edits.
    void validate(const char* context) const;

    bool equals_bitwise(const Matrix& o) const;

    // CSV: one row per line, '.' decimal, ',' separator, 17 significant
    // digits so doubles round-trip exactly.
    std::string to_csv() const;
    void save_csv(const std::string& path) const;
    static Matrix from_csv_text(const std::string& text);
    static Matrix load_csv(const std::string& path);

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// Shape-checked helpers on raw values (no gradients). The autograd layer
// wraps these.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

std::uint64_t matrix_bits_hash(const Matrix& m, std::uint64_t h);

}  // namespace otdistill
