#include "otdistill/matrix.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "otdistill/errors.hpp"
#include "otdistill/rng.hpp"

namespace otdistill {

Matrix::Matrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw DimensionError("Matrix: data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str());
    }
    validate("Matrix construction");
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) {
            throw DimensionError("Matrix: ragged initializer rows");
        }
        data_.insert(data_.end(), r.begin(), r.end());
    }
    validate("Matrix construction");
}

Matrix Matrix::filled(std::size_t rows, std::size_t cols, double v) {
    Matrix m(rows, cols);
    for (auto& x : m.data_) x = v;
    m.validate("Matrix::filled");
    return m;
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

std::string Matrix::shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
}

void Matrix::validate(const char* context) const {
    for (std::size_t i = 0; i < data_.size(); ++i) {
        if (!std::isfinite(data_[i])) {
            throw NumericalError(std::string(context) + ": non-finite entry at flat index " +
                                 std::to_string(i) + " of " + shape_str() + " matrix");
        }
    }
}

bool Matrix::equals_bitwise(const Matrix& o) const {
    if (!same_shape(o)) return false;
    return std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(double)) == 0;
}

std::string Matrix::to_csv() const {
    std::string out;
    char buf[40];
    for (std::size_t r = 0; r < rows_; ++r) {
        for (std::size_t c = 0; c < cols_; ++c) {
            std::snprintf(buf, sizeof(buf), "%.17g", at(r, c));
            if (c) out += ',';
            out += buf;
        }
        out += '\n';
    }
    return out;
}

void Matrix::save_csv(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    f << to_csv();
    if (!f) throw IoError("write failed: " + path);
}

Matrix Matrix::from_csv_text(const std::string& text) {
    std::vector<double> data;
    std::size_t rows = 0, cols = 0;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::size_t n = 0;
        const char* p = line.c_str();
        while (true) {
            char* end = nullptr;
            double v = std::strtod(p, &end);
            if (end == p) throw IoError("CSV parse error in line: " + line);
            data.push_back(v);
            ++n;
            p = end;
            while (*p == ' ') ++p;
            if (*p == ',') {
                ++p;
            } else if (*p == '\0' || *p == '\r') {
                break;
            } else {
                throw IoError("unexpected character in CSV line: " + line);
            }
        }
        if (rows == 0) {
            cols = n;
        } else if (n != cols) {
            throw IoError("ragged CSV: expected " + std::to_string(cols) + " columns, got " +
                          std::to_string(n));
        }
        ++rows;
    }
    return Matrix(rows, cols, std::move(data));
}

Matrix Matrix::load_csv(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for read: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return from_csv_text(ss.str());
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: inner dimensions disagree, " + a.shape_str() + " vs " +
                             b.shape_str());
    }
    Matrix out(a.rows(), b.cols());
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a.at(i, p);
            if (av == 0.0) continue;
            const double* brow = &b.data()[p * m];
            double* orow = &out.data()[i * m];
            for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
    out.validate("matmul");
    return out;
}

Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) out.at(c, r) = a.at(r, c);
    return out;
}

std::uint64_t matrix_bits_hash(const Matrix& m, std::uint64_t h) {
    std::uint64_t dims[2] = {m.rows(), m.cols()};
    h = rng::fnv1a_bytes(dims, sizeof(dims), h);
    return rng::fnv1a_bytes(m.data().data(), m.size() * sizeof(double), h);
}

}  // namespace otdistill
