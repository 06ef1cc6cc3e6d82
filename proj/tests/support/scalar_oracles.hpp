#pragma once

// Stepwise scalar recomputations of the loss formulas, written as plain
// loops over doubles. Reference side of the loss oracle tests; nothing here
// may touch the graph ops.

#include <cmath>
#include <cstddef>
#include <vector>

#include "otdistill/matrix.hpp"

namespace oracle {

using otdistill::Matrix;

inline double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

inline std::vector<double> row_of(const Matrix& m, std::size_t i) {
    std::vector<double> r(m.cols());
    for (std::size_t j = 0; j < m.cols(); ++j) r[j] = m.at(i, j);
    return r;
}

inline std::vector<double> col_of(const Matrix& m, std::size_t j) {
    std::vector<double> c(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) c[i] = m.at(i, j);
    return c;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    return dot(a, b) / (norm(a) * norm(b));
}

// Concordance correlation of one output column, population moments. Mirrors
// the library's degenerate-denominator rule: +1e-8 only when the denominator
// is exactly 0.
inline double ccc_column(const std::vector<double>& x, const std::vector<double>& y) {
    const double mx = mean(x);
    const double my = mean(y);
    double var_x = 0.0, var_y = 0.0, cov = 0.0;
    const double n = static_cast<double>(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        var_x += (x[i] - mx) * (x[i] - mx);
        var_y += (y[i] - my) * (y[i] - my);
        cov += (x[i] - mx) * (y[i] - my);
    }
    var_x /= n;
    var_y /= n;
    cov /= n;
    double denom = var_x + var_y + (mx - my) * (mx - my);
    if (denom == 0.0) denom += 1e-8;
    return 2.0 * cov / denom;
}

inline double ccc_loss(const Matrix& pred, const Matrix& targets) {
    double s = 0.0;
    for (std::size_t j = 0; j < pred.cols(); ++j)
        s += ccc_column(col_of(pred, j), col_of(targets, j));
    return 1.0 - s / static_cast<double>(pred.cols());
}

// Sum over backbones of 1 - batch-mean per-sample cosine against the joint.
inline double alignment(const std::vector<Matrix>& feats, const Matrix& joint) {
    double total = 0.0;
    for (const Matrix& f : feats) {
        double mc = 0.0;
        for (std::size_t i = 0; i < f.rows(); ++i) mc += cosine(row_of(f, i), row_of(joint, i));
        total += 1.0 - mc / static_cast<double>(f.rows());
    }
    return total;
}

// Squared distance between column-mean vectors.
inline double centroid(const Matrix& teacher, const Matrix& student) {
    double s = 0.0;
    for (std::size_t j = 0; j < teacher.cols(); ++j) {
        const double gap = mean(col_of(student, j)) - mean(col_of(teacher, j));
        s += gap * gap;
    }
    return s;
}

inline double kd_cosine(const Matrix& t, const Matrix& s) {
    double mc = 0.0;
    for (std::size_t i = 0; i < t.rows(); ++i) mc += cosine(row_of(t, i), row_of(s, i));
    return 1.0 - mc / static_cast<double>(t.rows());
}

inline double kd_mse(const Matrix& t, const Matrix& s) {
    double acc = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) acc += (s[i] - t[i]) * (s[i] - t[i]);
    return acc / static_cast<double>(t.size());
}

// Batch-mean of sum_j p_j log(p_j / q_j) over matching rows.
inline double kd_kl(const Matrix& p, const Matrix& q) {
    double acc = 0.0;
    for (std::size_t i = 0; i < p.rows(); ++i)
        for (std::size_t j = 0; j < p.cols(); ++j)
            acc += p.at(i, j) * std::log(p.at(i, j) / q.at(i, j));
    return acc / static_cast<double>(p.rows());
}

}  // namespace oracle
