#include "otdistill/ot.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "otdistill/errors.hpp"

namespace otdistill {

ag::NodePtr cost_matrix(const SimilarityMatrix& teacher_rows,
                        const SimilarityMatrix& student_rows) {
    if (teacher_rows.is_full() || student_rows.is_full()) {
        throw ContractError("cost_matrix: inputs must be anchor-reduced similarity matrices");
    }
    if (!teacher_rows.values->value.same_shape(student_rows.values->value)) {
        throw ContractError("cost_matrix: shape mismatch, " +
                            teacher_rows.values->value.shape_str() + " vs " +
                            student_rows.values->value.shape_str());
    }
    if (teacher_rows.anchor_indices != student_rows.anchor_indices) {
        throw ContractError("cost_matrix: teacher and student anchor sets differ");
    }
    return ag::pairwise_sqdist(ag::detach(teacher_rows.values), student_rows.values);
}

TransportPlan sinkhorn(const Matrix& cost, double epsilon, std::size_t max_iters, double tol) {
    if (epsilon <= 0.0) {
        throw ContractError("sinkhorn: epsilon must be positive, got " +
                            std::to_string(epsilon));
    }
    if (cost.empty()) throw ContractError("sinkhorn: empty cost matrix");
    const std::size_t nr = cost.rows();
    const std::size_t nc = cost.cols();
    if (nr == 1 && nc == 1) {
        // Degenerate problem: the marginals admit exactly one coupling.
        TransportPlan one;
        one.plan = Matrix(1, 1, {1.0});
        one.epsilon = epsilon;
        one.iterations_used = 0;
        one.marginal_violation = 0.0;
        one.converged = true;
        return one;
    }
    const double log_mu = -std::log(static_cast<double>(nr));
    const double log_nu = -std::log(static_cast<double>(nc));

    // Work in potentials already divided by epsilon, against a pre-scaled
    // cost (and its transpose for a stride-1 column pass). The implied plan
    // entry is exp(F[i] + G[j] - ce[i*nc+j] + log_mu + log_nu).
    std::vector<double> ce(nr * nc), ce_t(nr * nc);
    for (std::size_t i = 0; i < nr; ++i) {
        for (std::size_t j = 0; j < nc; ++j) {
            const double v = cost.at(i, j) / epsilon;
            ce[i * nc + j] = v;
            ce_t[j * nr + i] = v;
        }
    }
    std::vector<double> F(nr, 0.0), G(nc, 0.0);

    // Stabilized log-sum-exp over one row/column of the kernel exponent.
    auto lse_row = [&](std::size_t i) {
        const double* c = ce.data() + i * nc;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < nc; ++j) m = std::max(m, G[j] - c[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < nc; ++j) s += std::exp(G[j] - c[j] - m);
        return m + log_nu + std::log(s);
    };
    auto lse_col = [&](std::size_t j) {
        const double* c = ce_t.data() + j * nr;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < nr; ++i) m = std::max(m, F[i] - c[i]);
        double s = 0.0;
        for (std::size_t i = 0; i < nr; ++i) s += std::exp(F[i] - c[i] - m);
        return m + log_mu + std::log(s);
    };

    // Max deviation of the implied row sums from mu. Once a full sweep has
    // run, the column update has just enforced the column marginals exactly,
    // so the row deviation is the whole violation.
    auto row_violation = [&]() {
        double v = 0.0;
        for (std::size_t i = 0; i < nr; ++i) {
            const double* c = ce.data() + i * nc;
            double rs = 0.0;
            for (std::size_t j = 0; j < nc; ++j)
                rs += std::exp(F[i] + G[j] - c[j] + log_mu + log_nu);
            v = std::max(v, std::fabs(rs - 1.0 / nr));
        }
        return v;
    };
    auto col_violation = [&]() {
        double v = 0.0;
        for (std::size_t j = 0; j < nc; ++j) {
            const double* c = ce_t.data() + j * nr;
            double cs = 0.0;
            for (std::size_t i = 0; i < nr; ++i)
                cs += std::exp(F[i] + G[j] - c[i] + log_mu + log_nu);
            v = std::max(v, std::fabs(cs - 1.0 / nc));
        }
        return v;
    };

    TransportPlan out;
    out.epsilon = epsilon;
    double viol = std::max(row_violation(), col_violation());
    std::size_t iter = 0;
    // The convergence probe costs as much as a half sweep, so in the
    // contended regime it runs every tenth sweep (and on the last one).
    const std::size_t check_every = 10;
    std::size_t since_check = 0;
    while (viol >= tol && iter < max_iters) {
        ++iter;
        for (std::size_t i = 0; i < nr; ++i) F[i] = -lse_row(i);
        for (std::size_t j = 0; j < nc; ++j) G[j] = -lse_col(j);
        for (std::size_t i = 0; i < nr; ++i) {
            if (!std::isfinite(F[i])) {
                throw NumericalError("sinkhorn: non-finite potential at iteration " +
                                     std::to_string(iter));
            }
        }
        for (std::size_t j = 0; j < nc; ++j) {
            if (!std::isfinite(G[j])) {
                throw NumericalError("sinkhorn: non-finite potential at iteration " +
                                     std::to_string(iter));
            }
        }
        ++since_check;
        if (since_check == check_every || iter == max_iters) {
            since_check = 0;
            viol = row_violation();
        }
    }
    out.iterations_used = iter;
    out.converged = viol < tol;

    Matrix plan(nr, nc);
    for (std::size_t i = 0; i < nr; ++i)
        for (std::size_t j = 0; j < nc; ++j)
            plan.at(i, j) = std::exp(F[i] + G[j] - ce[i * nc + j] + log_mu + log_nu);

    // Feasibility rounding: scale overweight rows, then overweight columns,
    // then spread the missing mass as a rank-one correction. Entries stay
    // nonnegative and the marginals become exact up to roundoff, so the
    // transport cost of the returned plan never undercuts the true optimum.
    const double mu = 1.0 / static_cast<double>(nr);
    const double nu = 1.0 / static_cast<double>(nc);
    for (std::size_t i = 0; i < nr; ++i) {
        double r = 0.0;
        for (std::size_t j = 0; j < nc; ++j) r += plan.at(i, j);
        if (r > mu) {
            const double s = mu / r;
            for (std::size_t j = 0; j < nc; ++j) plan.at(i, j) *= s;
        }
    }
    std::vector<double> col_err(nc, 0.0);
    for (std::size_t j = 0; j < nc; ++j) {
        double c = 0.0;
        for (std::size_t i = 0; i < nr; ++i) c += plan.at(i, j);
        if (c > nu) {
            const double s = nu / c;
            for (std::size_t i = 0; i < nr; ++i) plan.at(i, j) *= s;
            col_err[j] = 0.0;
        } else {
            col_err[j] = nu - c;
        }
    }
    std::vector<double> row_err(nr, 0.0);
    double total_err = 0.0;
    for (std::size_t j = 0; j < nc; ++j) total_err += col_err[j];
    for (std::size_t i = 0; i < nr; ++i) {
        double r = 0.0;
        for (std::size_t j = 0; j < nc; ++j) r += plan.at(i, j);
        row_err[i] = std::max(0.0, mu - r);
    }
    if (total_err > 0.0) {
        for (std::size_t i = 0; i < nr; ++i) {
            if (row_err[i] == 0.0) continue;
            for (std::size_t j = 0; j < nc; ++j)
                plan.at(i, j) += row_err[i] * col_err[j] / total_err;
        }
    }
    plan.validate("sinkhorn plan");

    // Violation of the plan actually returned (post-rounding).
    {
        std::vector<double> rs(nr, 0.0), cs(nc, 0.0);
        for (std::size_t i = 0; i < nr; ++i)
            for (std::size_t j = 0; j < nc; ++j) {
                rs[i] += plan.at(i, j);
                cs[j] += plan.at(i, j);
            }
        double v = 0.0;
        for (std::size_t i = 0; i < nr; ++i) v = std::max(v, std::fabs(rs[i] - mu));
        for (std::size_t j = 0; j < nc; ++j) v = std::max(v, std::fabs(cs[j] - nu));
        out.marginal_violation = v;
    }
    out.plan = std::move(plan);
    return out;
}

ag::NodePtr ot_loss(const SimilarityMatrix& teacher_rows, const SimilarityMatrix& student_rows,
                    double epsilon, std::size_t max_iters, double tol,
                    TransportPlan* plan_out) {
    auto cost = cost_matrix(teacher_rows, student_rows);
    TransportPlan tp = sinkhorn(cost->value, epsilon, max_iters, tol);
    auto loss = ag::sum_all(ag::mul(ag::constant(tp.plan), cost));
    if (plan_out) *plan_out = std::move(tp);
    return loss;
}

}  // namespace otdistill
