#pragma once

#include <cstddef>

#include "otdistill/autograd.hpp"
#include "otdistill/similarity.hpp"

namespace otdistill {

// Entropic optimal-transport coupling between batch rows under uniform
// marginals. plan sums to 1; marginal_violation is the max absolute
// deviation of its row/column sums from 1/n. converged=false means the
// iteration cap was hit before the tolerance (flagged, not fatal).
struct TransportPlan {
    Matrix plan;
    double epsilon = 0.0;
    std::size_t iterations_used = 0;
    double marginal_violation = 0.0;
    bool converged = false;
};

// cost[i][j] = squared Euclidean distance between teacher row i and student
// row j. Both inputs must be anchor-reduced with the same shape and the
// same anchor set. Differentiable toward the student only; the teacher is
// detached (frozen during distillation).
ag::NodePtr cost_matrix(const SimilarityMatrix& teacher_rows,
                        const SimilarityMatrix& student_rows);

// Log-domain Sinkhorn. Potentials stay finite for any finite cost, so the
// solver cannot NaN even at small epsilon; epsilon <= 0 is rejected.
TransportPlan sinkhorn(const Matrix& cost, double epsilon, std::size_t max_iters,
                       double tol);

// <plan, cost> with the plan treated as a constant of the current costs
// (envelope gradient). The entropic term shapes the plan but is excluded
// from the returned value. Optionally hands back the solved plan.
ag::NodePtr ot_loss(const SimilarityMatrix& teacher_rows, const SimilarityMatrix& student_rows,
                    double epsilon, std::size_t max_iters, double tol,
                    TransportPlan* plan_out = nullptr);

}  // namespace otdistill
