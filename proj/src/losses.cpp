#include "otdistill/losses.hpp"

#include <cmath>
#include <string>

#include "otdistill/errors.hpp"

namespace otdistill {

namespace {

// Per-sample cosine between matching rows of a and b, as a bx1 column.
// Rows of exact zeros are rejected by rowwise_l2norm.
ag::NodePtr row_cosines(const ag::NodePtr& a, const ag::NodePtr& b) {
    auto dots = ag::row_sums(ag::mul(a, b));
    return ag::div(ag::div(dots, ag::rowwise_l2norm(a)), ag::rowwise_l2norm(b));
}

// 1 - mean(x) as a 1x1 node.
ag::NodePtr one_minus_mean(const ag::NodePtr& x) {
    return ag::scalar_add(ag::scalar_mul(ag::mean_all(x), -1.0), 1.0);
}

void require_scalar_term(const ag::NodePtr& term, const char* name) {
    if (!term) throw ContractError(std::string("student_loss: null ") + name + " term");
    if (term->value.rows() != 1 || term->value.cols() != 1) {
        throw ContractError(std::string("student_loss: ") + name + " term is " +
                            term->value.shape_str() + ", expected 1x1");
    }
    if (!std::isfinite(term->scalar())) {
        throw NumericalError(std::string("student_loss: non-finite ") + name + " term");
    }
}

}  // namespace

ag::NodePtr alignment_loss(const std::vector<ag::NodePtr>& backbone_features,
                           const ag::NodePtr& joint) {
    if (!joint) throw ContractError("alignment_loss: null joint features");
    if (backbone_features.empty()) return ag::constant(Matrix(1, 1, {0.0}));

    // The joint representation is the distillation target; no gradient may
    // reach it through this loss.
    auto target = ag::detach(joint);
    ag::NodePtr total;
    for (std::size_t i = 0; i < backbone_features.size(); ++i) {
        const auto& f = backbone_features[i];
        if (!f) throw ContractError("alignment_loss: null backbone features");
        if (!f->value.same_shape(joint->value)) {
            throw ContractError("alignment_loss: backbone " + std::to_string(i) +
                                " features are " + f->value.shape_str() + ", joint is " +
                                joint->value.shape_str());
        }
        auto term = one_minus_mean(row_cosines(f, target));
        total = total ? ag::add(total, term) : term;
    }
    return total;
}

namespace {

// 1 - concordance correlation, averaged across output columns. Uses
// population moments. Columns whose denominator is exactly zero (both sides
// constant, equal means) get +1e-8 there, turning the 0/0 into a loss of 1;
// all other columns keep the unstabilized formula so perfect concordance
// produces exactly 0 and perfect anti-concordance exactly 2.
ag::NodePtr ccc_loss(const ag::NodePtr& predictions, const Matrix& targets) {
    const std::size_t b = predictions->value.rows();
    const std::size_t d = predictions->value.cols();
    if (b < 2) {
        throw ContractError("task_loss: regression needs at least 2 rows, got " +
                            std::to_string(b));
    }

    auto t = ag::constant(targets);
    auto mx = ag::col_means(predictions);  // 1xd
    auto my = ag::col_means(t);
    auto xc = ag::sub(predictions, mx);  // centered, row-broadcast
    auto yc = ag::sub(t, my);

    auto cov = ag::col_means(ag::mul(xc, yc));
    auto var_x = ag::col_means(ag::square(xc));
    auto var_y = ag::col_means(ag::square(yc));
    auto mean_gap = ag::square(ag::sub(mx, my));
    auto denom = ag::add(ag::add(var_x, var_y), mean_gap);

    Matrix eps(1, d);
    bool any_zero = false;
    for (std::size_t j = 0; j < d; ++j) {
        if (denom->value.at(0, j) == 0.0) {
            eps.at(0, j) = 1e-8;
            any_zero = true;
        }
    }
    if (any_zero) denom = ag::add(denom, ag::constant(eps));

    auto ccc = ag::div(ag::scalar_mul(cov, 2.0), denom);
    return one_minus_mean(ccc);
}

}  // namespace

ag::NodePtr task_loss(const ag::NodePtr& predictions, const Matrix& targets,
                      const TaskSpec& task) {
    if (!predictions) throw ContractError("task_loss: null predictions");
    const std::size_t b = predictions->value.rows();

    if (task.kind == TaskKind::Regression) {
        if (!predictions->value.same_shape(targets)) {
            throw ContractError("task_loss: predictions " + predictions->value.shape_str() +
                                " vs targets " + targets.shape_str());
        }
        return ccc_loss(predictions, targets);
    }

    if (task.num_classes < 2) {
        throw ContractError("task_loss: classification needs num_classes >= 2, got " +
                            std::to_string(task.num_classes));
    }
    if (predictions->value.cols() != task.num_classes) {
        throw ContractError("task_loss: predictions have " +
                            std::to_string(predictions->value.cols()) + " columns, expected " +
                            std::to_string(task.num_classes) + " class logits");
    }
    if (targets.rows() != b || targets.cols() != 1) {
        throw ContractError("task_loss: classification targets must be " + std::to_string(b) +
                            "x1 class indices, got " + targets.shape_str());
    }
    return ag::softmax_cross_entropy(predictions, to_labels(targets, task.num_classes));
}

ag::NodePtr centroid_loss(const ag::NodePtr& teacher, const ag::NodePtr& student) {
    if (!teacher || !student) throw ContractError("centroid_loss: null features");
    if (!teacher->value.same_shape(student->value)) {
        throw ContractError("centroid_loss: teacher " + teacher->value.shape_str() +
                            " vs student " + student->value.shape_str());
    }
    auto gap = ag::sub(ag::col_means(student), ag::col_means(ag::detach(teacher)));
    return ag::sum_all(ag::square(gap));
}

ag::NodePtr student_loss(const ag::NodePtr& task, const ag::NodePtr& ot,
                         const ag::NodePtr& cen, const LossWeights& w) {
    require_scalar_term(task, "task");
    require_scalar_term(ot, "ot");
    require_scalar_term(cen, "centroid");
    if (w.alpha < 0.0 || w.beta < 0.0 || w.gamma < 0.0) {
        throw ContractError("student_loss: loss weights must be nonnegative");
    }
    if (w.alpha == 0.0 && w.beta == 0.0 && w.gamma == 0.0) {
        throw ContractError("student_loss: all loss weights are zero");
    }
    return ag::add(ag::add(ag::scalar_mul(task, w.alpha), ag::scalar_mul(ot, w.beta)),
                   ag::scalar_mul(cen, w.gamma));
}

ag::NodePtr pointwise_kd_loss(const ag::NodePtr& teacher, const ag::NodePtr& student,
                              KdKind kind) {
    if (!teacher || !student) throw ContractError("pointwise_kd_loss: null features");
    if (!teacher->value.same_shape(student->value)) {
        throw ContractError("pointwise_kd_loss: teacher " + teacher->value.shape_str() +
                            " vs student " + student->value.shape_str());
    }
    auto ref = ag::detach(teacher);
    switch (kind) {
        case KdKind::Cosine:
            return one_minus_mean(row_cosines(ref, student));
        case KdKind::Mse:
            return ag::mean_all(ag::square(ag::sub(student, ref)));
        case KdKind::Kl: {
            // Rows must be strictly positive distributions; log rejects
            // anything else through the finiteness check.
            auto per_row = ag::row_sums(ag::mul(ref, ag::sub(ag::log(ref), ag::log(student))));
            return ag::mean_all(per_row);
        }
    }
    throw ContractError("pointwise_kd_loss: unknown kind");
}

std::vector<std::size_t> to_labels(const Matrix& targets, std::size_t num_classes) {
    if (targets.cols() != 1) {
        throw ContractError("to_labels: expected a single column of class indices, got " +
                            targets.shape_str());
    }
    std::vector<std::size_t> labels(targets.rows());
    for (std::size_t i = 0; i < targets.rows(); ++i) {
        const double v = targets.at(i, 0);
        const double r = std::nearbyint(v);
        if (v != r) {
            throw ContractError("to_labels: row " + std::to_string(i) + " holds " +
                                std::to_string(v) + ", not an integer class index");
        }
        if (r < 0.0 || r >= static_cast<double>(num_classes)) {
            throw BoundsError("to_labels: row " + std::to_string(i) + " class " +
                              std::to_string(static_cast<long long>(r)) + " outside [0, " +
                              std::to_string(num_classes) + ")");
        }
        labels[i] = static_cast<std::size_t>(r);
    }
    return labels;
}

}  // namespace otdistill
