#pragma once

#include <cstddef>
#include <vector>

#include "otdistill/autograd.hpp"

namespace otdistill {

// Weights of the combined student objective. Not all zero.
struct LossWeights {
    double alpha = 1.0;  // task
    double beta = 1.0;   // transport
    double gamma = 0.1;  // centroid
};

enum class TaskKind { Regression, Classification };

struct TaskSpec {
    TaskKind kind = TaskKind::Classification;
    std::size_t num_classes = 2;  // classification only, >= 2
};

// Sum over backbones of (1 - mean per-sample cosine between the backbone's
// adapted features and the joint representation). The joint side is
// detached: it is the distillation target, not a trainable quantity here.
// Empty feature list gives 0 (no backbones to align).
ag::NodePtr alignment_loss(const std::vector<ag::NodePtr>& backbone_features,
                           const ag::NodePtr& joint);

// Regression: 1 - concordance correlation, averaged over output columns,
// population moments. The denominator gets +1e-8 only for columns where it
// is exactly zero (both sides constant with equal means), which maps the
// 0/0 case to a loss of 1; everywhere else the formula is untouched so the
// perfect and anti-correlated cases stay exact.
// Classification: mean cross-entropy on logits; targets hold class indices.
ag::NodePtr task_loss(const ag::NodePtr& predictions, const Matrix& targets,
                      const TaskSpec& task);

// Squared Euclidean distance between the batch-mean feature vectors.
// Teacher side detached.
ag::NodePtr centroid_loss(const ag::NodePtr& teacher, const ag::NodePtr& student);

// alpha*task + beta*ot + gamma*cen.
ag::NodePtr student_loss(const ag::NodePtr& task, const ag::NodePtr& ot,
                         const ag::NodePtr& cen, const LossWeights& w);

// Point-to-point distillation baselines, batch-averaged. Kl expects rows
// that are strictly positive distributions (softmax output qualifies);
// teacher is the reference p, student the approximation q.
enum class KdKind { Cosine, Mse, Kl };
ag::NodePtr pointwise_kd_loss(const ag::NodePtr& teacher, const ag::NodePtr& student,
                              KdKind kind);

// b x 1 matrix of class indices -> label vector, validating integrality
// and range.
std::vector<std::size_t> to_labels(const Matrix& targets, std::size_t num_classes);

}  // namespace otdistill
