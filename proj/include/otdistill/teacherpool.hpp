#pragma once

#include <cstddef>
#include <vector>

#include "otdistill/autograd.hpp"
#include "otdistill/losses.hpp"
#include "otdistill/matrix.hpp"
#include "otdistill/models.hpp"

namespace otdistill {

// Frozen multimodal teacher: one backbone per modality, a fusion stage that
// produces the joint representation and task predictions, and the
// hallucination net fitted on this teacher's feature pairs. Copies share
// parameter leaves with the original, so freezing or hashing one view covers
// them all.
struct TeacherModel {
    Mlp backbone_prevalent;
    Mlp backbone_privileged;
    FusionHead fusion;
    TNet tnet;
    TaskSpec task;

    // Backbones and fusion; the optimizer for the supervised stage walks this.
    std::vector<ag::NodePtr> params() const;
    // Everything including the hallucination net, for frozenness hashes.
    std::vector<ag::NodePtr> all_params() const;
    void set_frozen(bool frozen);

    FusionHead::Output forward(const Matrix& raw_prevalent, const Matrix& raw_privileged) const;
};

// Pure selection rule over per-teacher batch losses, ordered aligned
// teachers first and the joint teacher last. Lowest loss wins; the joint
// teacher wins ties against any aligned teacher, and between tied aligned
// teachers the lower index wins. NaN marks an excluded teacher. Throws
// NumericalError when every entry is NaN.
std::size_t argmin_teacher(const std::vector<double>& losses);

// Ordered set of frozen teachers the distillation stage draws from: the
// aligned per-modality teachers (adapter output plus a small prediction
// head each) and, always last, the joint teacher. Selection happens per
// batch by evaluating each teacher's task loss through its own frozen head
// and keeping the most confident one; the joint teacher is the fallback, so
// the selected loss never exceeds the joint loss on any batch.
class TeacherPool {
public:
    TeacherPool() = default;

    // adapters[i] consumes backbone i's features (prevalent first, then
    // privileged) and heads[i] maps that adapter's output to predictions.
    // Both lists must have the same length; they may be empty, leaving a
    // joint-only pool. All components are frozen on construction.
    TeacherPool(TeacherModel teacher, std::vector<ModalityAdapter> adapters,
                std::vector<Mlp> heads);

    struct Selection {
        ag::NodePtr features;     // b x joint_dim representation of the winner
        ag::NodePtr predictions;  // the winner's head output on this batch
        std::size_t teacher_id;   // aligned teachers 0..n-1, joint teacher n
        double loss;              // winner's batch task loss
        double joint_loss;        // joint teacher's batch task loss (NaN if excluded)
    };

    // Evaluates every teacher on the batch and returns the minimal-loss one,
    // incrementing its selection count. Teachers whose evaluation produces a
    // non-finite value are excluded with a warning on stderr; if none
    // survive, throws NumericalError. force_joint skips the contest and
    // selects the joint teacher, still counting the selection.
    Selection select(const Matrix& raw_prevalent, const Matrix& raw_privileged,
                     const Matrix& targets, bool force_joint = false);

    std::size_t aligned_count() const { return adapters_.size(); }
    std::size_t teacher_count() const { return adapters_.size() + 1; }
    std::size_t joint_index() const { return adapters_.size(); }

    // One slot per teacher, joint last; sums to the number of select() calls.
    const std::vector<std::size_t>& selection_counts() const { return counts_; }
    std::size_t batches_processed() const { return batches_; }

    const TeacherModel& teacher() const { return teacher_; }
    const ModalityAdapter& adapter(std::size_t i) const;
    const Mlp& head(std::size_t i) const;

    // Every parameter in the pool, for frozenness hashes.
    std::vector<ag::NodePtr> all_params() const;

private:
    TeacherModel teacher_;
    std::vector<ModalityAdapter> adapters_;
    std::vector<Mlp> heads_;
    std::vector<std::size_t> counts_;
    std::size_t batches_ = 0;
};

}  // namespace otdistill
