#include "otdistill/teacherpool.hpp"

#include <cmath>
#include <iostream>
#include <limits>

#include "otdistill/errors.hpp"

namespace otdistill {

std::vector<ag::NodePtr> TeacherModel::params() const {
    std::vector<ag::NodePtr> out;
    for (const auto& p : backbone_prevalent.params()) out.push_back(p);
    for (const auto& p : backbone_privileged.params()) out.push_back(p);
    for (const auto& p : fusion.params()) out.push_back(p);
    return out;
}

std::vector<ag::NodePtr> TeacherModel::all_params() const {
    std::vector<ag::NodePtr> out = params();
    for (const auto& p : tnet.net.params()) out.push_back(p);
    return out;
}

void TeacherModel::set_frozen(bool frozen) {
    backbone_prevalent.set_frozen(frozen);
    backbone_privileged.set_frozen(frozen);
    fusion.set_frozen(frozen);
    tnet.net.set_frozen(frozen);
}

FusionHead::Output TeacherModel::forward(const Matrix& raw_prevalent,
                                         const Matrix& raw_privileged) const {
    if (raw_prevalent.rows() != raw_privileged.rows()) {
        throw ContractError("TeacherModel::forward: modality batches have " +
                            std::to_string(raw_prevalent.rows()) + " and " +
                            std::to_string(raw_privileged.rows()) + " rows");
    }
    ag::NodePtr feats_prev = backbone_prevalent.forward(ag::constant(raw_prevalent));
    ag::NodePtr feats_priv = backbone_privileged.forward(ag::constant(raw_privileged));
    return fusion.fuse({feats_prev, feats_priv});
}

std::size_t argmin_teacher(const std::vector<double>& losses) {
    if (losses.empty()) {
        throw ContractError("argmin_teacher: empty loss list");
    }
    const std::size_t joint = losses.size() - 1;
    std::size_t best = losses.size();
    double best_loss = std::numeric_limits<double>::infinity();
    // The joint entry is scanned first so a tied aligned teacher can never
    // displace it; aligned ties resolve to the lower index via strict <.
    if (!std::isnan(losses[joint])) {
        best = joint;
        best_loss = losses[joint];
    }
    for (std::size_t i = 0; i < joint; ++i) {
        if (std::isnan(losses[i])) continue;
        if (losses[i] < best_loss) {
            best = i;
            best_loss = losses[i];
        }
    }
    if (best == losses.size()) {
        throw NumericalError("argmin_teacher: every teacher loss is non-finite");
    }
    return best;
}

TeacherPool::TeacherPool(TeacherModel teacher, std::vector<ModalityAdapter> adapters,
                         std::vector<Mlp> heads)
    : teacher_(std::move(teacher)), adapters_(std::move(adapters)), heads_(std::move(heads)) {
    if (adapters_.size() != heads_.size()) {
        throw ContractError("TeacherPool: " + std::to_string(adapters_.size()) +
                            " adapters but " + std::to_string(heads_.size()) + " heads");
    }
    if (adapters_.size() > 2) {
        throw ContractError("TeacherPool: at most one adapter per modality, got " +
                            std::to_string(adapters_.size()));
    }
    for (std::size_t i = 0; i < adapters_.size(); ++i) {
        if (adapters_[i].output_dim() != teacher_.fusion.joint_dim()) {
            throw ContractError("TeacherPool: adapter " + std::to_string(i) + " outputs dim " +
                                std::to_string(adapters_[i].output_dim()) + ", joint dim is " +
                                std::to_string(teacher_.fusion.joint_dim()));
        }
        if (heads_[i].input_dim() != adapters_[i].output_dim()) {
            throw ContractError("TeacherPool: head " + std::to_string(i) + " expects dim " +
                                std::to_string(heads_[i].input_dim()) + ", adapter outputs " +
                                std::to_string(adapters_[i].output_dim()));
        }
    }
    teacher_.set_frozen(true);
    for (auto& a : adapters_) a.set_frozen(true);
    for (auto& h : heads_) h.set_frozen(true);
    counts_.assign(teacher_count(), 0);
}

const ModalityAdapter& TeacherPool::adapter(std::size_t i) const {
    if (i >= adapters_.size()) {
        throw BoundsError("TeacherPool::adapter: index " + std::to_string(i) + " of " +
                          std::to_string(adapters_.size()));
    }
    return adapters_[i];
}

const Mlp& TeacherPool::head(std::size_t i) const {
    if (i >= heads_.size()) {
        throw BoundsError("TeacherPool::head: index " + std::to_string(i) + " of " +
                          std::to_string(heads_.size()));
    }
    return heads_[i];
}

std::vector<ag::NodePtr> TeacherPool::all_params() const {
    std::vector<ag::NodePtr> out = teacher_.all_params();
    for (const auto& a : adapters_) {
        for (const auto& p : a.params()) out.push_back(p);
    }
    for (const auto& h : heads_) {
        for (const auto& p : h.params()) out.push_back(p);
    }
    return out;
}

TeacherPool::Selection TeacherPool::select(const Matrix& raw_prevalent,
                                           const Matrix& raw_privileged, const Matrix& targets,
                                           bool force_joint) {
    if (counts_.empty()) {
        throw ContractError("TeacherPool::select: pool is default-constructed");
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> losses(teacher_count(), nan);
    std::vector<ag::NodePtr> reps(teacher_count());
    std::vector<ag::NodePtr> preds(teacher_count());

    // Backbone features are shared by every candidate, so compute them once.
    ag::NodePtr feats_prev = teacher_.backbone_prevalent.forward(ag::constant(raw_prevalent));
    ag::NodePtr feats_priv = teacher_.backbone_privileged.forward(ag::constant(raw_privileged));
    const std::vector<ag::NodePtr> feats = {feats_prev, feats_priv};

    const std::size_t joint = joint_index();
    try {
        FusionHead::Output out = teacher_.fusion.fuse(feats);
        losses[joint] = task_loss(out.predictions, targets, teacher_.task)->value.at(0, 0);
        reps[joint] = out.joint;
        preds[joint] = out.predictions;
    } catch (const NumericalError& e) {
        std::cerr << "warning: joint teacher excluded for this batch: " << e.what() << "\n";
    }

    if (!force_joint) {
        for (std::size_t i = 0; i < adapters_.size(); ++i) {
            try {
                ag::NodePtr rep = adapters_[i].adapt(feats[i]);
                ag::NodePtr head_out = heads_[i].forward(rep);
                losses[i] = task_loss(head_out, targets, teacher_.task)->value.at(0, 0);
                reps[i] = rep;
                preds[i] = head_out;
            } catch (const NumericalError& e) {
                std::cerr << "warning: aligned teacher " << i
                          << " excluded for this batch: " << e.what() << "\n";
            }
        }
    } else if (std::isnan(losses[joint])) {
        throw NumericalError("TeacherPool::select: joint teacher forced but non-finite");
    }

    const std::size_t id = argmin_teacher(losses);
    counts_[id] += 1;
    batches_ += 1;
    return Selection{reps[id], preds[id], id, losses[id], losses[joint]};
}

}  // namespace otdistill
