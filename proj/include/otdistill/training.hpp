#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "otdistill/autograd.hpp"
#include "otdistill/losses.hpp"
#include "otdistill/matrix.hpp"
#include "otdistill/models.hpp"
#include "otdistill/synthdata.hpp"
#include "otdistill/teacherpool.hpp"

namespace otdistill {

// Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8 added outside
// the square root). State is keyed positionally on the registered leaves;
// frozen leaves are skipped. A non-finite gradient aborts the step naming
// the offending parameter.
class Adam {
public:
    Adam(std::vector<ag::NodePtr> params, double lr);

    void step();
    void zero_grad();

    std::size_t steps() const { return t_; }
    double lr() const { return lr_; }

private:
    struct Slot {
        Matrix m;
        Matrix v;
    };
    std::vector<ag::NodePtr> params_;
    std::vector<Slot> slots_;
    double lr_ = 0.0;
    std::size_t t_ = 0;
};

// What the student distills from, if anything. The kd kinds are
// point-to-point baselines against the joint teacher; PkdotSingle runs the
// structural pipeline pinned to the joint teacher; MtPkdot adds per-batch
// teacher selection over the whole pool.
enum class Selector { None, KdCosine, KdMse, KdKl, PkdotSingle, MtPkdot };

// Which modality the student keeps at inference. Wes keeps A and treats B
// as privileged; Sew swaps the roles and the hallucination direction.
enum class Direction { Wes, Sew };

std::string selector_name(Selector s);
Selector parse_selector(const std::string& name);
std::string direction_name(Direction d);
Direction parse_direction(const std::string& name);

struct TrainConfig {
    std::uint64_t seed = 0;
    std::size_t batch_size = 128;
    std::size_t anchors = 30;  // k, at most batch_size
    std::size_t teacher_epochs = 100;
    std::size_t align_epochs = 50;
    std::size_t student_epochs = 100;
    double teacher_lr = 1e-3;
    double align_lr = 1e-3;
    double student_lr = 1e-4;
    std::size_t patience = 15;  // epochs without val improvement before stopping
    LossWeights weights;
    double epsilon = 0.05;  // sinkhorn regularization
    std::size_t sinkhorn_iters = 200;
    double sinkhorn_tol = 1e-6;
    Direction direction = Direction::Wes;
    Selector selector = Selector::MtPkdot;
    std::size_t aligned_teachers = 2;  // adapters built by the alignment stage, <= 2
    std::size_t backbone_hidden = 64;
    std::size_t feature_dim = 32;
    std::size_t joint_dim = 64;
    std::size_t adapter_bottleneck = 16;
    std::size_t tnet_hidden = 64;
    FusionHead::Kind fusion = FusionHead::Kind::Concat;
};

// ConfigError on violated bounds (k > batch, non-positive rates, zero dims).
void validate(const TrainConfig& cfg);

// FNV-1a over a canonical rendering of every field. Stamped into run
// records and checkpoints so stale artifacts are rejected.
std::uint64_t config_hash(const TrainConfig& cfg);

// One metrics row. split encodes stage and split, e.g. "teacher/val".
struct EpochRow {
    std::size_t epoch = 0;
    std::string split;
    double task_loss = 0.0;
    double ot_loss = 0.0;
    double cen_loss = 0.0;
    double total = 0.0;
    double metric = 0.0;
};

// Append-only log of one pipeline run. Loss columns are raw (unweighted)
// stage losses; total is the weighted objective the optimizer stepped on.
struct RunRecord {
    std::vector<EpochRow> rows;
    std::vector<std::size_t> selection_counts;  // aligned teachers..., joint last
    double worst_fallback_gap = 0.0;  // min over batches of joint loss - selected loss
    std::vector<double> pre_align_cosine;   // per backbone, val split
    std::vector<double> post_align_cosine;  // same order
    double initial_align_loss = 0.0;
    double final_align_loss = 0.0;
    double best_val_metric = 0.0;
    std::size_t best_epoch = 0;
    double final_test_metric = 0.0;
    double wall_seconds = 0.0;
    std::uint64_t config_hash = 0;
};

// CSV with header epoch,split,task_loss,ot_loss,cen_loss,total,metric.
std::string metrics_csv(const RunRecord& rec);
// Deterministic field order; wall_seconds is the only run-varying field.
std::string run_record_json(const RunRecord& rec);

// Unimodal student: prevalent backbone, the teacher's frozen hallucination
// net standing in for the missing modality, and a fusion head over the real
// and hallucinated features.
struct StudentModel {
    Mlp backbone;
    TNet tnet;  // frozen, shared with the teacher that produced it
    FusionHead fusion;
    TaskSpec task;

    // Trainable leaves: backbone and fusion. The hallucination net is not
    // included; it never trains with the student.
    std::vector<ag::NodePtr> params() const;
    FusionHead::Output forward(const Matrix& raw_prevalent) const;
};

struct EvalResult {
    double task_loss = 0.0;
    double metric = 0.0;  // accuracy, or mean concordance for regression
};

// Architecture builders shared by the training stages and checkpoint
// loading: a freshly initialized model from the config's named init streams,
// with the same parameter names and order every time, so a checkpoint saved
// from one instance loads into another.
TeacherModel build_teacher_model(const TrainConfig& cfg, const Dataset& data);
StudentModel build_student_model(const TrainConfig& cfg, const Dataset& data, const TNet& tnet);

// The alignment stage's trainable parts, in checkpoint order (all adapters,
// then all heads).
struct AlignedParts {
    std::vector<ModalityAdapter> adapters;
    std::vector<Mlp> heads;

    std::vector<ag::NodePtr> params() const;
};
AlignedParts build_aligned_parts(const TrainConfig& cfg, const TeacherModel& teacher);

EvalResult evaluate_teacher(const TeacherModel& model, const Dataset& data,
                            const std::vector<std::size_t>& rows, Direction direction);
EvalResult evaluate_student(const StudentModel& model, const Dataset& data,
                            const std::vector<std::size_t>& rows, Direction direction);

// Stage 1: supervised multimodal teacher, best-val-loss weights retained,
// then the hallucination net fitted on the frozen teacher's feature pairs.
// Returns the fully frozen teacher. Divergence aborts with the epoch and
// learning rate in the message.
TeacherModel train_teacher(const TrainConfig& cfg, const Dataset& data, RunRecord& rec);

// Stage 2: per-modality adapters (and their selection heads) trained to
// pull backbone features toward the frozen joint representation. Heads
// learn on detached adapter outputs so the alignment objective alone moves
// the adapters. Records pre/post mean cosine per backbone on the val split.
// aligned_teachers == 0 skips training and yields a joint-only pool.
TeacherPool align_teachers(const TeacherModel& teacher, const TrainConfig& cfg,
                           const Dataset& data, RunRecord& rec);

// Invoked after each student epoch with the weights as they stand at that
// epoch (not the retained best). Epochs count from 0.
using EpochCallback = std::function<void(std::size_t epoch, const StudentModel& model)>;

// Stage 3: the student. Per batch: forward, teacher selection (per the
// selector), structural or pointwise distillation losses, one optimizer
// step. Keeps the best-val-metric weights. The pool supplies the
// hallucination net even when no distillation happens, so every selector
// trains the same architecture from the same initialization; with
// beta = gamma = 0 the loop degrades to prevalent-only supervised training
// and reproduces the Selector::None run bit for bit.
StudentModel train_student(TeacherPool& pool, const TrainConfig& cfg, const Dataset& data,
                           RunRecord& rec, const EpochCallback& on_epoch = {});

}  // namespace otdistill
