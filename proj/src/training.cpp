#include "otdistill/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <unordered_set>
#include <utility>

#include "json.hpp"
#include "otdistill/errors.hpp"
#include "otdistill/ot.hpp"
#include "otdistill/rng.hpp"
#include "otdistill/similarity.hpp"

namespace otdistill {

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

const Matrix& prevalent_of(Direction d, const Dataset& data) {
    return d == Direction::Wes ? data.raw_a : data.raw_b;
}

const Matrix& privileged_of(Direction d, const Dataset& data) {
    return d == Direction::Wes ? data.raw_b : data.raw_a;
}

TaskSpec task_spec_of(const Dataset& data) { return TaskSpec{data.task, data.num_classes}; }

std::size_t head_out_dim(const TaskSpec& spec) {
    return spec.kind == TaskKind::Classification ? spec.num_classes : 1;
}

// Consecutive full batches of the (already shuffled) index order; a trailing
// partial batch is dropped so every step sees the same batch shape.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order,
                                                   std::size_t batch) {
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t start = 0; start + batch <= order.size(); start += batch) {
        out.emplace_back(order.begin() + start, order.begin() + start + batch);
    }
    return out;
}

// Fraction of rows whose largest logit falls on the labeled class; the
// lowest index wins logit ties, matching the label decoding everywhere else.
double accuracy_of(const Matrix& logits, const Matrix& targets, std::size_t classes) {
    const std::vector<std::size_t> labels = to_labels(targets, classes);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        std::size_t arg = 0;
        for (std::size_t j = 1; j < logits.cols(); ++j) {
            if (logits.at(i, j) > logits.at(i, arg)) arg = j;
        }
        if (arg == labels[i]) correct += 1;
    }
    return double(correct) / double(logits.rows());
}

double batch_metric(const Matrix& predictions, const Matrix& targets, const TaskSpec& spec,
                    double task_loss_value) {
    if (spec.kind == TaskKind::Classification) {
        return accuracy_of(predictions, targets, spec.num_classes);
    }
    return 1.0 - task_loss_value;  // mean concordance
}

// Mean over rows of the cosine between corresponding rows of a and b. Value
// arithmetic only; a zero row contributes zero instead of dividing by zero.
double mean_row_cosine(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols() || a.rows() == 0) {
        throw ContractError("mean_row_cosine: shapes " + a.shape_str() + " vs " + b.shape_str());
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
            dot += a.at(i, j) * b.at(i, j);
            na += a.at(i, j) * a.at(i, j);
            nb += b.at(i, j) * b.at(i, j);
        }
        const double denom = std::sqrt(na) * std::sqrt(nb);
        if (denom > 0.0) sum += dot / denom;
    }
    return sum / double(a.rows());
}

// Tracks the best validation value seen so far, snapshotting parameter
// values so the winning epoch's weights can be restored after the loop.
struct BestTracker {
    bool maximize = false;
    bool has = false;
    double best = 0.0;
    std::size_t best_epoch = 0;
    std::size_t stale = 0;
    std::vector<Matrix> snap;

    explicit BestTracker(bool maximize_metric) : maximize(maximize_metric) {}

    void observe(double value, std::size_t epoch, const std::vector<ag::NodePtr>& params) {
        const bool better = !has || (maximize ? value > best : value < best);
        if (!better) {
            stale += 1;
            return;
        }
        has = true;
        best = value;
        best_epoch = epoch;
        stale = 0;
        snap.clear();
        snap.reserve(params.size());
        for (const auto& p : params) snap.push_back(p->value);
    }

    bool exhausted(std::size_t patience) const { return stale >= patience; }

    void restore(const std::vector<ag::NodePtr>& params) const {
        if (!has) return;
        for (std::size_t i = 0; i < params.size(); ++i) {
            params[i]->value = snap[i];
            params[i]->grad = Matrix(snap[i].rows(), snap[i].cols());
        }
    }
};

struct StageTimer {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double& sink;
    explicit StageTimer(double& total) : sink(total) {}
    ~StageTimer() {
        sink += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

[[noreturn]] void rethrow_divergence(const char* stage, std::size_t epoch, double lr,
                                     const NumericalError& e) {
    throw NumericalError(std::string(stage) + " diverged at epoch " + std::to_string(epoch) +
                         " (lr " + fmt(lr) + "): " + e.what());
}

}  // namespace

Adam::Adam(std::vector<ag::NodePtr> params, double lr) : params_(std::move(params)), lr_(lr) {
    if (!(lr > 0.0)) {
        throw ConfigError("adam: learning rate must be positive, got " + fmt(lr));
    }
    std::unordered_set<const ag::Node*> seen;
    slots_.reserve(params_.size());
    for (const auto& p : params_) {
        if (!p) throw ContractError("adam: null parameter");
        if (!seen.insert(p.get()).second) {
            throw ContractError("adam: parameter '" + p->name + "' registered twice");
        }
        slots_.push_back(Slot{Matrix(p->value.rows(), p->value.cols()),
                              Matrix(p->value.rows(), p->value.cols())});
    }
}

void Adam::step() {
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    t_ += 1;
    const double bc1 = 1.0 - std::pow(b1, double(t_));
    const double bc2 = 1.0 - std::pow(b2, double(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        ag::Node& p = *params_[i];
        if (!p.requires_grad) continue;
        Slot& s = slots_[i];
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            const double g = p.grad[j];
            if (!std::isfinite(g)) {
                throw NumericalError("adam: non-finite gradient for parameter '" +
                                     (p.name.empty() ? std::string("(unnamed)") : p.name) + "'");
            }
            s.m[j] = b1 * s.m[j] + (1.0 - b1) * g;
            s.v[j] = b2 * s.v[j] + (1.0 - b2) * g * g;
            const double mhat = s.m[j] / bc1;
            const double vhat = s.v[j] / bc2;
            p.value[j] -= lr_ * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

void Adam::zero_grad() { ag::zero_grad(params_); }

std::string selector_name(Selector s) {
    switch (s) {
        case Selector::None: return "none";
        case Selector::KdCosine: return "cosine";
        case Selector::KdMse: return "mse";
        case Selector::KdKl: return "kl";
        case Selector::PkdotSingle: return "pkdot-single";
        case Selector::MtPkdot: return "mt-pkdot";
    }
    throw ContractError("selector_name: unknown selector");
}

Selector parse_selector(const std::string& name) {
    if (name == "none") return Selector::None;
    if (name == "cosine") return Selector::KdCosine;
    if (name == "mse") return Selector::KdMse;
    if (name == "kl") return Selector::KdKl;
    if (name == "pkdot-single") return Selector::PkdotSingle;
    if (name == "mt-pkdot") return Selector::MtPkdot;
    throw ConfigError("unknown selector '" + name +
                      "' (expected none|cosine|mse|kl|pkdot-single|mt-pkdot)");
}

std::string direction_name(Direction d) {
    return d == Direction::Wes ? "wes" : "sew";
}

Direction parse_direction(const std::string& name) {
    if (name == "wes") return Direction::Wes;
    if (name == "sew") return Direction::Sew;
    throw ConfigError("unknown direction '" + name + "' (expected wes|sew)");
}

void validate(const TrainConfig& cfg) {
    if (cfg.batch_size < 2) {
        throw ConfigError("config: batch_size must be at least 2, got " +
                          std::to_string(cfg.batch_size));
    }
    if (cfg.anchors == 0 || cfg.anchors > cfg.batch_size) {
        throw ConfigError("config: anchors must be in [1, batch_size], got " +
                          std::to_string(cfg.anchors) + " with batch_size " +
                          std::to_string(cfg.batch_size));
    }
    if (cfg.teacher_epochs == 0 || cfg.align_epochs == 0 || cfg.student_epochs == 0) {
        throw ConfigError("config: epoch budgets must be positive");
    }
    if (!(cfg.teacher_lr > 0.0) || !(cfg.align_lr > 0.0) || !(cfg.student_lr > 0.0)) {
        throw ConfigError("config: learning rates must be positive");
    }
    if (cfg.patience == 0) {
        throw ConfigError("config: patience must be positive");
    }
    if (cfg.weights.alpha < 0.0 || cfg.weights.beta < 0.0 || cfg.weights.gamma < 0.0) {
        throw ConfigError("config: loss weights must be non-negative");
    }
    if (cfg.weights.alpha == 0.0 && cfg.weights.beta == 0.0 && cfg.weights.gamma == 0.0) {
        throw ConfigError("config: loss weights must not all be zero");
    }
    if (!(cfg.epsilon > 0.0)) {
        throw ConfigError("config: epsilon must be positive, got " + fmt(cfg.epsilon));
    }
    if (cfg.sinkhorn_iters == 0 || !(cfg.sinkhorn_tol > 0.0)) {
        throw ConfigError("config: sinkhorn iteration cap and tolerance must be positive");
    }
    if (cfg.aligned_teachers > 2) {
        throw ConfigError("config: aligned_teachers must be at most 2 (one per modality), got " +
                          std::to_string(cfg.aligned_teachers));
    }
    if (cfg.backbone_hidden == 0 || cfg.feature_dim == 0 || cfg.joint_dim == 0 ||
        cfg.adapter_bottleneck == 0 || cfg.tnet_hidden == 0) {
        throw ConfigError("config: architecture dimensions must be positive");
    }
}

std::uint64_t config_hash(const TrainConfig& cfg) {
    std::string s;
    s += "seed=" + std::to_string(cfg.seed);
    s += ";batch=" + std::to_string(cfg.batch_size);
    s += ";anchors=" + std::to_string(cfg.anchors);
    s += ";teacher_epochs=" + std::to_string(cfg.teacher_epochs);
    s += ";align_epochs=" + std::to_string(cfg.align_epochs);
    s += ";student_epochs=" + std::to_string(cfg.student_epochs);
    s += ";teacher_lr=" + fmt(cfg.teacher_lr);
    s += ";align_lr=" + fmt(cfg.align_lr);
    s += ";student_lr=" + fmt(cfg.student_lr);
    s += ";patience=" + std::to_string(cfg.patience);
    s += ";alpha=" + fmt(cfg.weights.alpha);
    s += ";beta=" + fmt(cfg.weights.beta);
    s += ";gamma=" + fmt(cfg.weights.gamma);
    s += ";epsilon=" + fmt(cfg.epsilon);
    s += ";sinkhorn_iters=" + std::to_string(cfg.sinkhorn_iters);
    s += ";sinkhorn_tol=" + fmt(cfg.sinkhorn_tol);
    s += ";direction=" + direction_name(cfg.direction);
    s += ";selector=" + selector_name(cfg.selector);
    s += ";aligned_teachers=" + std::to_string(cfg.aligned_teachers);
    s += ";backbone_hidden=" + std::to_string(cfg.backbone_hidden);
    s += ";feature_dim=" + std::to_string(cfg.feature_dim);
    s += ";joint_dim=" + std::to_string(cfg.joint_dim);
    s += ";adapter_bottleneck=" + std::to_string(cfg.adapter_bottleneck);
    s += ";tnet_hidden=" + std::to_string(cfg.tnet_hidden);
    s += ";fusion=" + std::string(cfg.fusion == FusionHead::Kind::Concat ? "concat" : "gated");
    return rng::fnv1a(s);
}

std::string metrics_csv(const RunRecord& rec) {
    std::string out = "epoch,split,task_loss,ot_loss,cen_loss,total,metric\n";
    for (const auto& r : rec.rows) {
        out += std::to_string(r.epoch) + "," + r.split + "," + fmt(r.task_loss) + "," +
               fmt(r.ot_loss) + "," + fmt(r.cen_loss) + "," + fmt(r.total) + "," +
               fmt(r.metric) + "\n";
    }
    return out;
}

std::string run_record_json(const RunRecord& rec) {
    nlohmann::json j;
    j["config_hash"] = rec.config_hash;
    j["best_epoch"] = rec.best_epoch;
    j["best_val_metric"] = rec.best_val_metric;
    j["final_test_metric"] = rec.final_test_metric;
    j["initial_align_loss"] = rec.initial_align_loss;
    j["final_align_loss"] = rec.final_align_loss;
    j["pre_align_cosine"] = rec.pre_align_cosine;
    j["post_align_cosine"] = rec.post_align_cosine;
    j["selection_counts"] = rec.selection_counts;
    j["worst_fallback_gap"] = rec.worst_fallback_gap;
    j["wall_seconds"] = rec.wall_seconds;
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : rec.rows) {
        rows.push_back({{"epoch", r.epoch},
                        {"split", r.split},
                        {"task_loss", r.task_loss},
                        {"ot_loss", r.ot_loss},
                        {"cen_loss", r.cen_loss},
                        {"total", r.total},
                        {"metric", r.metric}});
    }
    j["rows"] = rows;
    return j.dump(2) + "\n";
}

std::vector<ag::NodePtr> StudentModel::params() const {
    std::vector<ag::NodePtr> out;
    for (const auto& p : backbone.params()) out.push_back(p);
    for (const auto& p : fusion.params()) out.push_back(p);
    return out;
}

FusionHead::Output StudentModel::forward(const Matrix& raw_prevalent) const {
    ag::NodePtr feats = backbone.forward(ag::constant(raw_prevalent));
    ag::NodePtr hall = hallucinate(tnet, feats);
    return fusion.fuse({feats, hall});
}

EvalResult evaluate_teacher(const TeacherModel& model, const Dataset& data,
                            const std::vector<std::size_t>& rows, Direction direction) {
    if (rows.empty()) throw ContractError("evaluate_teacher: empty row set");
    const Matrix prev = rows_of(prevalent_of(direction, data), rows);
    const Matrix priv = rows_of(privileged_of(direction, data), rows);
    const Matrix targets = rows_of(data.targets, rows);
    FusionHead::Output out = model.forward(prev, priv);
    const double loss = task_loss(out.predictions, targets, model.task)->scalar();
    return EvalResult{loss, batch_metric(out.predictions->value, targets, model.task, loss)};
}

EvalResult evaluate_student(const StudentModel& model, const Dataset& data,
                            const std::vector<std::size_t>& rows, Direction direction) {
    if (rows.empty()) throw ContractError("evaluate_student: empty row set");
    const Matrix prev = rows_of(prevalent_of(direction, data), rows);
    const Matrix targets = rows_of(data.targets, rows);
    FusionHead::Output out = model.forward(prev);
    const double loss = task_loss(out.predictions, targets, model.task)->scalar();
    return EvalResult{loss, batch_metric(out.predictions->value, targets, model.task, loss)};
}

TeacherModel build_teacher_model(const TrainConfig& cfg, const Dataset& data) {
    validate(cfg);
    const TaskSpec spec = task_spec_of(data);
    const Matrix& prev = prevalent_of(cfg.direction, data);
    const Matrix& priv = privileged_of(cfg.direction, data);

    auto s_bp = rng::Stream::named(cfg.seed, "init/teacher/backbone-prevalent");
    auto s_bv = rng::Stream::named(cfg.seed, "init/teacher/backbone-privileged");
    auto s_fu = rng::Stream::named(cfg.seed, "init/teacher/fusion");
    auto s_tn = rng::Stream::named(cfg.seed, "init/teacher/tnet");

    TeacherModel model;
    model.backbone_prevalent = Mlp({prev.cols(), cfg.backbone_hidden, cfg.feature_dim},
                                   Activation::Tanh, s_bp, "teacher/backbone-prevalent", true);
    model.backbone_privileged = Mlp({priv.cols(), cfg.backbone_hidden, cfg.feature_dim},
                                    Activation::Tanh, s_bv, "teacher/backbone-privileged", true);
    model.fusion = FusionHead(cfg.fusion, {cfg.feature_dim, cfg.feature_dim}, cfg.joint_dim,
                              head_out_dim(spec), s_fu, "teacher/fusion");
    model.tnet = TNet(cfg.feature_dim, cfg.tnet_hidden, cfg.feature_dim, s_tn, "teacher/tnet");
    model.task = spec;
    return model;
}

StudentModel build_student_model(const TrainConfig& cfg, const Dataset& data, const TNet& tnet) {
    validate(cfg);
    const TaskSpec spec = task_spec_of(data);
    const Matrix& prev = prevalent_of(cfg.direction, data);

    auto s_bb = rng::Stream::named(cfg.seed, "init/student/backbone");
    auto s_fu = rng::Stream::named(cfg.seed, "init/student/fusion");
    StudentModel student;
    student.backbone = Mlp({prev.cols(), cfg.backbone_hidden, cfg.feature_dim}, Activation::Tanh,
                           s_bb, "student/backbone", true);
    student.tnet = tnet;  // frozen leaves shared with the donor
    student.fusion = FusionHead(cfg.fusion, {cfg.feature_dim, cfg.feature_dim}, cfg.joint_dim,
                                head_out_dim(spec), s_fu, "student/fusion");
    student.task = spec;
    return student;
}

std::vector<ag::NodePtr> AlignedParts::params() const {
    std::vector<ag::NodePtr> out;
    for (const auto& a : adapters) {
        for (const auto& p : a.params()) out.push_back(p);
    }
    for (const auto& h : heads) {
        for (const auto& p : h.params()) out.push_back(p);
    }
    return out;
}

AlignedParts build_aligned_parts(const TrainConfig& cfg, const TeacherModel& teacher) {
    validate(cfg);
    AlignedParts parts;
    for (std::size_t i = 0; i < cfg.aligned_teachers; ++i) {
        auto sa = rng::Stream::named(cfg.seed, "init/adapter-" + std::to_string(i));
        parts.adapters.emplace_back(cfg.feature_dim, cfg.adapter_bottleneck,
                                    teacher.fusion.joint_dim(), sa,
                                    "align/adapter-" + std::to_string(i));
        auto sh = rng::Stream::named(cfg.seed, "init/align-head-" + std::to_string(i));
        parts.heads.emplace_back(std::vector<std::size_t>{teacher.fusion.joint_dim(),
                                                          head_out_dim(teacher.task)},
                                 Activation::Tanh, sh, "align/head-" + std::to_string(i));
    }
    return parts;
}

TeacherModel train_teacher(const TrainConfig& cfg, const Dataset& data, RunRecord& rec) {
    validate(cfg);
    StageTimer timer(rec.wall_seconds);
    const TaskSpec spec = task_spec_of(data);
    const Matrix& prev = prevalent_of(cfg.direction, data);
    const Matrix& priv = privileged_of(cfg.direction, data);
    if (data.train_idx.size() < cfg.batch_size) {
        throw ConfigError("train split has " + std::to_string(data.train_idx.size()) +
                          " rows, smaller than one batch of " + std::to_string(cfg.batch_size));
    }

    TeacherModel model = build_teacher_model(cfg, data);
    const std::vector<ag::NodePtr> params = model.params();
    Adam opt(params, cfg.teacher_lr);
    auto shuffle = rng::Stream::named(cfg.seed, "shuffle/teacher");
    BestTracker best(/*maximize_metric=*/false);

    for (std::size_t epoch = 0; epoch < cfg.teacher_epochs; ++epoch) {
        std::vector<std::size_t> order = data.train_idx;
        shuffle.shuffle(order);
        const auto batches = make_batches(order, cfg.batch_size);
        double task_sum = 0.0, metric_sum = 0.0;
        for (const auto& batch : batches) {
            const Matrix bp = rows_of(prev, batch);
            const Matrix bv = rows_of(priv, batch);
            const Matrix bt = rows_of(data.targets, batch);
            try {
                FusionHead::Output out = model.forward(bp, bv);
                ag::NodePtr loss = task_loss(out.predictions, bt, spec);
                opt.zero_grad();
                ag::backward(loss);
                opt.step();
                task_sum += loss->scalar();
                metric_sum += batch_metric(out.predictions->value, bt, spec, loss->scalar());
            } catch (const NumericalError& e) {
                rethrow_divergence("teacher training", epoch, cfg.teacher_lr, e);
            }
        }
        const double n = double(batches.size());
        rec.rows.push_back(EpochRow{epoch, "teacher/train", task_sum / n, 0.0, 0.0, task_sum / n,
                                    metric_sum / n});
        const EvalResult ev = evaluate_teacher(model, data, data.val_idx, cfg.direction);
        rec.rows.push_back(
            EpochRow{epoch, "teacher/val", ev.task_loss, 0.0, 0.0, ev.task_loss, ev.metric});
        best.observe(ev.task_loss, epoch, params);
        if (best.exhausted(cfg.patience)) break;
    }
    best.restore(params);
    model.backbone_prevalent.set_frozen(true);
    model.backbone_privileged.set_frozen(true);
    model.fusion.set_frozen(true);

    // Hallucination net: regress privileged features from prevalent features
    // of the now-frozen teacher.
    const std::vector<ag::NodePtr> tparams = model.tnet.net.params();
    Adam topt(tparams, cfg.teacher_lr);
    auto tshuffle = rng::Stream::named(cfg.seed, "shuffle/tnet");
    BestTracker tbest(/*maximize_metric=*/false);

    auto tnet_mse = [&](const std::vector<std::size_t>& rows) {
        ag::NodePtr fp = model.backbone_prevalent.forward(ag::constant(rows_of(prev, rows)));
        ag::NodePtr fv = model.backbone_privileged.forward(ag::constant(rows_of(priv, rows)));
        ag::NodePtr hall = hallucinate(model.tnet, fp);
        return ag::mean_all(ag::square(ag::sub(hall, fv)));
    };

    for (std::size_t epoch = 0; epoch < cfg.teacher_epochs; ++epoch) {
        std::vector<std::size_t> order = data.train_idx;
        tshuffle.shuffle(order);
        const auto batches = make_batches(order, cfg.batch_size);
        double mse_sum = 0.0;
        for (const auto& batch : batches) {
            try {
                ag::NodePtr loss = tnet_mse(batch);
                topt.zero_grad();
                ag::backward(loss);
                topt.step();
                mse_sum += loss->scalar();
            } catch (const NumericalError& e) {
                rethrow_divergence("hallucination training", epoch, cfg.teacher_lr, e);
            }
        }
        const double train_mse = mse_sum / double(batches.size());
        rec.rows.push_back(EpochRow{epoch, "tnet/train", train_mse, 0.0, 0.0, train_mse, 0.0});
        const double val_mse = tnet_mse(data.val_idx)->scalar();
        rec.rows.push_back(EpochRow{epoch, "tnet/val", val_mse, 0.0, 0.0, val_mse, 0.0});
        tbest.observe(val_mse, epoch, tparams);
        if (tbest.exhausted(cfg.patience)) break;
    }
    tbest.restore(tparams);
    model.tnet.net.set_frozen(true);
    rec.config_hash = config_hash(cfg);
    return model;
}

TeacherPool align_teachers(const TeacherModel& teacher, const TrainConfig& cfg,
                           const Dataset& data, RunRecord& rec) {
    validate(cfg);
    StageTimer timer(rec.wall_seconds);
    for (const auto& p : teacher.all_params()) {
        if (p->requires_grad) {
            throw ContractError("align_teachers: teacher must be frozen, parameter '" + p->name +
                                "' still requires gradients");
        }
    }
    rec.config_hash = config_hash(cfg);
    if (cfg.aligned_teachers == 0) {
        rec.pre_align_cosine.clear();
        rec.post_align_cosine.clear();
        return TeacherPool(teacher, {}, {});
    }

    const TaskSpec spec = teacher.task;
    const Matrix& prev = prevalent_of(cfg.direction, data);
    const Matrix& priv = privileged_of(cfg.direction, data);
    if (data.train_idx.size() < cfg.batch_size) {
        throw ConfigError("train split has " + std::to_string(data.train_idx.size()) +
                          " rows, smaller than one batch of " + std::to_string(cfg.batch_size));
    }

    const std::size_t n = cfg.aligned_teachers;
    AlignedParts parts = build_aligned_parts(cfg, teacher);
    std::vector<ModalityAdapter>& adapters = parts.adapters;
    std::vector<Mlp>& heads = parts.heads;

    // Builds the alignment graph on a row set; shared by training batches
    // and validation summaries.
    struct AlignState {
        ag::NodePtr align;
        std::vector<ag::NodePtr> adapted;
        ag::NodePtr joint;
    };
    auto build = [&](const std::vector<std::size_t>& rows) {
        ag::NodePtr fp = teacher.backbone_prevalent.forward(ag::constant(rows_of(prev, rows)));
        ag::NodePtr fv = teacher.backbone_privileged.forward(ag::constant(rows_of(priv, rows)));
        const std::vector<ag::NodePtr> feats = {fp, fv};
        AlignState st;
        st.joint = teacher.fusion.fuse(feats).joint;
        for (std::size_t i = 0; i < n; ++i) st.adapted.push_back(adapters[i].adapt(feats[i]));
        st.align = alignment_loss(st.adapted, st.joint);
        return st;
    };
    auto val_summary = [&](double& align_out, double& combined_out, std::vector<double>& cosines) {
        const AlignState st = build(data.val_idx);
        const Matrix vt = rows_of(data.targets, data.val_idx);
        align_out = st.align->scalar();
        combined_out = align_out;
        cosines.clear();
        for (std::size_t i = 0; i < n; ++i) {
            combined_out += task_loss(heads[i].forward(st.adapted[i]), vt, spec)->scalar();
            cosines.push_back(mean_row_cosine(st.adapted[i]->value, st.joint->value));
        }
    };

    double pre_align = 0.0, pre_combined = 0.0;
    val_summary(pre_align, pre_combined, rec.pre_align_cosine);
    rec.initial_align_loss = pre_align;

    const std::vector<ag::NodePtr> params = parts.params();
    Adam opt(params, cfg.align_lr);
    auto shuffle = rng::Stream::named(cfg.seed, "shuffle/align");
    BestTracker best(/*maximize_metric=*/false);

    for (std::size_t epoch = 0; epoch < cfg.align_epochs; ++epoch) {
        std::vector<std::size_t> order = data.train_idx;
        shuffle.shuffle(order);
        const auto batches = make_batches(order, cfg.batch_size);
        double align_sum = 0.0, head_sum = 0.0;
        for (const auto& batch : batches) {
            try {
                const AlignState st = build(batch);
                const Matrix bt = rows_of(data.targets, batch);
                // Heads learn to rank teachers on detached features, so the
                // adapters feel only the alignment objective.
                ag::NodePtr loss = st.align;
                double heads_here = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    ag::NodePtr hl =
                        task_loss(heads[i].forward(ag::detach(st.adapted[i])), bt, spec);
                    heads_here += hl->scalar();
                    loss = ag::add(loss, hl);
                }
                opt.zero_grad();
                ag::backward(loss);
                opt.step();
                align_sum += st.align->scalar();
                head_sum += heads_here;
            } catch (const NumericalError& e) {
                rethrow_divergence("alignment training", epoch, cfg.align_lr, e);
            }
        }
        const double nb = double(batches.size());
        rec.rows.push_back(EpochRow{epoch, "align/train", head_sum / nb, 0.0, 0.0,
                                    (align_sum + head_sum) / nb,
                                    1.0 - align_sum / (nb * double(n))});
        double val_align = 0.0, val_combined = 0.0;
        std::vector<double> val_cos;
        val_summary(val_align, val_combined, val_cos);
        double cos_mean = 0.0;
        for (double c : val_cos) cos_mean += c / double(n);
        rec.rows.push_back(EpochRow{epoch, "align/val", val_combined - val_align, 0.0, 0.0,
                                    val_combined, cos_mean});
        best.observe(val_combined, epoch, params);
        if (best.exhausted(cfg.patience)) break;
    }
    best.restore(params);

    double post_align = 0.0, post_combined = 0.0;
    val_summary(post_align, post_combined, rec.post_align_cosine);
    rec.final_align_loss = post_align;
    return TeacherPool(teacher, std::move(adapters), std::move(heads));
}

StudentModel train_student(TeacherPool& pool, const TrainConfig& cfg, const Dataset& data,
                           RunRecord& rec, const EpochCallback& on_epoch) {
    validate(cfg);
    StageTimer timer(rec.wall_seconds);
    const TaskSpec spec = task_spec_of(data);
    const TeacherModel& teacher = pool.teacher();
    if (teacher.task.kind != spec.kind ||
        (spec.kind == TaskKind::Classification && teacher.task.num_classes != spec.num_classes)) {
        throw ConfigError("train_student: teacher task does not match the dataset");
    }
    if (teacher.fusion.joint_dim() != cfg.joint_dim) {
        throw ConfigError("train_student: teacher joint dim " +
                          std::to_string(teacher.fusion.joint_dim()) +
                          " does not match configured joint dim " + std::to_string(cfg.joint_dim));
    }
    if (teacher.tnet.net.input_dim() != cfg.feature_dim ||
        teacher.tnet.net.output_dim() != cfg.feature_dim) {
        throw ConfigError("train_student: hallucination net maps " +
                          std::to_string(teacher.tnet.net.input_dim()) + " -> " +
                          std::to_string(teacher.tnet.net.output_dim()) +
                          ", configured feature dim is " + std::to_string(cfg.feature_dim));
    }
    if (cfg.selector == Selector::KdKl && spec.kind != TaskKind::Classification) {
        throw ConfigError("train_student: the kl selector needs classification logits");
    }
    const Matrix& prev = prevalent_of(cfg.direction, data);
    const Matrix& priv = privileged_of(cfg.direction, data);
    if (data.train_idx.size() < cfg.batch_size) {
        throw ConfigError("train split has " + std::to_string(data.train_idx.size()) +
                          " rows, smaller than one batch of " + std::to_string(cfg.batch_size));
    }

    StudentModel student = build_student_model(cfg, data, teacher.tnet);

    const bool structural = (cfg.selector == Selector::PkdotSingle ||
                             cfg.selector == Selector::MtPkdot) &&
                            (cfg.weights.beta > 0.0 || cfg.weights.gamma > 0.0);
    const bool pointwise = (cfg.selector == Selector::KdCosine ||
                            cfg.selector == Selector::KdMse ||
                            cfg.selector == Selector::KdKl) &&
                           cfg.weights.beta > 0.0;

    const std::vector<std::size_t> counts_before = pool.selection_counts();
    double worst_gap = std::numeric_limits<double>::infinity();
    bool any_contested = false;

    const std::vector<ag::NodePtr> params = student.params();
    Adam opt(params, cfg.student_lr);
    auto shuffle = rng::Stream::named(cfg.seed, "shuffle/student");
    BestTracker best(/*maximize_metric=*/true);

    for (std::size_t epoch = 0; epoch < cfg.student_epochs; ++epoch) {
        std::vector<std::size_t> order = data.train_idx;
        shuffle.shuffle(order);
        const auto batches = make_batches(order, cfg.batch_size);
        double task_sum = 0.0, ot_sum = 0.0, cen_sum = 0.0, total_sum = 0.0, metric_sum = 0.0;
        for (const auto& batch : batches) {
            const Matrix bp = rows_of(prev, batch);
            const Matrix bt = rows_of(data.targets, batch);
            try {
                FusionHead::Output out = student.forward(bp);
                ag::NodePtr task = task_loss(out.predictions, bt, spec);
                ag::NodePtr loss;
                double ot_value = 0.0, cen_value = 0.0;
                if (structural) {
                    const Matrix bv = rows_of(priv, batch);
                    auto sel = pool.select(bp, bv, bt,
                                           /*force_joint=*/cfg.selector == Selector::PkdotSingle);
                    if (cfg.selector == Selector::MtPkdot && !std::isnan(sel.joint_loss)) {
                        any_contested = true;
                        worst_gap = std::min(worst_gap, sel.joint_loss - sel.loss);
                    }
                    SimilarityMatrix st = cosine_similarity_matrix(sel.features,
                                                                   SimSource::Teacher);
                    SimilarityMatrix ss = cosine_similarity_matrix(out.joint, SimSource::Student);
                    const std::vector<std::size_t> anchors = select_anchors(st, cfg.anchors);
                    ag::NodePtr ot = ot_loss(reduce_to_anchors(st, anchors),
                                             reduce_to_anchors(ss, anchors), cfg.epsilon,
                                             cfg.sinkhorn_iters, cfg.sinkhorn_tol);
                    ag::NodePtr cen = centroid_loss(sel.features, out.joint);
                    loss = student_loss(task, ot, cen, cfg.weights);
                    ot_value = ot->scalar();
                    cen_value = cen->scalar();
                } else if (pointwise) {
                    const Matrix bv = rows_of(priv, batch);
                    auto sel = pool.select(bp, bv, bt, /*force_joint=*/true);
                    ag::NodePtr kd;
                    if (cfg.selector == Selector::KdKl) {
                        kd = pointwise_kd_loss(ag::softmax_rows(sel.predictions),
                                               ag::softmax_rows(out.predictions), KdKind::Kl);
                    } else {
                        kd = pointwise_kd_loss(sel.features, out.joint,
                                               cfg.selector == Selector::KdCosine
                                                   ? KdKind::Cosine
                                                   : KdKind::Mse);
                    }
                    loss = ag::add(ag::scalar_mul(task, cfg.weights.alpha),
                                   ag::scalar_mul(kd, cfg.weights.beta));
                    ot_value = kd->scalar();
                } else {
                    loss = ag::scalar_mul(task, cfg.weights.alpha);
                }
                opt.zero_grad();
                ag::backward(loss);
                opt.step();
                task_sum += task->scalar();
                ot_sum += ot_value;
                cen_sum += cen_value;
                total_sum += loss->scalar();
                metric_sum += batch_metric(out.predictions->value, bt, spec, task->scalar());
            } catch (const NumericalError& e) {
                rethrow_divergence("student training", epoch, cfg.student_lr, e);
            }
        }
        const double nb = double(batches.size());
        rec.rows.push_back(EpochRow{epoch, "student/train", task_sum / nb, ot_sum / nb,
                                    cen_sum / nb, total_sum / nb, metric_sum / nb});
        const EvalResult ev = evaluate_student(student, data, data.val_idx, cfg.direction);
        rec.rows.push_back(
            EpochRow{epoch, "student/val", ev.task_loss, 0.0, 0.0, ev.task_loss, ev.metric});
        best.observe(ev.metric, epoch, params);
        if (on_epoch) on_epoch(epoch, student);
        if (best.exhausted(cfg.patience)) break;
    }
    best.restore(params);
    rec.best_val_metric = best.best;
    rec.best_epoch = best.best_epoch;
    const EvalResult test = evaluate_student(student, data, data.test_idx, cfg.direction);
    rec.final_test_metric = test.metric;

    const std::vector<std::size_t>& counts_after = pool.selection_counts();
    rec.selection_counts.assign(counts_after.size(), 0);
    for (std::size_t i = 0; i < counts_after.size(); ++i) {
        rec.selection_counts[i] = counts_after[i] - counts_before[i];
    }
    rec.worst_fallback_gap = any_contested ? worst_gap : 0.0;
    rec.config_hash = config_hash(cfg);
    return student;
}

}  // namespace otdistill
