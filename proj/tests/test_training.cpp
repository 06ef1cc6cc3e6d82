#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "otdistill/errors.hpp"
#include "otdistill/losses.hpp"
#include "otdistill/models.hpp"
#include "otdistill/synthdata.hpp"
#include "otdistill/teacherpool.hpp"
#include "otdistill/training.hpp"
#include "support/gradcheck.hpp"
#include "support/linreg_oracle.hpp"

using otdistill::Activation;
using otdistill::Adam;
using otdistill::ConfigError;
using otdistill::ContractError;
using otdistill::Dataset;
using otdistill::Direction;
using otdistill::EpochRow;
using otdistill::EvalResult;
using otdistill::FusionHead;
using otdistill::GenSpec;
using otdistill::Matrix;
using otdistill::Mlp;
using otdistill::NumericalError;
using otdistill::RunRecord;
using otdistill::Selector;
using otdistill::StudentModel;
using otdistill::TaskKind;
using otdistill::TaskSpec;
using otdistill::TeacherModel;
using otdistill::TeacherPool;
using otdistill::TNet;
using otdistill::TrainConfig;
using otdistill::align_teachers;
using otdistill::config_hash;
using otdistill::evaluate_student;
using otdistill::evaluate_teacher;
using otdistill::generate;
using otdistill::metrics_csv;
using otdistill::params_hash;
using otdistill::rows_of;
using otdistill::run_record_json;
using otdistill::to_labels;
using otdistill::train_student;
using otdistill::train_teacher;
using otdistill::rng::Stream;
namespace ag = otdistill::ag;

namespace {

// Desk-scale corpus and architecture so full pipeline runs stay fast.
GenSpec small_spec(std::uint64_t seed, TaskKind task = TaskKind::Classification) {
    GenSpec g;
    g.n_samples = 600;
    g.shared_dim = 4;
    g.privileged_dim = 3;
    g.d_a = 12;
    g.d_b = 10;
    g.noise_a = 0.15;
    g.noise_b = 0.1;
    g.privileged_informativeness = 0.5;
    g.task = task;
    g.num_classes = 2;
    g.unreliability = 0.1;
    g.seed = seed;
    return g;
}

TrainConfig small_cfg(std::uint64_t seed) {
    TrainConfig c;
    c.seed = seed;
    c.batch_size = 64;
    c.anchors = 8;
    c.teacher_epochs = 40;
    c.align_epochs = 15;
    c.student_epochs = 12;
    c.teacher_lr = 1e-3;
    c.align_lr = 1e-3;
    c.student_lr = 1e-3;
    c.patience = 40;
    c.epsilon = 0.05;
    c.sinkhorn_iters = 120;
    c.sinkhorn_tol = 1e-6;
    c.backbone_hidden = 16;
    c.feature_dim = 8;
    c.joint_dim = 16;
    c.adapter_bottleneck = 4;
    c.tnet_hidden = 16;
    return c;
}

struct Pipeline {
    Dataset data;
    TrainConfig cfg;
    RunRecord rec;
    TeacherModel teacher;
    TeacherPool pool;
};

// One trained teacher and aligned pool shared by the student-stage cases.
Pipeline& shared_pipeline() {
    static Pipeline p = [] {
        Pipeline q;
        q.data = generate(small_spec(7));
        q.cfg = small_cfg(7);
        q.teacher = train_teacher(q.cfg, q.data, q.rec);
        q.pool = align_teachers(q.teacher, q.cfg, q.data, q.rec);
        return q;
    }();
    return p;
}

std::size_t count_rows(const RunRecord& rec, const std::string& split) {
    std::size_t n = 0;
    for (const auto& r : rec.rows) {
        if (r.split == split) n += 1;
    }
    return n;
}

std::vector<EpochRow> rows_for(const RunRecord& rec, const std::string& split) {
    std::vector<EpochRow> out;
    for (const auto& r : rec.rows) {
        if (r.split == split) out.push_back(r);
    }
    return out;
}

// Ridge baseline on the prevalent modality alone, the floor the multimodal
// teacher has to clear.
double prevalent_ridge_accuracy(const Dataset& data) {
    const Matrix x_tr = rows_of(data.raw_a, data.train_idx);
    std::vector<double> y_tr(data.train_idx.size());
    for (std::size_t i = 0; i < data.train_idx.size(); ++i) {
        y_tr[i] = data.targets.at(data.train_idx[i], 0) > 0.5 ? 1.0 : -1.0;
    }
    const std::vector<double> w = oracle::ridge_fit(x_tr, y_tr);
    const Matrix x_va = rows_of(data.raw_a, data.val_idx);
    std::vector<double> y_va(data.val_idx.size());
    for (std::size_t i = 0; i < data.val_idx.size(); ++i) {
        y_va[i] = data.targets.at(data.val_idx[i], 0) > 0.5 ? 1.0 : -1.0;
    }
    return oracle::sign_accuracy(w, x_va, y_va);
}

}  // namespace

TEST_SUITE("training") {
    TEST_CASE("adam: zero gradient leaves parameters bitwise unchanged") {
        auto s = Stream::named(1, "train/adam-zero");
        Matrix v = testsupport::random_matrix(s, 3, 4);
        ag::NodePtr p = ag::leaf(v, "p");
        Adam opt({p}, 1e-3);
        opt.step();
        opt.step();
        CHECK(p->value.equals_bitwise(v));
        CHECK(opt.steps() == 2);
    }

    TEST_CASE("adam: first step on a unit gradient moves by the learning rate") {
        for (double lr : {1e-3, 1e-4, 0.05}) {
            ag::NodePtr p = ag::leaf(Matrix(1, 1, {0.0}), "p");
            Adam opt({p}, lr);
            p->grad.at(0, 0) = 1.0;
            opt.step();
            CHECK(std::abs(std::abs(p->value.at(0, 0)) - lr) < 1e-9);
            CHECK(p->value.at(0, 0) < 0.0);  // descends against the gradient
        }
    }

    TEST_CASE("adam: ten steps on a quadratic match the hand recurrence") {
        // Loss x^2/2 through the graph, so the analytic gradient is x itself.
        const double lr = 0.1;
        ag::NodePtr x = ag::leaf(Matrix(1, 1, {0.7}), "x");
        Adam opt({x}, lr);

        double xh = 0.7, m = 0.0, v = 0.0;
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        for (int t = 1; t <= 10; ++t) {
            ag::NodePtr loss = ag::scalar_mul(ag::square(x), 0.5);
            opt.zero_grad();
            ag::backward(loss);
            opt.step();

            const double g = xh;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            const double mhat = m / (1.0 - std::pow(b1, double(t)));
            const double vhat = v / (1.0 - std::pow(b2, double(t)));
            xh -= lr * mhat / (std::sqrt(vhat) + eps);
            CHECK(std::abs(x->value.at(0, 0) - xh) < 1e-10);
        }
    }

    TEST_CASE("adam: non-finite gradient aborts naming the parameter") {
        ag::NodePtr p = ag::leaf(Matrix(2, 2), "conv/w0");
        Adam opt({p}, 1e-3);
        p->grad.at(1, 1) = std::numeric_limits<double>::infinity();
        try {
            opt.step();
            CHECK(false);
        } catch (const NumericalError& e) {
            CHECK(std::string(e.what()).find("conv/w0") != std::string::npos);
        }
    }

    TEST_CASE("adam: frozen parameters are skipped, construction validates") {
        ag::NodePtr p = ag::leaf(Matrix(1, 1, {2.0}), "p");
        p->requires_grad = false;
        Adam opt({p}, 1e-3);
        p->grad.at(0, 0) = 5.0;
        opt.step();
        CHECK(p->value.at(0, 0) == 2.0);

        ag::NodePtr q = ag::leaf(Matrix(1, 1), "q");
        CHECK_THROWS_AS(Adam({q, q}, 1e-3), ContractError);
        CHECK_THROWS_AS(Adam({q}, 0.0), ConfigError);
        CHECK_THROWS_AS(Adam({q}, -1.0), ConfigError);

        Adam empty({}, 1e-3);  // no parameters is a valid no-op optimizer
        empty.step();
        CHECK(empty.steps() == 1);

        ag::NodePtr r = ag::leaf(Matrix(2, 2), "r");
        Adam zg({r}, 1e-3);
        r->grad.at(0, 1) = 3.0;
        zg.zero_grad();
        CHECK(r->grad.at(0, 1) == 0.0);
    }

    TEST_CASE("config validation rejects out-of-range fields") {
        CHECK_NOTHROW(otdistill::validate(TrainConfig{}));
        auto broken = [](auto mutate) {
            TrainConfig c;
            mutate(c);
            CHECK_THROWS_AS(otdistill::validate(c), ConfigError);
        };
        broken([](TrainConfig& c) { c.batch_size = 1; });
        broken([](TrainConfig& c) { c.anchors = 0; });
        broken([](TrainConfig& c) { c.anchors = c.batch_size + 1; });
        broken([](TrainConfig& c) { c.teacher_epochs = 0; });
        broken([](TrainConfig& c) { c.student_lr = 0.0; });
        broken([](TrainConfig& c) { c.align_lr = -1e-3; });
        broken([](TrainConfig& c) { c.patience = 0; });
        broken([](TrainConfig& c) { c.weights.gamma = -0.1; });
        broken([](TrainConfig& c) {
            c.weights.alpha = 0.0;
            c.weights.beta = 0.0;
            c.weights.gamma = 0.0;
        });
        broken([](TrainConfig& c) { c.epsilon = 0.0; });
        broken([](TrainConfig& c) { c.sinkhorn_iters = 0; });
        broken([](TrainConfig& c) { c.aligned_teachers = 3; });
        broken([](TrainConfig& c) { c.feature_dim = 0; });
        broken([](TrainConfig& c) { c.joint_dim = 0; });
    }

    TEST_CASE("config hash is stable and sensitive to every varied field") {
        TrainConfig a;
        TrainConfig b;
        CHECK(config_hash(a) == config_hash(b));
        auto differs = [&](auto mutate) {
            TrainConfig c;
            mutate(c);
            CHECK(config_hash(c) != config_hash(a));
        };
        differs([](TrainConfig& c) { c.seed = 1; });
        differs([](TrainConfig& c) { c.batch_size = 64; });
        differs([](TrainConfig& c) { c.anchors = 10; });
        differs([](TrainConfig& c) { c.weights.beta = 0.5; });
        differs([](TrainConfig& c) { c.epsilon = 0.1; });
        differs([](TrainConfig& c) { c.selector = Selector::None; });
        differs([](TrainConfig& c) { c.direction = Direction::Sew; });
        differs([](TrainConfig& c) { c.fusion = FusionHead::Kind::Gated; });
        differs([](TrainConfig& c) { c.student_lr = 2e-4; });
    }

    TEST_CASE("selector and direction names round-trip, unknown names rejected") {
        for (Selector s : {Selector::None, Selector::KdCosine, Selector::KdMse, Selector::KdKl,
                           Selector::PkdotSingle, Selector::MtPkdot}) {
            CHECK(otdistill::parse_selector(otdistill::selector_name(s)) == s);
        }
        for (Direction d : {Direction::Wes, Direction::Sew}) {
            CHECK(otdistill::parse_direction(otdistill::direction_name(d)) == d);
        }
        CHECK(otdistill::selector_name(Selector::KdCosine) == "cosine");
        CHECK(otdistill::selector_name(Selector::MtPkdot) == "mt-pkdot");
        CHECK_THROWS_AS(otdistill::parse_selector("ot"), ConfigError);
        CHECK_THROWS_AS(otdistill::parse_direction("both"), ConfigError);
    }

    TEST_CASE("teacher learns separable data and clears the prevalent-only floor") {
        // Low noise keeps the classes separable from the joint modalities.
        GenSpec g = small_spec(3);
        g.noise_a = 0.02;
        g.noise_b = 0.02;
        g.unreliability = 0.0;
        Dataset data = generate(g);
        TrainConfig cfg = small_cfg(3);
        cfg.teacher_epochs = 50;
        RunRecord rec;
        TeacherModel teacher = train_teacher(cfg, data, rec);

        const EvalResult train_ev = evaluate_teacher(teacher, data, data.train_idx, cfg.direction);
        CHECK(train_ev.metric > 0.95);
        CHECK(count_rows(rec, "teacher/train") >= 1);
        CHECK(count_rows(rec, "teacher/val") == count_rows(rec, "teacher/train"));
        CHECK(count_rows(rec, "tnet/val") >= 1);
        CHECK(rec.config_hash == config_hash(cfg));
        for (const auto& p : teacher.all_params()) CHECK_FALSE(p->requires_grad);
    }

    TEST_CASE("teacher validation beats the prevalent-only ridge baseline on five seeds") {
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            Dataset data = generate(small_spec(seed));
            TrainConfig cfg = small_cfg(seed);
            cfg.teacher_epochs = 30;
            RunRecord rec;
            TeacherModel teacher = train_teacher(cfg, data, rec);
            const EvalResult ev = evaluate_teacher(teacher, data, data.val_idx, cfg.direction);
            CHECK(ev.metric >= prevalent_ridge_accuracy(data));
        }
    }

    TEST_CASE("teacher training is bitwise reproducible per seed") {
        Dataset data = generate(small_spec(5));
        TrainConfig cfg = small_cfg(5);
        cfg.teacher_epochs = 8;
        RunRecord ra, rb;
        TeacherModel a = train_teacher(cfg, data, ra);
        TeacherModel b = train_teacher(cfg, data, rb);
        CHECK(params_hash(a.all_params()) == params_hash(b.all_params()));
        cfg.seed = 6;
        RunRecord rc;
        TeacherModel c = train_teacher(cfg, data, rc);
        CHECK(params_hash(c.all_params()) != params_hash(a.all_params()));
    }

    TEST_CASE("teacher training aborts with a diagnostic when the forward explodes") {
        Dataset data = generate(small_spec(9));
        // Saturate the prevalent modality so the first hidden matmul
        // overflows to infinity.
        for (std::size_t i = 0; i < data.raw_a.size(); ++i) data.raw_a[i] = 1e308;
        TrainConfig cfg = small_cfg(9);
        try {
            RunRecord rec;
            train_teacher(cfg, data, rec);
            CHECK(false);
        } catch (const NumericalError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("diverged at epoch 0") != std::string::npos);
            CHECK(msg.find("lr") != std::string::npos);
        }
    }

    TEST_CASE("alignment raises the joint cosine and lowers the alignment loss on five seeds") {
        for (std::uint64_t seed = 11; seed <= 15; ++seed) {
            Dataset data = generate(small_spec(seed));
            TrainConfig cfg = small_cfg(seed);
            cfg.teacher_epochs = 15;
            cfg.align_epochs = 30;
            RunRecord rec;
            TeacherModel teacher = train_teacher(cfg, data, rec);
            TeacherPool pool = align_teachers(teacher, cfg, data, rec);
            REQUIRE(rec.pre_align_cosine.size() == 2);
            REQUIRE(rec.post_align_cosine.size() == 2);
            for (std::size_t i = 0; i < 2; ++i) {
                CHECK(rec.post_align_cosine[i] > rec.pre_align_cosine[i]);
            }
            CHECK(rec.final_align_loss < rec.initial_align_loss);
            CHECK(pool.teacher_count() == 3);
        }
    }

    TEST_CASE("alignment with zero backbones is a no-op joint-only pool") {
        auto& p = shared_pipeline();
        TrainConfig cfg = p.cfg;
        cfg.aligned_teachers = 0;
        RunRecord rec;
        TeacherPool pool = align_teachers(p.teacher, cfg, p.data, rec);
        CHECK(pool.teacher_count() == 1);
        CHECK(pool.joint_index() == 0);
        CHECK(rec.pre_align_cosine.empty());
        CHECK(rec.post_align_cosine.empty());
        CHECK(count_rows(rec, "align/train") == 0);
    }

    TEST_CASE("alignment refuses an unfrozen teacher") {
        auto& p = shared_pipeline();
        TeacherModel thawed = p.teacher;  // shares leaves; freeze back after
        thawed.set_frozen(false);
        RunRecord rec;
        CHECK_THROWS_AS(align_teachers(thawed, p.cfg, p.data, rec), ContractError);
        thawed.set_frozen(true);
    }

    TEST_CASE("alignment does not move the teacher") {
        auto& p = shared_pipeline();
        const std::uint64_t before = params_hash(p.teacher.all_params());
        TrainConfig cfg = p.cfg;
        cfg.align_epochs = 4;
        RunRecord rec;
        align_teachers(p.teacher, cfg, p.data, rec);
        CHECK(params_hash(p.teacher.all_params()) == before);
    }

    TEST_CASE("student: structural run selects a teacher on every batch and keeps the fallback") {
        auto& p = shared_pipeline();
        RunRecord rec;
        StudentModel student = train_student(p.pool, p.cfg, p.data, rec);

        const std::size_t train_epochs = count_rows(rec, "student/train");
        const std::size_t batches_per_epoch = p.data.train_idx.size() / p.cfg.batch_size;
        std::size_t selections = 0;
        for (std::size_t c : rec.selection_counts) selections += c;
        CHECK(selections == train_epochs * batches_per_epoch);
        CHECK(rec.worst_fallback_gap >= 0.0);
        CHECK(rec.selection_counts.size() == 3);
        CHECK(rec.best_val_metric > 0.5);
        CHECK(rec.final_test_metric > 0.5);
        CHECK(rec.config_hash == config_hash(p.cfg));

        // The best-val weights were restored, so re-evaluating reproduces
        // the recorded best metric.
        const EvalResult ev = evaluate_student(student, p.data, p.data.val_idx, p.cfg.direction);
        CHECK(ev.metric == rec.best_val_metric);

        // Distillation loss columns are live on train rows.
        const auto trows = rows_for(rec, "student/train");
        REQUIRE(!trows.empty());
        bool any_ot = false;
        for (const auto& r : trows) any_ot = any_ot || r.ot_loss > 0.0;
        CHECK(any_ot);
    }

    TEST_CASE("student: beta = gamma = 0 reproduces the no-distillation run bit for bit") {
        auto& p = shared_pipeline();
        TrainConfig base = p.cfg;
        base.selector = Selector::None;
        base.student_epochs = 8;
        TrainConfig degenerate = base;
        degenerate.selector = Selector::MtPkdot;
        degenerate.weights.beta = 0.0;
        degenerate.weights.gamma = 0.0;

        RunRecord rec_a, rec_b;
        StudentModel a = train_student(p.pool, base, p.data, rec_a);
        StudentModel b = train_student(p.pool, degenerate, p.data, rec_b);
        CHECK(params_hash(a.params()) == params_hash(b.params()));
        CHECK(rec_a.final_test_metric == rec_b.final_test_metric);
        CHECK(rec_a.best_val_metric == rec_b.best_val_metric);

        const auto rows_a = rows_for(rec_a, "student/train");
        const auto rows_b = rows_for(rec_b, "student/train");
        REQUIRE(rows_a.size() == rows_b.size());
        for (std::size_t i = 0; i < rows_a.size(); ++i) {
            CHECK(rows_a[i].task_loss == rows_b[i].task_loss);
            CHECK(rows_a[i].ot_loss == 0.0);
            CHECK(rows_b[i].ot_loss == 0.0);
            CHECK(rows_a[i].total == rows_b[i].total);
            CHECK(rows_a[i].metric == rows_b[i].metric);
        }
        // No selections happen in either run.
        for (std::size_t c : rec_a.selection_counts) CHECK(c == 0);
        for (std::size_t c : rec_b.selection_counts) CHECK(c == 0);
    }

    TEST_CASE("student: pkdot-single pins every selection to the joint teacher") {
        auto& p = shared_pipeline();
        TrainConfig cfg = p.cfg;
        cfg.selector = Selector::PkdotSingle;
        cfg.student_epochs = 3;
        RunRecord rec;
        train_student(p.pool, cfg, p.data, rec);
        const std::size_t batches = count_rows(rec, "student/train") *
                                    (p.data.train_idx.size() / cfg.batch_size);
        CHECK(rec.selection_counts[p.pool.joint_index()] == batches);
        CHECK(rec.selection_counts[0] == 0);
        CHECK(rec.selection_counts[1] == 0);
    }

    TEST_CASE("student: pointwise baselines train against the joint teacher") {
        auto& p = shared_pipeline();
        for (Selector s : {Selector::KdCosine, Selector::KdMse, Selector::KdKl}) {
            TrainConfig cfg = p.cfg;
            cfg.selector = s;
            cfg.student_epochs = 2;
            RunRecord rec;
            train_student(p.pool, cfg, p.data, rec);
            const auto trows = rows_for(rec, "student/train");
            REQUIRE(!trows.empty());
            for (const auto& r : trows) {
                CHECK(r.ot_loss > 0.0);  // distillation column carries the kd term
                CHECK(r.cen_loss == 0.0);
            }
            const std::size_t batches = trows.size() *
                                        (p.data.train_idx.size() / cfg.batch_size);
            CHECK(rec.selection_counts[p.pool.joint_index()] == batches);
        }
    }

    TEST_CASE("student: training is bitwise reproducible against a frozen pool") {
        auto& p = shared_pipeline();
        TrainConfig cfg = p.cfg;
        cfg.student_epochs = 4;
        RunRecord ra, rb;
        StudentModel a = train_student(p.pool, cfg, p.data, ra);
        StudentModel b = train_student(p.pool, cfg, p.data, rb);
        CHECK(params_hash(a.params()) == params_hash(b.params()));
        CHECK(ra.final_test_metric == rb.final_test_metric);
        CHECK(metrics_csv(ra) == metrics_csv(rb));
    }

    TEST_CASE("student: stage isolation, distillation never moves teacher or pool") {
        Dataset data = generate(small_spec(21));
        TrainConfig cfg = small_cfg(21);
        cfg.teacher_epochs = 10;
        cfg.align_epochs = 8;
        cfg.student_epochs = 6;
        RunRecord rec;
        TeacherModel teacher = train_teacher(cfg, data, rec);
        const std::uint64_t teacher_hash = params_hash(teacher.all_params());
        TeacherPool pool = align_teachers(teacher, cfg, data, rec);
        CHECK(params_hash(teacher.all_params()) == teacher_hash);
        const std::uint64_t pool_hash = params_hash(pool.all_params());
        StudentModel student = train_student(pool, cfg, data, rec);
        CHECK(params_hash(teacher.all_params()) == teacher_hash);
        CHECK(params_hash(pool.all_params()) == pool_hash);
        // The student's hallucination net is the teacher's, still frozen.
        CHECK(params_hash(student.tnet.net.params()) ==
              params_hash(teacher.tnet.net.params()));
        for (const auto& q : student.tnet.net.params()) CHECK_FALSE(q->requires_grad);
    }

    TEST_CASE("student: configuration mismatches fail before training") {
        auto& p = shared_pipeline();
        RunRecord rec;

        TrainConfig wrong_joint = p.cfg;
        wrong_joint.joint_dim = 24;
        CHECK_THROWS_AS(train_student(p.pool, wrong_joint, p.data, rec), ConfigError);

        TrainConfig wrong_feat = p.cfg;
        wrong_feat.feature_dim = 6;
        CHECK_THROWS_AS(train_student(p.pool, wrong_feat, p.data, rec), ConfigError);

        Dataset regression = generate(small_spec(7, TaskKind::Regression));
        CHECK_THROWS_AS(train_student(p.pool, p.cfg, regression, rec), ConfigError);

        // The kl baseline needs logits, so a regression pool rejects it.
        RunRecord rec2;
        TrainConfig rcfg = small_cfg(7);
        rcfg.teacher_epochs = 3;
        rcfg.align_epochs = 2;
        TeacherModel rteacher = train_teacher(rcfg, regression, rec2);
        TeacherPool rpool = align_teachers(rteacher, rcfg, regression, rec2);
        rcfg.selector = Selector::KdKl;
        CHECK_THROWS_AS(train_student(rpool, rcfg, regression, rec2), ConfigError);
    }

    TEST_CASE("regression pipeline end to end with concordance metric duality") {
        Dataset data = generate(small_spec(33, TaskKind::Regression));
        TrainConfig cfg = small_cfg(33);
        cfg.teacher_epochs = 12;
        cfg.align_epochs = 6;
        cfg.student_epochs = 6;
        RunRecord rec;
        TeacherModel teacher = train_teacher(cfg, data, rec);
        TeacherPool pool = align_teachers(teacher, cfg, data, rec);
        StudentModel student = train_student(pool, cfg, data, rec);

        const EvalResult ev = evaluate_student(student, data, data.val_idx, cfg.direction);
        CHECK(ev.metric == 1.0 - ev.task_loss);  // mean concordance duality
        const EvalResult tv = evaluate_teacher(teacher, data, data.val_idx, cfg.direction);
        CHECK(tv.metric == 1.0 - tv.task_loss);
        CHECK(rec.final_test_metric > -1.0);
    }

    TEST_CASE("evaluation validates row sets and matches an independent accuracy count") {
        auto& p = shared_pipeline();
        CHECK_THROWS_AS(evaluate_teacher(p.teacher, p.data, {}, p.cfg.direction), ContractError);

        const EvalResult ev = evaluate_teacher(p.teacher, p.data, p.data.test_idx,
                                               p.cfg.direction);
        const Matrix prev = rows_of(p.data.raw_a, p.data.test_idx);
        const Matrix priv = rows_of(p.data.raw_b, p.data.test_idx);
        const Matrix targets = rows_of(p.data.targets, p.data.test_idx);
        const auto out = p.teacher.forward(prev, priv);
        const auto labels = to_labels(targets, 2);
        std::size_t correct = 0;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            const double l0 = out.predictions->value.at(i, 0);
            const double l1 = out.predictions->value.at(i, 1);
            const std::size_t arg = l1 > l0 ? 1 : 0;
            if (arg == labels[i]) correct += 1;
        }
        CHECK(ev.metric == double(correct) / double(labels.size()));
    }

    TEST_CASE("metrics csv and run json are deterministic and parseable") {
        auto& p = shared_pipeline();
        TrainConfig cfg = p.cfg;
        cfg.student_epochs = 2;
        RunRecord rec;
        train_student(p.pool, cfg, p.data, rec);

        const std::string csv = metrics_csv(rec);
        CHECK(csv.rfind("epoch,split,task_loss,ot_loss,cen_loss,total,metric\n", 0) == 0);
        std::size_t lines = 0;
        for (char ch : csv) {
            if (ch == '\n') lines += 1;
        }
        CHECK(lines == rec.rows.size() + 1);
        CHECK(csv == metrics_csv(rec));

        const nlohmann::json j = nlohmann::json::parse(run_record_json(rec));
        CHECK(j["config_hash"].get<std::uint64_t>() == rec.config_hash);
        CHECK(j["rows"].size() == rec.rows.size());
        CHECK(j["selection_counts"].size() == rec.selection_counts.size());
        CHECK(j["final_test_metric"].get<double>() == rec.final_test_metric);
        CHECK(j["best_epoch"].get<std::size_t>() == rec.best_epoch);
    }
}
