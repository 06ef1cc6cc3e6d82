#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "otdistill/errors.hpp"
#include "otdistill/losses.hpp"
#include "otdistill/models.hpp"
#include "otdistill/teacherpool.hpp"
#include "support/gradcheck.hpp"

using otdistill::Activation;
using otdistill::BoundsError;
using otdistill::ContractError;
using otdistill::FusionHead;
using otdistill::Matrix;
using otdistill::Mlp;
using otdistill::ModalityAdapter;
using otdistill::NumericalError;
using otdistill::TaskKind;
using otdistill::TaskSpec;
using otdistill::TeacherModel;
using otdistill::TeacherPool;
using otdistill::TNet;
using otdistill::argmin_teacher;
using otdistill::params_hash;
using otdistill::task_loss;
using otdistill::rng::Stream;
namespace ag = otdistill::ag;
using testsupport::random_matrix;

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

// Independent statement of the selection rule: among the finite losses take
// the minimum value; if the joint teacher (last slot) achieves it, it wins,
// otherwise the lowest achieving index does.
std::size_t reference_rule(const std::vector<double>& losses) {
    double best = std::numeric_limits<double>::infinity();
    bool any = false;
    for (double l : losses) {
        if (std::isnan(l)) continue;
        any = true;
        if (l < best) best = l;
    }
    REQUIRE(any);
    if (losses.back() == best) return losses.size() - 1;
    for (std::size_t i = 0; i < losses.size(); ++i) {
        if (!std::isnan(losses[i]) && losses[i] == best) return i;
    }
    REQUIRE(false);
    return 0;
}

struct PoolParts {
    TeacherModel teacher;
    std::vector<ModalityAdapter> adapters;
    std::vector<Mlp> heads;
};

// Small two-modality teacher with two aligned candidates. Dims are chosen
// so every component has a distinct shape and mistakes cannot cancel.
PoolParts make_parts(std::uint64_t seed, TaskKind kind, std::size_t out_dim) {
    auto s_prev = Stream::named(seed, "pool/backbone-prevalent");
    auto s_priv = Stream::named(seed, "pool/backbone-privileged");
    auto s_fuse = Stream::named(seed, "pool/fusion");
    auto s_tnet = Stream::named(seed, "pool/tnet");
    PoolParts parts;
    parts.teacher.backbone_prevalent = Mlp({6, 8, 4}, Activation::Tanh, s_prev, "bb-prev", true);
    parts.teacher.backbone_privileged = Mlp({5, 8, 4}, Activation::Tanh, s_priv, "bb-priv", true);
    parts.teacher.fusion =
        FusionHead(FusionHead::Kind::Concat, {4, 4}, 8, out_dim, s_fuse, "fusion");
    parts.teacher.tnet = TNet(4, 8, 4, s_tnet, "tnet");
    parts.teacher.task = TaskSpec{kind, out_dim};
    for (std::size_t i = 0; i < 2; ++i) {
        auto s_ad = Stream::named(seed, "pool/adapter-" + std::to_string(i));
        auto s_hd = Stream::named(seed, "pool/head-" + std::to_string(i));
        parts.adapters.emplace_back(4, 3, 8, s_ad, "adapter-" + std::to_string(i));
        parts.heads.emplace_back(std::vector<std::size_t>{8, out_dim}, Activation::Tanh, s_hd,
                                 "head-" + std::to_string(i));
    }
    return parts;
}

Matrix class_targets(Stream& s, std::size_t b, std::size_t classes) {
    Matrix t(b, 1);
    for (std::size_t i = 0; i < b; ++i) t.at(i, 0) = double(s.index(classes));
    return t;
}

void zero_params(const std::vector<ag::NodePtr>& params) {
    for (const auto& p : params) p->value = Matrix(p->value.rows(), p->value.cols());
}

// Evaluates one teacher's batch loss outside the pool, rebuilding the same
// graph through the public accessors.
double candidate_loss(const TeacherPool& pool, std::size_t id, const Matrix& raw_prev,
                      const Matrix& raw_priv, const Matrix& targets) {
    ag::NodePtr fp = pool.teacher().backbone_prevalent.forward(ag::constant(raw_prev));
    ag::NodePtr fv = pool.teacher().backbone_privileged.forward(ag::constant(raw_priv));
    if (id == pool.joint_index()) {
        auto out = pool.teacher().fusion.fuse({fp, fv});
        return task_loss(out.predictions, targets, pool.teacher().task)->value.at(0, 0);
    }
    ag::NodePtr rep = pool.adapter(id).adapt(id == 0 ? fp : fv);
    ag::NodePtr preds = pool.head(id).forward(rep);
    return task_loss(preds, targets, pool.teacher().task)->value.at(0, 0);
}

}  // namespace

TEST_SUITE("teacherpool") {
    TEST_CASE("argmin rule: lowest loss wins, joint listed last") {
        CHECK(argmin_teacher({0.5, 0.3, 0.4}) == 1);
        CHECK(argmin_teacher({0.5, 0.3, 0.2}) == 2);
        CHECK(argmin_teacher({0.1, 0.3, 0.2}) == 0);
    }

    TEST_CASE("argmin rule: joint wins ties, then lower index") {
        CHECK(argmin_teacher({0.3, 0.5, 0.3}) == 2);
        CHECK(argmin_teacher({0.3, 0.3, 0.3}) == 2);
        CHECK(argmin_teacher({0.4, 0.3, 0.3, 0.5}) == 1);
        CHECK(argmin_teacher({0.3, 0.3, 0.4}) == 0);
    }

    TEST_CASE("argmin rule: NaN entries are excluded") {
        CHECK(argmin_teacher({kNan, 0.5, 0.7}) == 1);
        CHECK(argmin_teacher({0.2, kNan, 0.3}) == 0);
        CHECK(argmin_teacher({kNan, kNan, 0.9}) == 2);
        CHECK(argmin_teacher({0.9, kNan, kNan}) == 0);
    }

    TEST_CASE("argmin rule: degenerate lists are rejected") {
        CHECK_THROWS_AS(argmin_teacher({}), ContractError);
        CHECK_THROWS_AS(argmin_teacher({kNan, kNan, kNan}), NumericalError);
        CHECK_THROWS_AS(argmin_teacher({kNan}), NumericalError);
    }

    TEST_CASE("argmin rule matches the reference rule on every loss vector") {
        // Every combination of a small value set, lengths 2..4, including
        // ties and exclusions.
        const std::vector<double> values = {0.1, 0.2, 0.3, kNan};
        for (std::size_t len = 2; len <= 4; ++len) {
            std::size_t total = 1;
            for (std::size_t i = 0; i < len; ++i) total *= values.size();
            for (std::size_t code = 0; code < total; ++code) {
                std::vector<double> losses;
                std::size_t rest = code;
                for (std::size_t i = 0; i < len; ++i) {
                    losses.push_back(values[rest % values.size()]);
                    rest /= values.size();
                }
                bool all_nan = true;
                for (double l : losses) all_nan = all_nan && std::isnan(l);
                if (all_nan) {
                    CHECK_THROWS_AS(argmin_teacher(losses), NumericalError);
                } else {
                    CHECK(argmin_teacher(losses) == reference_rule(losses));
                }
            }
        }
    }

    TEST_CASE("pool construction freezes every component") {
        auto parts = make_parts(11, TaskKind::Classification, 2);
        TeacherPool pool(parts.teacher, parts.adapters, parts.heads);
        CHECK(pool.teacher_count() == 3);
        CHECK(pool.joint_index() == 2);
        for (const auto& p : pool.all_params()) CHECK_FALSE(p->requires_grad);
        CHECK(pool.selection_counts() == std::vector<std::size_t>{0, 0, 0});
    }

    TEST_CASE("pool construction rejects mismatched parts") {
        auto parts = make_parts(12, TaskKind::Classification, 2);
        auto heads_short = parts.heads;
        heads_short.pop_back();
        CHECK_THROWS_AS(TeacherPool(parts.teacher, parts.adapters, heads_short), ContractError);

        auto s = Stream::named(12, "pool/bad-adapter");
        auto bad_adapters = parts.adapters;
        bad_adapters[0] = ModalityAdapter(4, 3, 7, s, "bad");  // joint dim is 8
        CHECK_THROWS_AS(TeacherPool(parts.teacher, bad_adapters, parts.heads), ContractError);

        auto s2 = Stream::named(12, "pool/bad-head");
        auto bad_heads = parts.heads;
        bad_heads[1] = Mlp({5, 2}, Activation::Tanh, s2, "bad-head");
        CHECK_THROWS_AS(TeacherPool(parts.teacher, parts.adapters, bad_heads), ContractError);

        TeacherPool empty;
        Matrix m(4, 6), t(4, 1);
        CHECK_THROWS_AS(empty.select(m, m, t), ContractError);
    }

    TEST_CASE("selection matches per-teacher loss evaluation, classification and regression") {
        for (TaskKind kind : {TaskKind::Classification, TaskKind::Regression}) {
            const std::size_t out_dim = kind == TaskKind::Classification ? 3 : 2;
            for (std::uint64_t seed = 1; seed <= 5; ++seed) {
                auto parts = make_parts(seed, kind, out_dim);
                TeacherPool pool(parts.teacher, parts.adapters, parts.heads);
                auto sx = Stream::named(seed, "pool/batches");
                std::size_t calls = 0;
                for (std::size_t b = 0; b < 6; ++b) {
                    Matrix raw_prev = random_matrix(sx, 16, 6);
                    Matrix raw_priv = random_matrix(sx, 16, 5);
                    Matrix targets = kind == TaskKind::Classification
                                         ? class_targets(sx, 16, out_dim)
                                         : random_matrix(sx, 16, out_dim);
                    auto sel = pool.select(raw_prev, raw_priv, targets);
                    calls += 1;

                    std::vector<double> losses;
                    for (std::size_t id = 0; id < pool.teacher_count(); ++id) {
                        losses.push_back(candidate_loss(pool, id, raw_prev, raw_priv, targets));
                    }
                    CHECK(sel.teacher_id == reference_rule(losses));
                    CHECK(sel.loss == losses[sel.teacher_id]);
                    CHECK(sel.joint_loss == losses.back());
                    CHECK(sel.loss <= sel.joint_loss);
                    CHECK(sel.features->value.rows() == 16);
                    CHECK(sel.features->value.cols() == 8);
                }
                std::size_t total = 0;
                for (std::size_t c : pool.selection_counts()) total += c;
                CHECK(total == calls);
                CHECK(pool.batches_processed() == calls);
            }
        }
    }

    TEST_CASE("selection is deterministic and leaves the pool frozen") {
        auto parts = make_parts(31, TaskKind::Classification, 2);
        TeacherPool pool(parts.teacher, parts.adapters, parts.heads);
        const std::uint64_t before = params_hash(pool.all_params());
        auto s = Stream::named(31, "pool/det");
        Matrix raw_prev = random_matrix(s, 12, 6);
        Matrix raw_priv = random_matrix(s, 12, 5);
        Matrix targets = class_targets(s, 12, 2);
        auto first = pool.select(raw_prev, raw_priv, targets);
        auto second = pool.select(raw_prev, raw_priv, targets);
        CHECK(first.teacher_id == second.teacher_id);
        CHECK(first.loss == second.loss);
        CHECK(params_hash(pool.all_params()) == before);
    }

    TEST_CASE("corrupted aligned teachers always lose to the joint teacher") {
        auto parts = make_parts(17, TaskKind::Classification, 2);
        // Joint head fixed to confidently predict class 0; aligned teachers
        // zeroed so their logits are uniform (cross-entropy exactly ln 2).
        auto fusion_params = parts.teacher.fusion.params();
        zero_params(fusion_params);
        auto& head_bias = fusion_params.back()->value;
        REQUIRE(head_bias.cols() == 2);
        head_bias.at(0, 0) = 2.0;
        head_bias.at(0, 1) = -2.0;
        for (auto& a : parts.adapters) zero_params(a.params());
        for (auto& h : parts.heads) zero_params(h.params());

        TeacherPool pool(parts.teacher, parts.adapters, parts.heads);
        auto s = Stream::named(17, "pool/corrupt");
        for (std::size_t b = 0; b < 20; ++b) {
            Matrix raw_prev = random_matrix(s, 8, 6);
            Matrix raw_priv = random_matrix(s, 8, 5);
            Matrix targets(8, 1);  // every label is class 0
            auto sel = pool.select(raw_prev, raw_priv, targets);
            CHECK(sel.teacher_id == pool.joint_index());
            CHECK(sel.loss == doctest::Approx(std::log(1.0 + std::exp(-4.0))).epsilon(1e-12));
        }
        CHECK(pool.selection_counts()[pool.joint_index()] == 20);
        CHECK(pool.selection_counts()[0] == 0);
        CHECK(pool.selection_counts()[1] == 0);
    }

    TEST_CASE("non-finite candidates are excluded, all non-finite is a hard error") {
        auto parts = make_parts(23, TaskKind::Classification, 2);
        // Two-stage overflow through single-entry chains: the adapter blows
        // features up to ~1e160 and the head squares that past DBL_MAX, so
        // the poisoned candidate reliably produces a non-finite forward.
        auto poison_adapter_and_head = [](ModalityAdapter& adapter, Mlp& head) {
            auto ap = adapter.params();        // encoder w,b then decoder w,b
            auto& dec_w = ap[2]->value;        // bottleneck x joint
            dec_w = Matrix(dec_w.rows(), dec_w.cols());
            for (std::size_t j = 0; j < dec_w.cols(); ++j) dec_w.at(0, j) = 1e160;
            auto hp = head.params();
            auto& head_w = hp[0]->value;
            head_w = Matrix(head_w.rows(), head_w.cols());
            head_w.at(0, 0) = 1e160;
        };
        poison_adapter_and_head(parts.adapters[0], parts.heads[0]);

        TeacherPool pool(parts.teacher, parts.adapters, parts.heads);
        auto s = Stream::named(23, "pool/poison");
        Matrix raw_prev = random_matrix(s, 10, 6);
        Matrix raw_priv = random_matrix(s, 10, 5);
        Matrix targets = class_targets(s, 10, 2);
        auto sel = pool.select(raw_prev, raw_priv, targets);
        CHECK(sel.teacher_id != 0);  // the poisoned candidate never wins
        CHECK(pool.selection_counts()[0] == 0);

        // Poison everything, including the joint path, and the batch fails.
        poison_adapter_and_head(parts.adapters[1], parts.heads[1]);
        auto fusion_params = parts.teacher.fusion.params();
        auto& proj_w = fusion_params[0]->value;
        proj_w = Matrix(proj_w.rows(), proj_w.cols());
        for (std::size_t j = 0; j < proj_w.cols(); ++j) proj_w.at(0, j) = 1e160;
        auto& fh_w = fusion_params[2]->value;
        fh_w = Matrix(fh_w.rows(), fh_w.cols());
        fh_w.at(0, 0) = 1e160;
        TeacherPool doomed(parts.teacher, parts.adapters, parts.heads);
        CHECK_THROWS_AS(doomed.select(raw_prev, raw_priv, targets), NumericalError);
    }

    TEST_CASE("force_joint bypasses the contest but still counts") {
        auto parts = make_parts(41, TaskKind::Classification, 2);
        TeacherPool pool(parts.teacher, parts.adapters, parts.heads);
        auto s = Stream::named(41, "pool/force");
        for (std::size_t b = 0; b < 5; ++b) {
            Matrix raw_prev = random_matrix(s, 8, 6);
            Matrix raw_priv = random_matrix(s, 8, 5);
            Matrix targets = class_targets(s, 8, 2);
            auto sel = pool.select(raw_prev, raw_priv, targets, true);
            CHECK(sel.teacher_id == pool.joint_index());
            CHECK(sel.loss == sel.joint_loss);
        }
        CHECK(pool.selection_counts()[pool.joint_index()] == 5);
        CHECK(pool.batches_processed() == 5);
    }

    TEST_CASE("teacher model forward validates batch agreement") {
        auto parts = make_parts(47, TaskKind::Classification, 2);
        Matrix prev(6, 6), priv(5, 5);
        CHECK_THROWS_AS(parts.teacher.forward(prev, priv), ContractError);
        CHECK(parts.teacher.params().size() == 4 + 4 + 4);  // two backbones + fusion
        CHECK(parts.teacher.all_params().size() == parts.teacher.params().size() + 4);
        parts.teacher.set_frozen(true);
        for (const auto& p : parts.teacher.all_params()) CHECK_FALSE(p->requires_grad);
    }
}
