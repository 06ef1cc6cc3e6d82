// Command-line front end for the distillation pipeline. Stages read and
// write fixed locations under --outdir (dataset/, teacher/, pool/, student/)
// so a full run composes as: gen, train-teacher, align, train-student, eval.
// compare and ablate run multi-seed sweeps into their own --outdir.
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include <nlohmann/json.hpp>

#include "otdistill/errors.hpp"
#include "otdistill/harness.hpp"
#include "otdistill/models.hpp"
#include "otdistill/synthdata.hpp"
#include "otdistill/teacherpool.hpp"
#include "otdistill/training.hpp"

using namespace otdistill;

namespace {

void say(bool quiet, const std::string& line) {
    if (quiet) return;
    std::fputs((line + "\n").c_str(), stdout);
}

bool specs_equal(const GenSpec& a, const GenSpec& b) {
    return a.n_samples == b.n_samples && a.shared_dim == b.shared_dim &&
           a.privileged_dim == b.privileged_dim && a.d_a == b.d_a && a.d_b == b.d_b &&
           a.noise_a == b.noise_a && a.noise_b == b.noise_b &&
           a.privileged_informativeness == b.privileged_informativeness && a.task == b.task &&
           a.num_classes == b.num_classes && a.unreliability == b.unreliability &&
           a.seed == b.seed;
}

// The dataset a stage trains on must be the one the config describes.
Dataset load_matching_dataset(const ExperimentConfig& cfg, const std::string& outdir) {
    GenSpec on_disk;
    Dataset data = load_dataset(outdir + "/dataset", on_disk);
    if (!specs_equal(on_disk, cfg.data)) {
        throw ConfigError("dataset under " + outdir +
                          "/dataset was generated from a different data section; rerun gen");
    }
    return data;
}

TeacherModel load_teacher(const ExperimentConfig& cfg, const Dataset& data,
                          const std::string& outdir) {
    TeacherModel teacher = build_teacher_model(cfg.train, data);
    load_checkpoint(outdir + "/teacher/checkpoint", teacher.all_params(),
                    config_hash(cfg.train));
    teacher.set_frozen(true);
    return teacher;
}

TeacherPool load_pool(const ExperimentConfig& cfg, TeacherModel teacher,
                      const std::string& outdir) {
    AlignedParts parts = build_aligned_parts(cfg.train, teacher);
    load_checkpoint(outdir + "/pool/checkpoint", parts.params(), config_hash(cfg.train));
    return TeacherPool(std::move(teacher), std::move(parts.adapters), std::move(parts.heads));
}

int cmd_gen(const ExperimentConfig& cfg, const std::string& outdir, bool quiet) {
    Dataset data = generate(cfg.data);
    save_dataset(outdir + "/dataset", data, cfg.data);
    say(quiet, "wrote " + outdir + "/dataset (" + std::to_string(data.size()) + " samples)");
    return 0;
}

int cmd_train_teacher(const ExperimentConfig& cfg, const std::string& outdir, bool quiet) {
    Dataset data = load_matching_dataset(cfg, outdir);
    RunRecord rec;
    TeacherModel teacher = train_teacher(cfg.train, data, rec);
    save_checkpoint(outdir + "/teacher/checkpoint", teacher.all_params(),
                    config_hash(cfg.train));
    write_run_files(outdir + "/teacher", rec);
    const EvalResult ev = evaluate_teacher(teacher, data, data.test_idx, cfg.train.direction);
    say(quiet, "teacher: test " + std::to_string(ev.metric) + ", checkpoint at " + outdir +
                   "/teacher/checkpoint");
    return 0;
}

int cmd_align(const ExperimentConfig& cfg, const std::string& outdir, bool quiet) {
    Dataset data = load_matching_dataset(cfg, outdir);
    TeacherModel teacher = load_teacher(cfg, data, outdir);
    RunRecord rec;
    TeacherPool pool = align_teachers(teacher, cfg.train, data, rec);
    std::vector<ag::NodePtr> params;
    for (std::size_t i = 0; i < pool.aligned_count(); ++i) {
        for (const auto& p : pool.adapter(i).params()) params.push_back(p);
    }
    for (std::size_t i = 0; i < pool.aligned_count(); ++i) {
        for (const auto& p : pool.head(i).params()) params.push_back(p);
    }
    save_checkpoint(outdir + "/pool/checkpoint", params, config_hash(cfg.train));
    write_run_files(outdir + "/pool", rec);
    say(quiet, "aligned " + std::to_string(pool.aligned_count()) +
                   " teachers, checkpoint at " + outdir + "/pool/checkpoint");
    return 0;
}

int cmd_train_student(const ExperimentConfig& cfg, const std::string& outdir, bool quiet) {
    Dataset data = load_matching_dataset(cfg, outdir);
    TeacherPool pool = load_pool(cfg, load_teacher(cfg, data, outdir), outdir);
    RunRecord rec;
    StudentModel student = train_student(pool, cfg.train, data, rec);
    save_checkpoint(outdir + "/student/checkpoint", student.params(), config_hash(cfg.train));
    write_run_files(outdir + "/student", rec);
    say(quiet, "student (" + selector_name(cfg.train.selector) + "): test " +
                   std::to_string(rec.final_test_metric) + ", checkpoint at " + outdir +
                   "/student/checkpoint");
    return 0;
}

int cmd_eval(const ExperimentConfig& cfg, const std::string& outdir, bool quiet) {
    Dataset data = load_matching_dataset(cfg, outdir);
    TeacherPool pool = load_pool(cfg, load_teacher(cfg, data, outdir), outdir);
    StudentModel student = build_student_model(cfg.train, data, pool.teacher().tnet);
    load_checkpoint(outdir + "/student/checkpoint", student.params(), config_hash(cfg.train));

    const Matrix& prev =
        cfg.train.direction == Direction::Wes ? data.raw_a : data.raw_b;
    const FusionHead::Output out = student.forward(rows_of(prev, data.test_idx));
    const TaskSpec spec{data.task, data.num_classes};
    const MetricReport report =
        compute_metrics(out.predictions->value, rows_of(data.targets, data.test_idx), spec);

    const std::string run_path = outdir + "/student/run.json";
    nlohmann::json run;
    try {
        std::ifstream in(run_path, std::ios::binary);
        if (!in.good()) throw IoError("cannot read " + run_path);
        run = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(run_path + " is not valid JSON: " + e.what());
    }
    if (!run.contains("final_test_metric")) {
        throw IoError(run_path + " has no final_test_metric field");
    }
    const double recorded = run["final_test_metric"].get<double>();
    if (std::fabs(report.value - recorded) > 1e-12) {
        throw NumericalError("eval: recomputed test metric " + std::to_string(report.value) +
                             " disagrees with run.json value " + std::to_string(recorded));
    }
    std::printf("test metric %.17g (matches run.json)\n", report.value);
    (void)quiet;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"optimal-transport privileged-knowledge distillation pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::string outdir;
    std::string seeds_text;
    bool quiet = false;

    auto add_sub = [&](const std::string& name, const std::string& desc, bool takes_seeds) {
        CLI::App* cmd = app.add_subcommand(name, desc);
        cmd->add_option("--config", config_path, "experiment config JSON")->required();
        cmd->add_option("--outdir", outdir, "output directory")->required();
        if (takes_seeds) {
            cmd->add_option("--seeds", seeds_text, "comma-separated seeds, e.g. 1,2,3");
        }
        cmd->add_flag("--quiet", quiet, "suppress progress lines");
        return cmd;
    };

    CLI::App* gen = add_sub("gen", "generate the dataset", false);
    CLI::App* teach = add_sub("train-teacher", "train the multimodal teacher", false);
    CLI::App* align = add_sub("align", "align per-modality teachers", false);
    CLI::App* student = add_sub("train-student", "train the unimodal student", false);
    CLI::App* eval_cmd = add_sub("eval", "re-evaluate the student checkpoint", false);
    CLI::App* compare = add_sub("compare", "run the method ladder over seeds", true);
    CLI::App* ablate = add_sub("ablate", "batch/anchor and centroid sensitivity grid", true);
    CLI::App* dumpsim = add_sub("dump-sim", "dump per-epoch similarity structure", true);

    CLI11_PARSE(app, argc, argv);

    try {
        const ExperimentConfig cfg = load_experiment_config(config_path);
        std::vector<std::uint64_t> seeds;
        if (seeds_text.empty()) {
            seeds = {cfg.train.seed};
        } else {
            seeds = parse_seed_list(seeds_text);
        }

        if (gen->parsed()) return cmd_gen(cfg, outdir, quiet);
        if (teach->parsed()) return cmd_train_teacher(cfg, outdir, quiet);
        if (align->parsed()) return cmd_align(cfg, outdir, quiet);
        if (student->parsed()) return cmd_train_student(cfg, outdir, quiet);
        if (eval_cmd->parsed()) return cmd_eval(cfg, outdir, quiet);
        if (compare->parsed()) {
            run_compare(cfg, seeds, outdir, quiet);
            return 0;
        }
        if (ablate->parsed()) {
            run_ablate(cfg, seeds, outdir, quiet);
            return 0;
        }
        if (dumpsim->parsed()) {
            if (seeds.size() != 1) {
                throw ConfigError("dump-sim: takes exactly one seed, got " +
                                  std::to_string(seeds.size()));
            }
            run_dump_sim(cfg, seeds[0], outdir, quiet);
            return 0;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
