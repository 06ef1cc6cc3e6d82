#include "otdistill/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <thread>
#include <utility>

#include <nlohmann/json.hpp>

#include "otdistill/errors.hpp"
#include "otdistill/similarity.hpp"

namespace fs = std::filesystem;

namespace otdistill {

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out.good()) throw IoError("cannot write " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.good()) throw IoError("cannot read " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("cannot read " + path);
    return text;
}

// One matrix value per cell, %.17g, no header: square similarity dumps.
std::string matrix_csv(const Matrix& m) {
    std::string out;
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            if (j > 0) out += ',';
            out += fmt(m.at(i, j));
        }
        out += '\n';
    }
    return out;
}

const char* task_kind_name(TaskKind k) {
    return k == TaskKind::Classification ? "classification" : "regression";
}

TaskKind parse_task_kind(const std::string& name, const std::string& path) {
    if (name == "classification") return TaskKind::Classification;
    if (name == "regression") return TaskKind::Regression;
    throw ConfigError("config: " + path + " must be 'classification' or 'regression', got '" +
                      name + "'");
}

const char* fusion_kind_name(FusionHead::Kind k) {
    return k == FusionHead::Kind::Concat ? "concat" : "gated";
}

FusionHead::Kind parse_fusion_kind(const std::string& name, const std::string& path) {
    if (name == "concat") return FusionHead::Kind::Concat;
    if (name == "gated") return FusionHead::Kind::Gated;
    throw ConfigError("config: " + path + " must be 'concat' or 'gated', got '" + name + "'");
}

// Typed field readers; every failure names the full "section.key" path.
std::size_t get_count(const nlohmann::json& v, const std::string& path) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() &&
                                   v.get<long long>() < 0)) {
        throw ConfigError("config: " + path + " must be a nonnegative integer");
    }
    return static_cast<std::size_t>(v.get<unsigned long long>());
}

std::uint64_t get_seed(const nlohmann::json& v, const std::string& path) {
    return static_cast<std::uint64_t>(get_count(v, path));
}

double get_number(const nlohmann::json& v, const std::string& path) {
    if (!v.is_number()) throw ConfigError("config: " + path + " must be a number");
    return v.get<double>();
}

std::string get_string(const nlohmann::json& v, const std::string& path) {
    if (!v.is_string()) throw ConfigError("config: " + path + " must be a string");
    return v.get<std::string>();
}

void reject_unknown_keys(const nlohmann::json& section, const std::string& name,
                         const std::set<std::string>& known) {
    for (const auto& item : section.items()) {
        if (!known.count(item.key())) {
            throw ConfigError("config: unknown key '" + name + "." + item.key() + "'");
        }
    }
}

void parse_data_section(const nlohmann::json& sec, GenSpec& g) {
    if (!sec.is_object()) throw ConfigError("config: 'data' must be an object");
    static const std::set<std::string> known = {
        "n_samples", "shared_dim",     "privileged_dim",
        "d_a",       "d_b",            "noise_a",
        "noise_b",   "privileged_informativeness", "task",
        "num_classes", "unreliability", "seed"};
    reject_unknown_keys(sec, "data", known);
    if (sec.contains("n_samples")) g.n_samples = get_count(sec["n_samples"], "data.n_samples");
    if (sec.contains("shared_dim")) g.shared_dim = get_count(sec["shared_dim"], "data.shared_dim");
    if (sec.contains("privileged_dim"))
        g.privileged_dim = get_count(sec["privileged_dim"], "data.privileged_dim");
    if (sec.contains("d_a")) g.d_a = get_count(sec["d_a"], "data.d_a");
    if (sec.contains("d_b")) g.d_b = get_count(sec["d_b"], "data.d_b");
    if (sec.contains("noise_a")) g.noise_a = get_number(sec["noise_a"], "data.noise_a");
    if (sec.contains("noise_b")) g.noise_b = get_number(sec["noise_b"], "data.noise_b");
    if (sec.contains("privileged_informativeness"))
        g.privileged_informativeness =
            get_number(sec["privileged_informativeness"], "data.privileged_informativeness");
    if (sec.contains("task"))
        g.task = parse_task_kind(get_string(sec["task"], "data.task"), "data.task");
    if (sec.contains("num_classes"))
        g.num_classes = get_count(sec["num_classes"], "data.num_classes");
    if (sec.contains("unreliability"))
        g.unreliability = get_number(sec["unreliability"], "data.unreliability");
    if (sec.contains("seed")) g.seed = get_seed(sec["seed"], "data.seed");
}

void parse_train_section(const nlohmann::json& sec, TrainConfig& t) {
    if (!sec.is_object()) throw ConfigError("config: 'train' must be an object");
    static const std::set<std::string> known = {
        "seed",           "batch_size",     "anchors",       "teacher_epochs",
        "align_epochs",   "student_epochs", "teacher_lr",    "align_lr",
        "student_lr",     "patience",       "alpha",         "beta",
        "gamma",          "epsilon",        "sinkhorn_iters", "sinkhorn_tol",
        "direction",      "selector",       "aligned_teachers", "backbone_hidden",
        "feature_dim",    "joint_dim",      "adapter_bottleneck", "tnet_hidden",
        "fusion"};
    reject_unknown_keys(sec, "train", known);
    if (sec.contains("seed")) t.seed = get_seed(sec["seed"], "train.seed");
    if (sec.contains("batch_size")) t.batch_size = get_count(sec["batch_size"], "train.batch_size");
    if (sec.contains("anchors")) t.anchors = get_count(sec["anchors"], "train.anchors");
    if (sec.contains("teacher_epochs"))
        t.teacher_epochs = get_count(sec["teacher_epochs"], "train.teacher_epochs");
    if (sec.contains("align_epochs"))
        t.align_epochs = get_count(sec["align_epochs"], "train.align_epochs");
    if (sec.contains("student_epochs"))
        t.student_epochs = get_count(sec["student_epochs"], "train.student_epochs");
    if (sec.contains("teacher_lr")) t.teacher_lr = get_number(sec["teacher_lr"], "train.teacher_lr");
    if (sec.contains("align_lr")) t.align_lr = get_number(sec["align_lr"], "train.align_lr");
    if (sec.contains("student_lr"))
        t.student_lr = get_number(sec["student_lr"], "train.student_lr");
    if (sec.contains("patience")) t.patience = get_count(sec["patience"], "train.patience");
    if (sec.contains("alpha")) t.weights.alpha = get_number(sec["alpha"], "train.alpha");
    if (sec.contains("beta")) t.weights.beta = get_number(sec["beta"], "train.beta");
    if (sec.contains("gamma")) t.weights.gamma = get_number(sec["gamma"], "train.gamma");
    if (sec.contains("epsilon")) t.epsilon = get_number(sec["epsilon"], "train.epsilon");
    if (sec.contains("sinkhorn_iters"))
        t.sinkhorn_iters = get_count(sec["sinkhorn_iters"], "train.sinkhorn_iters");
    if (sec.contains("sinkhorn_tol"))
        t.sinkhorn_tol = get_number(sec["sinkhorn_tol"], "train.sinkhorn_tol");
    if (sec.contains("direction"))
        t.direction = parse_direction(get_string(sec["direction"], "train.direction"));
    if (sec.contains("selector"))
        t.selector = parse_selector(get_string(sec["selector"], "train.selector"));
    if (sec.contains("aligned_teachers"))
        t.aligned_teachers = get_count(sec["aligned_teachers"], "train.aligned_teachers");
    if (sec.contains("backbone_hidden"))
        t.backbone_hidden = get_count(sec["backbone_hidden"], "train.backbone_hidden");
    if (sec.contains("feature_dim"))
        t.feature_dim = get_count(sec["feature_dim"], "train.feature_dim");
    if (sec.contains("joint_dim")) t.joint_dim = get_count(sec["joint_dim"], "train.joint_dim");
    if (sec.contains("adapter_bottleneck"))
        t.adapter_bottleneck = get_count(sec["adapter_bottleneck"], "train.adapter_bottleneck");
    if (sec.contains("tnet_hidden"))
        t.tnet_hidden = get_count(sec["tnet_hidden"], "train.tnet_hidden");
    if (sec.contains("fusion"))
        t.fusion = parse_fusion_kind(get_string(sec["fusion"], "train.fusion"), "train.fusion");
}

void progress_line(bool quiet, const std::string& line) {
    if (quiet) return;
    static std::mutex m;
    std::lock_guard<std::mutex> lock(m);
    std::fputs((line + "\n").c_str(), stdout);
    std::fflush(stdout);
}

// Population mean and standard deviation of one row group.
void mean_std(const std::vector<double>& xs, double& mean, double& stddev) {
    mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= static_cast<double>(xs.size());
    stddev = std::sqrt(var);
}

void reject_duplicate_seeds(const std::vector<std::uint64_t>& seeds, const char* who) {
    std::set<std::uint64_t> seen;
    for (std::uint64_t s : seeds) {
        if (!seen.insert(s).second) {
            throw ConfigError(std::string(who) + ": duplicate seed " + std::to_string(s));
        }
    }
}

}  // namespace

void write_run_files(const std::string& dir, const RunRecord& rec) {
    fs::create_directories(dir);
    write_text_file(dir + "/run.json", run_record_json(rec));
    write_text_file(dir + "/metrics.csv", metrics_csv(rec));
}

MetricReport compute_metrics(const Matrix& predictions, const Matrix& targets,
                             const TaskSpec& task) {
    if (predictions.empty() || targets.empty()) {
        throw ContractError("compute_metrics: empty input");
    }
    if (predictions.rows() != targets.rows()) {
        throw ContractError("compute_metrics: " + std::to_string(predictions.rows()) +
                            " prediction rows vs " + std::to_string(targets.rows()) +
                            " target rows");
    }
    MetricReport report;
    const std::size_t b = predictions.rows();

    if (task.kind == TaskKind::Classification) {
        if (predictions.cols() != task.num_classes) {
            throw ContractError("compute_metrics: predictions have " +
                                std::to_string(predictions.cols()) + " columns, expected " +
                                std::to_string(task.num_classes) + " class logits");
        }
        const std::vector<std::size_t> labels = to_labels(targets, task.num_classes);
        std::size_t correct = 0;
        for (std::size_t i = 0; i < b; ++i) {
            std::size_t arg = 0;
            for (std::size_t c = 1; c < predictions.cols(); ++c) {
                if (predictions.at(i, c) > predictions.at(i, arg)) arg = c;
            }
            if (arg == labels[i]) ++correct;
        }
        report.value = static_cast<double>(correct) / static_cast<double>(b);
        return report;
    }

    if (!predictions.same_shape(targets)) {
        throw ContractError("compute_metrics: predictions " + predictions.shape_str() +
                            " vs targets " + targets.shape_str());
    }
    if (b < 2) {
        throw ContractError("compute_metrics: regression needs at least 2 rows, got " +
                            std::to_string(b));
    }
    // Per-column concordance with the same arithmetic as the loss graph:
    // population moments accumulated row-major, the denominator stabilized
    // only where it is exactly zero.
    const double inv = 1.0 / static_cast<double>(b);
    const std::size_t d = predictions.cols();
    double sum = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        double mx = 0.0, my = 0.0;
        for (std::size_t i = 0; i < b; ++i) mx += predictions.at(i, j);
        for (std::size_t i = 0; i < b; ++i) my += targets.at(i, j);
        mx *= inv;
        my *= inv;
        double cov = 0.0, var_x = 0.0, var_y = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
            const double xc = predictions.at(i, j) - mx;
            const double yc = targets.at(i, j) - my;
            cov += xc * yc;
            var_x += xc * xc;
            var_y += yc * yc;
        }
        cov *= inv;
        var_x *= inv;
        var_y *= inv;
        double denom = (var_x + var_y) + (mx - my) * (mx - my);
        if (denom == 0.0) denom += 1e-8;
        const double ccc = (cov * 2.0) / denom;
        report.per_column.push_back(ccc);
        sum += ccc;
    }
    report.value = sum / static_cast<double>(d);
    return report;
}

ExperimentConfig parse_experiment_config(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config: top level must be an object");
    static const std::set<std::string> known = {"version", "data", "train"};
    for (const auto& item : j.items()) {
        if (!known.count(item.key())) {
            throw ConfigError("config: unknown key '" + item.key() + "'");
        }
    }
    if (!j.contains("version")) throw ConfigError("config: missing required key 'version'");
    if (get_count(j["version"], "version") != 1) {
        throw ConfigError("config: unsupported version " + j["version"].dump() +
                          ", this build reads version 1");
    }

    ExperimentConfig cfg;
    if (j.contains("data")) parse_data_section(j["data"], cfg.data);
    if (j.contains("train")) parse_train_section(j["train"], cfg.train);
    validate(cfg.data);
    validate(cfg.train);
    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    return parse_experiment_config(read_text_file(path));
}

std::string experiment_config_json(const ExperimentConfig& cfg) {
    nlohmann::json j;
    j["version"] = 1;
    nlohmann::json& d = j["data"];
    d["n_samples"] = cfg.data.n_samples;
    d["shared_dim"] = cfg.data.shared_dim;
    d["privileged_dim"] = cfg.data.privileged_dim;
    d["d_a"] = cfg.data.d_a;
    d["d_b"] = cfg.data.d_b;
    d["noise_a"] = cfg.data.noise_a;
    d["noise_b"] = cfg.data.noise_b;
    d["privileged_informativeness"] = cfg.data.privileged_informativeness;
    d["task"] = task_kind_name(cfg.data.task);
    d["num_classes"] = cfg.data.num_classes;
    d["unreliability"] = cfg.data.unreliability;
    d["seed"] = cfg.data.seed;
    nlohmann::json& t = j["train"];
    t["seed"] = cfg.train.seed;
    t["batch_size"] = cfg.train.batch_size;
    t["anchors"] = cfg.train.anchors;
    t["teacher_epochs"] = cfg.train.teacher_epochs;
    t["align_epochs"] = cfg.train.align_epochs;
    t["student_epochs"] = cfg.train.student_epochs;
    t["teacher_lr"] = cfg.train.teacher_lr;
    t["align_lr"] = cfg.train.align_lr;
    t["student_lr"] = cfg.train.student_lr;
    t["patience"] = cfg.train.patience;
    t["alpha"] = cfg.train.weights.alpha;
    t["beta"] = cfg.train.weights.beta;
    t["gamma"] = cfg.train.weights.gamma;
    t["epsilon"] = cfg.train.epsilon;
    t["sinkhorn_iters"] = cfg.train.sinkhorn_iters;
    t["sinkhorn_tol"] = cfg.train.sinkhorn_tol;
    t["direction"] = direction_name(cfg.train.direction);
    t["selector"] = selector_name(cfg.train.selector);
    t["aligned_teachers"] = cfg.train.aligned_teachers;
    t["backbone_hidden"] = cfg.train.backbone_hidden;
    t["feature_dim"] = cfg.train.feature_dim;
    t["joint_dim"] = cfg.train.joint_dim;
    t["adapter_bottleneck"] = cfg.train.adapter_bottleneck;
    t["tnet_hidden"] = cfg.train.tnet_hidden;
    t["fusion"] = fusion_kind_name(cfg.train.fusion);
    return j.dump(2) + "\n";
}

const std::vector<std::string>& ladder_methods() {
    static const std::vector<std::string> methods = {
        "prevalent-only", "multimodal",   "pkd-cosine", "pkd-mse",
        "pkd-kl",         "pkdot-single", "mt-pkdot"};
    return methods;
}

TrainConfig method_config(const TrainConfig& base, const std::string& method) {
    TrainConfig out = base;
    if (method == "prevalent-only" || method == "multimodal") {
        out.selector = Selector::None;
    } else if (method == "pkd-cosine") {
        out.selector = Selector::KdCosine;
    } else if (method == "pkd-mse") {
        out.selector = Selector::KdMse;
    } else if (method == "pkd-kl") {
        out.selector = Selector::KdKl;
    } else if (method == "pkdot-single") {
        out.selector = Selector::PkdotSingle;
    } else if (method == "mt-pkdot") {
        out.selector = Selector::MtPkdot;
    } else {
        throw ConfigError("unknown ladder method '" + method + "'");
    }
    return out;
}

SeedArtifacts prepare_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
    GenSpec gspec = cfg.data;
    gspec.seed = seed;
    TrainConfig tc = cfg.train;
    tc.seed = seed;

    Dataset data = generate(gspec);
    RunRecord rec;
    TeacherModel teacher = train_teacher(tc, data, rec);
    TeacherPool pool = align_teachers(teacher, tc, data, rec);
    return SeedArtifacts{seed, std::move(data), std::move(teacher), std::move(pool),
                         std::move(rec)};
}

MethodResult run_method(const std::string& method, SeedArtifacts& art,
                        const ExperimentConfig& cfg, const std::string& outdir, bool quiet) {
    TrainConfig tc = method_config(cfg.train, method);
    tc.seed = art.seed;

    MethodResult res;
    res.method = method;
    res.seed = art.seed;
    if (method == "multimodal") {
        const EvalResult ev =
            evaluate_teacher(art.teacher, art.data, art.data.test_idx, tc.direction);
        res.test_metric = ev.metric;
        res.record.final_test_metric = ev.metric;
        res.record.best_val_metric =
            evaluate_teacher(art.teacher, art.data, art.data.val_idx, tc.direction).metric;
        res.record.config_hash = config_hash(tc);
    } else {
        RunRecord rec;
        train_student(art.pool, tc, art.data, rec);
        res.test_metric = rec.final_test_metric;
        res.record = std::move(rec);
    }
    if (!outdir.empty()) {
        write_run_files(outdir + "/" + method + "/seed-" + std::to_string(art.seed),
                             res.record);
    }
    progress_line(quiet, "[seed " + std::to_string(art.seed) + "] " + method + ": test " +
                             fmt(res.test_metric));
    return res;
}

std::string summary_csv(const std::vector<MethodResult>& results) {
    // Group by method, order rows by ladder position and seeds ascending.
    std::map<std::string, std::vector<std::pair<std::uint64_t, double>>> groups;
    for (const auto& r : results) groups[r.method].push_back({r.seed, r.test_metric});
    for (const auto& g : groups) {
        const auto& methods = ladder_methods();
        if (std::find(methods.begin(), methods.end(), g.first) == methods.end()) {
            throw ContractError("summary_csv: result for unknown method '" + g.first + "'");
        }
    }

    std::string out = "method,seeds,mean,std,per_seed\n";
    for (const auto& method : ladder_methods()) {
        auto it = groups.find(method);
        if (it == groups.end()) continue;
        auto cells = it->second;
        std::sort(cells.begin(), cells.end());
        std::vector<double> xs;
        std::string per_seed;
        for (const auto& cell : cells) {
            xs.push_back(cell.second);
            if (!per_seed.empty()) per_seed += ';';
            per_seed += fmt(cell.second);
        }
        double mean = 0.0, stddev = 0.0;
        mean_std(xs, mean, stddev);
        out += method + "," + std::to_string(cells.size()) + "," + fmt(mean) + "," +
               fmt(stddev) + "," + per_seed + "\n";
    }
    return out;
}

std::string run_compare(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                        const std::string& outdir, bool quiet) {
    if (cfg.data.task != TaskKind::Classification) {
        throw ConfigError(
            "compare: the ladder includes a kl cell, which needs classification data");
    }
    if (seeds.empty()) throw ConfigError("compare: need at least one seed");
    reject_duplicate_seeds(seeds, "compare");
    if (!outdir.empty()) {
        fs::create_directories(outdir);
        write_text_file(outdir + "/config.json", experiment_config_json(cfg));
    }

    const auto& methods = ladder_methods();
    std::vector<std::vector<MethodResult>> per_seed(seeds.size());
    std::vector<std::exception_ptr> failures(seeds.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        while (true) {
            const std::size_t idx = next.fetch_add(1);
            if (idx >= seeds.size()) return;
            try {
                SeedArtifacts art = prepare_seed(cfg, seeds[idx]);
                for (const auto& method : methods) {
                    per_seed[idx].push_back(run_method(method, art, cfg, outdir, quiet));
                }
            } catch (...) {
                failures[idx] = std::current_exception();
            }
        }
    };

    const std::size_t workers = worker_cap(seeds.size());
    if (workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> threads;
        for (std::size_t i = 0; i < workers; ++i) threads.emplace_back(worker);
        for (auto& t : threads) t.join();
    }
    for (const auto& failure : failures) {
        if (failure) std::rethrow_exception(failure);
    }

    std::vector<MethodResult> all;
    for (auto& cells : per_seed) {
        for (auto& cell : cells) all.push_back(std::move(cell));
    }
    const std::string csv = summary_csv(all);
    if (!outdir.empty()) write_text_file(outdir + "/summary.csv", csv);
    return csv;
}

std::string run_ablate(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                       const std::string& outdir, bool quiet) {
    if (seeds.empty()) throw ConfigError("ablate: need at least one seed");
    reject_duplicate_seeds(seeds, "ablate");

    // Every cell trains the structural student against stage-1/2 artifacts
    // prepared once per seed from the base config, so cells differ only in
    // the student-stage knob under study.
    struct Cell {
        std::string label;
        std::size_t batch;
        std::size_t anchors;
        bool centroid_on;
        TrainConfig tc;
    };
    std::vector<Cell> cells;
    for (std::size_t batch : {std::size_t(32), std::size_t(64), std::size_t(128)}) {
        for (std::size_t anchors : {std::size_t(10), std::size_t(20), std::size_t(30)}) {
            TrainConfig tc = cfg.train;
            tc.selector = Selector::MtPkdot;
            tc.batch_size = batch;
            tc.anchors = anchors;
            cells.push_back({"batch" + std::to_string(batch) + "-anchors" +
                                 std::to_string(anchors),
                             batch, anchors, tc.weights.gamma > 0.0, tc});
        }
    }
    {
        TrainConfig on = cfg.train;
        on.selector = Selector::MtPkdot;
        cells.push_back({"centroid-on", on.batch_size, on.anchors, true, on});
        TrainConfig off = on;
        off.weights.gamma = 0.0;
        cells.push_back({"centroid-off", off.batch_size, off.anchors, false, off});
    }
    for (const auto& cell : cells) validate(cell.tc);

    if (!outdir.empty()) {
        fs::create_directories(outdir);
        write_text_file(outdir + "/config.json", experiment_config_json(cfg));
    }

    // metric[cell][seed slot]; duplicate hyperparameter tuples train once.
    std::vector<std::vector<double>> metric(cells.size(),
                                            std::vector<double>(seeds.size(), 0.0));
    std::vector<std::exception_ptr> failures(seeds.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        while (true) {
            const std::size_t idx = next.fetch_add(1);
            if (idx >= seeds.size()) return;
            try {
                SeedArtifacts art = prepare_seed(cfg, seeds[idx]);
                std::map<std::uint64_t, RunRecord> memo;  // keyed by config hash
                for (std::size_t c = 0; c < cells.size(); ++c) {
                    TrainConfig tc = cells[c].tc;
                    tc.seed = art.seed;
                    const std::uint64_t key = config_hash(tc);
                    auto it = memo.find(key);
                    if (it == memo.end()) {
                        RunRecord rec;
                        train_student(art.pool, tc, art.data, rec);
                        it = memo.emplace(key, std::move(rec)).first;
                    }
                    metric[c][idx] = it->second.final_test_metric;
                    if (!outdir.empty()) {
                        write_run_files(outdir + "/" + cells[c].label + "/seed-" +
                                                 std::to_string(art.seed),
                                             it->second);
                    }
                    progress_line(quiet, "[seed " + std::to_string(art.seed) + "] " +
                                             cells[c].label + ": test " +
                                             fmt(metric[c][idx]));
                }
            } catch (...) {
                failures[idx] = std::current_exception();
            }
        }
    };

    const std::size_t workers = worker_cap(seeds.size());
    if (workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> threads;
        for (std::size_t i = 0; i < workers; ++i) threads.emplace_back(worker);
        for (auto& t : threads) t.join();
    }
    for (const auto& failure : failures) {
        if (failure) std::rethrow_exception(failure);
    }

    // Seeds ascending within each row, matching summary_csv.
    std::vector<std::size_t> order(seeds.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return seeds[a] < seeds[b]; });

    std::string out = "batch,anchors,centroid,seeds,mean,std,per_seed\n";
    for (std::size_t c = 0; c < cells.size(); ++c) {
        std::vector<double> xs;
        std::string per_seed;
        for (std::size_t slot : order) {
            xs.push_back(metric[c][slot]);
            if (!per_seed.empty()) per_seed += ';';
            per_seed += fmt(metric[c][slot]);
        }
        double mean = 0.0, stddev = 0.0;
        mean_std(xs, mean, stddev);
        out += std::to_string(cells[c].batch) + "," + std::to_string(cells[c].anchors) + "," +
               (cells[c].centroid_on ? "on" : "off") + "," + std::to_string(seeds.size()) +
               "," + fmt(mean) + "," + fmt(stddev) + "," + per_seed + "\n";
    }
    if (!outdir.empty()) write_text_file(outdir + "/ablate.csv", out);
    return out;
}

void run_dump_sim(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& outdir,
                  bool quiet) {
    if (outdir.empty()) throw ConfigError("dump-sim: needs an output directory");
    if (cfg.train.selector != Selector::PkdotSingle &&
        cfg.train.selector != Selector::MtPkdot) {
        throw ConfigError(
            "dump-sim: needs a structural selector (pkdot-single or mt-pkdot), got '" +
            selector_name(cfg.train.selector) + "'");
    }

    // Generate before training so an oversized probe batch fails fast.
    GenSpec gspec = cfg.data;
    gspec.seed = seed;
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    Dataset data = generate(gspec);
    if (data.val_idx.size() < tc.batch_size) {
        throw ConfigError("dump-sim: val split has " + std::to_string(data.val_idx.size()) +
                          " rows, smaller than one probe batch of " +
                          std::to_string(tc.batch_size));
    }
    RunRecord stages;
    TeacherModel teacher = train_teacher(tc, data, stages);
    TeacherPool pool = align_teachers(teacher, tc, data, stages);

    const std::vector<std::size_t> probe(data.val_idx.begin(),
                                         data.val_idx.begin() +
                                             static_cast<std::ptrdiff_t>(tc.batch_size));
    const Matrix& prev_all = tc.direction == Direction::Wes ? data.raw_a : data.raw_b;
    const Matrix& priv_all = tc.direction == Direction::Wes ? data.raw_b : data.raw_a;
    const Matrix bp = rows_of(prev_all, probe);
    const Matrix bv = rows_of(priv_all, probe);
    const Matrix bt = rows_of(data.targets, probe);

    fs::create_directories(outdir);
    write_text_file(outdir + "/config.json", experiment_config_json(cfg));

    // Reference structure from the teacher side of the same probe batch.
    TeacherPool::Selection sel =
        pool.select(bp, bv, bt, tc.selector == Selector::PkdotSingle);
    const SimilarityMatrix sim_t = cosine_similarity_matrix(sel.features, SimSource::Teacher);
    write_text_file(outdir + "/sim_teacher.csv", matrix_csv(sim_t.values->value));

    EpochCallback hook = [&](std::size_t epoch, const StudentModel& student) {
        const FusionHead::Output out = student.forward(bp);
        const SimilarityMatrix sim = cosine_similarity_matrix(out.joint, SimSource::Student);
        write_text_file(outdir + "/sim_epoch_" + std::to_string(epoch) + ".csv",
                        matrix_csv(sim.values->value));
    };
    RunRecord rec;
    train_student(pool, tc, data, rec, hook);
    write_text_file(outdir + "/run.json", run_record_json(rec));
    write_text_file(outdir + "/metrics.csv", metrics_csv(rec));
    progress_line(quiet, "[seed " + std::to_string(seed) + "] dump-sim: test " +
                             fmt(rec.final_test_metric));
}

std::size_t worker_cap(std::size_t jobs) {
    if (jobs == 0) return 1;
    std::size_t cap = 0;
    if (const char* env = std::getenv("OTDISTILL_THREADS")) {
        const std::string text(env);
        if (text.empty() || text.find_first_not_of("0123456789") != std::string::npos) {
            throw ConfigError("OTDISTILL_THREADS must be a positive integer, got '" + text +
                              "'");
        }
        cap = std::strtoull(text.c_str(), nullptr, 10);
        if (cap == 0) {
            throw ConfigError("OTDISTILL_THREADS must be a positive integer, got '" + text +
                              "'");
        }
    } else {
        cap = std::thread::hardware_concurrency();
        if (cap == 0) cap = 1;
    }
    return std::min(cap, jobs);
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
    if (text.empty()) throw ConfigError("seed list is empty");
    std::vector<std::uint64_t> seeds;
    std::size_t start = 0;
    while (start <= text.size()) {
        const std::size_t comma = text.find(',', start);
        const std::string part =
            text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
        if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos) {
            throw ConfigError("seed list '" + text +
                              "' must be comma-separated nonnegative integers");
        }
        seeds.push_back(std::strtoull(part.c_str(), nullptr, 10));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    reject_duplicate_seeds(seeds, "seed list");
    return seeds;
}

}  // namespace otdistill
