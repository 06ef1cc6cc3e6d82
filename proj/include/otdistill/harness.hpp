#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "otdistill/losses.hpp"
#include "otdistill/matrix.hpp"
#include "otdistill/synthdata.hpp"
#include "otdistill/teacherpool.hpp"
#include "otdistill/training.hpp"

namespace otdistill {

// Scalar metric report computed with plain loops, independent of the loss
// graph, so it can cross-check training output. Classification fills value
// with accuracy; regression fills per_column with one concordance per output
// and value with their mean (equal to 1 minus the concordance loss).
struct MetricReport {
    double value = 0.0;
    std::vector<double> per_column;
};
MetricReport compute_metrics(const Matrix& predictions, const Matrix& targets,
                             const TaskSpec& task);

// One experiment file: a generator block and a training block under an
// explicit version tag. Unknown keys anywhere are configuration errors that
// name the offending "section.key", so a typo in a hyperparameter can never
// silently fall back to a default.
struct ExperimentConfig {
    GenSpec data;
    TrainConfig train;
};
ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::string& path);
std::string experiment_config_json(const ExperimentConfig& cfg);

// The comparison ladder, in the fixed reporting order: the prevalent-only
// floor, the multimodal ceiling, three pointwise baselines, then the two
// structural transport methods.
const std::vector<std::string>& ladder_methods();

// The base config with the selector (and for the two bound rows, the loss
// weights) adjusted for one ladder method. Unknown method names are errors.
TrainConfig method_config(const TrainConfig& base, const std::string& method);

// Everything one seed shares across ladder cells: the dataset, the frozen
// teacher, and the aligned pool. Both data.seed and train.seed are replaced
// by the given seed so cells differ only in the method dimension.
struct SeedArtifacts {
    std::uint64_t seed = 0;
    Dataset data;
    TeacherModel teacher;
    TeacherPool pool;
    RunRecord stage_record;
};
SeedArtifacts prepare_seed(const ExperimentConfig& cfg, std::uint64_t seed);

struct MethodResult {
    std::string method;
    std::uint64_t seed = 0;
    double test_metric = 0.0;
    RunRecord record;
};

// One ladder cell against prepared artifacts: trains the student variant, or
// for the multimodal row just evaluates the teacher. When outdir is nonempty
// the cell writes run.json and metrics.csv under outdir/<method>/seed-<n>/
// and touches nothing outside that directory.
MethodResult run_method(const std::string& method, SeedArtifacts& art,
                        const ExperimentConfig& cfg, const std::string& outdir, bool quiet);

// Ladder-ordered aggregation: one row per method with the seed count, the
// mean and population standard deviation of the test metric, and the
// per-seed values (seed-ascending, ';'-joined).
std::string summary_csv(const std::vector<MethodResult>& results);

// The full ladder for every seed. Seeds run in parallel workers capped by
// worker_cap; each worker writes only under its own cell directories, and
// the summary is aggregated after all workers join. Returns the summary.csv
// text (and writes it when outdir is nonempty).
std::string run_compare(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                        const std::string& outdir, bool quiet);

// Sensitivity grid for the structural method: batch sizes {32,64,128} times
// anchor counts {10,20,30} (nine cells), then the centroid term on and off
// at the base batch/anchor setting. Returns the ablate.csv text with one row
// per cell: batch,anchors,centroid,seeds,mean,std,per_seed.
std::string run_ablate(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                       const std::string& outdir, bool quiet);

// Trains one structural student while dumping similarity structure on a
// fixed probe batch (the first batch-size rows of the validation split):
// sim_teacher.csv once for the selected teacher side, and sim_epoch_<n>.csv
// for the student side after every epoch.
void run_dump_sim(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& outdir,
                  bool quiet);

// Creates dir and writes run.json plus metrics.csv for one run record.
void write_run_files(const std::string& dir, const RunRecord& rec);

// Worker count for parallel sections: the OTDISTILL_THREADS environment
// variable when set (positive integer, else a configuration error),
// otherwise the hardware thread count, clamped to [1, jobs].
std::size_t worker_cap(std::size_t jobs);

// Comma-separated seed list, e.g. "1,2,3". Empty elements, non-digits, or
// duplicates are configuration errors.
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

}  // namespace otdistill
