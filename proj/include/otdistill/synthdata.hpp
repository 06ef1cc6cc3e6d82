#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "otdistill/losses.hpp"
#include "otdistill/matrix.hpp"

namespace otdistill {

// Generator controls for the synthetic two-modality benchmark. The shared
// latent drives both modalities; the privileged latent reaches only
// modality B. privileged_informativeness interpolates how much of the
// target lives in the privileged latent:
//   target = link((1 - rho) * w_s . z_s + rho * w_p . z_p).
struct GenSpec {
    std::size_t n_samples = 6000;
    std::size_t shared_dim = 4;      // z_s
    std::size_t privileged_dim = 3;  // z_p
    std::size_t d_a = 20;            // prevalent modality width
    std::size_t d_b = 16;            // privileged modality width
    double noise_a = 0.3;
    double noise_b = 0.2;
    double privileged_informativeness = 0.5;  // rho in [0, 1]
    TaskKind task = TaskKind::Classification;
    std::size_t num_classes = 2;  // classification only
    double unreliability = 0.1;   // u in [0, 1): fraction of rows whose
                                  // prevalent features become pure noise
    std::uint64_t seed = 0;
};

// Generated corpus with disjoint, exhaustive 70/15/15 splits. Split index
// lists are sorted ascending; classification splits are stratified per
// class.
struct Dataset {
    Matrix raw_a;    // n x d_a
    Matrix raw_b;    // n x d_b
    Matrix targets;  // n x 1: tanh scores (regression) or class indices
    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> val_idx;
    std::vector<std::size_t> test_idx;
    TaskKind task = TaskKind::Classification;
    std::size_t num_classes = 2;

    std::size_t size() const { return raw_a.rows(); }
};

// Rejects out-of-range fields with ConfigError; generate calls it first.
void validate(const GenSpec& spec);

Dataset generate(const GenSpec& spec);

// The acceptance-suite configuration; only the seed and task kind vary.
GenSpec standard_config(std::uint64_t seed, TaskKind task = TaskKind::Classification);

// Row gather: out[i] = m[indices[i]]. Shared by split slicing and batching.
Matrix rows_of(const Matrix& m, const std::vector<std::size_t>& indices);

// Directory layout: one CSV per array, split indices as single-column CSVs,
// manifest.json holding the spec, a format version and per-file content
// hashes. Loading verifies all of it: bad hashes or files are IoError,
// manifest contradictions are ConfigError.
void save_dataset(const std::string& dir, const Dataset& data, const GenSpec& spec);
Dataset load_dataset(const std::string& dir, GenSpec& spec_out);

}  // namespace otdistill
