#include "otdistill/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <utility>

#include "json.hpp"
#include "otdistill/errors.hpp"
#include "otdistill/rng.hpp"

namespace otdistill {

namespace {

Matrix normal_matrix(rng::Stream& s, std::size_t r, std::size_t c, double scale = 1.0) {
    Matrix m(r, c);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = scale * s.normal();
    return m;
}

// Unit-norm weight vector, so each latent term of the target score has unit
// variance and rho interpolates the two sources on equal footing.
std::vector<double> unit_weights(rng::Stream& s, std::size_t d) {
    std::vector<double> w(d);
    double norm2 = 0.0;
    for (double& x : w) {
        x = s.normal();
        norm2 += x * x;
    }
    const double norm = std::sqrt(norm2);
    for (double& x : w) x /= norm;
    return w;
}

// 70/15/15 in integer arithmetic; the remainder lands in test.
void split_sizes(std::size_t n, std::size_t& tr, std::size_t& va, std::size_t& te) {
    tr = n * 70 / 100;
    va = n * 15 / 100;
    te = n - tr - va;
}

}  // namespace

void validate(const GenSpec& spec) {
    if (spec.n_samples < 2) throw ConfigError("GenSpec: n_samples must be at least 2");
    if (spec.shared_dim == 0 || spec.privileged_dim == 0 || spec.d_a == 0 || spec.d_b == 0) {
        throw ConfigError("GenSpec: latent and modality dims must be at least 1");
    }
    if (spec.noise_a < 0.0 || spec.noise_b < 0.0) {
        throw ConfigError("GenSpec: noise levels must be nonnegative");
    }
    if (spec.privileged_informativeness < 0.0 || spec.privileged_informativeness > 1.0) {
        throw ConfigError("GenSpec: privileged_informativeness must be in [0, 1]");
    }
    if (spec.unreliability < 0.0 || spec.unreliability >= 1.0) {
        throw ConfigError("GenSpec: unreliability must be in [0, 1)");
    }
    if (spec.task == TaskKind::Classification) {
        if (spec.num_classes < 2) throw ConfigError("GenSpec: num_classes must be at least 2");
        if (spec.n_samples < spec.num_classes) {
            throw ConfigError("GenSpec: need at least one sample per class");
        }
    }
}

Dataset generate(const GenSpec& spec) {
    validate(spec);
    const std::size_t n = spec.n_samples;
    const double rho = spec.privileged_informativeness;

    auto latent_stream = rng::Stream::named(spec.seed, "data/latents");
    const Matrix z_s = normal_matrix(latent_stream, n, spec.shared_dim);
    const Matrix z_p = normal_matrix(latent_stream, n, spec.privileged_dim);

    // Mixing maps scaled by 1/sqrt(fan-in) keep feature variance near one
    // regardless of latent width.
    auto mix_stream = rng::Stream::named(spec.seed, "data/mixing");
    const Matrix m_a = normal_matrix(mix_stream, spec.shared_dim, spec.d_a,
                                     1.0 / std::sqrt(static_cast<double>(spec.shared_dim)));
    const std::size_t joint_latent = spec.shared_dim + spec.privileged_dim;
    const Matrix m_b = normal_matrix(mix_stream, joint_latent, spec.d_b,
                                     1.0 / std::sqrt(static_cast<double>(joint_latent)));
    const std::vector<double> w_s = unit_weights(mix_stream, spec.shared_dim);
    const std::vector<double> w_p = unit_weights(mix_stream, spec.privileged_dim);

    Dataset out;
    out.task = spec.task;
    out.num_classes = spec.task == TaskKind::Classification ? spec.num_classes : 1;

    auto noise_stream = rng::Stream::named(spec.seed, "data/noise");
    out.raw_a = matmul(z_s, m_a);
    for (std::size_t i = 0; i < out.raw_a.size(); ++i)
        out.raw_a[i] += spec.noise_a * noise_stream.normal();

    Matrix z_joint(n, joint_latent);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < spec.shared_dim; ++j) z_joint.at(i, j) = z_s.at(i, j);
        for (std::size_t j = 0; j < spec.privileged_dim; ++j)
            z_joint.at(i, spec.shared_dim + j) = z_p.at(i, j);
    }
    out.raw_b = matmul(z_joint, m_b);
    for (std::size_t i = 0; i < out.raw_b.size(); ++i)
        out.raw_b[i] += spec.noise_b * noise_stream.normal();

    std::vector<double> score(n);
    for (std::size_t i = 0; i < n; ++i) {
        double shared = 0.0, priv = 0.0;
        for (std::size_t j = 0; j < spec.shared_dim; ++j) shared += z_s.at(i, j) * w_s[j];
        for (std::size_t j = 0; j < spec.privileged_dim; ++j) priv += z_p.at(i, j) * w_p[j];
        score[i] = (1.0 - rho) * shared + rho * priv;
    }

    out.targets = Matrix(n, 1);
    std::vector<std::size_t> label(n, 0);
    if (spec.task == TaskKind::Regression) {
        for (std::size_t i = 0; i < n; ++i) out.targets.at(i, 0) = std::tanh(score[i]);
    } else {
        // Rank-based quantile binning: class sizes differ by at most one,
        // ties broken by sample index.
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return score[a] != score[b] ? score[a] < score[b] : a < b;
        });
        for (std::size_t rank = 0; rank < n; ++rank) {
            label[order[rank]] = rank * spec.num_classes / n;
        }
        for (std::size_t i = 0; i < n; ++i)
            out.targets.at(i, 0) = static_cast<double>(label[i]);
    }

    // Degraded rows: the prevalent modality is overwritten with pure noise,
    // everywhere in the corpus, before splitting.
    const std::size_t n_bad = static_cast<std::size_t>(
        static_cast<double>(n) * spec.unreliability);
    if (n_bad > 0) {
        auto bad_stream = rng::Stream::named(spec.seed, "data/unreliable");
        std::vector<std::size_t> rows(n);
        std::iota(rows.begin(), rows.end(), 0);
        bad_stream.shuffle(rows);
        for (std::size_t k = 0; k < n_bad; ++k) {
            for (std::size_t j = 0; j < spec.d_a; ++j) {
                out.raw_a.at(rows[k], j) = bad_stream.normal();
            }
        }
    }

    auto split_stream = rng::Stream::named(spec.seed, "data/split");
    auto assign = [&](std::vector<std::size_t>& pool) {
        split_stream.shuffle(pool);
        std::size_t tr, va, te;
        split_sizes(pool.size(), tr, va, te);
        out.train_idx.insert(out.train_idx.end(), pool.begin(), pool.begin() + tr);
        out.val_idx.insert(out.val_idx.end(), pool.begin() + tr, pool.begin() + tr + va);
        out.test_idx.insert(out.test_idx.end(), pool.begin() + tr + va, pool.end());
    };
    if (spec.task == TaskKind::Classification) {
        for (std::size_t c = 0; c < spec.num_classes; ++c) {
            std::vector<std::size_t> pool;
            for (std::size_t i = 0; i < n; ++i)
                if (label[i] == c) pool.push_back(i);
            assign(pool);
        }
    } else {
        std::vector<std::size_t> pool(n);
        std::iota(pool.begin(), pool.end(), 0);
        assign(pool);
    }
    std::sort(out.train_idx.begin(), out.train_idx.end());
    std::sort(out.val_idx.begin(), out.val_idx.end());
    std::sort(out.test_idx.begin(), out.test_idx.end());
    return out;
}

GenSpec standard_config(std::uint64_t seed, TaskKind task) {
    GenSpec spec;
    spec.task = task;
    spec.seed = seed;
    return spec;
}

Matrix rows_of(const Matrix& m, const std::vector<std::size_t>& indices) {
    Matrix out(indices.size(), m.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= m.rows()) {
            throw BoundsError("rows_of: index " + std::to_string(indices[i]) +
                              " outside 0.." + std::to_string(m.rows() - 1));
        }
        for (std::size_t j = 0; j < m.cols(); ++j) out.at(i, j) = m.at(indices[i], j);
    }
    return out;
}

namespace {

Matrix indices_to_matrix(const std::vector<std::size_t>& idx) {
    Matrix m(idx.size(), 1);
    for (std::size_t i = 0; i < idx.size(); ++i) m.at(i, 0) = static_cast<double>(idx[i]);
    return m;
}

std::vector<std::size_t> matrix_to_indices(const Matrix& m, std::size_t n) {
    if (m.cols() != 1) throw IoError("dataset split file must have one column");
    std::vector<std::size_t> idx(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const double v = m.at(i, 0);
        if (v != std::nearbyint(v) || v < 0.0 || v >= static_cast<double>(n)) {
            throw IoError("dataset split file holds a bad index: " + std::to_string(v));
        }
        idx[i] = static_cast<std::size_t>(v);
    }
    return idx;
}

std::uint64_t hash_of(const Matrix& m) { return matrix_bits_hash(m, 0xcbf29ce484222325ull); }

void save_array(const std::string& dir, const char* name, const Matrix& m,
                nlohmann::json& files) {
    m.save_csv(dir + "/" + name + ".csv");
    files[name] = hash_of(m);
}

Matrix load_array(const std::string& dir, const std::string& name,
                  const nlohmann::json& files) {
    if (!files.contains(name)) {
        throw ConfigError("load_dataset: manifest lists no hash for " + name);
    }
    Matrix m = Matrix::load_csv(dir + "/" + name + ".csv");
    if (files[name].get<std::uint64_t>() != hash_of(m)) {
        throw IoError("load_dataset: content hash mismatch for " + name + ".csv");
    }
    return m;
}

}  // namespace

void save_dataset(const std::string& dir, const Dataset& data, const GenSpec& spec) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("save_dataset: cannot create " + dir + ": " + ec.message());

    nlohmann::json files;
    save_array(dir, "raw_a", data.raw_a, files);
    save_array(dir, "raw_b", data.raw_b, files);
    save_array(dir, "targets", data.targets, files);
    save_array(dir, "train_idx", indices_to_matrix(data.train_idx), files);
    save_array(dir, "val_idx", indices_to_matrix(data.val_idx), files);
    save_array(dir, "test_idx", indices_to_matrix(data.test_idx), files);

    nlohmann::json manifest;
    manifest["version"] = 1;
    manifest["files"] = files;
    manifest["spec"] = {
        {"n_samples", spec.n_samples},
        {"shared_dim", spec.shared_dim},
        {"privileged_dim", spec.privileged_dim},
        {"d_a", spec.d_a},
        {"d_b", spec.d_b},
        {"noise_a", spec.noise_a},
        {"noise_b", spec.noise_b},
        {"privileged_informativeness", spec.privileged_informativeness},
        {"task", spec.task == TaskKind::Classification ? "classification" : "regression"},
        {"num_classes", spec.num_classes},
        {"unreliability", spec.unreliability},
        {"seed", spec.seed},
    };
    std::ofstream out(dir + "/manifest.json");
    if (!out) throw IoError("save_dataset: cannot write " + dir + "/manifest.json");
    out << manifest.dump(2) << "\n";
    if (!out.good()) throw IoError("save_dataset: write failed for " + dir);
}

Dataset load_dataset(const std::string& dir, GenSpec& spec_out) {
    std::ifstream in(dir + "/manifest.json");
    if (!in) throw IoError("load_dataset: cannot open " + dir + "/manifest.json");
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("load_dataset: bad manifest in " + dir + ": " + e.what());
    }
    if (!manifest.contains("version") || manifest["version"] != 1) {
        throw ConfigError("load_dataset: unsupported manifest version in " + dir);
    }
    if (!manifest.contains("files") || !manifest.contains("spec")) {
        throw ConfigError("load_dataset: manifest in " + dir + " is missing sections");
    }

    GenSpec spec;
    try {
        const auto& js = manifest["spec"];
        spec.n_samples = js.at("n_samples").get<std::size_t>();
        spec.shared_dim = js.at("shared_dim").get<std::size_t>();
        spec.privileged_dim = js.at("privileged_dim").get<std::size_t>();
        spec.d_a = js.at("d_a").get<std::size_t>();
        spec.d_b = js.at("d_b").get<std::size_t>();
        spec.noise_a = js.at("noise_a").get<double>();
        spec.noise_b = js.at("noise_b").get<double>();
        spec.privileged_informativeness = js.at("privileged_informativeness").get<double>();
        const std::string task = js.at("task").get<std::string>();
        if (task == "classification") {
            spec.task = TaskKind::Classification;
        } else if (task == "regression") {
            spec.task = TaskKind::Regression;
        } else {
            throw ConfigError("load_dataset: unknown task kind " + task);
        }
        spec.num_classes = js.at("num_classes").get<std::size_t>();
        spec.unreliability = js.at("unreliability").get<double>();
        spec.seed = js.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("load_dataset: bad spec in " + dir + ": " + e.what());
    }
    validate(spec);

    const auto& files = manifest["files"];
    Dataset data;
    data.raw_a = load_array(dir, "raw_a", files);
    data.raw_b = load_array(dir, "raw_b", files);
    data.targets = load_array(dir, "targets", files);
    const std::size_t n = data.raw_a.rows();
    data.train_idx = matrix_to_indices(load_array(dir, "train_idx", files), n);
    data.val_idx = matrix_to_indices(load_array(dir, "val_idx", files), n);
    data.test_idx = matrix_to_indices(load_array(dir, "test_idx", files), n);
    data.task = spec.task;
    data.num_classes = spec.task == TaskKind::Classification ? spec.num_classes : 1;

    if (data.raw_b.rows() != n || data.targets.rows() != n || data.targets.cols() != 1) {
        throw ConfigError("load_dataset: array shapes in " + dir + " disagree");
    }
    if (data.train_idx.size() + data.val_idx.size() + data.test_idx.size() != n) {
        throw ConfigError("load_dataset: splits in " + dir + " do not cover the corpus");
    }
    spec_out = spec;
    return data;
}

}  // namespace otdistill
