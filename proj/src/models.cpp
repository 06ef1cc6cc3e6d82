#include "otdistill/models.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <unordered_set>
#include <utility>

#include "json.hpp"
#include "otdistill/errors.hpp"

namespace otdistill {

namespace {

Matrix xavier_uniform(std::size_t fan_in, std::size_t fan_out, rng::Stream& stream) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Matrix w(fan_in, fan_out);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = stream.uniform(-limit, limit);
    return w;
}

void set_requires_grad(const std::vector<ag::NodePtr>& params, bool value) {
    for (const auto& p : params) p->requires_grad = value;
}

}  // namespace

// --- Mlp --------------------------------------------------------------------

Mlp::Mlp(const std::vector<std::size_t>& sizes, Activation act, rng::Stream& stream,
         std::string name, bool output_activation)
    : act_(act), output_activation_(output_activation), name_(std::move(name)) {
    if (sizes.size() < 2) {
        throw ContractError("Mlp " + name_ + ": needs input and output dims, got " +
                            std::to_string(sizes.size()) + " sizes");
    }
    for (std::size_t s : sizes) {
        if (s == 0) throw ContractError("Mlp " + name_ + ": zero layer width");
    }
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
        const std::string idx = std::to_string(i);
        weights_.push_back(
            ag::leaf(xavier_uniform(sizes[i], sizes[i + 1], stream), name_ + "/w" + idx));
        biases_.push_back(ag::leaf(Matrix(1, sizes[i + 1]), name_ + "/b" + idx));
    }
}

ag::NodePtr Mlp::forward(const ag::NodePtr& input) const {
    if (weights_.empty()) throw ContractError("Mlp: forward on a default-constructed model");
    if (!input) throw ContractError("Mlp " + name_ + ": null input");
    if (input->value.cols() != input_dim()) {
        throw ContractError("Mlp " + name_ + ": input has " +
                            std::to_string(input->value.cols()) + " columns, expected " +
                            std::to_string(input_dim()));
    }
    ag::NodePtr x = input;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
        x = ag::add(ag::matmul(x, weights_[i]), biases_[i]);
        const bool last = i + 1 == weights_.size();
        if (!last || output_activation_) {
            x = act_ == Activation::Tanh ? ag::tanh(x) : ag::relu(x);
        }
    }
    return x;
}

std::vector<ag::NodePtr> Mlp::params() const {
    std::vector<ag::NodePtr> out;
    out.reserve(2 * weights_.size());
    for (std::size_t i = 0; i < weights_.size(); ++i) {
        out.push_back(weights_[i]);
        out.push_back(biases_[i]);
    }
    return out;
}

void Mlp::set_frozen(bool frozen) {
    frozen_ = frozen;
    set_requires_grad(params(), !frozen);
}

std::size_t Mlp::input_dim() const {
    if (weights_.empty()) throw ContractError("Mlp: default-constructed model has no dims");
    return weights_.front()->value.rows();
}

std::size_t Mlp::output_dim() const {
    if (weights_.empty()) throw ContractError("Mlp: default-constructed model has no dims");
    return weights_.back()->value.cols();
}

ag::NodePtr forward_backbone(const Mlp& encoder, const ag::NodePtr& raw) {
    return encoder.forward(raw);
}

// --- ModalityAdapter --------------------------------------------------------

ModalityAdapter::ModalityAdapter(std::size_t in_dim, std::size_t bottleneck,
                                 std::size_t joint_dim, rng::Stream& stream,
                                 const std::string& name)
    : encoder_({in_dim, bottleneck}, Activation::Tanh, stream, name + "/enc", true),
      decoder_({bottleneck, joint_dim}, Activation::Tanh, stream, name + "/dec", false) {}

ag::NodePtr ModalityAdapter::adapt(const ag::NodePtr& features) const {
    return decoder_.forward(encoder_.forward(features));
}

std::vector<ag::NodePtr> ModalityAdapter::params() const {
    auto out = encoder_.params();
    auto dec = decoder_.params();
    out.insert(out.end(), dec.begin(), dec.end());
    return out;
}

void ModalityAdapter::set_frozen(bool frozen) {
    encoder_.set_frozen(frozen);
    decoder_.set_frozen(frozen);
}

ag::NodePtr adapt(const ModalityAdapter& adapter, const ag::NodePtr& features) {
    return adapter.adapt(features);
}

// --- TNet -------------------------------------------------------------------

TNet::TNet(std::size_t prevalent_dim, std::size_t hidden, std::size_t privileged_dim,
           rng::Stream& stream, const std::string& name)
    : net({prevalent_dim, hidden, privileged_dim}, Activation::Tanh, stream, name, false) {}

ag::NodePtr hallucinate(const TNet& tnet, const ag::NodePtr& prevalent) {
    return tnet.net.forward(prevalent);
}

// --- FusionHead ---------------------------------------------------------------

FusionHead::FusionHead(Kind kind, const std::vector<std::size_t>& input_dims,
                       std::size_t joint_dim, std::size_t out_dim, rng::Stream& stream,
                       const std::string& name)
    : kind_(kind), input_dims_(input_dims), joint_dim_(joint_dim) {
    if (input_dims.empty()) throw ContractError("FusionHead " + name + ": no modalities");
    if (joint_dim == 0 || out_dim == 0) {
        throw ContractError("FusionHead " + name + ": zero joint or output dim");
    }
    if (kind_ == Kind::Concat) {
        std::size_t total = 0;
        for (std::size_t d : input_dims) total += d;
        concat_projection_ = Mlp({total, joint_dim}, Activation::Tanh, stream, name + "/proj");
    } else {
        for (std::size_t i = 0; i < input_dims.size(); ++i) {
            const std::string idx = std::to_string(i);
            projections_.emplace_back(std::vector<std::size_t>{input_dims[i], joint_dim},
                                      Activation::Tanh, stream, name + "/proj" + idx);
            gate_w_.push_back(ag::leaf(xavier_uniform(input_dims[i], joint_dim, stream),
                                       name + "/gate-w" + idx));
            gate_b_.push_back(ag::leaf(Matrix(1, joint_dim), name + "/gate-b" + idx));
        }
    }
    head_ = Mlp({joint_dim, out_dim}, Activation::Tanh, stream, name + "/head");
}

FusionHead::Output FusionHead::fuse(const std::vector<ag::NodePtr>& features) const {
    if (input_dims_.empty()) throw ContractError("FusionHead: default-constructed");
    if (features.size() != input_dims_.size()) {
        throw ContractError("FusionHead: got " + std::to_string(features.size()) +
                            " feature batches, configured for " +
                            std::to_string(input_dims_.size()));
    }
    const std::size_t b = features.front()->value.rows();
    for (std::size_t i = 0; i < features.size(); ++i) {
        if (!features[i]) throw ContractError("FusionHead: null feature batch");
        if (features[i]->value.rows() != b) {
            throw ContractError("FusionHead: batch-size mismatch, modality 0 has " +
                                std::to_string(b) + " rows, modality " + std::to_string(i) +
                                " has " + std::to_string(features[i]->value.rows()));
        }
        if (features[i]->value.cols() != input_dims_[i]) {
            throw ContractError("FusionHead: modality " + std::to_string(i) + " has " +
                                std::to_string(features[i]->value.cols()) +
                                " columns, expected " + std::to_string(input_dims_[i]));
        }
    }

    ag::NodePtr joint;
    if (kind_ == Kind::Concat) {
        joint = concat_projection_.forward(
            features.size() == 1 ? features.front() : ag::concat_cols(features));
    } else {
        for (std::size_t i = 0; i < features.size(); ++i) {
            auto gate =
                ag::sigmoid(ag::add(ag::matmul(features[i], gate_w_[i]), gate_b_[i]));
            auto term = ag::mul(gate, projections_[i].forward(features[i]));
            joint = joint ? ag::add(joint, term) : term;
        }
    }
    return {joint, head_.forward(joint)};
}

std::vector<ag::NodePtr> FusionHead::params() const {
    std::vector<ag::NodePtr> out;
    if (kind_ == Kind::Concat) {
        out = concat_projection_.params();
    } else {
        for (std::size_t i = 0; i < projections_.size(); ++i) {
            auto p = projections_[i].params();
            out.insert(out.end(), p.begin(), p.end());
            out.push_back(gate_w_[i]);
            out.push_back(gate_b_[i]);
        }
    }
    auto h = head_.params();
    out.insert(out.end(), h.begin(), h.end());
    return out;
}

void FusionHead::set_frozen(bool frozen) {
    if (kind_ == Kind::Concat) {
        concat_projection_.set_frozen(frozen);
    } else {
        for (auto& p : projections_) p.set_frozen(frozen);
        set_requires_grad(gate_w_, !frozen);
        set_requires_grad(gate_b_, !frozen);
    }
    head_.set_frozen(frozen);
}

// --- hashing and checkpoints --------------------------------------------------

std::uint64_t params_hash(const std::vector<ag::NodePtr>& params) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& p : params) {
        h = rng::fnv1a(p->name, h);
        h = matrix_bits_hash(p->value, h);
    }
    return h;
}

namespace {

std::string file_name_for(const std::string& param_name) {
    std::string out;
    out.reserve(param_name.size() + 4);
    for (char c : param_name) {
        const bool keep = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                          (c >= '0' && c <= '9') || c == '-' || c == '_' || c == '.';
        out.push_back(keep ? c : '_');
    }
    return out + ".csv";
}

}  // namespace

void save_checkpoint(const std::string& dir, const std::vector<ag::NodePtr>& params,
                     std::uint64_t config_hash) {
    if (params.empty()) throw ContractError("save_checkpoint: empty parameter list");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("save_checkpoint: cannot create " + dir + ": " + ec.message());

    std::unordered_set<std::string> seen;
    nlohmann::json manifest;
    manifest["version"] = 1;
    manifest["config_hash"] = config_hash;
    manifest["params"] = nlohmann::json::array();
    for (const auto& p : params) {
        if (!p) throw ContractError("save_checkpoint: null parameter");
        if (p->name.empty()) throw ContractError("save_checkpoint: unnamed parameter");
        const std::string file = file_name_for(p->name);
        if (!seen.insert(file).second) {
            throw ContractError("save_checkpoint: parameter file collision on " + file);
        }
        manifest["params"].push_back({{"name", p->name},
                                      {"rows", p->value.rows()},
                                      {"cols", p->value.cols()},
                                      {"file", file}});
        p->value.save_csv(dir + "/" + file);
    }

    std::ofstream out(dir + "/manifest.json");
    if (!out) throw IoError("save_checkpoint: cannot write " + dir + "/manifest.json");
    out << manifest.dump(2) << "\n";
    if (!out.good()) throw IoError("save_checkpoint: write failed for " + dir);
}

void load_checkpoint(const std::string& dir, const std::vector<ag::NodePtr>& params,
                     std::uint64_t config_hash) {
    std::ifstream in(dir + "/manifest.json");
    if (!in) throw IoError("load_checkpoint: cannot open " + dir + "/manifest.json");
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("load_checkpoint: bad manifest in " + dir + ": " + e.what());
    }

    if (!manifest.contains("version") || manifest["version"] != 1) {
        throw ConfigError("load_checkpoint: unsupported manifest version in " + dir);
    }
    if (!manifest.contains("config_hash") ||
        manifest["config_hash"].get<std::uint64_t>() != config_hash) {
        throw ConfigError("load_checkpoint: checkpoint in " + dir +
                          " was written under a different config");
    }
    if (!manifest.contains("params") || !manifest["params"].is_array()) {
        throw ConfigError("load_checkpoint: manifest in " + dir + " lists no parameters");
    }
    const auto& entries = manifest["params"];
    if (entries.size() != params.size()) {
        throw ConfigError("load_checkpoint: checkpoint has " + std::to_string(entries.size()) +
                          " parameters, model has " + std::to_string(params.size()));
    }

    // Validate everything before touching any parameter, so a mismatch
    // cannot leave the model half-loaded.
    std::vector<Matrix> values;
    values.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& e = entries[i];
        const std::string name = e.at("name").get<std::string>();
        if (name != params[i]->name) {
            throw ConfigError("load_checkpoint: parameter " + std::to_string(i) + " is " +
                              params[i]->name + " in the model but " + name +
                              " in the checkpoint");
        }
        Matrix m = Matrix::load_csv(dir + "/" + e.at("file").get<std::string>());
        if (m.rows() != e.at("rows").get<std::size_t>() ||
            m.cols() != e.at("cols").get<std::size_t>()) {
            throw ConfigError("load_checkpoint: " + name + " file shape " + m.shape_str() +
                              " disagrees with its manifest entry");
        }
        if (!m.same_shape(params[i]->value)) {
            throw ConfigError("load_checkpoint: " + name + " is " + m.shape_str() +
                              " in the checkpoint, " + params[i]->value.shape_str() +
                              " in the model");
        }
        values.push_back(std::move(m));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        params[i]->value = std::move(values[i]);
        params[i]->grad = Matrix(params[i]->value.rows(), params[i]->value.cols());
    }
}

}  // namespace otdistill
