#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "otdistill/autograd.hpp"
#include "otdistill/rng.hpp"

namespace otdistill {

enum class Activation { Tanh, Relu };

// Fully connected stack over the autograd layer. Parameter leaves are
// created once at construction and shared by every forward pass, so
// gradients accumulate into them across a batch step and the optimizer can
// hold per-parameter state keyed on the node.
//
// params() order is w0, b0, w1, b1, ... and is part of the checkpoint
// contract. Weights get Xavier-uniform entries drawn row-major from the
// given stream; biases start at zero and consume no draws.
class Mlp {
public:
    Mlp() = default;

    // sizes = input dim, hidden dims..., output dim (at least one layer).
    // Hidden layers apply the activation; the output layer is linear unless
    // output_activation is set.
    Mlp(const std::vector<std::size_t>& sizes, Activation act, rng::Stream& stream,
        std::string name, bool output_activation = false);

    ag::NodePtr forward(const ag::NodePtr& input) const;

    std::vector<ag::NodePtr> params() const;
    void set_frozen(bool frozen);
    bool frozen() const { return frozen_; }

    std::size_t layer_count() const { return weights_.size(); }
    std::size_t input_dim() const;
    std::size_t output_dim() const;
    const std::string& name() const { return name_; }

private:
    std::vector<ag::NodePtr> weights_;  // layer i: sizes[i] x sizes[i+1]
    std::vector<ag::NodePtr> biases_;   // layer i: 1 x sizes[i+1]
    Activation act_ = Activation::Tanh;
    bool output_activation_ = false;
    bool frozen_ = false;
    std::string name_;
};

// Backbone features for one modality batch.
ag::NodePtr forward_backbone(const Mlp& encoder, const ag::NodePtr& raw);

// Encoder-decoder that maps one backbone's feature space into the joint
// space, trained by the alignment stage. The bottleneck output is tanh; the
// reconstruction is linear, matching the joint representation's range.
class ModalityAdapter {
public:
    ModalityAdapter() = default;
    ModalityAdapter(std::size_t in_dim, std::size_t bottleneck, std::size_t joint_dim,
                    rng::Stream& stream, const std::string& name);

    ag::NodePtr adapt(const ag::NodePtr& features) const;

    std::vector<ag::NodePtr> params() const;
    void set_frozen(bool frozen);
    bool frozen() const { return encoder_.frozen(); }

    std::size_t input_dim() const { return encoder_.input_dim(); }
    std::size_t output_dim() const { return decoder_.output_dim(); }

private:
    Mlp encoder_;
    Mlp decoder_;
};

ag::NodePtr adapt(const ModalityAdapter& adapter, const ag::NodePtr& features);

// Hallucination network: regresses privileged-modality features from
// prevalent-modality features, trained with the teacher and frozen for the
// student.
struct TNet {
    Mlp net;

    TNet() = default;
    TNet(std::size_t prevalent_dim, std::size_t hidden, std::size_t privileged_dim,
         rng::Stream& stream, const std::string& name);
};

ag::NodePtr hallucinate(const TNet& tnet, const ag::NodePtr& prevalent);

// Joint-representation builder plus prediction head.
//
// Concat: joint = linear projection of the column-concatenated features.
// Gated: joint = sum over modalities of sigmoid-gate(x_i) * projection(x_i),
// each gate a single affine layer, so gate values stay in (0,1).
//
// params() order: per modality its projection (w, b) then, for the gated
// kind, its gate (w, b); the prediction head last.
class FusionHead {
public:
    enum class Kind { Concat, Gated };

    struct Output {
        ag::NodePtr joint;        // b x joint_dim
        ag::NodePtr predictions;  // b x out_dim logits or regression outputs
    };

    FusionHead() = default;
    FusionHead(Kind kind, const std::vector<std::size_t>& input_dims, std::size_t joint_dim,
               std::size_t out_dim, rng::Stream& stream, const std::string& name);

    Output fuse(const std::vector<ag::NodePtr>& features) const;

    std::vector<ag::NodePtr> params() const;
    void set_frozen(bool frozen);
    bool frozen() const { return head_.frozen(); }

    Kind kind() const { return kind_; }
    std::size_t modality_count() const { return input_dims_.size(); }
    std::size_t joint_dim() const { return joint_dim_; }
    std::size_t out_dim() const { return head_.output_dim(); }

private:
    Kind kind_ = Kind::Concat;
    std::vector<std::size_t> input_dims_;
    std::size_t joint_dim_ = 0;
    Mlp concat_projection_;            // concat kind
    std::vector<Mlp> projections_;     // gated kind, one per modality
    std::vector<ag::NodePtr> gate_w_;  // gated kind, dim_i x joint_dim
    std::vector<ag::NodePtr> gate_b_;  // gated kind, 1 x joint_dim
    Mlp head_;
};

// FNV-1a over the bit patterns of every parameter in order. Stage-isolation
// tests compare this before and after a training phase to prove frozen
// components never moved.
std::uint64_t params_hash(const std::vector<ag::NodePtr>& params);

// Checkpoint directory: manifest.json (version, config hash, per-parameter
// name/shape/file) plus one CSV per parameter at full precision. Loading
// writes values into the given leaves in place and rejects any mismatch in
// config hash, parameter order, names, or shapes.
void save_checkpoint(const std::string& dir, const std::vector<ag::NodePtr>& params,
                     std::uint64_t config_hash);
void load_checkpoint(const std::string& dir, const std::vector<ag::NodePtr>& params,
                     std::uint64_t config_hash);

}  // namespace otdistill
