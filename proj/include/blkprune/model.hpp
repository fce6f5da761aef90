#pragma once

// LLaMA-style pre-norm decoder block (RMSNorm, rotary attention, SwiGLU, no
// biases) and the toy language model built from it.

#include "blkprune/autodiff.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace blkprune {

struct ModelConfig {
    int n_layers = 4;
    int d_model = 128;
    int n_heads = 4;
    int d_ff = 344;
    int vocab_size = 512;
    int max_seq_len = 128;
    double rope_theta = 10000.0;
    double norm_eps = kDefaultNormEps;

    int head_dim() const { return d_model / n_heads; }
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// The seven prunable linear layers of a block.
enum class LinearId : std::uint8_t { AttnQ, AttnK, AttnV, AttnO, MlpGate, MlpUp, MlpDown };

inline constexpr std::array<LinearId, 7> kLinearIds = {
    LinearId::AttnQ,   LinearId::AttnK, LinearId::AttnV,  LinearId::AttnO,
    LinearId::MlpGate, LinearId::MlpUp, LinearId::MlpDown};

inline constexpr std::size_t kNumLinears = kLinearIds.size();

inline constexpr std::size_t index_of(LinearId id) { return static_cast<std::size_t>(id); }

inline std::string_view linear_name(LinearId id) {
    static constexpr std::array<std::string_view, kNumLinears> names = {
        "attn_q", "attn_k", "attn_v", "attn_o", "mlp_gate", "mlp_up", "mlp_down"};
    return names[index_of(id)];
}

// Stable identifier used for masks and gradients: "blocks.<layer>.<name>".
inline std::string linear_key(int layer, LinearId id) {
    return "blocks." + std::to_string(layer) + "." + std::string(linear_name(id));
}

// (rows, cols) = (output width, input width).
inline std::pair<Index, Index> linear_shape(const ModelConfig& cfg, LinearId id) {
    switch (id) {
        case LinearId::MlpGate:
        case LinearId::MlpUp: return {cfg.d_ff, cfg.d_model};
        case LinearId::MlpDown: return {cfg.d_model, cfg.d_ff};
        default: return {cfg.d_model, cfg.d_model};
    }
}

template <typename Scalar>
struct DecoderBlockParams {
    std::array<Matrix<Scalar>, kNumLinears> linear;  // indexed by LinearId
    Vector<Scalar> attn_norm;
    Vector<Scalar> mlp_norm;

    Matrix<Scalar>& weight(LinearId id) { return linear[index_of(id)]; }
    const Matrix<Scalar>& weight(LinearId id) const { return linear[index_of(id)]; }

    template <typename To>
    DecoderBlockParams<To> cast() const {
        DecoderBlockParams<To> out;
        for (std::size_t i = 0; i < kNumLinears; ++i) out.linear[i] = linear[i].template cast<To>();
        out.attn_norm = attn_norm.template cast<To>();
        out.mlp_norm = mlp_norm.template cast<To>();
        return out;
    }

    void check_shapes(const ModelConfig& cfg) const {
        for (LinearId id : kLinearIds) {
            auto [r, c] = linear_shape(cfg, id);
            if (weight(id).rows() != r || weight(id).cols() != c) {
                throw DimensionError(std::string(linear_name(id)) + " has shape " +
                                     shape_str(weight(id)) + ", expected " + shape_str(r, c));
            }
        }
        if (attn_norm.size() != cfg.d_model || mlp_norm.size() != cfg.d_model) {
            throw DimensionError("norm scale width differs from d_model");
        }
    }

    friend bool operator==(const DecoderBlockParams& a, const DecoderBlockParams& b) {
        for (std::size_t i = 0; i < kNumLinears; ++i) {
            if (a.linear[i].rows() != b.linear[i].rows() ||
                a.linear[i].cols() != b.linear[i].cols() || a.linear[i] != b.linear[i]) {
                return false;
            }
        }
        return a.attn_norm.size() == b.attn_norm.size() && a.attn_norm == b.attn_norm &&
               a.mlp_norm.size() == b.mlp_norm.size() && a.mlp_norm == b.mlp_norm;
    }
};

struct Checkpoint {
    ModelConfig config;
    Matrix<float> embedding;  // vocab x d_model
    std::vector<DecoderBlockParams<float>> blocks;
    Vector<float> final_norm;
    Matrix<float> lm_head;  // vocab x d_model, untied

    void validate() const;

    friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
        return a.config == b.config && a.embedding.rows() == b.embedding.rows() &&
               a.embedding.cols() == b.embedding.cols() && a.embedding == b.embedding &&
               a.blocks == b.blocks && a.final_norm.size() == b.final_norm.size() &&
               a.final_norm == b.final_norm && a.lm_head.rows() == b.lm_head.rows() &&
               a.lm_head.cols() == b.lm_head.cols() && a.lm_head == b.lm_head;
    }
};

inline void ModelConfig::validate() const {
    if (n_layers <= 0 || d_model <= 0 || n_heads <= 0 || d_ff <= 0 || vocab_size <= 0 ||
        max_seq_len <= 0) {
        throw ContractError("model config: sizes must be positive");
    }
    if (d_model % n_heads != 0) throw ContractError("model config: n_heads must divide d_model");
    if (head_dim() % 2 != 0) throw ContractError("model config: head_dim must be even for rope");
    if (!(rope_theta > 0.0) || !(norm_eps > 0.0)) {
        throw ContractError("model config: rope_theta and norm_eps must be positive");
    }
}

inline void Checkpoint::validate() const {
    config.validate();
    if (static_cast<int>(blocks.size()) != config.n_layers) {
        throw ContractError("checkpoint: " + std::to_string(blocks.size()) + " blocks but n_layers " +
                            std::to_string(config.n_layers));
    }
    for (const auto& b : blocks) b.check_shapes(config);
    if (embedding.rows() != config.vocab_size || embedding.cols() != config.d_model ||
        lm_head.rows() != config.vocab_size || lm_head.cols() != config.d_model ||
        final_norm.size() != config.d_model) {
        throw DimensionError("checkpoint: embedding/head/final norm shapes disagree with config");
    }
}

template <typename Scalar>
DecoderBlockParams<Scalar> random_block(const ModelConfig& cfg, std::mt19937_64& rng) {
    DecoderBlockParams<Scalar> b;
    std::normal_distribution<double> unit(0.0, 1.0);
    const double residual_scale = 1.0 / std::sqrt(2.0 * cfg.n_layers);
    for (LinearId id : kLinearIds) {
        auto [r, c] = linear_shape(cfg, id);
        double sd = 1.0 / std::sqrt(static_cast<double>(c));
        if (id == LinearId::AttnO || id == LinearId::MlpDown) sd *= residual_scale;
        Matrix<Scalar> w(r, c);
        for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(sd * unit(rng));
        b.weight(id) = std::move(w);
    }
    b.attn_norm = Vector<Scalar>::Ones(cfg.d_model);
    b.mlp_norm = Vector<Scalar>::Ones(cfg.d_model);
    return b;
}

Checkpoint random_checkpoint(const ModelConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Tape binding and forward passes
// ---------------------------------------------------------------------------

template <typename Scalar>
struct BlockVars {
    std::array<Var<Scalar>, kNumLinears> linear;
    Var<Scalar> attn_norm;  // 1 x d_model
    Var<Scalar> mlp_norm;

    const Var<Scalar>& weight(LinearId id) const { return linear[index_of(id)]; }
};

// Which block tensors become differentiable parameters on the tape.
enum class Trainable : std::uint8_t { None, Linears, All };

// Places a block's tensors on the tape. Parameter names are linear_name() /
// "attn_norm" / "mlp_norm", optionally behind a prefix.
template <typename Scalar>
BlockVars<Scalar> bind_block(Tape<Scalar>& tape, const DecoderBlockParams<Scalar>& p,
                             Trainable trainable, const std::string& prefix = "") {
    BlockVars<Scalar> v;
    for (LinearId id : kLinearIds) {
        v.linear[index_of(id)] = trainable == Trainable::None
                                     ? tape.constant(p.weight(id))
                                     : tape.parameter(prefix + std::string(linear_name(id)),
                                                      p.weight(id));
    }
    Matrix<Scalar> an = p.attn_norm.transpose();
    Matrix<Scalar> mn = p.mlp_norm.transpose();
    if (trainable == Trainable::All) {
        v.attn_norm = tape.parameter(prefix + "attn_norm", std::move(an));
        v.mlp_norm = tape.parameter(prefix + "mlp_norm", std::move(mn));
    } else {
        v.attn_norm = tape.constant(std::move(an));
        v.mlp_norm = tape.constant(std::move(mn));
    }
    return v;
}

// Block output plus the input activation seen by each linear layer.
template <typename Scalar>
struct BlockTrace {
    Var<Scalar> out;
    std::array<Var<Scalar>, kNumLinears> linear_inputs;
};

template <typename Scalar>
BlockTrace<Scalar> block_forward(const BlockVars<Scalar>& w, const Var<Scalar>& x,
                                 const ModelConfig& cfg) {
    if (x.rows() > cfg.max_seq_len) {
        throw ContractError("block_forward: sequence length " + std::to_string(x.rows()) +
                            " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    }
    if (x.cols() != cfg.d_model) {
        throw DimensionError("block_forward: input " + shape_str(x.value()) +
                             " does not have width d_model=" + std::to_string(cfg.d_model));
    }
    BlockTrace<Scalar> tr;
    auto u = rms_norm(x, w.attn_norm, cfg.norm_eps);
    auto q = rope(linear(u, w.weight(LinearId::AttnQ)), cfg.n_heads, cfg.rope_theta);
    auto k = rope(linear(u, w.weight(LinearId::AttnK)), cfg.n_heads, cfg.rope_theta);
    auto v = linear(u, w.weight(LinearId::AttnV));

    const Index hd = cfg.head_dim();
    const Scalar inv_sqrt = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(hd)));
    std::vector<Var<Scalar>> heads;
    heads.reserve(static_cast<std::size_t>(cfg.n_heads));
    for (int h = 0; h < cfg.n_heads; ++h) {
        auto qh = slice_cols(q, h * hd, hd);
        auto kh = slice_cols(k, h * hd, hd);
        auto vh = slice_cols(v, h * hd, hd);
        auto probs = causal_softmax(scale(matmul_nt(qh, kh), inv_sqrt));
        heads.push_back(matmul(probs, vh));
    }
    auto attn = cfg.n_heads == 1 ? heads.front()
                                 : concat_cols(std::span<const Var<Scalar>>(heads));
    auto h = x + linear(attn, w.weight(LinearId::AttnO));

    auto u2 = rms_norm(h, w.mlp_norm, cfg.norm_eps);
    auto gate = linear(u2, w.weight(LinearId::MlpGate));
    auto up = linear(u2, w.weight(LinearId::MlpUp));
    auto act = hadamard(silu(gate), up);
    tr.out = h + linear(act, w.weight(LinearId::MlpDown));

    tr.linear_inputs[index_of(LinearId::AttnQ)] = u;
    tr.linear_inputs[index_of(LinearId::AttnK)] = u;
    tr.linear_inputs[index_of(LinearId::AttnV)] = u;
    tr.linear_inputs[index_of(LinearId::AttnO)] = attn;
    tr.linear_inputs[index_of(LinearId::MlpGate)] = u2;
    tr.linear_inputs[index_of(LinearId::MlpUp)] = u2;
    tr.linear_inputs[index_of(LinearId::MlpDown)] = act;
    return tr;
}

// Non-differentiable convenience forward.
template <typename Scalar>
Matrix<Scalar> block_forward(const DecoderBlockParams<Scalar>& p, const Matrix<Scalar>& x,
                             const ModelConfig& cfg) {
    Tape<Scalar> tape;
    auto w = bind_block(tape, p, Trainable::None);
    return block_forward(w, tape.constant(x), cfg).out.value();
}

template <typename Scalar>
struct ModelVars {
    Var<Scalar> embedding;
    std::vector<BlockVars<Scalar>> blocks;
    Var<Scalar> final_norm;
    Var<Scalar> lm_head;
};

// Binds every tensor of the checkpoint; with trainable=true they are all
// parameters named as in the checkpoint file.
template <typename Scalar>
ModelVars<Scalar> bind_model(Tape<Scalar>& tape, const Checkpoint& ckpt, bool trainable) {
    auto put = [&](const std::string& name, Matrix<Scalar> m) {
        return trainable ? tape.parameter(name, std::move(m)) : tape.constant(std::move(m));
    };
    ModelVars<Scalar> mv;
    mv.embedding = put("embedding", ckpt.embedding.template cast<Scalar>());
    for (int l = 0; l < ckpt.config.n_layers; ++l) {
        mv.blocks.push_back(bind_block(tape, ckpt.blocks[static_cast<std::size_t>(l)]
                                                 .template cast<Scalar>(),
                                       trainable ? Trainable::All : Trainable::None,
                                       "blocks." + std::to_string(l) + "."));
    }
    mv.final_norm = put("final_norm", ckpt.final_norm.transpose().template cast<Scalar>());
    mv.lm_head = put("lm_head", ckpt.lm_head.template cast<Scalar>());
    return mv;
}

template <typename Scalar>
Var<Scalar> model_forward(const ModelVars<Scalar>& mv, std::span<const std::uint32_t> ids,
                          const ModelConfig& cfg) {
    if (ids.empty()) throw ContractError("model_forward: empty token sequence");
    for (auto id : ids) {
        if (id >= static_cast<std::uint32_t>(cfg.vocab_size)) {
            throw ContractError("model_forward: token id " + std::to_string(id) +
                                " out of range for vocab " + std::to_string(cfg.vocab_size));
        }
    }
    auto x = embedding(mv.embedding, ids);
    for (const auto& b : mv.blocks) x = block_forward(b, x, cfg).out;
    auto n = rms_norm(x, mv.final_norm, cfg.norm_eps);
    return linear(n, mv.lm_head);
}

// Logits [seq x vocab] for a token sequence.
Matrix<float> model_forward(const Checkpoint& ckpt, std::span<const std::uint32_t> ids);

}  // namespace blkprune
