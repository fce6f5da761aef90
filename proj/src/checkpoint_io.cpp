#include "blkprune/checkpoint_io.hpp"

#include <fstream>

namespace blkprune {

namespace {

template <typename Derived>
std::span<const float> as_span(const Eigen::PlainObjectBase<Derived>& m) {
    return {m.data(), static_cast<std::size_t>(m.size())};
}

Matrix<float> read_matrix(const Envelope& env, const std::string& name, Index rows, Index cols) {
    const auto& e = env.entry(name);
    if (e.shape != std::vector<std::int64_t>{rows, cols}) {
        throw CorruptionError("tensor '" + name + "' shape disagrees with config");
    }
    const auto data = env.f32(name);
    return Eigen::Map<const Matrix<float>>(data.data(), rows, cols);
}

Vector<float> read_vector(const Envelope& env, const std::string& name, Index n) {
    const auto& e = env.entry(name);
    if (e.shape != std::vector<std::int64_t>{n}) {
        throw CorruptionError("tensor '" + name + "' shape disagrees with config");
    }
    const auto data = env.f32(name);
    return Eigen::Map<const Vector<float>>(data.data(), n);
}

}  // namespace

nlohmann::json config_to_json(const ModelConfig& cfg) {
    return {{"n_layers", cfg.n_layers},     {"d_model", cfg.d_model},
            {"n_heads", cfg.n_heads},       {"d_ff", cfg.d_ff},
            {"vocab_size", cfg.vocab_size}, {"max_seq_len", cfg.max_seq_len},
            {"rope_theta", cfg.rope_theta}, {"norm_eps", cfg.norm_eps}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    try {
        cfg.n_layers = j.value("n_layers", cfg.n_layers);
        cfg.d_model = j.value("d_model", cfg.d_model);
        cfg.n_heads = j.value("n_heads", cfg.n_heads);
        cfg.d_ff = j.value("d_ff", cfg.d_ff);
        cfg.vocab_size = j.value("vocab_size", cfg.vocab_size);
        cfg.max_seq_len = j.value("max_seq_len", cfg.max_seq_len);
        cfg.rope_theta = j.value("rope_theta", cfg.rope_theta);
        cfg.norm_eps = j.value("norm_eps", cfg.norm_eps);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

ModelConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path.string());
    try {
        return config_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

std::vector<std::byte> checkpoint_to_bytes(const Checkpoint& ckpt) {
    ckpt.validate();
    const auto& c = ckpt.config;
    EnvelopeWriter w("checkpoint");
    w.header()["config"] = config_to_json(c);
    w.add_f32("embedding", {c.vocab_size, c.d_model}, as_span(ckpt.embedding));
    for (int l = 0; l < c.n_layers; ++l) {
        const auto& b = ckpt.blocks[static_cast<std::size_t>(l)];
        for (LinearId id : kLinearIds) {
            w.add_f32(linear_key(l, id), {b.weight(id).rows(), b.weight(id).cols()},
                      as_span(b.weight(id)));
        }
        const std::string pre = "blocks." + std::to_string(l) + ".";
        w.add_f32(pre + "attn_norm", {c.d_model}, as_span(b.attn_norm));
        w.add_f32(pre + "mlp_norm", {c.d_model}, as_span(b.mlp_norm));
    }
    w.add_f32("final_norm", {c.d_model}, as_span(ckpt.final_norm));
    w.add_f32("lm_head", {c.vocab_size, c.d_model}, as_span(ckpt.lm_head));
    return w.to_bytes();
}

Checkpoint checkpoint_from_bytes(std::span<const std::byte> bytes) {
    const Envelope env = Envelope::parse(bytes, "checkpoint");
    Checkpoint ck;
    if (!env.header().contains("config")) throw FormatError("checkpoint header lacks config");
    ck.config = config_from_json(env.header()["config"]);
    const auto& c = ck.config;
    ck.embedding = read_matrix(env, "embedding", c.vocab_size, c.d_model);
    for (int l = 0; l < c.n_layers; ++l) {
        DecoderBlockParams<float> b;
        for (LinearId id : kLinearIds) {
            auto [r, cols] = linear_shape(c, id);
            b.weight(id) = read_matrix(env, linear_key(l, id), r, cols);
        }
        const std::string pre = "blocks." + std::to_string(l) + ".";
        b.attn_norm = read_vector(env, pre + "attn_norm", c.d_model);
        b.mlp_norm = read_vector(env, pre + "mlp_norm", c.d_model);
        ck.blocks.push_back(std::move(b));
    }
    ck.final_norm = read_vector(env, "final_norm", c.d_model);
    ck.lm_head = read_matrix(env, "lm_head", c.vocab_size, c.d_model);
    return ck;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    write_file_bytes(path, checkpoint_to_bytes(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return checkpoint_from_bytes(read_file_bytes(path));
}

}  // namespace blkprune
