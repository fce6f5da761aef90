#include "blkprune/model.hpp"

namespace blkprune {

Checkpoint random_checkpoint(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> unit(0.0, 1.0);
    Checkpoint ck;
    ck.config = cfg;
    ck.embedding.resize(cfg.vocab_size, cfg.d_model);
    for (Index i = 0; i < ck.embedding.size(); ++i) {
        ck.embedding.data()[i] = static_cast<float>(unit(rng));
    }
    for (int l = 0; l < cfg.n_layers; ++l) ck.blocks.push_back(random_block<float>(cfg, rng));
    ck.final_norm = Vector<float>::Ones(cfg.d_model);
    // Small head so an untrained model starts close to the uniform distribution.
    const double sd = 0.5 / std::sqrt(static_cast<double>(cfg.d_model));
    ck.lm_head.resize(cfg.vocab_size, cfg.d_model);
    for (Index i = 0; i < ck.lm_head.size(); ++i) {
        ck.lm_head.data()[i] = static_cast<float>(sd * unit(rng));
    }
    return ck;
}

Matrix<float> model_forward(const Checkpoint& ckpt, std::span<const std::uint32_t> ids) {
    Tape<float> tape;
    auto mv = bind_model(tape, ckpt, false);
    return model_forward(mv, ids, ckpt.config).value();
}

}  // namespace blkprune
