#pragma once

// Block-by-block pruning driver.
//
// For each decoder block:
//   1. (RGS methods) accumulate regional gradients on the current weights
//   2. for k = 1..K (RO methods only):
//        draw M calibration samples, score and select a mask, then for each
//        drawn sample take one RMSprop step on the MSE between the dense
//        block's output and the masked block's output
//   3. (RGS methods) re-accumulate regional gradients on the updated, masked block
//   4. final score and mask
// then the calibration hidden states are pushed through the finished block.

#include "blkprune/calib.hpp"
#include "blkprune/report.hpp"
#include "blkprune/scoring.hpp"
#include "blkprune/sparsity.hpp"

#include <chrono>
#include <optional>

namespace blkprune {

enum class Method { Wanda, WandaPPRgs, WandaPPRo, WandaPP };

inline bool uses_rgs(Method m) { return m == Method::WandaPPRgs || m == Method::WandaPP; }
inline bool uses_ro(Method m) { return m == Method::WandaPPRo || m == Method::WandaPP; }

// CLI spelling: wanda | rgs | ro | wanda++
Method parse_method(const std::string& text);
std::string method_name(Method m);

struct ROConfig {
    int rounds = 4;
    int samples = 32;
    double lr = 3e-7;
    double rho = 0.99;
    double eps = 1e-8;
    int epochs = 1;
    bool update_norms = false;  // also step the two RMSNorm scales

    void validate() const;
};

struct PruneConfig {
    Method method = Method::WandaPP;
    ScoreConfig score;  // criterion is derived from method; alpha is used by RGS methods
    ROConfig ro;
    SparsityPattern pattern = SparsityPattern::nm(2, 4);
    std::uint64_t seed = 0;
    bool refresh_stats = false;  // recollect activation norms before every round
    bool timing = false;         // record wall-clock seconds in the report
};

template <typename Scalar>
struct RmsPropState {
    std::array<Matrix<Scalar>, kNumLinears> v;
    Vector<Scalar> attn_norm_v;
    Vector<Scalar> mlp_norm_v;

    explicit RmsPropState(const ModelConfig& cfg) {
        for (LinearId id : kLinearIds) {
            auto [r, c] = linear_shape(cfg, id);
            v[index_of(id)] = Matrix<Scalar>::Zero(r, c);
        }
        attn_norm_v = Vector<Scalar>::Zero(cfg.d_model);
        mlp_norm_v = Vector<Scalar>::Zero(cfg.d_model);
    }
};

// v <- rho v + (1 - rho) g^2 ;  w <- w - lr g / (sqrt(v) + eps)
// Masked-out entries see a zero gradient and are never written.
template <typename Scalar, typename WDerived, typename GDerived, typename VDerived>
void rmsprop_step(Eigen::PlainObjectBase<WDerived>& latent, const Eigen::MatrixBase<GDerived>& grad,
                  const MaskMatrix* mask, Eigen::PlainObjectBase<VDerived>& v,
                  const ROConfig& cfg) {
    require_same_shape(latent, grad, "rmsprop_step");
    require_same_shape(latent, v, "rmsprop_step");
    if (mask) require_same_shape(latent, *mask, "rmsprop_step");
    if (!all_finite(grad)) throw NumericError("rmsprop_step: non-finite gradient");
    const Scalar rho = static_cast<Scalar>(cfg.rho);
    const Scalar lr = static_cast<Scalar>(cfg.lr);
    const Scalar eps = static_cast<Scalar>(cfg.eps);
    const auto& gv = grad.derived().eval();
    for (Index i = 0; i < latent.size(); ++i) {
        const bool keep = mask == nullptr || mask->data()[i];
        const Scalar g = keep ? gv.data()[i] : Scalar(0);
        Scalar& vi = v.data()[i];
        vi = rho * vi + (Scalar(1) - rho) * g * g;
        if (keep) latent.data()[i] -= lr * g / (std::sqrt(vi) + eps);
    }
}

// MSE between the dense (detached) and pruned block outputs.
template <typename Scalar>
Var<Scalar> ro_loss(const Matrix<Scalar>& dense_out, const Var<Scalar>& pruned_out) {
    return mse(pruned_out, dense_out);
}

template <typename Scalar>
Scalar ro_loss(const Matrix<Scalar>& dense_out, const Matrix<Scalar>& pruned_out) {
    require_same_shape(dense_out, pruned_out, "ro_loss");
    if (dense_out.size() == 0) throw ContractError("ro_loss: empty tensor");
    return (pruned_out - dense_out).squaredNorm() / static_cast<Scalar>(dense_out.size());
}

// Dense reference, working latent weights, current mask and optimizer state.
template <typename Scalar>
struct BlockPair {
    DecoderBlockParams<Scalar> dense;
    DecoderBlockParams<Scalar> latent;
    BlockMask mask;
    RmsPropState<Scalar> state;

    BlockPair(const DecoderBlockParams<Scalar>& block, const ModelConfig& cfg)
        : dense(block), latent(block), mask(full_mask(cfg)), state(cfg) {}

    DecoderBlockParams<Scalar> effective() const { return apply_mask(latent, mask); }
};

template <typename Scalar>
struct BlockResult {
    FinalizedBlock<Scalar> block;
    DecoderBlockParams<Scalar> latent;
    BlockMask mask;
    BlockReport telemetry;
    std::vector<Matrix<Scalar>> outputs;  // final pruned block applied to every input
};

namespace detail {

template <typename Scalar>
BlockMask score_and_select(const DecoderBlockParams<Scalar>& latent,
                           const ActivationStats<Scalar>& stats,
                           const GradAccumulator<Scalar>* grads, double alpha,
                           std::size_t n_samples, const SparsityPattern& pattern) {
    BlockMask mask;
    for (LinearId id : kLinearIds) {
        const auto& w = latent.weight(id);
        Matrix<Scalar> s = grads ? rgs_score(w, stats.norm(id), *grads, id, alpha, n_samples)
                                 : wanda_score(w, stats.norm(id));
        mask[index_of(id)] = select_mask(s, pattern);
    }
    return mask;
}

template <typename Scalar>
double mean_ro_loss(const DecoderBlockParams<Scalar>& effective,
                    const std::vector<Matrix<Scalar>>& dense_outs,
                    std::span<const Matrix<Scalar>> inputs, const std::vector<std::size_t>& idx,
                    const ModelConfig& cfg) {
    double total = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        total += static_cast<double>(
            ro_loss(dense_outs[i], block_forward(effective, inputs[idx[i]], cfg)));
    }
    return total / static_cast<double>(idx.size());
}

}  // namespace detail

// One RO pass over `subset`: forward the masked working block, MSE against
// the dense output, backward, RMSprop. Samples are processed sequentially.
template <typename Scalar>
void regional_optimize(BlockPair<Scalar>& pair, std::span<const Matrix<Scalar>> inputs,
                       const std::vector<std::size_t>& subset,
                       const std::vector<Matrix<Scalar>>& dense_outs, const ROConfig& ro,
                       const ModelConfig& cfg) {
    const Trainable which = ro.update_norms ? Trainable::All : Trainable::Linears;
    for (std::size_t i = 0; i < subset.size(); ++i) {
        Tape<Scalar> tape;
        auto w = bind_block(tape, pair.effective(), which);
        auto out = block_forward(w, tape.constant(inputs[subset[i]]), cfg).out;
        auto grads = tape.backward(ro_loss(dense_outs[i], out));
        for (LinearId id : kLinearIds) {
            auto& lat = pair.latent.weight(id);
            rmsprop_step<Scalar>(lat, grads.get(std::string(linear_name(id)), lat.rows(), lat.cols()),
                                 &pair.mask[index_of(id)], pair.state.v[index_of(id)], ro);
        }
        if (ro.update_norms) {
            const Index d = pair.latent.attn_norm.size();
            rmsprop_step<Scalar>(pair.latent.attn_norm, grads.get("attn_norm", 1, d).transpose(),
                                 nullptr, pair.state.attn_norm_v, ro);
            rmsprop_step<Scalar>(pair.latent.mlp_norm, grads.get("mlp_norm", 1, d).transpose(),
                                 nullptr, pair.state.mlp_norm_v, ro);
        }
    }
}

template <typename Scalar>
BlockResult<Scalar> prune_block(const DecoderBlockParams<Scalar>& block, int layer,
                                std::span<const Matrix<Scalar>> inputs,
                                const ActivationStats<Scalar>& entry_stats, const PruneConfig& pc,
                                const ModelConfig& cfg,
                                std::span<const Matrix<Scalar>> dense_outputs = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t n = inputs.size();
    if (n == 0) throw ContractError("prune_block: no calibration samples");
    block.check_shapes(cfg);
    pc.ro.validate();

    const bool rgs = uses_rgs(pc.method);
    const double alpha = rgs ? pc.score.alpha : 0.0;
    BlockPair<Scalar> pair(block, cfg);
    // Dense block outputs for every input, from the caller's stats pass or
    // computed here. They serve as RO targets and for output_mse.
    std::vector<Matrix<Scalar>> own_dense;
    if (dense_outputs.empty()) {
        own_dense.reserve(n);
        for (const auto& x : inputs) own_dense.push_back(block_forward(pair.dense, x, cfg));
        dense_outputs = own_dense;
    } else if (dense_outputs.size() != n) {
        throw ContractError("prune_block: " + std::to_string(dense_outputs.size()) +
                            " dense outputs for " + std::to_string(n) + " inputs");
    }
    ActivationStats<Scalar> stats = entry_stats;
    BlockReport rep;
    rep.layer = layer;

    std::optional<GradAccumulator<Scalar>> grads;
    if (rgs) grads = accumulate_regional_gradients(pair.latent, inputs, cfg, layer);

    if (uses_ro(pc.method)) {
        const std::size_t m = std::min<std::size_t>(static_cast<std::size_t>(pc.ro.samples), n);
        const std::uint64_t block_seed = derive_seed(pc.seed, {static_cast<std::uint64_t>(layer)});
        for (int k = 1; k <= pc.ro.rounds; ++k) {
            const auto subset = select_ro_subset(n, m, block_seed, static_cast<std::uint64_t>(k));
            if (pc.refresh_stats && k > 1) {
                stats = accumulate_activation_stats(pair.effective(), inputs, cfg);
            }
            pair.mask = detail::score_and_select(pair.latent, stats, grads ? &*grads : nullptr,
                                                 alpha, n, pc.pattern);
            std::vector<Matrix<Scalar>> dense_outs;
            dense_outs.reserve(subset.size());
            for (auto i : subset) dense_outs.push_back(dense_outputs[i]);

            RoundReport rr;
            rr.pre_loss = detail::mean_ro_loss(pair.effective(), dense_outs, inputs, subset, cfg);
            for (int e = 0; e < pc.ro.epochs; ++e) {
                regional_optimize(pair, inputs, subset, dense_outs, pc.ro, cfg);
            }
            rr.post_loss = detail::mean_ro_loss(pair.effective(), dense_outs, inputs, subset, cfg);
            rep.rounds.push_back(rr);
        }
        if (!rep.rounds.empty()) {
            rep.pre_ro_loss = rep.rounds.front().pre_loss;
            rep.post_ro_loss = rep.rounds.back().post_loss;
        }
        if (rgs) grads = accumulate_regional_gradients(pair.effective(), inputs, cfg, layer);
        if (pc.refresh_stats) stats = accumulate_activation_stats(pair.effective(), inputs, cfg);
    }

    pair.mask = detail::score_and_select(pair.latent, stats, grads ? &*grads : nullptr, alpha, n,
                                         pc.pattern);

    BlockResult<Scalar> res;
    res.block.layer = layer;
    res.block.effective = pair.effective();
    res.block.finalized = true;
    res.latent = std::move(pair.latent);
    res.mask = std::move(pair.mask);

    double out_mse = 0;
    res.outputs.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        res.outputs.push_back(block_forward(res.block.effective, inputs[i], cfg));
        out_mse += static_cast<double>(ro_loss(dense_outputs[i], res.outputs.back()));
    }
    rep.output_mse = out_mse / static_cast<double>(n);
    rep.grad_norm = grads ? static_cast<double>(grads->frobenius_norm()) : 0.0;
    rep.sparsity = achieved_sparsity(res.mask);
    if (pc.timing) {
        rep.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    res.telemetry = std::move(rep);
    return res;
}

struct PruneResult {
    Checkpoint pruned;
    std::vector<BlockMask> masks;
    PruneReport report;
};

PruneReport make_report_header(const PruneConfig& pc, const CalibrationSet& calib);

// Prunes blocks 0..L-1 in order, feeding each block the calibration states
// produced by the already-pruned blocks before it.
template <typename Scalar>
PruneResult prune_model(const Checkpoint& ckpt, const CalibrationSet& calib,
                        const PruneConfig& pc) {
    const auto t0 = std::chrono::steady_clock::now();
    ckpt.validate();
    const auto& cfg = ckpt.config;
    PruneResult out;
    out.pruned = ckpt;
    out.report = make_report_header(pc, calib);

    auto states = HiddenStates<Scalar>::embed(ckpt, calib);
    double kept = 0, total = 0;
    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto block = ckpt.blocks[static_cast<std::size_t>(l)].template cast<Scalar>();
        std::vector<Matrix<Scalar>> dense_outputs;
        const auto stats = accumulate_activation_stats(block, states.inputs(), cfg, &dense_outputs);
        auto res = prune_block(block, l, states.inputs(), stats, pc, cfg,
                               std::span<const Matrix<Scalar>>(dense_outputs));
        dense_outputs.clear();
        for (const auto& m : res.mask) {
            kept += static_cast<double>(m.count());
            total += static_cast<double>(m.size());
        }
        states.advance(res.block, std::move(res.outputs));
        out.pruned.blocks[static_cast<std::size_t>(l)] = res.block.effective.template cast<float>();
        out.masks.push_back(std::move(res.mask));
        out.report.blocks.push_back(std::move(res.telemetry));
    }
    out.report.sparsity = 1.0 - kept / total;
    if (pc.timing) {
        out.report.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    return out;
}

// Every pattern violation over all blocks; empty when the model is clean.
std::vector<MaskViolation> verify_model_masks(const std::vector<BlockMask>& masks,
                                              const SparsityPattern& pattern);

}  // namespace blkprune
