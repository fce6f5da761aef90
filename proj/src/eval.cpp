#include "blkprune/eval.hpp"

#include <cmath>
#include <random>

namespace blkprune {

double sum_nll(const Matrix<float>& logits, std::span<const std::uint32_t> targets) {
    if (static_cast<std::size_t>(logits.rows()) != targets.size()) {
        throw DimensionError("sum_nll: " + std::to_string(targets.size()) + " targets for " +
                             shape_str(logits));
    }
    double total = 0;
    for (Index r = 0; r < logits.rows(); ++r) {
        const Eigen::RowVectorXd row = logits.row(r).cast<double>();
        const double mx = row.maxCoeff();
        const double lse = mx + std::log((row.array() - mx).exp().sum());
        total += lse - row(targets[static_cast<std::size_t>(r)]);
    }
    return total;
}

PerplexityResult perplexity(const LogitsFn& logits, std::span<const std::uint32_t> tokens,
                            const EvalConfig& cfg) {
    const std::size_t w = cfg.window, stride = cfg.effective_stride();
    if (w < 2) throw ContractError("perplexity: window must hold at least two tokens");
    if (stride == 0 || stride > w) throw ContractError("perplexity: need 0 < stride <= window");
    if (tokens.size() < w) {
        throw ContractError("perplexity: stream of " + std::to_string(tokens.size()) +
                            " tokens is shorter than one window");
    }
    PerplexityResult res;
    std::size_t scored_until = 0;  // positions < scored_until already have a prediction
    for (std::size_t begin = 0; begin + w <= tokens.size(); begin += stride) {
        const auto win = tokens.subspan(begin, w);
        const Matrix<float> lg = logits(win.first(w - 1));
        // Row i predicts token begin + i + 1.
        const std::size_t first_target = std::max(begin + 1, scored_until);
        const std::size_t skip = first_target - (begin + 1);
        const std::size_t count = (w - 1) - skip;
        if (count > 0) {
            res.nll_sum += sum_nll(lg.bottomRows(static_cast<Index>(count)),
                                   win.subspan(1 + skip, count));
            res.predicted += count;
        }
        scored_until = begin + w;
    }
    res.perplexity = std::exp(res.nll_sum / static_cast<double>(res.predicted));
    return res;
}

PerplexityResult perplexity(const Checkpoint& ckpt, std::span<const std::uint32_t> tokens,
                            const EvalConfig& cfg) {
    if (cfg.window - 1 > static_cast<std::size_t>(ckpt.config.max_seq_len)) {
        throw ContractError("perplexity: window exceeds the model's max_seq_len + 1");
    }
    return perplexity([&ckpt](std::span<const std::uint32_t> ids) { return model_forward(ckpt, ids); },
                      tokens, cfg);
}

namespace {

struct TensorView {
    std::string name;
    float* data;
    Index rows;
    Index cols;

    Eigen::Map<Matrix<float>> map() const { return {data, rows, cols}; }
};

std::vector<TensorView> tensor_views(Checkpoint& ck) {
    std::vector<TensorView> v;
    v.push_back({"embedding", ck.embedding.data(), ck.embedding.rows(), ck.embedding.cols()});
    for (int l = 0; l < ck.config.n_layers; ++l) {
        auto& b = ck.blocks[static_cast<std::size_t>(l)];
        for (LinearId id : kLinearIds) {
            auto& w = b.weight(id);
            v.push_back({linear_key(l, id), w.data(), w.rows(), w.cols()});
        }
        const std::string pre = "blocks." + std::to_string(l) + ".";
        v.push_back({pre + "attn_norm", b.attn_norm.data(), 1, b.attn_norm.size()});
        v.push_back({pre + "mlp_norm", b.mlp_norm.data(), 1, b.mlp_norm.size()});
    }
    v.push_back({"final_norm", ck.final_norm.data(), 1, ck.final_norm.size()});
    v.push_back({"lm_head", ck.lm_head.data(), ck.lm_head.rows(), ck.lm_head.cols()});
    return v;
}

}  // namespace

TrainResult train_toy(const ModelConfig& cfg, const TokenDataset& tokens, const TrainConfig& tc) {
    cfg.validate();
    tokens.validate();
    if (tokens.vocab_size != static_cast<std::uint32_t>(cfg.vocab_size)) {
        throw ContractError("train_toy: token vocab " + std::to_string(tokens.vocab_size) +
                            " differs from model vocab " + std::to_string(cfg.vocab_size));
    }
    const std::size_t ctx = tc.context == 0 ? static_cast<std::size_t>(cfg.max_seq_len) : tc.context;
    if (ctx > static_cast<std::size_t>(cfg.max_seq_len)) {
        throw ContractError("train_toy: context exceeds max_seq_len");
    }
    if (tokens.size() < ctx + 1) throw ContractError("train_toy: corpus shorter than one window");
    if (tc.steps < 0 || tc.batch <= 0) throw ContractError("train_toy: bad steps/batch");

    TrainResult out;
    out.checkpoint = random_checkpoint(cfg, tc.seed);
    auto views = tensor_views(out.checkpoint);
    std::vector<Matrix<float>> m1, m2;
    for (const auto& tv : views) {
        m1.push_back(Matrix<float>::Zero(tv.rows, tv.cols));
        m2.push_back(Matrix<float>::Zero(tv.rows, tv.cols));
    }
    std::mt19937_64 rng(derive_seed(tc.seed, {0x747261696eull}));
    std::uniform_int_distribution<std::size_t> start(0, tokens.size() - ctx - 1);

    for (int step = 1; step <= tc.steps; ++step) {
        std::vector<Matrix<float>> grad_sum;
        for (const auto& tv : views) grad_sum.push_back(Matrix<float>::Zero(tv.rows, tv.cols));
        double loss_sum = 0;
        for (int b = 0; b < tc.batch; ++b) {
            const std::size_t s = start(rng);
            std::span<const std::uint32_t> input(tokens.ids.data() + s, ctx);
            std::span<const std::uint32_t> target(tokens.ids.data() + s + 1, ctx);
            Tape<float> tape;
            auto mv = bind_model(tape, out.checkpoint, true);
            auto loss = cross_entropy(model_forward(mv, input, cfg), target);
            loss_sum += loss.item();
            auto grads = tape.backward(loss);
            for (std::size_t i = 0; i < views.size(); ++i) {
                grad_sum[i] += grads.get(views[i].name, views[i].rows, views[i].cols);
            }
        }
        const double loss = loss_sum / tc.batch;
        if (!std::isfinite(loss)) throw NumericError("train_toy: loss diverged at step " +
                                                     std::to_string(step));
        out.losses.push_back(loss);
        const double bc1 = 1.0 - std::pow(tc.beta1, step);
        const double bc2 = 1.0 - std::pow(tc.beta2, step);
        const auto b1 = static_cast<float>(tc.beta1), b2 = static_cast<float>(tc.beta2);
        for (std::size_t i = 0; i < views.size(); ++i) {
            Matrix<float> g = grad_sum[i] / static_cast<float>(tc.batch);
            m1[i] = b1 * m1[i] + (1.0f - b1) * g;
            m2[i] = b2 * m2[i] + (1.0f - b2) * g.cwiseAbs2();
            auto w = views[i].map();
            w.array() -= static_cast<float>(tc.lr / bc1) * m1[i].array() /
                         ((m2[i].array() / static_cast<float>(bc2)).sqrt() +
                          static_cast<float>(tc.eps));
        }
    }
    return out;
}

}  // namespace blkprune
