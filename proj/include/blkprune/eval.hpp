#pragma once

// Perplexity evaluation, the toy dense trainer, and the experiment runners
// (method matrix, alpha sweep, calibration-size sweep).

#include "blkprune/pruner.hpp"

#include <functional>
#include <map>

namespace blkprune {

struct EvalConfig {
    std::size_t window = 128;
    std::size_t stride = 0;  // 0 means stride == window (non-overlapping)

    std::size_t effective_stride() const { return stride == 0 ? window : stride; }
};

struct PerplexityResult {
    double perplexity = 0;
    double nll_sum = 0;
    std::size_t predicted = 0;  // number of scored next-token positions
};

using LogitsFn = std::function<Matrix<float>(std::span<const std::uint32_t>)>;

// exp(mean NLL) over every scored position. Windows start every `stride`
// tokens; a position already scored by an earlier window is not rescored.
PerplexityResult perplexity(const LogitsFn& logits, std::span<const std::uint32_t> tokens,
                            const EvalConfig& cfg);
PerplexityResult perplexity(const Checkpoint& ckpt, std::span<const std::uint32_t> tokens,
                            const EvalConfig& cfg);

// Sum over rows of -log softmax(logits)[target].
double sum_nll(const Matrix<float>& logits, std::span<const std::uint32_t> targets);

struct TrainConfig {
    int steps = 300;
    int batch = 8;
    std::size_t context = 0;  // 0 means max_seq_len
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 0;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<double> losses;  // mean batch cross-entropy per step
};

// Fixed-learning-rate Adam on next-token cross-entropy.
TrainResult train_toy(const ModelConfig& cfg, const TokenDataset& tokens, const TrainConfig& tc);

// Markov-chain token stream with copied spans, for desk-scale experiments.
struct CorpusConfig {
    std::uint32_t vocab_size = 512;
    std::size_t count = 200000;
    int branching = 4;          // successors per token
    double copy_prob = 0.05;    // chance per position to start copying an earlier span
    std::size_t copy_min = 8;
    std::size_t copy_max = 24;
    std::uint64_t seed = 0;    // fixes the transition table
    std::uint64_t stream = 0;  // independent draws from the same chain
};

TokenDataset synth_corpus(const CorpusConfig& cc);

// ---------------------------------------------------------------------------
// Experiment runners
// ---------------------------------------------------------------------------

struct CalibSpec {
    std::size_t n_samples = 128;
    std::size_t context = 128;
};

struct ExperimentInputs {
    const Checkpoint* model = nullptr;
    const TokenDataset* calib_tokens = nullptr;
    const TokenDataset* eval_tokens = nullptr;
    EvalConfig eval;
    PruneConfig base;  // method/pattern/seed are overridden per cell
    CalibSpec calib;
};

// One pruning run plus evaluation; the returned report carries the perplexity.
PruneReport run_cell(const ExperimentInputs& in, Method method, const SparsityPattern& pattern,
                     std::uint64_t seed, std::optional<double> alpha = std::nullopt,
                     std::optional<CalibSpec> calib = std::nullopt);

struct MatrixRow {
    std::string method;
    std::string pattern;
    std::vector<std::uint64_t> seeds;
    std::vector<double> perplexities;
    double median = 0;
    std::optional<double> relative_to_wanda;  // (wanda - x) / wanda on medians
};

struct MethodMatrix {
    double dense_perplexity = 0;
    std::vector<MatrixRow> rows;

    const MatrixRow* find(const std::string& method, const std::string& pattern) const;
};

MethodMatrix run_method_matrix(const ExperimentInputs& in, const std::vector<Method>& methods,
                               const std::vector<SparsityPattern>& patterns,
                               const std::vector<std::uint64_t>& seeds);

struct AlphaRow {
    double alpha = 0;
    double perplexity = 0;
};

struct AlphaSweep {
    std::string pattern;
    std::uint64_t seed = 0;
    std::vector<AlphaRow> rows;
};

std::vector<double> default_alpha_list();

// WANDA_PP_RGS perplexity per alpha (alpha = 0 is allowed and reduces to Wanda).
AlphaSweep run_alpha_sweep(const ExperimentInputs& in, const std::vector<double>& alphas);

struct Quartiles {
    double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
};

// Linear interpolation between order statistics.
Quartiles quartiles(std::vector<double> values);
double median(std::vector<double> values);

struct SensitivityRow {
    CalibSpec setting;
    std::string method;
    std::vector<double> perplexities;
    Quartiles stats;
};

struct SensitivitySweep {
    std::string pattern;
    int repeats = 0;
    std::vector<SensitivityRow> rows;
};

// Nine-rung ladder from 8/8 up to 128/2048.
std::vector<CalibSpec> default_calib_ladder();

SensitivitySweep run_sensitivity_sweep(const ExperimentInputs& in,
                                       const std::vector<CalibSpec>& settings, int repeats,
                                       const std::vector<Method>& methods,
                                       std::uint64_t base_seed);

nlohmann::json to_json(const MethodMatrix& m);
nlohmann::json to_json(const AlphaSweep& s);
nlohmann::json to_json(const SensitivitySweep& s);
std::string to_csv(const MethodMatrix& m);
std::string to_csv(const AlphaSweep& s);
std::string to_csv(const SensitivitySweep& s);

}  // namespace blkprune
