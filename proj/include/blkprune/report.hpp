#pragma once

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace blkprune {

struct RoundReport {
    double pre_loss = 0;   // mean RO loss over the round's samples before its updates
    double post_loss = 0;  // same samples, after the updates
};

struct BlockReport {
    int layer = 0;
    std::optional<double> pre_ro_loss;
    std::optional<double> post_ro_loss;
    std::vector<RoundReport> rounds;
    double output_mse = 0;  // dense vs final pruned block output, all calibration samples
    double grad_norm = 0;   // Frobenius norm of the final regional-gradient term
    double sparsity = 0;
    std::optional<double> seconds;
};

struct PruneReport {
    std::string method;
    std::string pattern;
    double alpha = 0;
    int ro_rounds = 0;
    int ro_samples = 0;
    int ro_samples_effective = 0;
    double lr = 0;
    double rmsprop_rho = 0;
    double rmsprop_eps = 0;
    int epochs = 0;
    bool update_norms = false;
    bool refresh_stats = false;
    std::size_t n_samples = 0;
    std::size_t context = 0;
    std::uint64_t seed = 0;
    std::vector<BlockReport> blocks;
    double sparsity = 0;
    std::optional<double> perplexity;
    std::optional<double> seconds;
};

void to_json(nlohmann::json& j, const RoundReport& r);
void from_json(const nlohmann::json& j, RoundReport& r);
void to_json(nlohmann::json& j, const BlockReport& r);
void from_json(const nlohmann::json& j, BlockReport& r);
void to_json(nlohmann::json& j, const PruneReport& r);
void from_json(const nlohmann::json& j, PruneReport& r);

bool operator==(const RoundReport& a, const RoundReport& b);
bool operator==(const BlockReport& a, const BlockReport& b);
bool operator==(const PruneReport& a, const PruneReport& b);

}  // namespace blkprune
