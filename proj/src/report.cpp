#include "blkprune/report.hpp"

namespace blkprune {

namespace {

void put_opt(nlohmann::json& j, const char* key, const std::optional<double>& v) {
    j[key] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> get_opt(const nlohmann::json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<double>();
}

}  // namespace

void to_json(nlohmann::json& j, const RoundReport& r) {
    j = {{"pre_ro_loss", r.pre_loss}, {"post_ro_loss", r.post_loss}};
}

void from_json(const nlohmann::json& j, RoundReport& r) {
    r.pre_loss = j.at("pre_ro_loss").get<double>();
    r.post_loss = j.at("post_ro_loss").get<double>();
}

void to_json(nlohmann::json& j, const BlockReport& r) {
    j = nlohmann::json::object();
    j["layer"] = r.layer;
    put_opt(j, "pre_ro_loss", r.pre_ro_loss);
    put_opt(j, "post_ro_loss", r.post_ro_loss);
    j["rounds"] = r.rounds;
    j["output_mse"] = r.output_mse;
    j["grad_norm"] = r.grad_norm;
    j["sparsity"] = r.sparsity;
    put_opt(j, "seconds", r.seconds);
}

void from_json(const nlohmann::json& j, BlockReport& r) {
    r.layer = j.at("layer").get<int>();
    r.pre_ro_loss = get_opt(j, "pre_ro_loss");
    r.post_ro_loss = get_opt(j, "post_ro_loss");
    r.rounds = j.at("rounds").get<std::vector<RoundReport>>();
    r.output_mse = j.at("output_mse").get<double>();
    r.grad_norm = j.at("grad_norm").get<double>();
    r.sparsity = j.at("sparsity").get<double>();
    r.seconds = get_opt(j, "seconds");
}

void to_json(nlohmann::json& j, const PruneReport& r) {
    j = nlohmann::json::object();
    j["method"] = r.method;
    j["pattern"] = r.pattern;
    j["alpha"] = r.alpha;
    j["ro_rounds"] = r.ro_rounds;
    j["ro_samples"] = r.ro_samples;
    j["ro_samples_effective"] = r.ro_samples_effective;
    j["lr"] = r.lr;
    j["rmsprop_rho"] = r.rmsprop_rho;
    j["rmsprop_eps"] = r.rmsprop_eps;
    j["epochs"] = r.epochs;
    j["update_norms"] = r.update_norms;
    j["refresh_stats"] = r.refresh_stats;
    j["n_samples"] = r.n_samples;
    j["context"] = r.context;
    j["seed"] = r.seed;
    j["blocks"] = r.blocks;
    j["totals"] = nlohmann::json::object();
    j["totals"]["sparsity"] = r.sparsity;
    put_opt(j["totals"], "perplexity", r.perplexity);
    put_opt(j["totals"], "seconds", r.seconds);
}

void from_json(const nlohmann::json& j, PruneReport& r) {
    r.method = j.at("method").get<std::string>();
    r.pattern = j.at("pattern").get<std::string>();
    r.alpha = j.at("alpha").get<double>();
    r.ro_rounds = j.at("ro_rounds").get<int>();
    r.ro_samples = j.at("ro_samples").get<int>();
    r.ro_samples_effective = j.at("ro_samples_effective").get<int>();
    r.lr = j.at("lr").get<double>();
    r.rmsprop_rho = j.at("rmsprop_rho").get<double>();
    r.rmsprop_eps = j.at("rmsprop_eps").get<double>();
    r.epochs = j.at("epochs").get<int>();
    r.update_norms = j.at("update_norms").get<bool>();
    r.refresh_stats = j.at("refresh_stats").get<bool>();
    r.n_samples = j.at("n_samples").get<std::size_t>();
    r.context = j.at("context").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.blocks = j.at("blocks").get<std::vector<BlockReport>>();
    const auto& t = j.at("totals");
    r.sparsity = t.at("sparsity").get<double>();
    r.perplexity = get_opt(t, "perplexity");
    r.seconds = get_opt(t, "seconds");
}

bool operator==(const RoundReport& a, const RoundReport& b) {
    return a.pre_loss == b.pre_loss && a.post_loss == b.post_loss;
}

bool operator==(const BlockReport& a, const BlockReport& b) {
    return a.layer == b.layer && a.pre_ro_loss == b.pre_ro_loss &&
           a.post_ro_loss == b.post_ro_loss && a.rounds == b.rounds &&
           a.output_mse == b.output_mse && a.grad_norm == b.grad_norm &&
           a.sparsity == b.sparsity && a.seconds == b.seconds;
}

bool operator==(const PruneReport& a, const PruneReport& b) {
    return nlohmann::json(a) == nlohmann::json(b);
}

}  // namespace blkprune
