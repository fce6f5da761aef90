#include "blkprune/eval.hpp"

#include <algorithm>
#include <sstream>

namespace blkprune {

PruneReport run_cell(const ExperimentInputs& in, Method method, const SparsityPattern& pattern,
                     std::uint64_t seed, std::optional<double> alpha,
                     std::optional<CalibSpec> calib) {
    if (!in.model || !in.calib_tokens || !in.eval_tokens) {
        throw ContractError("experiment inputs are incomplete");
    }
    const CalibSpec cs = calib.value_or(in.calib);
    PruneConfig pc = in.base;
    pc.method = method;
    pc.pattern = pattern;
    pc.seed = seed;
    if (alpha) pc.score.alpha = *alpha;
    const auto windows = sample_windows(*in.calib_tokens, cs.n_samples, cs.context, seed);
    auto res = prune_model<float>(*in.model, windows, pc);
    const auto bad = verify_model_masks(res.masks, pattern);
    if (!bad.empty()) throw ContractError("pattern violation: " + bad.front().describe());
    res.report.perplexity = perplexity(res.pruned, in.eval_tokens->ids, in.eval).perplexity;
    return res.report;
}

double median(std::vector<double> values) { return quartiles(std::move(values)).median; }

Quartiles quartiles(std::vector<double> values) {
    if (values.empty()) throw ContractError("quartiles: no values");
    std::sort(values.begin(), values.end());
    auto at = [&values](double q) {
        const double pos = q * static_cast<double>(values.size() - 1);
        const auto lo = static_cast<std::size_t>(pos);
        const std::size_t hi = std::min(lo + 1, values.size() - 1);
        const double frac = pos - static_cast<double>(lo);
        return values[lo] + (values[hi] - values[lo]) * frac;
    };
    return {values.front(), at(0.25), at(0.5), at(0.75), values.back()};
}

const MatrixRow* MethodMatrix::find(const std::string& method, const std::string& pattern) const {
    for (const auto& r : rows) {
        if (r.method == method && r.pattern == pattern) return &r;
    }
    return nullptr;
}

MethodMatrix run_method_matrix(const ExperimentInputs& in, const std::vector<Method>& methods,
                               const std::vector<SparsityPattern>& patterns,
                               const std::vector<std::uint64_t>& seeds) {
    if (seeds.empty()) throw ContractError("run_method_matrix: no seeds");
    MethodMatrix mm;
    mm.dense_perplexity = perplexity(*in.model, in.eval_tokens->ids, in.eval).perplexity;
    for (const auto& pat : patterns) {
        for (Method m : methods) {
            MatrixRow row;
            row.method = method_name(m);
            row.pattern = pat.to_string();
            for (auto s : seeds) {
                row.seeds.push_back(s);
                row.perplexities.push_back(*run_cell(in, m, pat, s).perplexity);
            }
            row.median = median(row.perplexities);
            mm.rows.push_back(std::move(row));
        }
        if (const MatrixRow* w = mm.find("wanda", pat.to_string())) {
            const double base = w->median;
            for (auto& r : mm.rows) {
                if (r.pattern == pat.to_string()) r.relative_to_wanda = (base - r.median) / base;
            }
        }
    }
    return mm;
}

std::vector<double> default_alpha_list() {
    return {1, 10, 50, 100, 500, 1000, 5000, 10000, 1000000};
}

AlphaSweep run_alpha_sweep(const ExperimentInputs& in, const std::vector<double>& alphas) {
    AlphaSweep sw;
    sw.pattern = in.base.pattern.to_string();
    sw.seed = in.base.seed;
    for (double a : alphas) {
        if (!(a >= 0.0)) throw ContractError("run_alpha_sweep: alpha must be non-negative");
        const auto rep = run_cell(in, Method::WandaPPRgs, in.base.pattern, in.base.seed, a);
        sw.rows.push_back({a, *rep.perplexity});
    }
    return sw;
}

std::vector<CalibSpec> default_calib_ladder() {
    return {{8, 8},     {16, 16},   {32, 32},   {64, 64},    {128, 128},
            {128, 256}, {128, 512}, {128, 1024}, {128, 2048}};
}

SensitivitySweep run_sensitivity_sweep(const ExperimentInputs& in,
                                       const std::vector<CalibSpec>& settings, int repeats,
                                       const std::vector<Method>& methods,
                                       std::uint64_t base_seed) {
    if (repeats <= 0) throw ContractError("run_sensitivity_sweep: repeats must be positive");
    SensitivitySweep sw;
    sw.pattern = in.base.pattern.to_string();
    sw.repeats = repeats;
    for (const auto& st : settings) {
        for (Method m : methods) {
            SensitivityRow row;
            row.setting = st;
            row.method = method_name(m);
            for (int r = 0; r < repeats; ++r) {
                const auto seed = derive_seed(base_seed, {st.n_samples, st.context,
                                                          static_cast<std::uint64_t>(r)});
                row.perplexities.push_back(
                    *run_cell(in, m, in.base.pattern, seed, std::nullopt, st).perplexity);
            }
            row.stats = quartiles(row.perplexities);
            sw.rows.push_back(std::move(row));
        }
    }
    return sw;
}

nlohmann::json to_json(const MethodMatrix& m) {
    nlohmann::json j;
    j["dense_perplexity"] = m.dense_perplexity;
    j["rows"] = nlohmann::json::array();
    for (const auto& r : m.rows) {
        j["rows"].push_back({{"method", r.method},
                             {"pattern", r.pattern},
                             {"seeds", r.seeds},
                             {"perplexities", r.perplexities},
                             {"median", r.median},
                             {"relative_to_wanda", r.relative_to_wanda
                                                       ? nlohmann::json(*r.relative_to_wanda)
                                                       : nlohmann::json(nullptr)}});
    }
    return j;
}

nlohmann::json to_json(const AlphaSweep& s) {
    nlohmann::json j;
    j["method"] = "rgs";
    j["pattern"] = s.pattern;
    j["seed"] = s.seed;
    j["rows"] = nlohmann::json::array();
    for (const auto& r : s.rows) j["rows"].push_back({{"alpha", r.alpha}, {"perplexity", r.perplexity}});
    return j;
}

nlohmann::json to_json(const SensitivitySweep& s) {
    nlohmann::json j;
    j["pattern"] = s.pattern;
    j["repeats"] = s.repeats;
    j["rows"] = nlohmann::json::array();
    for (const auto& r : s.rows) {
        j["rows"].push_back({{"n_samples", r.setting.n_samples},
                             {"context", r.setting.context},
                             {"method", r.method},
                             {"perplexities", r.perplexities},
                             {"min", r.stats.min},
                             {"q1", r.stats.q1},
                             {"median", r.stats.median},
                             {"q3", r.stats.q3},
                             {"max", r.stats.max}});
    }
    return j;
}

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(10);
    os << v;
    return os.str();
}

}  // namespace

std::string to_csv(const MethodMatrix& m) {
    std::ostringstream os;
    os << "method,pattern,median_perplexity,relative_to_wanda,n_seeds\n";
    os << "dense,-," << fmt(m.dense_perplexity) << ",,\n";
    for (const auto& r : m.rows) {
        os << r.method << ',' << r.pattern << ',' << fmt(r.median) << ','
           << (r.relative_to_wanda ? fmt(*r.relative_to_wanda) : "") << ',' << r.seeds.size()
           << '\n';
    }
    return os.str();
}

std::string to_csv(const AlphaSweep& s) {
    std::ostringstream os;
    os << "alpha,perplexity\n";
    for (const auto& r : s.rows) os << fmt(r.alpha) << ',' << fmt(r.perplexity) << '\n';
    return os.str();
}

std::string to_csv(const SensitivitySweep& s) {
    std::ostringstream os;
    os << "n_samples,context,method,min,q1,median,q3,max,repeats\n";
    for (const auto& r : s.rows) {
        os << r.setting.n_samples << ',' << r.setting.context << ',' << r.method << ','
           << fmt(r.stats.min) << ',' << fmt(r.stats.q1) << ',' << fmt(r.stats.median) << ','
           << fmt(r.stats.q3) << ',' << fmt(r.stats.max) << ',' << r.perplexities.size() << '\n';
    }
    return os.str();
}

}  // namespace blkprune
