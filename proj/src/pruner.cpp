#include "blkprune/pruner.hpp"

namespace blkprune {

Method parse_method(const std::string& text) {
    if (text == "wanda") return Method::Wanda;
    if (text == "rgs") return Method::WandaPPRgs;
    if (text == "ro") return Method::WandaPPRo;
    if (text == "wanda++") return Method::WandaPP;
    throw ContractError("unknown method '" + text + "' (expected wanda|rgs|ro|wanda++)");
}

std::string method_name(Method m) {
    switch (m) {
        case Method::Wanda: return "wanda";
        case Method::WandaPPRgs: return "rgs";
        case Method::WandaPPRo: return "ro";
        case Method::WandaPP: return "wanda++";
    }
    return "?";
}

void ROConfig::validate() const {
    if (rounds <= 0 || samples <= 0 || epochs <= 0) {
        throw ContractError("RO config: rounds, samples and epochs must be positive");
    }
    if (!(lr > 0.0) || !(eps > 0.0)) throw ContractError("RO config: lr and eps must be positive");
    if (!(rho > 0.0 && rho < 1.0)) throw ContractError("RO config: rho must lie in (0, 1)");
}

PruneReport make_report_header(const PruneConfig& pc, const CalibrationSet& calib) {
    PruneReport r;
    r.method = method_name(pc.method);
    r.pattern = pc.pattern.to_string();
    r.alpha = pc.score.alpha;
    r.ro_rounds = pc.ro.rounds;
    r.ro_samples = pc.ro.samples;
    r.ro_samples_effective =
        static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(pc.ro.samples), calib.size()));
    r.lr = pc.ro.lr;
    r.rmsprop_rho = pc.ro.rho;
    r.rmsprop_eps = pc.ro.eps;
    r.epochs = pc.ro.epochs;
    r.update_norms = pc.ro.update_norms;
    r.refresh_stats = pc.refresh_stats;
    r.n_samples = calib.size();
    r.context = calib.context_len;
    r.seed = pc.seed;
    return r;
}

std::vector<MaskViolation> verify_model_masks(const std::vector<BlockMask>& masks,
                                              const SparsityPattern& pattern) {
    std::vector<MaskViolation> out;
    for (std::size_t l = 0; l < masks.size(); ++l) {
        for (LinearId id : kLinearIds) {
            auto v = verify_mask(masks[l][index_of(id)], pattern,
                                 linear_key(static_cast<int>(l), id));
            out.insert(out.end(), v.begin(), v.end());
        }
    }
    return out;
}

}  // namespace blkprune
