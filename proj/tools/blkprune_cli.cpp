// Command-line front end: synth, train, prune, eval and the three sweeps.

#include "blkprune/checkpoint_io.hpp"
#include "blkprune/eval.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace bp = blkprune;

namespace {

// Raised for pattern violations so main() can map them to their own exit code.
struct InvariantViolation : bp::Error {
    using bp::Error::Error;
};

void write_text(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
        if (!text.empty() && text.back() != '\n') std::cout << '\n';
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw bp::FormatError("cannot write " + path);
    out << text;
    if (!text.empty() && text.back() != '\n') out << '\n';
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else if (c != ' ') {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

bp::CalibSpec parse_setting(const std::string& s) {
    const auto parts = split(s, '/');
    if (parts.size() != 2) throw bp::ContractError("bad calibration setting '" + s + "' (want N/T)");
    return {std::stoul(parts[0]), std::stoul(parts[1])};
}

struct CommonPruneFlags {
    std::string model, calib, eval_tokens;
    std::string method = "wanda++";
    std::string pattern = "2:4";
    double alpha = 100.0;
    int ro_rounds = 4;
    int ro_samples = 32;
    double lr = 3e-7;
    double rho = 0.99;
    double eps = 1e-8;
    int epochs = 1;
    bool update_norms = false;
    bool refresh_stats = false;
    std::size_t n_samples = 128;
    std::size_t context = 128;
    std::uint64_t seed = 0;
    std::size_t window = 128;
    std::size_t stride = 0;
    bool timing = false;

    void add_model_flags(CLI::App* app, bool need_eval) {
        app->add_option("--model", model, "Dense checkpoint")->required();
        app->add_option("--calib", calib, "Calibration token file")->required();
        auto* e = app->add_option("--eval-tokens", eval_tokens, "Evaluation token file");
        if (need_eval) e->required();
        app->add_option("--window", window, "Evaluation window length")->capture_default_str();
        app->add_option("--stride", stride, "Evaluation stride (0 = window)")->capture_default_str();
    }

    void add_prune_flags(CLI::App* app) {
        app->add_option("--alpha", alpha, "Gradient-term weight")->capture_default_str();
        app->add_option("--ro-rounds", ro_rounds, "Prune/optimize rounds K")->capture_default_str();
        app->add_option("--ro-samples", ro_samples, "RO samples M per round")->capture_default_str();
        app->add_option("--lr", lr, "RMSprop learning rate")->capture_default_str();
        app->add_option("--rmsprop-rho", rho, "RMSprop decay")->capture_default_str();
        app->add_option("--rmsprop-eps", eps, "RMSprop epsilon")->capture_default_str();
        app->add_option("--epochs", epochs, "RO passes per round")->capture_default_str();
        app->add_flag("--update-norms", update_norms, "Let RO update the RMSNorm scales");
        app->add_flag("--refresh-stats", refresh_stats, "Recollect activation norms every round");
        app->add_option("--n-samples", n_samples, "Calibration windows N")->capture_default_str();
        app->add_option("--context", context, "Calibration window length T")->capture_default_str();
        app->add_option("--pattern", pattern, "unstructured:S | unstructured-layer:S | N:M")
            ->capture_default_str();
        app->add_option("--seed", seed, "Base seed")->capture_default_str();
        app->add_flag("--timing", timing, "Record wall-clock seconds in reports");
    }

    bp::PruneConfig prune_config() const {
        bp::PruneConfig pc;
        pc.method = bp::parse_method(method);
        pc.score.criterion = bp::uses_rgs(pc.method) ? bp::Criterion::Rgs : bp::Criterion::Wanda;
        pc.score.alpha = alpha;
        pc.ro.rounds = ro_rounds;
        pc.ro.samples = ro_samples;
        pc.ro.lr = lr;
        pc.ro.rho = rho;
        pc.ro.eps = eps;
        pc.ro.epochs = epochs;
        pc.ro.update_norms = update_norms;
        pc.ro.validate();
        pc.pattern = bp::SparsityPattern::parse(pattern);
        pc.seed = seed;
        pc.refresh_stats = refresh_stats;
        pc.timing = timing;
        return pc;
    }

    bp::EvalConfig eval_config() const { return {window, stride}; }
};

struct Loaded {
    bp::Checkpoint model;
    bp::TokenDataset calib;
    bp::TokenDataset eval;
};

Loaded load_inputs(const CommonPruneFlags& f) {
    Loaded l;
    l.model = bp::load_checkpoint(f.model);
    l.calib = bp::read_tokens(f.calib);
    if (!f.eval_tokens.empty()) l.eval = bp::read_tokens(f.eval_tokens);
    return l;
}

bp::ExperimentInputs experiment(const Loaded& l, const CommonPruneFlags& f) {
    bp::ExperimentInputs in;
    in.model = &l.model;
    in.calib_tokens = &l.calib;
    in.eval_tokens = &l.eval;
    in.eval = f.eval_config();
    in.base = f.prune_config();
    in.calib = {f.n_samples, f.context};
    return in;
}

void write_table(const nlohmann::json& j, const std::string& csv, const std::string& json_path,
                 const std::string& csv_path) {
    if (!csv_path.empty()) write_text(csv_path, csv);
    if (!json_path.empty() || csv_path.empty()) write_text(json_path, j.dump(2));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Block-local pruning of toy decoder language models"};
    app.require_subcommand(1);

    // synth
    bp::CorpusConfig cc;
    std::string synth_out;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic token corpus");
    synth->add_option("--vocab", cc.vocab_size, "Vocabulary size")->capture_default_str();
    synth->add_option("--count", cc.count, "Number of tokens")->capture_default_str();
    synth->add_option("--branching", cc.branching, "Successors per token")->capture_default_str();
    synth->add_option("--copy-prob", cc.copy_prob, "Span-copy probability")->capture_default_str();
    synth->add_option("--seed", cc.seed, "Chain seed")->capture_default_str();
    synth->add_option("--stream", cc.stream, "Stream index drawn from the chain")
        ->capture_default_str();
    synth->add_option("--out", synth_out, "Output token file")->required();

    // train
    std::string train_config, train_tokens, train_out, train_losses;
    bp::TrainConfig tc;
    auto* train = app.add_subcommand("train", "Train a dense toy model");
    train->add_option("--config", train_config, "Model config JSON (defaults if omitted)");
    train->add_option("--tokens", train_tokens, "Training token file")->required();
    train->add_option("--steps", tc.steps, "Adam steps")->capture_default_str();
    train->add_option("--batch", tc.batch, "Windows per step")->capture_default_str();
    train->add_option("--context", tc.context, "Window length (0 = max_seq_len)")
        ->capture_default_str();
    train->add_option("--lr", tc.lr, "Adam learning rate")->capture_default_str();
    train->add_option("--seed", tc.seed, "Seed")->capture_default_str();
    train->add_option("--out", train_out, "Output checkpoint")->required();
    train->add_option("--losses", train_losses, "Write per-step losses as JSON");

    // prune
    CommonPruneFlags pf;
    std::string prune_out, prune_report, prune_masks;
    auto* prune = app.add_subcommand("prune", "Prune a checkpoint");
    pf.add_model_flags(prune, false);
    pf.add_prune_flags(prune);
    prune->add_option("--method", pf.method, "wanda | rgs | ro | wanda++")->capture_default_str();
    prune->add_option("--out", prune_out, "Pruned checkpoint")->required();
    prune->add_option("--report", prune_report, "Report JSON")->required();
    prune->add_option("--mask-out", prune_masks, "Bit-packed mask file");

    // eval
    std::string eval_model, eval_tokens, eval_json;
    bp::EvalConfig ec;
    bool eval_as_json = false;
    auto* eval = app.add_subcommand("eval", "Perplexity of a checkpoint");
    eval->add_option("--model", eval_model, "Checkpoint")->required();
    eval->add_option("--tokens", eval_tokens, "Token file")->required();
    eval->add_option("--window", ec.window, "Window length")->capture_default_str();
    eval->add_option("--stride", ec.stride, "Stride (0 = window)")->capture_default_str();
    eval->add_flag("--json", eval_as_json, "Print JSON");

    // sweep-alpha
    CommonPruneFlags af;
    std::string alpha_list, alpha_json, alpha_csv;
    auto* sweep_alpha = app.add_subcommand("sweep-alpha", "Perplexity per alpha (rgs method)");
    af.add_model_flags(sweep_alpha, true);
    af.add_prune_flags(sweep_alpha);
    sweep_alpha->add_option("--alphas", alpha_list, "Comma-separated alphas (default: nine-value list)");
    sweep_alpha->add_option("--json", alpha_json, "JSON output path");
    sweep_alpha->add_option("--csv", alpha_csv, "CSV output path");

    // sweep-calib
    CommonPruneFlags sf;
    std::string settings_list, sens_methods = "wanda++,ro", sens_json, sens_csv;
    int repeats = 30;
    auto* sweep_calib = app.add_subcommand("sweep-calib", "Calibration size sensitivity");
    sf.add_model_flags(sweep_calib, true);
    sf.add_prune_flags(sweep_calib);
    sweep_calib->add_option("--settings", settings_list,
                            "Comma-separated N/T pairs (default: ladder up to the model context)");
    sweep_calib->add_option("--repeats", repeats, "Runs per setting")->capture_default_str();
    sweep_calib->add_option("--methods", sens_methods, "Comma-separated methods")
        ->capture_default_str();
    sweep_calib->add_option("--json", sens_json, "JSON output path");
    sweep_calib->add_option("--csv", sens_csv, "CSV output path");

    // matrix
    CommonPruneFlags mf;
    std::string mat_methods = "wanda,rgs,ro,wanda++", mat_patterns = "unstructured:0.5,2:4,4:8",
                mat_seeds = "0,1,2,3,4", mat_json, mat_csv;
    auto* matrix = app.add_subcommand("matrix", "Methods x patterns x seeds perplexity table");
    mf.add_model_flags(matrix, true);
    mf.add_prune_flags(matrix);
    matrix->add_option("--methods", mat_methods, "Comma-separated methods")->capture_default_str();
    matrix->add_option("--patterns", mat_patterns, "Comma-separated patterns")->capture_default_str();
    matrix->add_option("--seeds", mat_seeds, "Comma-separated seeds")->capture_default_str();
    matrix->add_option("--json", mat_json, "JSON output path");
    matrix->add_option("--csv", mat_csv, "CSV output path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*synth) {
            bp::write_tokens(bp::synth_corpus(cc), synth_out);
        } else if (*train) {
            const bp::ModelConfig cfg =
                train_config.empty() ? bp::ModelConfig{} : bp::load_config(train_config);
            const auto tokens = bp::read_tokens(train_tokens);
            auto res = bp::train_toy(cfg, tokens, tc);
            bp::save_checkpoint(res.checkpoint, train_out);
            if (!train_losses.empty()) write_text(train_losses, nlohmann::json(res.losses).dump());
            if (!res.losses.empty()) {
                std::cerr << "final loss " << res.losses.back() << "\n";
            }
        } else if (*prune) {
            const Loaded in = load_inputs(pf);
            const auto pc = pf.prune_config();
            const auto windows = bp::sample_windows(in.calib, pf.n_samples, pf.context, pf.seed);
            auto res = bp::prune_model<float>(in.model, windows, pc);
            const auto bad = bp::verify_model_masks(res.masks, pc.pattern);
            if (!bad.empty()) {
                for (const auto& v : bad) std::cerr << "violation: " << v.describe() << "\n";
                throw InvariantViolation("pruned masks violate " + pc.pattern.to_string());
            }
            if (!pf.eval_tokens.empty()) {
                res.report.perplexity =
                    bp::perplexity(res.pruned, in.eval.ids, pf.eval_config()).perplexity;
            }
            bp::save_checkpoint(res.pruned, prune_out);
            write_text(prune_report, nlohmann::json(res.report).dump(2));
            if (!prune_masks.empty()) {
                std::vector<std::pair<std::string, bp::MaskMatrix>> named;
                for (std::size_t l = 0; l < res.masks.size(); ++l) {
                    for (bp::LinearId id : bp::kLinearIds) {
                        named.emplace_back(bp::linear_key(static_cast<int>(l), id),
                                           res.masks[l][bp::index_of(id)]);
                    }
                }
                bp::write_masks(prune_masks, named, pc.pattern);
            }
        } else if (*eval) {
            const auto ck = bp::load_checkpoint(eval_model);
            const auto toks = bp::read_tokens(eval_tokens);
            const auto r = bp::perplexity(ck, toks.ids, ec);
            if (eval_as_json) {
                nlohmann::json j{{"perplexity", r.perplexity},
                                 {"nll_sum", r.nll_sum},
                                 {"predicted", r.predicted},
                                 {"window", ec.window},
                                 {"stride", ec.effective_stride()}};
                std::cout << j.dump(2) << "\n";
            } else {
                std::cout << r.perplexity << "\n";
            }
        } else if (*sweep_alpha) {
            const Loaded in = load_inputs(af);
            std::vector<double> alphas;
            if (alpha_list.empty()) {
                alphas = bp::default_alpha_list();
            } else {
                for (const auto& a : split(alpha_list, ',')) alphas.push_back(std::stod(a));
            }
            const auto sw = bp::run_alpha_sweep(experiment(in, af), alphas);
            write_table(bp::to_json(sw), bp::to_csv(sw), alpha_json, alpha_csv);
        } else if (*sweep_calib) {
            const Loaded in = load_inputs(sf);
            std::vector<bp::CalibSpec> settings;
            if (settings_list.empty()) {
                for (const auto& s : bp::default_calib_ladder()) {
                    if (s.context > static_cast<std::size_t>(in.model.config.max_seq_len)) {
                        std::cerr << "skipping " << s.n_samples << "/" << s.context
                                  << ": context exceeds the model's max_seq_len\n";
                        continue;
                    }
                    settings.push_back(s);
                }
            } else {
                for (const auto& s : split(settings_list, ',')) settings.push_back(parse_setting(s));
            }
            std::vector<bp::Method> methods;
            for (const auto& m : split(sens_methods, ',')) methods.push_back(bp::parse_method(m));
            const auto sw =
                bp::run_sensitivity_sweep(experiment(in, sf), settings, repeats, methods, sf.seed);
            write_table(bp::to_json(sw), bp::to_csv(sw), sens_json, sens_csv);
        } else if (*matrix) {
            const Loaded in = load_inputs(mf);
            std::vector<bp::Method> methods;
            for (const auto& m : split(mat_methods, ',')) methods.push_back(bp::parse_method(m));
            std::vector<bp::SparsityPattern> patterns;
            for (const auto& p : split(mat_patterns, ',')) patterns.push_back(bp::SparsityPattern::parse(p));
            std::vector<std::uint64_t> seeds;
            for (const auto& s : split(mat_seeds, ',')) seeds.push_back(std::stoull(s));
            const auto mm = bp::run_method_matrix(experiment(in, mf), methods, patterns, seeds);
            write_table(bp::to_json(mm), bp::to_csv(mm), mat_json, mat_csv);
        }
    } catch (const InvariantViolation& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const bp::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
