#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "para/adapter.hpp"
#include "para/bundle.hpp"
#include "para/combine.hpp"
#include "para/errors.hpp"
#include "para/io.hpp"
#include "para/linalg.hpp"
#include "para/metrics.hpp"
#include "para/model.hpp"
#include "para/rng.hpp"
#include "para/train.hpp"
#include "para/verify.hpp"

namespace {

using namespace para;
using nlohmann::json;

// The thin-QR factor an entry stands for, or a zero-width matrix when the
// entry reduces nothing (identity flag, zero B, rank clamped to 0).
Matrix entry_factor(const BundleEntry* e, const Matrix& layer_w0) {
    if (e == nullptr || e->identity) return Matrix(layer_w0.rows(), 0);
    if (e->finalized) return e->b;
    ParaAdapter adapter{e->layer_name, e->b, e->r, e->gamma, e->conv_shape};
    const int base_rank = e->base_rank > 0 ? e->base_rank : numerical_rank(layer_w0);
    try {
        return derive_q_clamped(adapter, base_rank);
    } catch (const DegenerateColumns&) {
        return Matrix(layer_w0.rows(), 0);
    }
}

ToyModel load_model(const std::string& path) { return bundle_to_model(load_bundle(path)); }

AdapterBundle load_kind(const std::string& path, BundleKind kind, const char* what) {
    AdapterBundle bundle = load_bundle(path);
    if (bundle.kind != kind) {
        throw NonConforming(std::string(what) + ": " + path + " is a " + to_string(bundle.kind) +
                            " bundle, expected " + to_string(kind));
    }
    return bundle;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    f << text;
    if (!f) throw Error("cannot write " + path);
}

// Layer records printed as a name-sorted JSON array (stable output order no
// matter how the bundle was assembled).
json sorted_layers(std::vector<json> lines) {
    std::sort(lines.begin(), lines.end(),
              [](const json& a, const json& b) {
                  return a.at("layer").get<std::string>() < b.at("layer").get<std::string>();
              });
    return json(lines);
}

json report_to_json(const TrainReport& report) {
    json doc;
    doc["loss_history"] = report.loss_history;
    doc["final_effective_ranks"] = report.final_effective_ranks;
    doc["b_column_independence"] = report.b_column_independence;
    return doc;
}

// ---- subcommand payloads --------------------------------------------------

struct TrainArgs {
    std::string model, targets, out, config;
    TrainConfig cfg;
    // option handles, to tell "flag given" from "default"
    CLI::Option* opt_rank = nullptr;
    CLI::Option* opt_gamma = nullptr;
    CLI::Option* opt_steps = nullptr;
    CLI::Option* opt_lr = nullptr;
    CLI::Option* opt_eps = nullptr;
    CLI::Option* opt_seed = nullptr;
    CLI::Option* opt_layers = nullptr;
};

int run_train(TrainArgs& a) {
    TrainConfig cfg;
    std::string model_path = a.model, targets_path = a.targets, out_path = a.out;
    if (!a.config.empty()) {
        const RunConfig rc = load_run_config(a.config);
        cfg = rc.train;
        if (model_path.empty()) model_path = rc.model_path;
        if (targets_path.empty()) targets_path = rc.targets_path;
        if (out_path.empty()) out_path = rc.out_path;
    }
    if (a.opt_rank->count() > 0 || a.config.empty()) cfg.rank = a.cfg.rank;
    if (a.opt_gamma->count() > 0 || a.config.empty()) cfg.gamma = a.cfg.gamma;
    if (a.opt_steps->count() > 0 || a.config.empty()) cfg.steps = a.cfg.steps;
    if (a.opt_lr->count() > 0 || a.config.empty()) cfg.learning_rate = a.cfg.learning_rate;
    if (a.opt_eps->count() > 0 || a.config.empty()) cfg.ridge_eps = a.cfg.ridge_eps;
    if (a.opt_seed->count() > 0 || a.config.empty()) cfg.seed = a.cfg.seed;
    if (a.opt_layers->count() > 0 || a.config.empty()) cfg.layer_filter = a.cfg.layer_filter;
    if (model_path.empty() || targets_path.empty() || out_path.empty()) {
        throw Error("train: --model, --targets and --out are required (directly or via --config)");
    }

    const ToyModel model = load_model(model_path);
    const std::vector<TargetPair> targets = load_targets_csv(targets_path);
    const auto [raw, report] = train_para(model, targets, cfg);
    save_bundle(finalize_adapters(raw), out_path);

    const std::string report_path = out_path + ".report.json";
    write_text(report_path, report_to_json(report).dump(2) + "\n");

    json out;
    out["out"] = out_path;
    out["report"] = report_path;
    out["final_loss"] = report.loss_history.back();
    out["final_effective_ranks"] = report.final_effective_ranks;
    std::cout << out.dump(2) << "\n";
    return 0;
}

int run_reduce(const std::string& model_path, const std::string& adapter_path,
               const std::string& out_path) {
    const ToyModel model = load_model(model_path);
    const AdapterBundle adapters = load_kind(adapter_path, BundleKind::para, "reduce");
    const ToyModel applied = apply_para_bundle(model, adapters);
    save_bundle(model_to_bundle(applied), out_path);

    std::vector<json> lines;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        json line;
        line["layer"] = model.layers[i].name;
        line["changed"] = max_abs_diff(model.layers[i].w0, applied.layers[i].w0) != 0.0;
        lines.push_back(line);
    }
    json out;
    out["out"] = out_path;
    out["layers"] = sorted_layers(std::move(lines));
    std::cout << out.dump(2) << "\n";
    return 0;
}

int run_merge(const std::string& a_path, const std::string& b_path, const std::string& base_path,
              const std::string& out_path) {
    const ToyModel base = load_model(base_path);
    const AdapterBundle a = load_kind(a_path, BundleKind::para, "merge");
    const AdapterBundle b = load_kind(b_path, BundleKind::para, "merge");

    AdapterBundle merged;
    merged.kind = BundleKind::para;
    merged.activation = base.activation;
    std::vector<json> lines;
    for (const ModelLayer& layer : base.layers) {
        const BundleEntry* ea = find_entry(a, layer.name);
        const BundleEntry* eb = find_entry(b, layer.name);
        if (ea == nullptr && eb == nullptr) continue;
        const Matrix q = merged_factor(entry_factor(ea, layer.w0), entry_factor(eb, layer.w0));

        BundleEntry e;
        e.layer_name = layer.name;
        e.b = q;
        e.r = q.cols();
        e.identity = q.cols() == 0;
        e.finalized = true;
        e.conv_shape = layer.conv_shape;
        e.base_rank = numerical_rank(layer.w0);
        e.layer_cols = layer.w0.cols();
        merged.entries.push_back(e);

        json line;
        line["layer"] = layer.name;
        line["effective_rank_removed"] = q.cols();
        lines.push_back(line);
    }
    save_bundle(merged, out_path);

    json out;
    out["out"] = out_path;
    out["layers"] = sorted_layers(std::move(lines));
    std::cout << out.dump(2) << "\n";
    return 0;
}

int run_combine_lora(const std::string& para_path, const std::string& lora_path,
                     const std::string& base_path, const std::string& order,
                     const CLI::Option* opt_alpha, double alpha, double alpha1, double alpha2,
                     const std::string& out_path) {
    const ToyModel base = load_model(base_path);
    const AdapterBundle paras = load_kind(para_path, BundleKind::para, "combine-lora");
    const AdapterBundle loras = load_kind(lora_path, BundleKind::lora, "combine-lora");

    ToyModel combined = base;
    std::vector<json> lines;
    for (ModelLayer& layer : combined.layers) {
        const BundleEntry* pe = find_entry(paras, layer.name);
        const BundleEntry* le = find_entry(loras, layer.name);
        if (pe == nullptr && le == nullptr) continue;
        const Matrix q = entry_factor(pe, layer.w0);

        CombinedWeight cw;
        if (le != nullptr) {
            const LoraAdapter lora{le->layer_name, le->b_up, le->a_down,
                                   opt_alpha->count() > 0 ? alpha : le->alpha};
            if (order == "para-first") {
                cw = combine_para_then_lora(layer.w0, q, lora);
            } else if (order == "lora-first") {
                cw = combine_lora_then_para(layer.w0, q, lora);
            } else {
                cw = combine_lora_form(layer.w0, q, lora, alpha1, alpha2);
            }
        } else {
            cw = CombinedWeight{reduce_weight(layer.w0, q), CombineMethod::sequential, q.cols()};
        }
        layer.w0 = cw.w;

        json line;
        line["layer"] = layer.name;
        line["method"] = le != nullptr ? to_string(cw.method) : "para_only";
        line["effective_rank_removed"] = cw.effective_rank_removed;
        lines.push_back(line);
    }
    save_bundle(model_to_bundle(combined), out_path);

    json out;
    out["out"] = out_path;
    out["order"] = order;
    out["layers"] = sorted_layers(std::move(lines));
    std::cout << out.dump(2) << "\n";
    return 0;
}

int run_verify_cmd(int trials, std::uint64_t seed) {
    const VerifySummary summary = run_verify(trials, seed);
    std::cout << to_json(summary) << "\n";
    return summary.all_passed() ? 0 : 1;
}

int run_diversity(const std::string& model_path, const std::string& adapter_path, int samples,
                  double noise, std::uint64_t seed) {
    const ToyModel model = load_model(model_path);
    const AdapterBundle adapters = load_kind(adapter_path, BundleKind::para, "diversity");
    // base input drawn from the complement of the probe seed so the probe's
    // own perturbation stream stays independent of it
    Rng input_rng(~seed);
    const Matrix base_input = input_rng.gaussian_matrix(model.layers.front().w0.cols(), 1);
    const DiversityReport report =
        stability_probe(model, adapters, base_input, samples, noise, seed);

    json out;
    out["n_samples"] = report.n_samples;
    out["mean_pairwise_ssim"] = report.mean_pairwise_ssim;
    out["std_pairwise_ssim"] = report.std_pairwise_ssim;
    out["nullity_gain"] = report.nullity_gain;
    std::cout << out.dump(2) << "\n";
    return 0;
}

json inspect_entry(const AdapterBundle& bundle, const BundleEntry& e) {
    json je;
    je["layer_name"] = e.layer_name;
    je["identity"] = e.identity;
    switch (bundle.kind) {
        case BundleKind::para: {
            je["r"] = e.r;
            je["gamma"] = e.gamma;
            je["finalized"] = e.finalized;
            je["base_rank"] = e.base_rank;
            je["b_shape"] = {e.b.rows(), e.b.cols()};
            const int d = e.b.rows();
            const int r = e.finalized ? e.b.cols() : e.r;
            const int k = e.layer_cols;
            if (d > 0 && r > 0) {
                je["params_para"] = param_count_para(d, r);
                if (k > 0) {
                    const auto lora = param_count_lora(d, k, r);
                    je["params_lora_equivalent"] = lora;
                    je["lora_to_para_ratio"] = double(lora) / double(param_count_para(d, r));
                    je["para_to_lora_ratio"] = double(param_count_para(d, r)) / double(lora);
                }
            }
            break;
        }
        case BundleKind::lora: {
            je["alpha"] = e.alpha;
            je["b_up_shape"] = {e.b_up.rows(), e.b_up.cols()};
            je["a_down_shape"] = {e.a_down.rows(), e.a_down.cols()};
            const int d = e.b_up.rows();
            const int r = e.b_up.cols();
            const int k = e.a_down.cols();
            if (d > 0 && r > 0 && k > 0) {
                const auto lora = param_count_lora(d, k, r);
                je["params_lora"] = lora;
                je["params_para_equivalent"] = param_count_para(d, r);
                je["lora_to_para_ratio"] = double(lora) / double(param_count_para(d, r));
                je["para_to_lora_ratio"] = double(param_count_para(d, r)) / double(lora);
            }
            break;
        }
        case BundleKind::base_model: {
            je["w0_shape"] = {e.w0.rows(), e.w0.cols()};
            if (e.conv_shape) {
                const ConvShape& cs = *e.conv_shape;
                je["conv_shape"] = {cs.c_out, cs.c_in, cs.h, cs.w};
            }
            break;
        }
    }
    return je;
}

int run_inspect(const std::string& path) {
    const AdapterBundle bundle = load_bundle(path);
    std::vector<json> lines;
    for (const BundleEntry& e : bundle.entries) {
        json je = inspect_entry(bundle, e);
        je["layer"] = e.layer_name; // sort key
        lines.push_back(je);
    }
    json entries = sorted_layers(std::move(lines));
    for (json& je : entries) je.erase("layer");

    json out;
    out["file"] = path;
    out["format_version"] = bundle.format_version;
    out["kind"] = to_string(bundle.kind);
    out["activation"] = to_string(bundle.activation);
    out["entries"] = entries;
    std::cout << out.dump(2) << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"PaRa rank-reduction adapters: train, apply, merge, verify"};
    app.require_subcommand(1);

    TrainArgs t;
    CLI::App* train_cmd = app.add_subcommand("train", "Train a PaRa bundle on CSV targets");
    train_cmd->add_option("--model", t.model, "base model bundle")->check(CLI::ExistingFile);
    train_cmd->add_option("--targets", t.targets, "CSV of x/y samples")->check(CLI::ExistingFile);
    train_cmd->add_option("--out", t.out, "output adapter bundle path");
    train_cmd->add_option("--config", t.config, "JSON run config (flags override it)")
        ->check(CLI::ExistingFile);
    t.opt_rank = train_cmd->add_option("--rank", t.cfg.rank, "columns of B per layer");
    t.opt_gamma = train_cmd->add_option("--gamma", t.cfg.gamma, "rank cap factor in (0,1]");
    t.opt_steps = train_cmd->add_option("--steps", t.cfg.steps, "gradient steps");
    t.opt_lr = train_cmd->add_option("--learning-rate", t.cfg.learning_rate, "step size");
    t.opt_eps = train_cmd->add_option("--ridge-eps", t.cfg.ridge_eps, "soft projector ridge");
    t.opt_seed = train_cmd->add_option("--seed", t.cfg.seed, "seed for the escape kick");
    t.opt_layers = train_cmd->add_option("--layers", t.cfg.layer_filter, "layer name glob");

    std::string r_model, r_adapter, r_out;
    CLI::App* reduce_cmd = app.add_subcommand("reduce", "Apply a PaRa bundle to a base model");
    reduce_cmd->add_option("--model", r_model)->required()->check(CLI::ExistingFile);
    reduce_cmd->add_option("--adapter", r_adapter)->required()->check(CLI::ExistingFile);
    reduce_cmd->add_option("--out", r_out)->required();

    std::string m_a, m_b, m_base, m_out;
    CLI::App* merge_cmd = app.add_subcommand("merge", "Merge two PaRa bundles (combined QR)");
    merge_cmd->add_option("--a", m_a)->required()->check(CLI::ExistingFile);
    merge_cmd->add_option("--b", m_b)->required()->check(CLI::ExistingFile);
    merge_cmd->add_option("--base", m_base)->required()->check(CLI::ExistingFile);
    merge_cmd->add_option("--out", m_out)->required();

    std::string c_para, c_lora, c_base, c_order, c_out;
    double c_alpha = 1.0, c_alpha1 = 1.0, c_alpha2 = 1.0;
    CLI::App* combine_cmd =
        app.add_subcommand("combine-lora", "Combine a PaRa bundle with a LoRA bundle");
    combine_cmd->add_option("--para", c_para)->required()->check(CLI::ExistingFile);
    combine_cmd->add_option("--lora", c_lora)->required()->check(CLI::ExistingFile);
    combine_cmd->add_option("--base", c_base)->required()->check(CLI::ExistingFile);
    combine_cmd->add_option("--order", c_order, "composition scheme")
        ->required()
        ->check(CLI::IsMember({"para-first", "lora-first", "lora-form"}));
    CLI::Option* opt_alpha =
        combine_cmd->add_option("--alpha", c_alpha, "LoRA scale override");
    combine_cmd->add_option("--alpha1", c_alpha1, "lora-form scale on Q");
    combine_cmd->add_option("--alpha2", c_alpha2, "lora-form scale on B/A");
    combine_cmd->add_option("--out", c_out)->required();

    int v_trials = 200;
    std::uint64_t v_seed = 0;
    CLI::App* verify_cmd = app.add_subcommand("verify", "Run the randomized property suites");
    verify_cmd->add_option("--trials", v_trials)->check(CLI::PositiveNumber);
    verify_cmd->add_option("--seed", v_seed);

    std::string d_model, d_adapter;
    int d_samples = 8;
    double d_noise = 0.1;
    std::uint64_t d_seed = 0;
    CLI::App* diversity_cmd =
        app.add_subcommand("diversity", "Stability probe of a reduced model");
    diversity_cmd->add_option("--model", d_model)->required()->check(CLI::ExistingFile);
    diversity_cmd->add_option("--adapter", d_adapter)->required()->check(CLI::ExistingFile);
    diversity_cmd->add_option("--samples", d_samples)->check(CLI::Range(2, 1 << 20));
    diversity_cmd->add_option("--noise", d_noise)->check(CLI::PositiveNumber);
    diversity_cmd->add_option("--seed", d_seed, "probe seed (also derives the base input)");

    std::string i_file;
    CLI::App* inspect_cmd = app.add_subcommand("inspect", "Dump a bundle manifest");
    inspect_cmd->add_option("file", i_file)->required()->check(CLI::ExistingFile);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        json err;
        err["error"] = e.what();
        std::cerr << err.dump() << "\n";
        return 2;
    }

    try {
        if (train_cmd->parsed()) return run_train(t);
        if (reduce_cmd->parsed()) return run_reduce(r_model, r_adapter, r_out);
        if (merge_cmd->parsed()) return run_merge(m_a, m_b, m_base, m_out);
        if (combine_cmd->parsed()) {
            return run_combine_lora(c_para, c_lora, c_base, c_order, opt_alpha, c_alpha, c_alpha1,
                                    c_alpha2, c_out);
        }
        if (verify_cmd->parsed()) return run_verify_cmd(v_trials, v_seed);
        if (diversity_cmd->parsed()) return run_diversity(d_model, d_adapter, d_samples, d_noise, d_seed);
        if (inspect_cmd->parsed()) return run_inspect(i_file);
    } catch (const std::exception& e) {
        json err;
        err["error"] = e.what();
        std::cerr << err.dump() << "\n";
        return 1;
    }
    return 2; // no subcommand (require_subcommand should have caught this)
}
