// awnet: train / evaluate / attack / analyze the AW-Net desk-scale laboratory.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "awnet/analysis.hpp"
#include "awnet/attacks.hpp"
#include "awnet/checkpoint.hpp"
#include "awnet/config.hpp"
#include "awnet/harness.hpp"
#include "awnet/train.hpp"

namespace {

using namespace awnet;

struct CommonOpts {
    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "flat key=value config file");
    cmd->add_option("--out", opts.out_dir, "output directory");
    cmd->add_option("--seed", opts.seed, "experiment seed")->each([&opts](const std::string&) {
        opts.seed_set = true;
    });
    cmd->add_option("--set", opts.overrides, "override config entries, key=value")->take_all();
}

ExperimentConfig build_config(const CommonOpts& opts) {
    ExperimentConfig cfg;
    if (!opts.config_path.empty()) cfg = ExperimentConfig::from_file(opts.config_path);
    for (const auto& kv : opts.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (opts.seed_set) cfg.seed = opts.seed;
    if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
    return cfg;
}

void print_report(const std::string& name, const EvalReport& rep) {
    std::printf("%-12s A_nat %6.2f%%  A_adv %6.2f%%  A_w %6.2f%%%s\n", name.c_str(), 100.0 * rep.a_nat,
                100.0 * rep.a_adv, 100.0 * rep.a_w, rep.attacked ? "" : "  (no attack)");
}

int cmd_train(const CommonOpts& opts) {
    ExperimentConfig cfg = build_config(opts);
    RunResult res = run(cfg);
    std::printf("run complete: %s\n", res.out_dir.string().c_str());
    if (res.has_checkpoint) {
        std::printf("best epoch %zu with A_w %.4f (checkpoint in best/)\n", res.best_epoch, res.best_a_w);
    }
    for (const auto& [name, rep] : res.final_evals) print_report(name, rep);
    return 0;
}

int cmd_eval(const CommonOpts& opts, const std::string& ckpt) {
    ExperimentConfig cfg = build_config(opts);
    auto model = load_model(ckpt);
    auto [train_set, holdout] = load_split(cfg);
    nlohmann::json out_json;
    for (const auto& name : cfg.eval_attacks) {
        Rng rng(cfg.seed ^ 0xf17a1ULL ^ fnv1a64(name.data(), name.size()));
        EvalReport rep = evaluate(*model, holdout, cfg.attack_spec_for(name), rng);
        print_report(name, rep);
        out_json[name] = awnet::detail::eval_report_json(rep);
    }
    if (!opts.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        std::ofstream(std::filesystem::path(cfg.out_dir) / "eval.json") << out_json.dump(2) << '\n';
    }
    return 0;
}

int cmd_attack(const CommonOpts& opts, const std::string& ckpt, const std::string& family,
               const std::string& eps_str, std::size_t iters) {
    ExperimentConfig cfg = build_config(opts);
    if (!eps_str.empty()) cfg.eval_epsilon = awnet::detail::parse_number(eps_str);
    if (iters > 0) {
        cfg.eval_iters = iters;
        cfg.cw_iters = iters;
    }
    auto model = load_model(ckpt);
    auto [train_set, holdout] = load_split(cfg);
    const AttackSpec spec = cfg.attack_spec_for(family);
    Rng rng(cfg.seed ^ 0xa77ac4ULL);
    EvalReport rep = evaluate(*model, holdout, spec, rng);
    print_report(family, rep);
    if (!opts.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        nlohmann::json j = awnet::detail::eval_report_json(rep);
        j["epsilon"] = spec.epsilon;
        j["iters"] = spec.iters;
        std::ofstream(std::filesystem::path(cfg.out_dir) / "attack_report.json") << j.dump(2) << '\n';
    }
    return 0;
}

int cmd_analyze(const CommonOpts& opts, const std::string& ckpt_a, const std::string& ckpt_b,
                const std::string& selector) {
    ExperimentConfig cfg = build_config(opts);
    auto model_a = load_model(ckpt_a);
    auto model_b = load_model(ckpt_b);
    DistributionComparison cmp = compare_distributions(*model_a, *model_b, selector);
    nlohmann::json layers = nlohmann::json::array();
    std::size_t smaller_in_b = 0;
    for (const auto& layer : cmp.layers) {
        std::printf("%-22s KS %.3f  var ratio (a/b) %8.3f\n", layer.layer.c_str(), layer.ks_means,
                    layer.variance_ratio);
        smaller_in_b += layer.variance_ratio > 1.0;
        nlohmann::json lj;
        lj["layer"] = layer.layer;
        lj["ks_means"] = layer.ks_means;
        lj["variance_ratio"] = layer.variance_ratio;
        lj["bin_edges"] = layer.bin_edges;
        lj["counts_a"] = layer.counts_a;
        lj["counts_b"] = layer.counts_b;
        layers.push_back(lj);
    }
    std::printf("model_b has smaller layer variance in %zu / %zu layers\n", smaller_in_b, cmp.layers.size());
    if (!opts.out_dir.empty()) {
        std::filesystem::create_directories(opts.out_dir);
        const std::filesystem::path out(opts.out_dir);
        nlohmann::json j;
        j["layers"] = layers;
        std::ofstream(out / "comparison.json") << j.dump(2) << '\n';
        std::ostringstream csv_a, csv_b;
        write_filter_stats_csv(csv_a, model_filter_stats(*model_a));
        write_filter_stats_csv(csv_b, model_filter_stats(*model_b));
        std::ofstream(out / "filter_stats_a.csv") << csv_a.str();
        std::ofstream(out / "filter_stats_b.csv") << csv_b.str();
    }
    return 0;
}

int cmd_ablate(const CommonOpts& opts) {
    ExperimentConfig cfg = build_config(opts);
    AblationResult res = ablate(cfg);
    for (const auto& [name, rr] : res.cells) {
        print_report(name, rr.final_evals.at("pgd_trades"));
    }
    std::printf("best cell: %s\n", res.best_cell.c_str());
    return 0;
}

int cmd_export_plots(const std::string& run_dir) {
    auto written = export_plots(run_dir);
    std::printf("wrote %zu plot series under %s/plots\n", written.size(),
                std::filesystem::path(run_dir).string().c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"AW-Net adversarial robustness laboratory"};
    app.require_subcommand(1);

    CommonOpts train_opts, eval_opts, attack_opts, analyze_opts, ablate_opts;
    std::string ckpt, ckpt_b, family = "pgd_sat", eps_str, selector, run_dir;
    std::size_t iters = 0;

    auto* train_cmd = app.add_subcommand("train", "train a model per the config and emit run artifacts");
    add_common(train_cmd, train_opts);

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint under the configured attacks");
    add_common(eval_cmd, eval_opts);
    eval_cmd->add_option("--ckpt", ckpt, "checkpoint directory")->required();

    auto* attack_cmd = app.add_subcommand("attack", "run one attack family against a checkpoint");
    add_common(attack_cmd, attack_opts);
    attack_cmd->add_option("--ckpt", ckpt, "checkpoint directory")->required();
    attack_cmd->add_option("--family", family, "fgsm | pgd_sat | pgd_trades | cw_linf | adaptive");
    attack_cmd->add_option("--eps", eps_str, "L-inf budget (decimal or fraction like 8/255)");
    attack_cmd->add_option("--iters", iters, "iteration count override");

    auto* analyze_cmd = app.add_subcommand("analyze", "compare filter weight distributions of two checkpoints");
    add_common(analyze_cmd, analyze_opts);
    analyze_cmd->add_option("--ckpt-a", ckpt, "first checkpoint (e.g. standard model)")->required();
    analyze_cmd->add_option("--ckpt-b", ckpt_b, "second checkpoint (e.g. robust model)")->required();
    analyze_cmd->add_option("--layer", selector, "substring filter for layer names");

    auto* ablate_cmd = app.add_subcommand("ablate", "run the 4-cell component ablation grid");
    add_common(ablate_cmd, ablate_opts);

    auto* export_cmd = app.add_subcommand("export-plots", "emit histogram/scatter series from a run directory");
    export_cmd->add_option("--run", run_dir, "run directory with filter_stats CSVs")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (train_cmd->parsed()) return cmd_train(train_opts);
        if (eval_cmd->parsed()) return cmd_eval(eval_opts, ckpt);
        if (attack_cmd->parsed()) return cmd_attack(attack_opts, ckpt, family, eps_str, iters);
        if (analyze_cmd->parsed()) return cmd_analyze(analyze_opts, ckpt, ckpt_b, selector);
        if (ablate_cmd->parsed()) return cmd_ablate(ablate_opts);
        if (export_cmd->parsed()) return cmd_export_plots(run_dir);
    } catch (const awnet::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const awnet::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    }
    return 0;
}
