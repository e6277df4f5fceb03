#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "awnet/analysis.hpp"
#include "awnet/checkpoint.hpp"
#include "awnet/config.hpp"
#include "awnet/data.hpp"
#include "awnet/train.hpp"

namespace awnet {

namespace detail {

inline nlohmann::json eval_report_json(const EvalReport& rep) {
    nlohmann::json j;
    j["a_nat"] = rep.a_nat;
    j["a_adv"] = rep.a_adv;
    j["a_w"] = rep.a_w;
    j["gamma_nat"] = rep.gamma_nat;
    j["gamma_adv"] = rep.gamma_adv;
    j["attack"] = rep.attack;
    j["attacked"] = rep.attacked;
    j["samples"] = rep.sample_count;
    return j;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::trunc | std::ios::binary);
    if (!out) throw ConfigError("harness: cannot write " + p.string());
    out << text;
}

}  // namespace detail

struct RunResult {
    std::filesystem::path out_dir;
    std::size_t best_epoch = 0;
    double best_a_w = 0.0;
    bool has_checkpoint = false;
    std::map<std::string, EvalReport> final_evals;
};

/// Loads (or synthesises) the configured dataset and the train/holdout split.
inline std::pair<DatasetHandle, DatasetHandle> load_split(const ExperimentConfig& cfg) {
    if (cfg.dataset == "cifar10") {
        return {load_cifar_binary(cfg.data_dir, DataSplit::Train),
                load_cifar_binary(cfg.data_dir, DataSplit::Test)};
    }
    DatasetHandle all = make_synthetic(cfg.classes, cfg.n_per_class, cfg.image_size,
                                       cfg.seed ^ 0xda7a5eedULL, cfg.synthetic_noise);
    return split_per_class(all, cfg.holdout_per_class, cfg.seed ^ 0x5b1177ULL);
}

inline std::uint64_t teacher_seed_of(const ExperimentConfig& cfg) { return cfg.seed ^ 0x7eac4e55ULL; }

inline TrainConfig teacher_train_config(const ExperimentConfig& cfg) {
    TrainConfig tcfg = cfg.train;
    tcfg.epochs = cfg.teacher_epochs;
    tcfg.lr_milestones = {};
    return tcfg;
}

/// Runs one experiment end to end: train per mode, probe-evaluate each epoch,
/// keep the best checkpoint by weighted robust accuracy, then produce the
/// final per-attack reports and filter statistics from the best weights.
/// With epochs = 0 only the evaluation artifacts are produced.
inline RunResult run(const ExperimentConfig& cfg, const TeacherPair* shared_teachers = nullptr) {
    cfg.validate();
    const std::filesystem::path out(cfg.out_dir);
    std::filesystem::create_directories(out);
    detail::write_text(out / "config.txt", cfg.canonical_text());
    const std::string cfg_hash = cfg.hash();

    auto [train_set, holdout] = load_split(cfg);
    const std::size_t probe_n = std::min(cfg.probe_size, holdout.size());
    std::vector<std::size_t> probe_idx(probe_n);
    for (std::size_t i = 0; i < probe_n; ++i) probe_idx[i] = i;
    DatasetHandle probe = holdout.subset(probe_idx);

    const ModelSpec spec = cfg.model_spec();
    Rng init_rng(cfg.seed ^ 0x1417ULL);

    // student + trainer per mode
    std::unique_ptr<AWNetModel> awnet;
    std::unique_ptr<BaselineNet> baseline;
    std::unique_ptr<JointTrainer> joint;
    std::unique_ptr<BaselineDistillTrainer> distill;
    std::unique_ptr<VariantTrainer<BaselineNet>> variant;
    TeacherPair local_teachers;
    const TeacherPair* teachers = shared_teachers;

    if (cfg.train.mode == TrainMode::MtardJoint) {
        if (!teachers) {
            local_teachers = make_teachers(spec.as_baseline(), train_set, teacher_train_config(cfg),
                                           teacher_seed_of(cfg));
            teachers = &local_teachers;
        }
        if (cfg.model_kind == "awnet") {
            awnet = std::make_unique<AWNetModel>(AWNetModel::make(spec, init_rng));
            Rng pre_rng(cfg.seed ^ 0x9e7ec7ULL);
            pretrain_detector_extractor(*awnet, train_set, cfg.train.detector_pretrain_epochs, 0.05, pre_rng,
                                        cfg.train.batch_size);
            joint = std::make_unique<JointTrainer>(*awnet, const_cast<TeacherPair&>(*teachers), cfg.train);
        } else {
            baseline = std::make_unique<BaselineNet>(BaselineNet::make(spec, init_rng));
            distill = std::make_unique<BaselineDistillTrainer>(*baseline, const_cast<TeacherPair&>(*teachers),
                                                               cfg.train);
        }
    } else {
        if (cfg.model_kind != "baseline") {
            throw ConfigError("harness: train_mode " + train_mode_name(cfg.train.mode) +
                              " trains the static baseline; set model_kind=baseline");
        }
        baseline = std::make_unique<BaselineNet>(BaselineNet::make(spec, init_rng));
        variant = std::make_unique<VariantTrainer<BaselineNet>>(*baseline, cfg.train);
    }
    Model& model = awnet ? static_cast<Model&>(*awnet) : static_cast<Model&>(*baseline);

    RunResult result;
    result.out_dir = out;
    const AttackSpec probe_attack = cfg.probe_attack_spec();

    std::ostringstream metrics;
    Rng train_rng(cfg.seed ^ 0x7a41ULL);
    double best_a_w = -1.0;
    std::size_t best_epoch = 0;
    for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
        EpochMetrics em;
        if (joint) em = joint->run_epoch(train_set, train_rng, cfg.seed);
        else if (distill) em = distill->run_epoch(train_set, train_rng, cfg.seed);
        else em = variant->run_epoch(train_set, train_rng);

        Rng probe_rng(cfg.seed ^ 0xe7a1ULL ^ (epoch * 0x9e3779b9ULL));
        EvalReport probe_rep = evaluate(model, probe, probe_attack, probe_rng);
        nlohmann::json line;
        line["epoch"] = epoch;
        line["l_total"] = em.l_total;
        line["l_adv"] = em.l_adv;
        line["l_nat"] = em.l_nat;
        line["l_type"] = em.l_type;
        line["alpha1"] = em.alpha1;
        line["alpha2"] = em.alpha2;
        line["a_nat"] = probe_rep.a_nat;
        line["a_adv"] = probe_rep.a_adv;
        line["a_w"] = probe_rep.a_w;
        metrics << line.dump() << '\n';
        if (probe_rep.a_w > best_a_w) {
            best_a_w = probe_rep.a_w;
            best_epoch = epoch;
            Checkpoint::from_model(model, cfg_hash, epoch).save(out / "best");
            result.has_checkpoint = true;
        }
    }
    detail::write_text(out / "metrics.jsonl", metrics.str());

    if (result.has_checkpoint) {
        Checkpoint::load(out / "best").into_model(model);  // final reports use the best weights
        result.best_epoch = best_epoch;
        result.best_a_w = best_a_w;
    }

    nlohmann::json finals;
    for (const auto& name : cfg.eval_attacks) {
        Rng eval_rng(cfg.seed ^ 0xf17a1ULL ^ fnv1a64(name.data(), name.size()));
        EvalReport rep = evaluate(model, holdout, cfg.attack_spec_for(name), eval_rng);
        finals[name] = detail::eval_report_json(rep);
        result.final_evals[name] = rep;
    }
    detail::write_text(out / "final_eval.json", finals.dump(2) + "\n");

    {
        std::ostringstream csv;
        write_filter_stats_csv(csv, model_filter_stats(model));
        detail::write_text(out / "filter_stats.csv", csv.str());
    }

    nlohmann::json summary;
    summary["config_hash"] = cfg_hash;
    summary["architecture"] = spec.descriptor();
    summary["epochs"] = cfg.train.epochs;
    summary["best_epoch"] = result.best_epoch;
    if (result.has_checkpoint) summary["best_a_w"] = result.best_a_w;
    else summary["best_a_w"] = nullptr;
    summary["final"] = finals;
    detail::write_text(out / "summary.json", summary.dump(2) + "\n");
    return result;
}

// ---------------------------------------------------------------------------
// Ablation grid
// ---------------------------------------------------------------------------

struct AblationCell {
    std::string name;
    bool baseline_row = false;
    bool dynamic_weight = true;
    bool mixbn = true;
    bool type_head = true;
};

inline const std::vector<AblationCell>& ablation_grid() {
    static const std::vector<AblationCell> grid = {
        {"dynamic_only", false, true, false, false},
        {"dynamic_mixbn", false, true, true, false},
        {"full_awnet", false, true, true, true},
        {"baseline", true, true, true, true},
    };
    return grid;
}

struct AblationResult {
    std::map<std::string, RunResult> cells;
    std::string best_cell;
};

/// The component ablation: dynamic weights alone, + MixBN, + type predictions,
/// and the static baseline, all trained with the same distillation recipe and
/// ranked by weighted robust accuracy under the PGD-trades evaluation.
inline AblationResult ablate(const ExperimentConfig& cfg) {
    cfg.validate();
    const std::filesystem::path out(cfg.out_dir);
    std::filesystem::create_directories(out);

    ExperimentConfig base = cfg;
    base.train.mode = TrainMode::MtardJoint;
    auto [train_set, holdout] = load_split(base);
    TeacherPair teachers =
        make_teachers(base.model_spec().as_baseline(), train_set, teacher_train_config(base), teacher_seed_of(base));

    AblationResult result;
    double best = -1.0;
    nlohmann::json cells_json;
    for (const AblationCell& cell : ablation_grid()) {
        ExperimentConfig cell_cfg = base;
        cell_cfg.out_dir = (out / ("cell_" + cell.name)).string();
        cell_cfg.model_kind = cell.baseline_row ? "baseline" : "awnet";
        cell_cfg.dynamic_weight = cell.dynamic_weight;
        cell_cfg.mixbn = cell.mixbn;
        cell_cfg.type_head = cell.type_head;
        cell_cfg.eval_attacks = {"pgd_trades"};
        RunResult rr = run(cell_cfg, &teachers);
        const double a_w = rr.final_evals.at("pgd_trades").a_w;
        nlohmann::json cj;
        cj["a_w"] = a_w;
        cj["a_nat"] = rr.final_evals.at("pgd_trades").a_nat;
        cj["a_adv"] = rr.final_evals.at("pgd_trades").a_adv;
        cj["dynamic_weight"] = !cell.baseline_row && cell.dynamic_weight;
        cj["mixbn"] = !cell.baseline_row && cell.mixbn;
        cj["type_head"] = !cell.baseline_row && cell.type_head;
        cells_json[cell.name] = cj;
        if (a_w > best) {
            best = a_w;
            result.best_cell = cell.name;
        }
        result.cells.emplace(cell.name, std::move(rr));
    }
    nlohmann::json j;
    j["cells"] = cells_json;
    j["best_cell"] = result.best_cell;
    detail::write_text(out / "ablation.json", j.dump(2) + "\n");
    return result;
}

// ---------------------------------------------------------------------------
// Plot export
// ---------------------------------------------------------------------------

namespace detail {

struct FilterRow {
    std::string layer;
    std::size_t index;
    double mean;
    double variance;
};

inline std::vector<FilterRow> read_filter_csv(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw ConfigError("export_plots: cannot open " + p.string());
    std::vector<FilterRow> rows;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        FilterRow r;
        std::istringstream is(line);
        std::string field;
        std::getline(is, r.layer, ',');
        std::getline(is, field, ',');
        r.index = std::stoul(field);
        std::getline(is, field, ',');
        r.mean = std::stod(field);
        std::getline(is, field, ',');
        r.variance = std::stod(field);
        rows.push_back(std::move(r));
    }
    return rows;
}

inline std::string sanitize(const std::string& s) {
    std::string out = s;
    for (char& c : out) {
        if (c == '.' || c == '/') c = '_';
    }
    return out;
}

}  // namespace detail

/// Exports per-layer histogram and scatter series from the filter-statistics
/// CSVs of a run directory. When exactly two models are present, histogram
/// bins are pooled Freedman-Diaconis edges shared by both, so the figures are
/// directly comparable. Idempotent: re-export writes identical bytes.
inline std::vector<std::filesystem::path> export_plots(const std::filesystem::path& run_dir) {
    if (!std::filesystem::is_directory(run_dir)) {
        throw ConfigError("export_plots: no run directory " + run_dir.string());
    }
    std::vector<std::filesystem::path> csvs;
    for (const auto& e : std::filesystem::directory_iterator(run_dir)) {
        const std::string name = e.path().filename().string();
        if (name.rfind("filter_stats", 0) == 0 && e.path().extension() == ".csv") csvs.push_back(e.path());
    }
    std::sort(csvs.begin(), csvs.end());
    if (csvs.empty()) {
        throw ConfigError("export_plots: missing artifacts in " + run_dir.string() +
                          ": no filter_stats*.csv found");
    }

    struct ModelData {
        std::string name;
        std::map<std::string, std::vector<detail::FilterRow>> layers;
    };
    std::vector<ModelData> models;
    for (const auto& p : csvs) {
        ModelData md;
        md.name = p.stem().string();
        if (md.name.rfind("filter_stats_", 0) == 0) md.name = md.name.substr(13);
        else if (md.name == "filter_stats") md.name = "model";
        for (auto& row : detail::read_filter_csv(p)) md.layers[row.layer].push_back(row);
        models.push_back(std::move(md));
    }

    const std::filesystem::path plot_dir = run_dir / "plots";
    std::filesystem::create_directories(plot_dir);
    std::vector<std::filesystem::path> written;

    // shared bins when exactly two models have matching layers
    const bool paired = models.size() == 2;
    for (const auto& md : models) {
        for (const auto& [layer, rows] : md.layers) {
            std::vector<double> means;
            for (const auto& r : rows) means.push_back(r.mean);
            std::vector<double> pooled = means;
            if (paired) {
                const auto& other = models[&md == &models[0] ? 1 : 0];
                auto it = other.layers.find(layer);
                if (it != other.layers.end()) {
                    for (const auto& r : it->second) pooled.push_back(r.mean);
                }
            }
            const auto edges = fd_bin_edges(pooled);
            const auto counts = histogram_counts(means, edges);
            std::ostringstream hist;
            hist.precision(17);
            hist << "bin_lo,bin_hi,count\n";
            for (std::size_t b = 0; b + 1 < edges.size(); ++b) {
                hist << edges[b] << ',' << edges[b + 1] << ',' << counts[b] << '\n';
            }
            const auto hist_path =
                plot_dir / ("hist_" + detail::sanitize(md.name) + "__" + detail::sanitize(layer) + ".csv");
            detail::write_text(hist_path, hist.str());
            written.push_back(hist_path);

            std::ostringstream scatter;
            scatter.precision(17);
            scatter << "index,mean,variance\n";
            for (const auto& r : rows) scatter << r.index << ',' << r.mean << ',' << r.variance << '\n';
            const auto scatter_path =
                plot_dir / ("scatter_" + detail::sanitize(md.name) + "__" + detail::sanitize(layer) + ".csv");
            detail::write_text(scatter_path, scatter.str());
            written.push_back(scatter_path);
        }
    }
    return written;
}

}  // namespace awnet
