#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "awnet/attacks.hpp"
#include "awnet/checkpoint.hpp"
#include "awnet/errors.hpp"
#include "awnet/model.hpp"
#include "awnet/train.hpp"

namespace awnet {

namespace detail {

/// Numbers may be written as plain decimals or pixel fractions like 8/255.
inline double parse_number(const std::string& s) {
    const auto slash = s.find('/');
    try {
        if (slash != std::string::npos) {
            return std::stod(s.substr(0, slash)) / std::stod(s.substr(slash + 1));
        }
        return std::stod(s);
    } catch (const std::exception&) {
        throw ConfigError("config: cannot parse number '" + s + "'");
    }
}

inline std::size_t parse_size(const std::string& s) {
    try {
        return std::stoul(s);
    } catch (const std::exception&) {
        throw ConfigError("config: cannot parse integer '" + s + "'");
    }
}

inline bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1" || s == "on") return true;
    if (s == "false" || s == "0" || s == "off") return false;
    throw ConfigError("config: cannot parse boolean '" + s + "'");
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string item;
    while (std::getline(is, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace detail

/// Full experiment description: dataset, model preset, training recipe and
/// evaluation attacks. Serialises to a flat key=value file; reloading the
/// saved text reproduces the run given the same seed.
struct ExperimentConfig {
    // dataset
    std::string dataset = "synthetic";  // synthetic | cifar10
    std::string data_dir;
    std::size_t classes = 10;
    std::size_t n_per_class = 64;
    std::size_t image_size = 8;
    std::size_t holdout_per_class = 16;
    double synthetic_noise = 0.06;
    // model
    std::string preset = "toy";         // toy | desk
    std::string model_kind = "awnet";   // awnet | baseline
    bool dynamic_weight = true;         // ablation switches (awnet only)
    bool mixbn = true;
    bool type_head = true;
    // training (TrainConfig fields surfaced as flat keys)
    TrainConfig train;
    std::size_t teacher_epochs = 40;
    // evaluation
    std::vector<std::string> eval_attacks = {"fgsm", "pgd_sat", "pgd_trades", "cw_linf"};
    double eval_epsilon = 8.0 / 255.0;
    double eval_step = 2.0 / 255.0;
    std::size_t eval_iters = 20;
    std::size_t cw_iters = 30;
    std::size_t probe_size = 120;
    std::size_t probe_iters = 10;
    // run
    std::uint64_t seed = 1;
    std::string out_dir = "runs/out";

    void set(const std::string& key, const std::string& value) {
        using detail::parse_bool;
        using detail::parse_number;
        using detail::parse_size;
        if (key == "dataset") dataset = value;
        else if (key == "data_dir") data_dir = value;
        else if (key == "classes") classes = parse_size(value);
        else if (key == "n_per_class") n_per_class = parse_size(value);
        else if (key == "image_size") image_size = parse_size(value);
        else if (key == "holdout_per_class") holdout_per_class = parse_size(value);
        else if (key == "synthetic_noise") synthetic_noise = parse_number(value);
        else if (key == "preset") preset = value;
        else if (key == "model_kind") model_kind = value;
        else if (key == "dynamic_weight") dynamic_weight = parse_bool(value);
        else if (key == "mixbn") mixbn = parse_bool(value);
        else if (key == "type_head") type_head = parse_bool(value);
        else if (key == "epochs") train.epochs = parse_size(value);
        else if (key == "batch_size") train.batch_size = parse_size(value);
        else if (key == "lr_main") train.lr_main = parse_number(value);
        else if (key == "lr_regulator") train.lr_regulator = parse_number(value);
        else if (key == "momentum") train.momentum = parse_number(value);
        else if (key == "weight_decay") train.weight_decay = parse_number(value);
        else if (key == "lr_decay") train.lr_decay = parse_number(value);
        else if (key == "lr_milestones") {
            train.lr_milestones.clear();
            for (const auto& m : detail::split_list(value)) train.lr_milestones.push_back(parse_size(m));
        } else if (key == "tau") train.tau = parse_number(value);
        else if (key == "alpha1") train.alpha1 = parse_number(value);
        else if (key == "alpha2") train.alpha2 = parse_number(value);
        else if (key == "auto_balance") train.auto_balance = parse_bool(value);
        else if (key == "beta") train.beta = parse_number(value);
        else if (key == "train_mode") {
            if (value == "mtard_joint") train.mode = TrainMode::MtardJoint;
            else if (value == "trades") train.mode = TrainMode::Trades;
            else if (value == "standard") train.mode = TrainMode::Standard;
            else if (value == "pgd_at") train.mode = TrainMode::PgdAt;
            else throw ConfigError("config: unknown train_mode '" + value + "'");
        } else if (key == "train_eps") train.train_attack.epsilon = parse_number(value);
        else if (key == "train_attack_iters") train.train_attack.iters = parse_size(value);
        else if (key == "train_attack_step") train.train_attack.step_size = parse_number(value);
        else if (key == "train_attack_random_start") train.train_attack.random_start = parse_number(value);
        else if (key == "trades_weight") train.trades_weight = parse_number(value);
        else if (key == "detector_pretrain_epochs") train.detector_pretrain_epochs = parse_size(value);
        else if (key == "generate_in_eval_mode") train.generate_in_eval_mode = parse_bool(value);
        else if (key == "teacher_epochs") teacher_epochs = parse_size(value);
        else if (key == "eval_attacks") eval_attacks = detail::split_list(value);
        else if (key == "eval_epsilon") eval_epsilon = parse_number(value);
        else if (key == "eval_step") eval_step = parse_number(value);
        else if (key == "eval_iters") eval_iters = parse_size(value);
        else if (key == "cw_iters") cw_iters = parse_size(value);
        else if (key == "probe_size") probe_size = parse_size(value);
        else if (key == "probe_iters") probe_iters = parse_size(value);
        else if (key == "seed") seed = std::stoull(value);
        else if (key == "out") out_dir = value;
        else throw ConfigError("config: unknown key '" + key + "'");
    }

    static ExperimentConfig from_file(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("config: cannot open " + path.string());
        ExperimentConfig cfg;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::string t = detail::trim(line);
            if (t.empty() || t[0] == '#') continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos) {
                throw ConfigError("config: line " + std::to_string(lineno) + " is not key=value: '" + t + "'");
            }
            cfg.set(detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
        }
        return cfg;
    }

    /// Canonical flat key=value text: deterministic field order and number
    /// formatting, used for config hashing and artifact copies.
    std::string canonical_text() const {
        std::ostringstream os;
        os.precision(17);
        os << "dataset=" << dataset << '\n';
        os << "data_dir=" << data_dir << '\n';
        os << "classes=" << classes << '\n';
        os << "n_per_class=" << n_per_class << '\n';
        os << "image_size=" << image_size << '\n';
        os << "holdout_per_class=" << holdout_per_class << '\n';
        os << "synthetic_noise=" << synthetic_noise << '\n';
        os << "preset=" << preset << '\n';
        os << "model_kind=" << model_kind << '\n';
        os << "dynamic_weight=" << (dynamic_weight ? "true" : "false") << '\n';
        os << "mixbn=" << (mixbn ? "true" : "false") << '\n';
        os << "type_head=" << (type_head ? "true" : "false") << '\n';
        os << "epochs=" << train.epochs << '\n';
        os << "batch_size=" << train.batch_size << '\n';
        os << "lr_main=" << train.lr_main << '\n';
        os << "lr_regulator=" << train.lr_regulator << '\n';
        os << "momentum=" << train.momentum << '\n';
        os << "weight_decay=" << train.weight_decay << '\n';
        os << "lr_milestones=";
        for (std::size_t i = 0; i < train.lr_milestones.size(); ++i) {
            if (i) os << ',';
            os << train.lr_milestones[i];
        }
        os << '\n';
        os << "lr_decay=" << train.lr_decay << '\n';
        os << "tau=" << train.tau << '\n';
        os << "alpha1=" << train.alpha1 << '\n';
        os << "alpha2=" << train.alpha2 << '\n';
        os << "auto_balance=" << (train.auto_balance ? "true" : "false") << '\n';
        os << "beta=" << train.beta << '\n';
        os << "train_mode=" << train_mode_name(train.mode) << '\n';
        os << "train_eps=" << train.train_attack.epsilon << '\n';
        os << "train_attack_iters=" << train.train_attack.iters << '\n';
        os << "train_attack_step=" << train.train_attack.step_size << '\n';
        os << "train_attack_random_start=" << train.train_attack.random_start << '\n';
        os << "trades_weight=" << train.trades_weight << '\n';
        os << "detector_pretrain_epochs=" << train.detector_pretrain_epochs << '\n';
        os << "generate_in_eval_mode=" << (train.generate_in_eval_mode ? "true" : "false") << '\n';
        os << "teacher_epochs=" << teacher_epochs << '\n';
        os << "eval_attacks=";
        for (std::size_t i = 0; i < eval_attacks.size(); ++i) {
            if (i) os << ',';
            os << eval_attacks[i];
        }
        os << '\n';
        os << "eval_epsilon=" << eval_epsilon << '\n';
        os << "eval_step=" << eval_step << '\n';
        os << "eval_iters=" << eval_iters << '\n';
        os << "cw_iters=" << cw_iters << '\n';
        os << "probe_size=" << probe_size << '\n';
        os << "probe_iters=" << probe_iters << '\n';
        os << "seed=" << seed << '\n';
        // out_dir is where artifacts land, not part of the experiment identity
        return os.str();
    }

    void validate() const {
        if (dataset != "synthetic" && dataset != "cifar10") {
            throw ConfigError("config: dataset must be synthetic or cifar10");
        }
        if (dataset == "cifar10" && data_dir.empty()) throw ConfigError("config: cifar10 needs data_dir");
        if (preset != "toy" && preset != "desk") throw ConfigError("config: preset must be toy or desk");
        if (model_kind != "awnet" && model_kind != "baseline") {
            throw ConfigError("config: model_kind must be awnet or baseline");
        }
        if (classes < 2) throw ConfigError("config: classes must be >= 2");
        train.validate();
        for (const auto& a : eval_attacks) attack_spec_for(a);  // throws on unknown names
    }

    ModelSpec model_spec() const {
        ModelSpec spec = preset == "desk" ? ModelSpec::desk(classes, image_size) : ModelSpec::toy(classes, image_size);
        if (dataset == "cifar10") {
            spec.num_classes = 10;
            spec.image_size = 32;
        }
        spec.beta = train.beta;
        spec.kind = model_kind;
        spec.dynamic_weight = dynamic_weight;
        spec.mixbn = mixbn;
        spec.type_head = type_head;
        return spec;
    }

    AttackSpec attack_spec_for(const std::string& name) const {
        AttackSpec s;
        if (name == "fgsm") {
            s = AttackSpec::fgsm(eval_epsilon);
        } else if (name == "pgd_sat") {
            s = AttackSpec::pgd_sat(eval_epsilon, eval_iters);
            s.step_size = eval_step;
        } else if (name == "pgd_trades") {
            s = AttackSpec::pgd_trades(eval_epsilon, eval_iters);
            s.step_size = eval_step;
        } else if (name == "cw_linf") {
            s = AttackSpec::cw_linf(eval_epsilon, cw_iters);
            s.step_size = eval_step;
        } else if (name == "adaptive") {
            s = AttackSpec::adaptive(eval_epsilon, eval_iters);
            s.step_size = eval_step;
        } else {
            throw ConfigError("config: unknown attack '" + name + "'");
        }
        return s;
    }

    /// Best-checkpoint selection attack: PGD-trades at the training epsilon.
    AttackSpec probe_attack_spec() const {
        AttackSpec s = AttackSpec::pgd_trades(train.train_attack.epsilon, probe_iters);
        s.step_size = eval_step;
        return s;
    }

    std::string hash() const { return fnv1a64_hex(canonical_text()); }
};

}  // namespace awnet
