#pragma once

#include <cmath>
#include <concepts>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "awnet/attacks.hpp"
#include "awnet/data.hpp"
#include "awnet/errors.hpp"
#include "awnet/model.hpp"
#include "awnet/rng.hpp"
#include "awnet/tensor.hpp"

namespace awnet {

enum class TrainMode { MtardJoint, Trades, Standard, PgdAt };

inline std::string train_mode_name(TrainMode m) {
    switch (m) {
        case TrainMode::MtardJoint: return "mtard_joint";
        case TrainMode::Trades: return "trades";
        case TrainMode::Standard: return "standard";
        case TrainMode::PgdAt: return "pgd_at";
    }
    return "?";
}

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 64;
    double lr_main = 0.1;       // dynamic weight network
    double lr_regulator = 0.01; // adversarial weight regulator (detector heads)
    double momentum = 0.9;
    double weight_decay = 2e-4;
    std::vector<std::size_t> lr_milestones = {20, 26};  // epoch indices, 0-based
    double lr_decay = 0.1;
    double tau = 1.0;
    double alpha1 = 0.5;
    double alpha2 = 0.5;
    bool auto_balance = true;
    double beta = 4.0;
    AttackSpec train_attack = AttackSpec::train_pgd10(8.0 / 255.0);
    TrainMode mode = TrainMode::MtardJoint;
    double trades_weight = 6.0;
    std::size_t detector_pretrain_epochs = 5;
    /// Attack-time generation routing: train_adv (default) or eval (ablation).
    bool generate_in_eval_mode = false;

    void validate() const {
        if (lr_main < 0.0 || lr_regulator < 0.0) throw ConfigError("train: learning rates must be nonnegative");
        if (tau < 1.0) throw ConfigError("train: tau must be >= 1");
        if (batch_size < 2) throw ConfigError("train: batch_size must be >= 2 (batch statistics)");
        for (std::size_t i = 1; i < lr_milestones.size(); ++i) {
            if (lr_milestones[i] <= lr_milestones[i - 1]) {
                throw ConfigError("train: lr_milestones must be strictly increasing");
            }
        }
        train_attack.validate();
    }

    double lr_scale_at(std::size_t epoch) const {
        double s = 1.0;
        for (std::size_t m : lr_milestones) {
            if (epoch >= m) s *= lr_decay;
        }
        return s;
    }
};

/// Frozen clean teacher and frozen robust teacher for the distillation losses.
struct TeacherPair {
    BaselineNet t_nat;
    BaselineNet t_adv;

    void freeze() {
        t_nat.set_trainable_requires_grad(false);
        t_adv.set_trainable_requires_grad(false);
    }
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// SGD with momentum and decoupled-from-nothing weight decay:
///   v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.
inline void sgd_step(std::vector<Tensor>& params, std::vector<std::vector<double>>& velocity, double lr,
                     double momentum, double weight_decay) {
    if (velocity.size() != params.size()) velocity.resize(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& t = params[p];
        auto& v = velocity[p];
        if (v.size() != t.numel()) v.assign(t.numel(), 0.0);
        const auto& g = t.grad();
        for (std::size_t i = 0; i < t.numel(); ++i) {
            v[i] = momentum * v[i] + g[i] + weight_decay * t.values()[i];
            t.values()[i] -= lr * v[i];
        }
    }
}

struct ParamGroup {
    std::vector<std::string> names;
    std::vector<Tensor> params;
    std::vector<std::vector<double>> velocity;
    double lr = 0.1;

    void add(const std::string& name, Tensor& t) {
        names.push_back(name);
        params.push_back(t);
    }
    void zero_grad() {
        for (auto& t : params) t.zero_grad();
    }
    void step(double lr_scale, double momentum, double weight_decay) {
        sgd_step(params, velocity, lr * lr_scale, momentum, weight_decay);
    }
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Tempered distillation loss: tau^2 * KL(softmax(teacher/tau) || softmax(student/tau)),
/// batch-averaged. The teacher side is constant.
inline Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, double tau) {
    if (student_logits.shape() != teacher_logits.shape()) {
        throw std::invalid_argument("kd_loss: student " + shape_str(student_logits.shape()) + " vs teacher " +
                                    shape_str(teacher_logits.shape()));
    }
    if (!(tau > 0.0)) throw std::invalid_argument("kd_loss: tau must be positive");
    const std::size_t n = student_logits.dim(0);
    std::vector<double> p_teacher;
    double entropy_term = 0.0;  // sum of p_T * log p_T
    {
        Graph::NoGrad off;
        Tensor pt = softmax_rows(affine(teacher_logits, 1.0 / tau, 0.0));
        Tensor lpt = log_softmax_rows(affine(teacher_logits, 1.0 / tau, 0.0));
        p_teacher = pt.values();
        for (std::size_t i = 0; i < p_teacher.size(); ++i) entropy_term += p_teacher[i] * lpt.values()[i];
    }
    Tensor ls = log_softmax_rows(affine(student_logits, 1.0 / tau, 0.0));
    Tensor cross = weighted_sum(reshape(ls, {ls.numel()}), p_teacher);
    const double t2n = tau * tau / static_cast<double>(n);
    return affine(cross, -t2n, t2n * entropy_term);
}

/// Binary cross-entropy of p against 0/1 targets with epsilon-guarded logs.
inline Tensor binary_cross_entropy(const Tensor& p, const std::vector<double>& targets) {
    if (p.rank() != 1 || p.numel() != targets.size()) {
        throw std::invalid_argument("binary_cross_entropy: p " + shape_str(p.shape()) + " vs " +
                                    std::to_string(targets.size()) + " targets");
    }
    std::vector<double> w_pos(targets.size()), w_neg(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i) {
        w_pos[i] = targets[i];
        w_neg[i] = 1.0 - targets[i];
    }
    Tensor pos = weighted_sum(log_guard(p), w_pos);
    Tensor neg = weighted_sum(log_guard(affine(p, -1.0, 1.0)), w_neg);
    return affine(add(pos, neg), -1.0 / static_cast<double>(targets.size()), 0.0);
}

/// L_total = L_type(P_type, y') + alpha1 * L_adv + alpha2 * L_nat.
inline Tensor total_loss(const Tensor& p_type, const std::vector<double>& type_labels, const Tensor& l_adv,
                         const Tensor& l_nat, double alpha1, double alpha2) {
    Tensor type_term = binary_cross_entropy(p_type, type_labels);
    return add(type_term, add(affine(l_adv, alpha1, 0.0), affine(l_nat, alpha2, 0.0)));
}

/// Normalized relative-progress balancing: the distillation weight shifts
/// toward the teacher whose loss decrease lags, preserving alpha1 + alpha2 = 1
/// and clamping to [0.1, 0.9]. Stand-in for the MTARD adjustment.
inline std::pair<double, double> auto_balance(double alpha1, double alpha2, const std::vector<double>& l_adv_hist,
                                              const std::vector<double>& l_nat_hist, double rate = 0.1) {
    if (l_adv_hist.size() < 2 || l_nat_hist.size() < 2) return {alpha1, alpha2};
    auto progress = [](const std::vector<double>& h) {
        const double first = h.front();
        return (first - h.back()) / std::max(std::abs(first), 1e-12);
    };
    const double p_adv = progress(l_adv_hist);
    const double p_nat = progress(l_nat_hist);
    const double denom = std::abs(p_adv) + std::abs(p_nat);
    if (denom < 1e-15) return {alpha1, alpha2};
    const double shift = rate * (p_nat - p_adv) / denom;  // adv lagging -> alpha1 up
    const double a1 = std::clamp(alpha1 + shift, 0.1, 0.9);
    return {a1, 1.0 - a1};
}

// ---------------------------------------------------------------------------
// Adversarial example generation inside training
// ---------------------------------------------------------------------------

/// PGD on the student with training-time routing (train_adv by default, eval
/// as a documented ablation switch); batch statistics are used but never
/// folded into the running stats.
inline Tensor generate_train_adversarial(AWNetModel& model, const Tensor& x, const std::vector<std::size_t>& y,
                                         const AttackSpec& spec, Rng& rng, bool eval_mode_generation = false) {
    detail::ParamFreeze freeze(model);
    ForwardOpts opts;
    opts.update_stats = false;
    auto objective = [&](const Tensor& probe) {
        if (eval_mode_generation) return cross_entropy(model.forward(probe, NetMode::Eval, opts).logits, y);
        return cross_entropy(model.forward(probe, NetMode::TrainAdv, opts).logits, y);
    };
    return detail::linf_ascent(objective, x, spec, rng, "train_pgd");
}

template <typename Net>
    requires requires(Net& net, const Tensor& t, NetMode m, const ForwardOpts& o) {
        { net.forward(t, m, o) } -> std::same_as<Tensor>;
    }
inline Tensor generate_train_adversarial(Net& model, const Tensor& x, const std::vector<std::size_t>& y,
                                         const AttackSpec& spec, Rng& rng, bool eval_mode_generation = false,
                                         AttackLoss loss_kind = AttackLoss::Ce) {
    detail::ParamFreeze freeze(model);
    ForwardOpts opts;
    opts.update_stats = false;
    const NetMode mode = eval_mode_generation ? NetMode::Eval : NetMode::TrainAdv;
    std::vector<double> log_p_clean;
    if (loss_kind == AttackLoss::KlVsClean) {
        Graph::NoGrad off;
        log_p_clean = log_softmax_rows(model.forward(x, mode, opts)).values();
    }
    auto objective = [&](const Tensor& probe) {
        Tensor logits = model.forward(probe, mode, opts);
        if (loss_kind == AttackLoss::KlVsClean) return detail::kl_to_reference(logits, log_p_clean);
        return cross_entropy(logits, y);
    };
    return detail::linf_ascent(objective, x, spec, rng, "train_pgd");
}

// ---------------------------------------------------------------------------
// Joint adversarial training (MTARD-style, two teachers + type loss)
// ---------------------------------------------------------------------------

struct EpochMetrics {
    double l_total = 0.0;
    double l_adv = 0.0;
    double l_nat = 0.0;
    double l_type = 0.0;
    double alpha1 = 0.5;
    double alpha2 = 0.5;
};

namespace detail {

inline void check_finite_loss(double v, std::size_t epoch, std::size_t batch, std::uint64_t seed) {
    if (!std::isfinite(v)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch) + " (replay seed " + std::to_string(seed) + ")");
    }
}

}  // namespace detail

/// Joint trainer of AW-Net: per batch, PGD-10 adversarial examples against the
/// current student, clean batch through the clean routing, adversarial batch
/// through the adversarial routing, two-teacher distillation plus the type
/// loss, one SGD step per parameter group at its own learning rate.
class JointTrainer {
public:
    JointTrainer(AWNetModel& model, TeacherPair& teachers, TrainConfig cfg)
        : model_(model), teachers_(teachers), cfg_(std::move(cfg)) {
        cfg_.validate();
        alpha1_ = cfg_.alpha1;
        alpha2_ = cfg_.alpha2;
        model_.visit_main([this](const std::string& n, Tensor& t) { main_.add(n, t); });
        model_.visit_regulator([this](const std::string& n, Tensor& t) { regulator_.add(n, t); });
        main_.lr = cfg_.lr_main;
        regulator_.lr = cfg_.lr_regulator;
    }

    const TrainConfig& config() const { return cfg_; }
    double alpha1() const { return alpha1_; }
    double alpha2() const { return alpha2_; }
    std::size_t epoch() const { return epoch_; }
    ParamGroup& main_group() { return main_; }
    ParamGroup& regulator_group() { return regulator_; }

    EpochMetrics run_epoch(const DatasetHandle& data, Rng& rng, std::uint64_t replay_seed = 0) {
        const double lr_scale = cfg_.lr_scale_at(epoch_);
        EpochMetrics m;
        m.alpha1 = alpha1_;
        m.alpha2 = alpha2_;
        auto order = data.all_indices();
        rng.shuffle(order);
        std::size_t batches = 0;
        for (std::size_t start = 0; start + 1 < order.size(); start += cfg_.batch_size) {
            const std::vector<std::size_t> chunk(
                order.begin() + static_cast<std::ptrdiff_t>(start),
                order.begin() + static_cast<std::ptrdiff_t>(std::min(start + cfg_.batch_size, order.size())));
            if (chunk.size() < 2) break;  // batch statistics need two elements
            Tensor xb = data.batch(chunk);
            const auto yb = data.batch_labels(chunk);

            Tensor x_adv =
                generate_train_adversarial(model_, xb, yb, cfg_.train_attack, rng, cfg_.generate_in_eval_mode);

            Tensor t_nat_logits, t_adv_logits;
            {
                Graph::NoGrad off;
                t_nat_logits = teachers_.t_nat.forward(xb, NetMode::Eval);
                t_adv_logits = teachers_.t_adv.forward(x_adv, NetMode::Eval);
            }

            Graph graph;
            Tensor total;
            double batch_l_adv = 0.0, batch_l_nat = 0.0, batch_l_type = 0.0;
            {
                Graph::Scope scope(graph);
                ForwardResult res_nat = model_.forward(xb, NetMode::TrainClean);
                ForwardResult res_adv = model_.forward(x_adv, NetMode::TrainAdv);
                Tensor l_nat = kd_loss(res_nat.logits, t_nat_logits, cfg_.tau);
                Tensor l_adv = kd_loss(res_adv.logits, t_adv_logits, cfg_.tau);
                if (model_.spec.type_head) {
                    // y': clean = 1, adversarial = 0, on both halves of the batch
                    Tensor p_cat = concat_vec(res_nat.signals.p_type, res_adv.signals.p_type);
                    std::vector<double> y_type(2 * chunk.size(), 0.0);
                    std::fill(y_type.begin(), y_type.begin() + static_cast<std::ptrdiff_t>(chunk.size()), 1.0);
                    total = total_loss(p_cat, y_type, l_adv, l_nat, alpha1_, alpha2_);
                    batch_l_type = total.scalar_value() - alpha1_ * l_adv.scalar_value() -
                                   alpha2_ * l_nat.scalar_value();
                } else {
                    total = add(affine(l_adv, alpha1_, 0.0), affine(l_nat, alpha2_, 0.0));
                }
                batch_l_adv = l_adv.scalar_value();
                batch_l_nat = l_nat.scalar_value();
                detail::check_finite_loss(total.scalar_value(), epoch_, batches, replay_seed);
                main_.zero_grad();
                regulator_.zero_grad();
                graph.backward(total);
            }
            main_.step(lr_scale, cfg_.momentum, cfg_.weight_decay);
            regulator_.step(lr_scale, cfg_.momentum, cfg_.weight_decay);
            m.l_total += total.scalar_value();
            m.l_adv += batch_l_adv;
            m.l_nat += batch_l_nat;
            m.l_type += batch_l_type;
            ++batches;
        }
        if (batches > 0) {
            m.l_total /= batches;
            m.l_adv /= batches;
            m.l_nat /= batches;
            m.l_type /= batches;
        }
        hist_adv_.push_back(m.l_adv);
        hist_nat_.push_back(m.l_nat);
        if (cfg_.auto_balance) {
            std::tie(alpha1_, alpha2_) = auto_balance(alpha1_, alpha2_, hist_adv_, hist_nat_);
        }
        ++epoch_;
        return m;
    }

private:
    AWNetModel& model_;
    TeacherPair& teachers_;
    TrainConfig cfg_;
    ParamGroup main_, regulator_;
    std::vector<double> hist_adv_, hist_nat_;
    double alpha1_, alpha2_;
    std::size_t epoch_ = 0;
};

/// Same recipe for the static baseline student: two-teacher distillation with
/// PGD-10 generation but a single BN path and no type loss. Backs the ablation
/// baseline row and the matched-baseline comparison.
class BaselineDistillTrainer {
public:
    BaselineDistillTrainer(BaselineNet& model, TeacherPair& teachers, TrainConfig cfg)
        : model_(model), teachers_(teachers), cfg_(std::move(cfg)) {
        cfg_.validate();
        alpha1_ = cfg_.alpha1;
        alpha2_ = cfg_.alpha2;
        model_.visit_params([this](const std::string& n, Tensor& t) { group_.add(n, t); });
        group_.lr = cfg_.lr_main;
    }

    double alpha1() const { return alpha1_; }
    double alpha2() const { return alpha2_; }
    ParamGroup& group() { return group_; }

    EpochMetrics run_epoch(const DatasetHandle& data, Rng& rng, std::uint64_t replay_seed = 0) {
        const double lr_scale = cfg_.lr_scale_at(epoch_);
        EpochMetrics m;
        m.alpha1 = alpha1_;
        m.alpha2 = alpha2_;
        auto order = data.all_indices();
        rng.shuffle(order);
        std::size_t batches = 0;
        for (std::size_t start = 0; start + 1 < order.size(); start += cfg_.batch_size) {
            const std::vector<std::size_t> chunk(
                order.begin() + static_cast<std::ptrdiff_t>(start),
                order.begin() + static_cast<std::ptrdiff_t>(std::min(start + cfg_.batch_size, order.size())));
            if (chunk.size() < 2) break;
            Tensor xb = data.batch(chunk);
            const auto yb = data.batch_labels(chunk);
            Tensor x_adv =
                generate_train_adversarial(model_, xb, yb, cfg_.train_attack, rng, cfg_.generate_in_eval_mode);
            Tensor t_nat_logits, t_adv_logits;
            {
                Graph::NoGrad off;
                t_nat_logits = teachers_.t_nat.forward(xb, NetMode::Eval);
                t_adv_logits = teachers_.t_adv.forward(x_adv, NetMode::Eval);
            }
            Graph graph;
            Tensor total;
            {
                Graph::Scope scope(graph);
                Tensor l_nat = kd_loss(model_.forward(xb, NetMode::TrainClean), t_nat_logits, cfg_.tau);
                Tensor l_adv = kd_loss(model_.forward(x_adv, NetMode::TrainAdv), t_adv_logits, cfg_.tau);
                total = add(affine(l_adv, alpha1_, 0.0), affine(l_nat, alpha2_, 0.0));
                m.l_adv += l_adv.scalar_value();
                m.l_nat += l_nat.scalar_value();
                detail::check_finite_loss(total.scalar_value(), epoch_, batches, replay_seed);
                group_.zero_grad();
                graph.backward(total);
            }
            group_.step(lr_scale, cfg_.momentum, cfg_.weight_decay);
            m.l_total += total.scalar_value();
            ++batches;
        }
        if (batches > 0) {
            m.l_total /= batches;
            m.l_adv /= batches;
            m.l_nat /= batches;
        }
        hist_adv_.push_back(m.l_adv);
        hist_nat_.push_back(m.l_nat);
        if (cfg_.auto_balance) {
            std::tie(alpha1_, alpha2_) = auto_balance(alpha1_, alpha2_, hist_adv_, hist_nat_);
        }
        ++epoch_;
        return m;
    }

private:
    BaselineNet& model_;
    TeacherPair& teachers_;
    TrainConfig cfg_;
    ParamGroup group_;
    std::vector<double> hist_adv_, hist_nat_;
    double alpha1_, alpha2_;
    std::size_t epoch_ = 0;
};

// ---------------------------------------------------------------------------
// Plain training variants (baselines, teachers, weight-distribution twins)
// ---------------------------------------------------------------------------

/// standard: cross-entropy on clean batches.
/// pgd_at:   (CE(x) + CE(x_adv)) / 2 with PGD-generated x_adv per batch.
/// trades:   CE(x) + trades_weight * KL(model(x_adv) || model(x)).
template <typename Net = BaselineNet>
class VariantTrainer {
public:
    VariantTrainer(Net& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg)) {
        cfg_.validate();
        model_.visit_params([this](const std::string& n, Tensor& t) { group_.add(n, t); });
        group_.lr = cfg_.lr_main;
    }

    EpochMetrics run_epoch(const DatasetHandle& data, Rng& rng);
    ParamGroup& group() { return group_; }
    std::size_t epoch() const { return epoch_; }

private:
    Net& model_;
    TrainConfig cfg_;
    ParamGroup group_;
    std::size_t epoch_ = 0;
};

template <typename Net>
inline EpochMetrics VariantTrainer<Net>::run_epoch(const DatasetHandle& data, Rng& rng) {
    const TrainConfig& cfg = cfg_;
    const std::size_t epoch = epoch_;
    EpochMetrics metrics;
    std::size_t batches = 0;
    {
        const double lr_scale = cfg.lr_scale_at(epoch);
        auto order = data.all_indices();
        rng.shuffle(order);
        for (std::size_t start = 0, batch = 0; start + 1 < order.size(); start += cfg.batch_size, ++batch) {
            const std::vector<std::size_t> chunk(
                order.begin() + static_cast<std::ptrdiff_t>(start),
                order.begin() + static_cast<std::ptrdiff_t>(std::min(start + cfg.batch_size, order.size())));
            if (chunk.size() < 2) break;
            Tensor xb = data.batch(chunk);
            const auto yb = data.batch_labels(chunk);

            Tensor x_adv;
            if (cfg.mode == TrainMode::PgdAt) {
                x_adv = generate_train_adversarial(model_, xb, yb, cfg.train_attack, rng);
            } else if (cfg.mode == TrainMode::Trades) {
                x_adv = generate_train_adversarial(model_, xb, yb, cfg.train_attack, rng, false,
                                                   AttackLoss::KlVsClean);
            }

            Graph graph;
            Tensor loss;
            {
                Graph::Scope scope(graph);
                Tensor clean_logits = model_.forward(xb, NetMode::TrainClean);
                Tensor ce = cross_entropy(clean_logits, yb);
                if (cfg.mode == TrainMode::Standard) {
                    loss = ce;
                } else if (cfg.mode == TrainMode::PgdAt) {
                    Tensor ce_adv = cross_entropy(model_.forward(x_adv, NetMode::TrainAdv), yb);
                    loss = affine(add(ce, ce_adv), 0.5, 0.0);
                } else if (cfg.mode == TrainMode::Trades) {
                    Tensor adv_logits = model_.forward(x_adv, NetMode::TrainAdv);
                    // KL(model(x_adv) || model(x)), both sides trainable
                    Tensor p_adv = softmax_rows(adv_logits);
                    Tensor diff = sub(log_softmax_rows(adv_logits), log_softmax_rows(clean_logits));
                    Tensor kl = affine(sum_all(mul(p_adv, diff)), 1.0 / static_cast<double>(chunk.size()), 0.0);
                    loss = add(ce, affine(kl, cfg.trades_weight, 0.0));
                } else {
                    throw ConfigError("train_variant: mode must be standard, pgd_at or trades");
                }
                detail::check_finite_loss(loss.scalar_value(), epoch, batch, 0);
                group_.zero_grad();
                graph.backward(loss);
            }
            group_.step(lr_scale, cfg.momentum, cfg.weight_decay);
            metrics.l_total += loss.scalar_value();
            ++batches;
        }
    }
    if (batches > 0) metrics.l_total /= static_cast<double>(batches);
    ++epoch_;
    return metrics;
}

/// Runs the configured number of epochs of a plain training variant
/// (BaselineNet or the normalization-free PlainNet).
template <typename Net>
inline void train_variant(Net& model, const DatasetHandle& data, const TrainConfig& cfg, Rng& rng) {
    VariantTrainer<Net> trainer(model, cfg);
    for (std::size_t e = 0; e < cfg.epochs; ++e) trainer.run_epoch(data, rng);
}

/// Standard-trains (extractor + temporary linear head) on clean data, then
/// freezes the extractor. The temporary head is discarded.
inline void pretrain_detector_extractor(AWNetModel& model, const DatasetHandle& data, std::size_t epochs,
                                        double lr, Rng& rng, std::size_t batch_size = 64) {
    model.detector.frozen_extractor = false;
    model.detector.set_extractor_requires_grad(true);
    Linear probe = Linear::make(model.spec.num_classes, model.spec.detector_dim,
                                std::sqrt(2.0 / static_cast<double>(model.spec.detector_dim)), rng);
    ParamGroup group;
    const ParamVisitor collect = [&group](const std::string& n, Tensor& t) { group.add(n, t); };
    for (std::size_t i = 0; i < model.detector.extractor.size(); ++i) {
        model.detector.extractor[i].visit_params("extractor." + std::to_string(i), collect);
    }
    probe.visit_params("probe", collect);
    group.lr = lr;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        auto order = data.all_indices();
        rng.shuffle(order);
        for (std::size_t start = 0; start + 1 < order.size(); start += batch_size) {
            const std::vector<std::size_t> chunk(
                order.begin() + static_cast<std::ptrdiff_t>(start),
                order.begin() + static_cast<std::ptrdiff_t>(std::min(start + batch_size, order.size())));
            Tensor xb = data.batch(chunk);
            Graph graph;
            {
                Graph::Scope scope(graph);
                Tensor loss = cross_entropy(probe.forward(model.detector.features(xb)), data.batch_labels(chunk));
                group.zero_grad();
                graph.backward(loss);
            }
            group.step(1.0, 0.9, 0.0);
        }
    }
    {
        Graph::NoGrad off;
        model.detector.norm_scale.assign(model.detector.norm_scale.size(), 1.0);
        model.detector.norm_shift.assign(model.detector.norm_shift.size(), 0.0);
        model.detector.fit_feature_norm(model.detector.features(data.batch(data.all_indices())));
    }
    model.detector.freeze_extractor();
}

/// Trains the clean and the robust teacher on the given data: a standard twin
/// and a PGD-AT twin of the baseline architecture, frozen afterwards.
inline TeacherPair make_teachers(const ModelSpec& arch, const DatasetHandle& data, const TrainConfig& base_cfg,
                                 std::uint64_t seed) {
    TeacherPair pair;
    Rng rng_nat(seed);
    pair.t_nat = BaselineNet::make(arch.as_baseline(), rng_nat);
    TrainConfig cfg_nat = base_cfg;
    cfg_nat.mode = TrainMode::Standard;
    Rng train_nat(seed ^ 0x5eed0001ULL);
    train_variant(pair.t_nat, data, cfg_nat, train_nat);

    Rng rng_adv(seed);
    pair.t_adv = BaselineNet::make(arch.as_baseline(), rng_adv);
    TrainConfig cfg_adv = base_cfg;
    cfg_adv.mode = TrainMode::PgdAt;
    Rng train_adv(seed ^ 0x5eed0002ULL);
    train_variant(pair.t_adv, data, cfg_adv, train_adv);

    pair.freeze();
    return pair;
}

}  // namespace awnet
