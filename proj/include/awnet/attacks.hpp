#pragma once

#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "awnet/data.hpp"
#include "awnet/errors.hpp"
#include "awnet/model.hpp"
#include "awnet/report.hpp"
#include "awnet/rng.hpp"
#include "awnet/tensor.hpp"

namespace awnet {

enum class AttackFamily { Fgsm, PgdSat, PgdTrades, CwLinf, Adaptive };
enum class AttackLoss { Ce, KlVsClean };

inline std::string attack_family_name(AttackFamily f) {
    switch (f) {
        case AttackFamily::Fgsm: return "fgsm";
        case AttackFamily::PgdSat: return "pgd_sat";
        case AttackFamily::PgdTrades: return "pgd_trades";
        case AttackFamily::CwLinf: return "cw_linf";
        case AttackFamily::Adaptive: return "adaptive";
    }
    return "?";
}

/// L-infinity attack configuration in pixel units.
struct AttackSpec {
    AttackFamily family = AttackFamily::PgdSat;
    double epsilon = 8.0 / 255.0;
    double step_size = 2.0 / 255.0;
    std::size_t iters = 20;
    double random_start = 0.0;  // scale of the uniform initialisation; 0 disables
    double kappa = 0.0;         // CW margin
    AttackLoss loss = AttackLoss::Ce;
    double lambda = 1.0;        // adaptive attack: weight of the type-loss term

    void validate() const {
        if (epsilon < 0.0 || step_size < 0.0) throw ConfigError("attack: epsilon and step_size must be >= 0");
        if (iters < 1) throw ConfigError("attack: iters must be >= 1");
    }

    static AttackSpec fgsm(double eps) {
        AttackSpec s;
        s.family = AttackFamily::Fgsm;
        s.epsilon = eps;
        s.step_size = eps;
        s.iters = 1;
        return s;
    }
    /// Evaluation PGD with CE objective; random start defaults to scale eps.
    static AttackSpec pgd_sat(double eps, std::size_t iters = 20) {
        AttackSpec s;
        s.family = AttackFamily::PgdSat;
        s.epsilon = eps;
        s.iters = iters;
        s.random_start = eps;
        return s;
    }
    /// KL-objective PGD with the small 0.001 start of the TRADES attack.
    static AttackSpec pgd_trades(double eps, std::size_t iters = 20) {
        AttackSpec s;
        s.family = AttackFamily::PgdTrades;
        s.epsilon = eps;
        s.iters = iters;
        s.random_start = 0.001;
        s.loss = AttackLoss::KlVsClean;
        return s;
    }
    /// Training attack: PGD-10, CE loss, random start 0.001, step 2/255.
    static AttackSpec train_pgd10(double eps) {
        AttackSpec s;
        s.family = AttackFamily::PgdSat;
        s.epsilon = eps;
        s.iters = 10;
        s.random_start = 0.001;
        return s;
    }
    static AttackSpec cw_linf(double eps, std::size_t iters = 30, double kappa = 0.0) {
        AttackSpec s;
        s.family = AttackFamily::CwLinf;
        s.epsilon = eps;
        s.iters = iters;
        s.kappa = kappa;
        return s;
    }
    static AttackSpec adaptive(double eps, std::size_t iters = 20, double lambda = 1.0) {
        AttackSpec s = pgd_trades(eps, iters);
        s.family = AttackFamily::Adaptive;
        s.lambda = lambda;
        return s;
    }
};

/// Result of one attack run. x_adv always satisfies the epsilon ball and the
/// [0,1] pixel domain; success means the model misclassifies x_adv.
struct AdversarialBatch {
    Tensor x_nat;
    Tensor x_adv;
    std::vector<std::size_t> y;
    std::vector<bool> success;
};

namespace detail {

/// Restores every parameter's requires_grad flag on destruction; attacks use
/// this so only the input collects gradient.
class ParamFreeze {
public:
    explicit ParamFreeze(Model& m) {
        m.visit_params([this](const std::string&, Tensor& t) {
            tensors_.push_back(t);
            flags_.push_back(t.requires_grad());
            t.set_requires_grad(false);
        });
    }
    ~ParamFreeze() {
        for (std::size_t i = 0; i < tensors_.size(); ++i) tensors_[i].set_requires_grad(flags_[i]);
    }
    ParamFreeze(const ParamFreeze&) = delete;
    ParamFreeze& operator=(const ParamFreeze&) = delete;

private:
    std::vector<Tensor> tensors_;
    std::vector<bool> flags_;
};

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

/// Projects onto the eps ball around x_nat intersected with [0,1].
inline void project(Tensor& x_adv, const Tensor& x_nat, double eps) {
    for (std::size_t i = 0; i < x_adv.numel(); ++i) {
        const double lo = std::max(0.0, x_nat.values()[i] - eps);
        const double hi = std::min(1.0, x_nat.values()[i] + eps);
        x_adv.values()[i] = std::clamp(x_adv.values()[i], lo, hi);
    }
}

inline void assert_feasible(const Tensor& x_adv, const Tensor& x_nat, double eps, const char* where) {
    for (std::size_t i = 0; i < x_adv.numel(); ++i) {
        const double v = x_adv.values()[i];
        if (!(v >= 0.0 && v <= 1.0) || std::abs(v - x_nat.values()[i]) > eps + 1e-12) {
            throw NumericError(std::string("attack: infeasible iterate in ") + where);
        }
    }
}

/// KL(softmax(logits) || p_ref) with p_ref constant, batch-averaged.
inline Tensor kl_to_reference(const Tensor& logits, const std::vector<double>& log_p_ref) {
    const std::size_t n = logits.dim(0);
    Tensor ls = log_softmax_rows(logits);
    Tensor p = softmax_rows(logits);
    Tensor diff = sub(ls, Tensor::from(ls.shape(), std::vector<double>(log_p_ref)));
    return affine(sum_all(mul(p, diff)), 1.0 / static_cast<double>(n), 0.0);
}

/// Shared L-infinity ascent loop. objective(x) must return a taped scalar to
/// maximize. Returns the final feasible iterate.
inline Tensor linf_ascent(const std::function<Tensor(const Tensor&)>& objective, const Tensor& x_nat,
                          const AttackSpec& spec, Rng& rng, const char* name) {
    Tensor x_adv = x_nat.clone();
    if (spec.random_start > 0.0) {
        for (double& v : x_adv.values()) v += rng.uniform(-spec.random_start, spec.random_start);
        project(x_adv, x_nat, spec.epsilon);
    }
    if (spec.step_size == 0.0 && spec.iters > 1) {
        std::cerr << "[awnet] warning: " << name << " with step_size 0 returns the projected start\n";
        assert_feasible(x_adv, x_nat, spec.epsilon, name);
        return x_adv;
    }
    for (std::size_t it = 0; it < spec.iters; ++it) {
        Tensor probe = x_adv.clone();
        probe.set_requires_grad(true);
        Graph graph;
        {
            Graph::Scope scope(graph);
            graph.backward(objective(probe));
        }
        for (std::size_t i = 0; i < x_adv.numel(); ++i) {
            x_adv.values()[i] += spec.step_size * sign(probe.grad()[i]);
        }
        project(x_adv, x_nat, spec.epsilon);
        assert_feasible(x_adv, x_nat, spec.epsilon, name);
    }
    return x_adv;
}

inline std::vector<bool> success_flags(Model& model, const Tensor& x_adv, const std::vector<std::size_t>& y) {
    Graph::NoGrad off;
    const auto pred = predict_labels(model.eval_logits(x_adv));
    std::vector<bool> out(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) out[i] = pred[i] != y[i];
    return out;
}

inline void check_input_domain(const Tensor& x) {
    for (double v : x.values()) {
        if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("attack: input pixels must lie in [0,1]");
    }
}

}  // namespace detail

/// Fast Gradient Sign Method: x_adv = clip(x + eps * sign(d/dx CE)).
/// sign(0) = 0, so a vanishing gradient coordinate keeps its pixel.
inline AdversarialBatch fgsm(Model& model, const Tensor& x, const std::vector<std::size_t>& y,
                             const AttackSpec& spec) {
    spec.validate();
    detail::check_input_domain(x);
    detail::ParamFreeze freeze(model);
    AdversarialBatch out;
    out.x_nat = x.clone();
    out.y = y;

    Tensor probe = x.clone();
    probe.set_requires_grad(true);
    Graph graph;
    {
        Graph::Scope scope(graph);
        graph.backward(cross_entropy(model.eval_logits(probe), y));
    }
    out.x_adv = x.clone();
    for (std::size_t i = 0; i < out.x_adv.numel(); ++i) {
        out.x_adv.values()[i] =
            std::clamp(out.x_adv.values()[i] + spec.epsilon * detail::sign(probe.grad()[i]), 0.0, 1.0);
    }
    detail::assert_feasible(out.x_adv, out.x_nat, spec.epsilon, "fgsm");
    out.success = detail::success_flags(model, out.x_adv, y);
    return out;
}

/// Projected gradient descent under the L-infinity ball. loss_kind ce ascends
/// cross-entropy; kl_vs_clean ascends KL(model(x_adv) || model(x)).
inline AdversarialBatch pgd(Model& model, const Tensor& x, const std::vector<std::size_t>& y,
                            const AttackSpec& spec, Rng& rng, AttackLoss loss_kind) {
    spec.validate();
    detail::check_input_domain(x);
    detail::ParamFreeze freeze(model);
    AdversarialBatch out;
    out.x_nat = x.clone();
    out.y = y;

    std::function<Tensor(const Tensor&)> objective;
    std::vector<double> log_p_clean;
    if (loss_kind == AttackLoss::KlVsClean) {
        Graph::NoGrad off;
        log_p_clean = log_softmax_rows(model.eval_logits(x)).values();
        objective = [&model, &log_p_clean](const Tensor& probe) {
            return detail::kl_to_reference(model.eval_logits(probe), log_p_clean);
        };
    } else {
        objective = [&model, &y](const Tensor& probe) { return cross_entropy(model.eval_logits(probe), y); };
    }
    out.x_adv = detail::linf_ascent(objective, out.x_nat, spec, rng, "pgd");
    out.success = detail::success_flags(model, out.x_adv, y);
    return out;
}

inline AdversarialBatch pgd(Model& model, const Tensor& x, const std::vector<std::size_t>& y,
                            const AttackSpec& spec, Rng& rng) {
    return pgd(model, x, y, spec, rng, spec.loss);
}

/// CW under L-infinity projection: ascends the clamped margin
/// min(max_{i != y} z_i - z_y, kappa), so the push stops once the margin
/// reaches kappa.
inline AdversarialBatch cw_linf(Model& model, const Tensor& x, const std::vector<std::size_t>& y,
                                const AttackSpec& spec, Rng& rng) {
    spec.validate();
    if (model.num_classes() < 2) throw std::invalid_argument("cw_linf: need at least 2 classes");
    detail::check_input_domain(x);
    detail::ParamFreeze freeze(model);
    AdversarialBatch out;
    out.x_nat = x.clone();
    out.y = y;
    const double n = static_cast<double>(x.dim(0));
    auto objective = [&](const Tensor& probe) {
        Tensor m = min_with_const(margin_rows(model.eval_logits(probe), y), spec.kappa);
        return affine(sum_all(m), 1.0 / n, 0.0);
    };
    out.x_adv = detail::linf_ascent(objective, out.x_nat, spec, rng, "cw_linf");
    out.success = detail::success_flags(model, out.x_adv, y);
    return out;
}

/// Adaptive attack on AW-Net: the PGD-trades KL objective augmented with the
/// defense's own type loss (against the true 'adversarial' label), which
/// pushes the detector's p_type toward 'clean' while attacking. Rejects
/// non-AW-Net models, which have no type prediction to steer.
inline AdversarialBatch adaptive_attack(Model& model, const Tensor& x, const std::vector<std::size_t>& y,
                                        const AttackSpec& spec, Rng& rng) {
    spec.validate();
    auto* awnet = dynamic_cast<AWNetModel*>(&model);
    if (!awnet) throw std::invalid_argument("adaptive_attack: model is not an AWNetModel");
    detail::check_input_domain(x);
    detail::ParamFreeze freeze(model);
    AdversarialBatch out;
    out.x_nat = x.clone();
    out.y = y;

    std::vector<double> log_p_clean;
    {
        Graph::NoGrad off;
        log_p_clean = log_softmax_rows(awnet->forward(x, NetMode::Eval).logits).values();
    }
    const double n = static_cast<double>(x.dim(0));
    auto objective = [&](const Tensor& probe) {
        ForwardResult res = awnet->forward(probe, NetMode::Eval);
        Tensor kl = detail::kl_to_reference(res.logits, log_p_clean);
        if (spec.lambda == 0.0) return kl;
        // L_type(p_type, y' = adversarial): -log(1 - p_type), batch mean.
        Tensor type_term =
            affine(sum_all(log_guard(affine(res.signals.p_type, -1.0, 1.0))), -spec.lambda / n, 0.0);
        return add(kl, type_term);
    };
    out.x_adv = detail::linf_ascent(objective, out.x_nat, spec, rng, "adaptive");
    out.success = detail::success_flags(model, out.x_adv, y);
    return out;
}

/// Runs the configured attack family.
inline AdversarialBatch run_attack(Model& model, const Tensor& x, const std::vector<std::size_t>& y,
                                   const AttackSpec& spec, Rng& rng) {
    switch (spec.family) {
        case AttackFamily::Fgsm: return fgsm(model, x, y, spec);
        case AttackFamily::PgdSat: return pgd(model, x, y, spec, rng, AttackLoss::Ce);
        case AttackFamily::PgdTrades: return pgd(model, x, y, spec, rng, AttackLoss::KlVsClean);
        case AttackFamily::CwLinf: return cw_linf(model, x, y, spec, rng);
        case AttackFamily::Adaptive: return adaptive_attack(model, x, y, spec, rng);
    }
    throw ConfigError("run_attack: unknown family");
}

/// Transfer-based black-box evaluation: adversarial examples crafted white-box
/// on the surrogate, accuracy measured on the target.
inline EvalReport transfer_eval(Model& surrogate, Model& target, const DatasetHandle& data,
                                const AttackSpec& spec, Rng& rng, std::size_t batch_size = 64) {
    if (surrogate.model_spec().in_channels != target.model_spec().in_channels ||
        surrogate.model_spec().image_size != target.model_spec().image_size) {
        throw std::invalid_argument("transfer_eval: surrogate and target input shapes differ");
    }
    EvalReport rep;
    rep.attack = attack_family_name(spec.family) + "@transfer";
    rep.attacked = true;
    rep.sample_count = data.size();
    std::size_t nat_correct = 0, adv_correct = 0;
    const auto idx = data.all_indices();
    for (std::size_t start = 0; start < idx.size(); start += batch_size) {
        const std::vector<std::size_t> chunk(idx.begin() + start,
                                             idx.begin() + std::min(start + batch_size, idx.size()));
        Tensor xb = data.batch(chunk);
        const auto yb = data.batch_labels(chunk);
        AdversarialBatch ab = run_attack(surrogate, xb, yb, spec, rng);
        Graph::NoGrad off;
        const auto pred_nat = predict_labels(target.eval_logits(xb));
        const auto pred_adv = predict_labels(target.eval_logits(ab.x_adv));
        for (std::size_t i = 0; i < yb.size(); ++i) {
            nat_correct += pred_nat[i] == yb[i];
            adv_correct += pred_adv[i] == yb[i];
        }
    }
    rep.a_nat = static_cast<double>(nat_correct) / static_cast<double>(data.size());
    rep.a_adv = static_cast<double>(adv_correct) / static_cast<double>(data.size());
    rep.a_w = w_robust_acc(rep.a_nat, rep.a_adv, rep.gamma_nat, rep.gamma_adv);
    return rep;
}

}  // namespace awnet
