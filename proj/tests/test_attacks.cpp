#include "awnet/attacks.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "awnet/data.hpp"
#include "awnet/model.hpp"
#include "test_util.hpp"

using namespace awnet;
using testutil::max_rel_err;

namespace {

/// One-feature logistic model: logits [0, w*x_sum] so CE(y=1) = softplus(-w*s).
/// Gives a closed-form FGSM direction.
class LogisticModel final : public Model {
public:
    explicit LogisticModel(double w) : w_(w) {
        spec_.kind = "baseline";
        spec_.num_classes = 2;
        spec_.in_channels = 1;
        spec_.image_size = 2;
    }
    Tensor eval_logits(const Tensor& x) override {
        Tensor flat = reshape(x, {x.dim(0), x.numel() / x.dim(0)});
        Tensor weight({2, flat.dim(1)}, 0.0);
        for (std::size_t j = 0; j < flat.dim(1); ++j) weight.values()[flat.dim(1) + j] = w_;
        Tensor bias({2}, 0.0);
        return linear(flat, weight, bias);
    }
    std::size_t num_classes() const override { return 2; }
    const ModelSpec& model_spec() const override { return spec_; }
    void visit_params(const ParamVisitor&) override {}
    void visit_stats(const StatsVisitor&) override {}
    void visit_trainable(const ParamVisitor&) override {}
    std::vector<std::pair<std::string, Tensor>> conv_kernels() override { return {}; }

private:
    double w_;
    ModelSpec spec_;
};

/// Fixed 3-class linear model on 2 pixels.
class TinyLinearModel final : public Model {
public:
    TinyLinearModel(std::vector<double> w, std::vector<double> b) : w_(std::move(w)), b_(std::move(b)) {
        spec_.kind = "baseline";
        spec_.num_classes = b_.size();
        spec_.in_channels = 1;
        spec_.image_size = 1;
    }
    Tensor eval_logits(const Tensor& x) override {
        Tensor flat = reshape(x, {x.dim(0), x.numel() / x.dim(0)});
        return linear(flat, Tensor::from({b_.size(), flat.dim(1)}, std::vector<double>(w_)),
                      Tensor::from({b_.size()}, std::vector<double>(b_)));
    }
    std::size_t num_classes() const override { return b_.size(); }
    const ModelSpec& model_spec() const override { return spec_; }
    void visit_params(const ParamVisitor&) override {}
    void visit_stats(const StatsVisitor&) override {}
    void visit_trainable(const ParamVisitor&) override {}
    std::vector<std::pair<std::string, Tensor>> conv_kernels() override { return {}; }

private:
    std::vector<double> w_, b_;
    ModelSpec spec_;
};

Tensor image_batch(Rng& rng, std::size_t n, std::size_t c, std::size_t s, double lo = 0.2, double hi = 0.8) {
    Tensor x({n, c, s, s});
    for (double& v : x.values()) v = rng.uniform(lo, hi);
    return x;
}

double max_delta(const AdversarialBatch& ab) {
    double m = 0.0;
    for (std::size_t i = 0; i < ab.x_adv.numel(); ++i) {
        m = std::max(m, std::abs(ab.x_adv.values()[i] - ab.x_nat.values()[i]));
    }
    return m;
}

void expect_feasible(const AdversarialBatch& ab, double eps) {
    EXPECT_LE(max_delta(ab), eps + 1e-12);
    for (double v : ab.x_adv.values()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

AWNetModel frozen_toy_awnet(std::uint64_t seed) {
    Rng rng(seed);
    AWNetModel m = AWNetModel::make(ModelSpec::toy(4, 8), rng);
    for (auto& head : m.detector.signal_heads)
        for (double& v : head.weight.values()) v = rng.normal(0.0, 0.1);
    // give BN branches sane, distinct stats
    Tensor warm = image_batch(rng, 8, 3, 8, 0.0, 1.0);
    m.forward(warm, NetMode::TrainClean);
    m.forward(warm, NetMode::TrainAdv);
    return m;
}

}  // namespace

TEST(Fgsm, ClosedFormOnLogisticModel) {
    // L(x) = softplus(-w * sum(x)) for label 1, so dL/dx = -w * sigmoid(-w s)
    // and sign(dL/dx) = -sign(w): FGSM steps every pixel by -eps * sign(w).
    for (double w : {2.0, -3.0}) {
        LogisticModel model(w);
        Rng rng(1);
        Tensor x = image_batch(rng, 3, 1, 2);
        AttackSpec spec = AttackSpec::fgsm(0.07);
        AdversarialBatch ab = fgsm(model, x, {1, 1, 1}, spec);
        for (std::size_t i = 0; i < x.numel(); ++i) {
            const double want = std::clamp(x.values()[i] - 0.07 * (w > 0 ? 1.0 : -1.0), 0.0, 1.0);
            EXPECT_NEAR(ab.x_adv.values()[i], want, 1e-12);
        }
    }
}

TEST(Fgsm, ZeroBudgetIsIdentity) {
    LogisticModel model(1.5);
    Rng rng(2);
    Tensor x = image_batch(rng, 2, 1, 2);
    AdversarialBatch ab = fgsm(model, x, {1, 1}, AttackSpec::fgsm(0.0));
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(ab.x_adv.values()[i], x.values()[i]);
}

TEST(Fgsm, PicksLossMaximizingVertexOnLinearModel) {
    // 2-pixel, 2-class linear model: brute force over the 4 sign patterns.
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> w{rng.normal(), rng.normal(), rng.normal(), rng.normal()};
        std::vector<double> b{rng.normal(), rng.normal()};
        TinyLinearModel model(w, b);
        Tensor x({1, 1, 1, 2});
        x.values() = {rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7)};
        const std::vector<std::size_t> y{rng.index(2)};
        const double eps = 0.05;
        AdversarialBatch ab = fgsm(model, x, y, AttackSpec::fgsm(eps));
        Graph::NoGrad off;
        const double got = cross_entropy(model.eval_logits(ab.x_adv), y).scalar_value();
        double best = -1e300;
        for (int sx : {-1, 1}) {
            for (int sy : {-1, 1}) {
                Tensor v = x.clone();
                v.values()[0] += eps * sx;
                v.values()[1] += eps * sy;
                best = std::max(best, cross_entropy(model.eval_logits(v), y).scalar_value());
            }
        }
        EXPECT_NEAR(got, best, 1e-9);
    }
}

TEST(Pgd, OneStepNoStartEqualsFgsm) {
    AWNetModel m = frozen_toy_awnet(4);
    Rng rng(5);
    Tensor x = image_batch(rng, 4, 3, 8);
    std::vector<std::size_t> y{0, 1, 2, 3};
    const double eps = 8.0 / 255.0;
    AttackSpec one_step;
    one_step.family = AttackFamily::PgdSat;
    one_step.epsilon = eps;
    one_step.step_size = eps;
    one_step.iters = 1;
    one_step.random_start = 0.0;
    Rng arng(6);
    AdversarialBatch via_pgd = pgd(m, x, y, one_step, arng, AttackLoss::Ce);
    AdversarialBatch via_fgsm = fgsm(m, x, y, AttackSpec::fgsm(eps));
    for (std::size_t i = 0; i < x.numel(); ++i) {
        EXPECT_EQ(via_pgd.x_adv.values()[i], via_fgsm.x_adv.values()[i]);  // exact
    }
}

TEST(Pgd, FeasibilityAndParameterIsolation) {
    AWNetModel m = frozen_toy_awnet(7);
    Rng rng(8);
    Tensor x = image_batch(rng, 4, 3, 8, 0.0, 1.0);
    std::vector<std::size_t> y{0, 1, 2, 3};
    std::vector<double> before;
    m.visit_params([&](const std::string&, Tensor& t) {
        before.insert(before.end(), t.values().begin(), t.values().end());
    });
    for (auto spec : {AttackSpec::pgd_sat(8.0 / 255.0, 10), AttackSpec::pgd_trades(8.0 / 255.0, 10),
                      AttackSpec::cw_linf(8.0 / 255.0, 10), AttackSpec::adaptive(8.0 / 255.0, 10)}) {
        Rng arng(9);
        AdversarialBatch ab = run_attack(m, x, y, spec, arng);
        expect_feasible(ab, spec.epsilon);
    }
    std::vector<double> after;
    m.visit_params([&](const std::string&, Tensor& t) {
        after.insert(after.end(), t.values().begin(), t.values().end());
    });
    ASSERT_EQ(before.size(), after.size());
    for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i], after[i]);  // bit-compare
    // requires_grad flags restored for the trainable set
    bool any_trainable_rg = false;
    m.visit_trainable([&](const std::string&, Tensor& t) { any_trainable_rg |= t.requires_grad(); });
    EXPECT_TRUE(any_trainable_rg);
}

TEST(Pgd, ZeroStepWarnsAndReturnsProjectedStart) {
    AWNetModel m = frozen_toy_awnet(10);
    Rng rng(11);
    Tensor x = image_batch(rng, 2, 3, 8);
    AttackSpec spec;
    spec.epsilon = 0.03;
    spec.step_size = 0.0;
    spec.iters = 5;
    spec.random_start = 0.05;  // larger than eps: start must be projected back
    Rng arng(12);
    AdversarialBatch ab = pgd(m, x, {0, 1}, spec, arng, AttackLoss::Ce);
    expect_feasible(ab, spec.epsilon);
}

TEST(Pgd, MultiStepBeatsFgsmOnMostSamples) {
    AWNetModel m = frozen_toy_awnet(13);
    Rng rng(14);
    const double eps = 8.0 / 255.0;
    std::size_t wins = 0, total = 0;
    for (int rep = 0; rep < 4; ++rep) {
        Tensor x = image_batch(rng, 8, 3, 8, 0.0, 1.0);
        std::vector<std::size_t> y;
        for (int i = 0; i < 8; ++i) y.push_back(rng.index(4));
        AdversarialBatch a1 = fgsm(m, x, y, AttackSpec::fgsm(eps));
        AttackSpec p20 = AttackSpec::pgd_sat(eps, 20);
        p20.random_start = 0.0;
        Rng arng(15);
        AdversarialBatch a2 = pgd(m, x, y, p20, arng, AttackLoss::Ce);
        Graph::NoGrad off;
        for (std::size_t i = 0; i < y.size(); ++i) {
            Tensor xi1({1, 3, 8, 8}), xi2({1, 3, 8, 8});
            std::copy_n(a1.x_adv.values().begin() + static_cast<std::ptrdiff_t>(i * 192), 192,
                        xi1.values().begin());
            std::copy_n(a2.x_adv.values().begin() + static_cast<std::ptrdiff_t>(i * 192), 192,
                        xi2.values().begin());
            const double l1 = cross_entropy(m.eval_logits(xi1), {y[i]}).scalar_value();
            const double l2 = cross_entropy(m.eval_logits(xi2), {y[i]}).scalar_value();
            wins += l2 >= l1 - 1e-12;
            ++total;
        }
    }
    EXPECT_GE(static_cast<double>(wins) / static_cast<double>(total), 0.95);
}

TEST(CwLinf, GridSearchOracleAgreesOnVerdicts) {
    Rng rng(16);
    int checked = 0;
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<double> w, b;
        for (int i = 0; i < 6; ++i) w.push_back(rng.normal(0.0, 2.0));
        for (int i = 0; i < 3; ++i) b.push_back(rng.normal(0.0, 0.2));
        TinyLinearModel model(w, b);
        Tensor x({1, 1, 1, 2});
        x.values() = {rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7)};
        const auto clean_pred = predict_labels(model.eval_logits(x));
        const std::vector<std::size_t> y{clean_pred[0]};  // attack the predicted class
        const double eps = 0.1;
        AttackSpec spec = AttackSpec::cw_linf(eps, 40);
        spec.step_size = 0.01;
        Rng arng(17);
        AdversarialBatch ab = cw_linf(model, x, y, spec, arng);

        // exhaustive 41x41 grid over the perturbation box
        bool grid_success = false;
        for (int i = 0; i <= 40 && !grid_success; ++i) {
            for (int j = 0; j <= 40 && !grid_success; ++j) {
                Tensor v = x.clone();
                v.values()[0] = std::clamp(v.values()[0] - eps + 2 * eps * i / 40.0, 0.0, 1.0);
                v.values()[1] = std::clamp(v.values()[1] - eps + 2 * eps * j / 40.0, 0.0, 1.0);
                grid_success = predict_labels(model.eval_logits(v))[0] != y[0];
            }
        }
        EXPECT_EQ(ab.success[0], grid_success);
        ++checked;
    }
    EXPECT_EQ(checked, 30);
}

TEST(CwLinf, MisclassifiedInputFlagsSuccessImmediately) {
    Rng rng(18);
    std::vector<double> w{1.0, 0.0, 0.0, 1.0, -1.0, -1.0};
    std::vector<double> b{0.0, 0.0, 0.0};
    TinyLinearModel model(w, b);
    Tensor x({1, 1, 1, 2});
    x.values() = {0.7, 0.3};  // class 0 wins; declare the label to be 2
    AttackSpec spec = AttackSpec::cw_linf(0.02, 5);
    Rng arng(19);
    AdversarialBatch ab = cw_linf(model, x, {2}, spec, arng);
    EXPECT_TRUE(ab.success[0]);
    Graph::NoGrad off;
    EXPECT_GE(margin_rows(model.eval_logits(ab.x_adv), {2}).values()[0], 0.0);
}

TEST(CwLinf, HugeKappaMatchesPlainMarginAscent) {
    AWNetModel m = frozen_toy_awnet(20);
    Rng rng(21);
    Tensor x = image_batch(rng, 2, 3, 8);
    std::vector<std::size_t> y{0, 1};
    AttackSpec big = AttackSpec::cw_linf(0.03, 10, 1e18);
    Rng r1(22), r2(22);
    AdversarialBatch ab_big = cw_linf(m, x, y, big, r1);
    // explicit unclamped margin ascent: the kappa -> infinity limit
    detail::ParamFreeze freeze(m);
    auto plain_objective = [&](const Tensor& probe) {
        return affine(sum_all(margin_rows(m.eval_logits(probe), y)), 0.5, 0.0);
    };
    Tensor plain = detail::linf_ascent(plain_objective, x, big, r2, "plain");
    for (std::size_t i = 0; i < x.numel(); ++i) {
        EXPECT_EQ(ab_big.x_adv.values()[i], plain.values()[i]);
    }
}

TEST(CwLinf, SingleClassRejected) {
    TinyLinearModel model({1.0, 1.0}, {0.0});
    Tensor x({1, 1, 1, 2}, 0.5);
    Rng rng(23);
    EXPECT_THROW(cw_linf(model, x, {0}, AttackSpec::cw_linf(0.1, 5), rng), std::invalid_argument);
}

TEST(Adaptive, LambdaZeroReproducesPgdTrades) {
    AWNetModel m = frozen_toy_awnet(24);
    Rng rng(25);
    Tensor x = image_batch(rng, 3, 3, 8);
    std::vector<std::size_t> y{0, 1, 2};
    AttackSpec spec = AttackSpec::adaptive(8.0 / 255.0, 10, 0.0);
    Rng r1(26), r2(26);
    AdversarialBatch a = adaptive_attack(m, x, y, spec, r1);
    AdversarialBatch b = pgd(m, x, y, AttackSpec::pgd_trades(8.0 / 255.0, 10), r2, AttackLoss::KlVsClean);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(a.x_adv.values()[i], b.x_adv.values()[i]);
}

TEST(Adaptive, RejectsNonAwnetModel) {
    TinyLinearModel model({1.0, 0.0, 0.0, 1.0}, {0.0, 0.0});
    Tensor x({1, 1, 1, 2}, 0.5);
    Rng rng(27);
    EXPECT_THROW(adaptive_attack(model, x, {0}, AttackSpec::adaptive(0.1), rng), std::invalid_argument);
}

TEST(Transfer, SelfTransferEqualsWhiteBox) {
    AWNetModel m = frozen_toy_awnet(28);
    DatasetHandle data = make_synthetic(4, 8, 8, 29);
    AttackSpec spec = AttackSpec::pgd_sat(8.0 / 255.0, 5);
    spec.random_start = 0.0;  // deterministic generation regardless of rng state
    Rng r1(30), r2(31);
    EvalReport transfer = transfer_eval(m, m, data, spec, r1);

    // white-box robust accuracy measured directly
    std::size_t adv_correct = 0;
    const auto idx = data.all_indices();
    Tensor xb = data.batch(idx);
    const auto yb = data.batch_labels(idx);
    AdversarialBatch ab = pgd(m, xb, yb, spec, r2, AttackLoss::Ce);
    Graph::NoGrad off;
    const auto pred = predict_labels(m.eval_logits(ab.x_adv));
    for (std::size_t i = 0; i < yb.size(); ++i) adv_correct += pred[i] == yb[i];
    EXPECT_DOUBLE_EQ(transfer.a_adv, static_cast<double>(adv_correct) / static_cast<double>(yb.size()));
}

TEST(Transfer, ZeroEpsilonGivesCleanAccuracy) {
    AWNetModel m = frozen_toy_awnet(32);
    DatasetHandle data = make_synthetic(4, 6, 8, 33);
    AttackSpec spec = AttackSpec::pgd_sat(0.0, 3);
    Rng rng(34);
    EvalReport rep = transfer_eval(m, m, data, spec, rng);
    EXPECT_DOUBLE_EQ(rep.a_adv, rep.a_nat);
}
