#include "awnet/model.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "awnet/rng.hpp"
#include "test_util.hpp"

using namespace awnet;
using testutil::max_rel_err;
using testutil::random_tensor;

namespace {

Tensor random_image_batch(Rng& rng, std::size_t n, std::size_t c, std::size_t s) {
    Tensor x({n, c, s, s});
    for (double& v : x.values()) v = rng.uniform();
    return x;
}

AWNetModel toy_model(std::uint64_t seed, std::size_t classes = 10, std::size_t img = 8) {
    Rng rng(seed);
    return AWNetModel::make(ModelSpec::toy(classes, img), rng);
}

/// Straight-line reference for one block: explicit loops, no graph reuse.
/// Written independently of block_forward from the block equations.
Tensor reference_block_eval(const Tensor& psi_in, AWNetBlock& blk, const Tensor& om1, const Tensor& om2,
                            const std::vector<double>& p) {
    auto conv_ref = [](const Tensor& x, const Conv2d& c) {
        const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
        const std::size_t cout = c.kernel.dim(0), k = c.kernel.dim(2);
        const std::size_t pad = c.padding;
        const std::size_t oh = (h + 2 * pad - k) + 1, ow = (w + 2 * pad - k) + 1;
        Tensor out({n, cout, oh, ow});
        for (std::size_t in = 0; in < n; ++in)
            for (std::size_t oc = 0; oc < cout; ++oc)
                for (std::size_t y = 0; y < oh; ++y)
                    for (std::size_t xo = 0; xo < ow; ++xo) {
                        double acc = 0.0;
                        for (std::size_t ic = 0; ic < cin; ++ic)
                            for (std::size_t r = 0; r < k; ++r)
                                for (std::size_t cc = 0; cc < k; ++cc) {
                                    const long iy = static_cast<long>(y + r) - static_cast<long>(pad);
                                    const long ix = static_cast<long>(xo + cc) - static_cast<long>(pad);
                                    if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) ||
                                        ix >= static_cast<long>(w))
                                        continue;
                                    acc += x.values()[((in * cin + ic) * h + iy) * w + ix] *
                                           c.kernel.values()[((oc * cin + ic) * k + r) * k + cc];
                                }
                        out.values()[((in * cout + oc) * oh + y) * ow + xo] = acc;
                    }
        return out;
    };
    auto bn_eval_ref = [](const Tensor& x, const BatchNorm& bn) {
        Tensor out(x.shape());
        const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t j = 0; j < hw; ++j) {
                    const std::size_t idx = (i * c + ch) * hw + j;
                    out.values()[idx] = bn.gamma.values()[ch] * (x.values()[idx] - bn.stats.mean[ch]) /
                                            std::sqrt(bn.stats.var[ch] + bn.stats.eps) +
                                        bn.beta.values()[ch];
                }
        return out;
    };
    auto mix_ref = [&](const Tensor& x, const MixBN& bn) {
        Tensor a = bn_eval_ref(x, bn.adv), b = bn_eval_ref(x, bn.nat);
        Tensor out(x.shape());
        const std::size_t row = x.numel() / x.dim(0);
        for (std::size_t i = 0; i < x.dim(0); ++i)
            for (std::size_t j = 0; j < row; ++j) {
                out.values()[i * row + j] =
                    (1.0 - p[i]) * a.values()[i * row + j] + p[i] * b.values()[i * row + j];
            }
        return out;
    };
    auto modulate_ref = [](Tensor& t, const Tensor& om) {
        const std::size_t n = t.dim(0), c = t.dim(1), hw = t.dim(2) * t.dim(3);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t j = 0; j < hw; ++j) t.values()[(i * c + ch) * hw + j] *= om.values()[i * c + ch];
    };
    auto bias_ref = [](Tensor& t, const Tensor& b) {
        const std::size_t n = t.dim(0), c = t.dim(1), hw = t.dim(2) * t.dim(3);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t j = 0; j < hw; ++j) t.values()[(i * c + ch) * hw + j] += b.values()[ch];
    };
    auto relu_ref = [](Tensor& t) {
        for (double& v : t.values()) v = v > 0 ? v : 0;
    };

    Tensor psi = psi_in;
    if (blk.downsample) {
        const std::size_t n = psi.dim(0), c = psi.dim(1), h = psi.dim(2), w = psi.dim(3);
        Tensor pooled({n, c, h / 2, w / 2});
        for (std::size_t pidx = 0; pidx < n * c; ++pidx)
            for (std::size_t y = 0; y < h / 2; ++y)
                for (std::size_t xo = 0; xo < w / 2; ++xo) {
                    const double* xp = psi.data() + pidx * h * w;
                    pooled.values()[pidx * (h / 2) * (w / 2) + y * (w / 2) + xo] =
                        (xp[2 * y * w + 2 * xo] + xp[2 * y * w + 2 * xo + 1] + xp[(2 * y + 1) * w + 2 * xo] +
                         xp[(2 * y + 1) * w + 2 * xo + 1]) /
                        4.0;
                }
        psi = pooled;
    }
    Tensor u = conv_ref(psi, blk.conv1);
    modulate_ref(u, om1);
    bias_ref(u, blk.conv1.bias);
    u = mix_ref(u, blk.bn1);
    relu_ref(u);
    Tensor v = conv_ref(u, blk.conv2);
    modulate_ref(v, om2);
    bias_ref(v, blk.conv2.bias);
    v = mix_ref(v, blk.bn2);
    Tensor sc = psi;
    if (blk.shortcut) {
        sc = conv_ref(psi, *blk.shortcut);
        bias_ref(sc, blk.shortcut->bias);
        sc = mix_ref(sc, *blk.shortcut_bn);
    }
    for (std::size_t i = 0; i < v.numel(); ++i) {
        v.values()[i] += sc.values()[i];
    }
    relu_ref(v);
    return v;
}

void randomize_stats(RunningStats& st, Rng& rng) {
    for (double& m : st.mean) m = 0.3 * rng.normal();
    for (double& v : st.var) v = 0.5 + rng.uniform();
}

}  // namespace

TEST(Detect, ZeroHeadsGiveIdentitySignals) {
    AWNetModel m = toy_model(1);
    Rng rng(2);
    Tensor x = random_image_batch(rng, 3, 3, 8);
    for (double beta : {0.5, 1.0, 4.0}) {
        m.detector.beta = beta;
        RegulationSignals s = detect(x, m.detector);
        ASSERT_EQ(s.omega.size(), 2 * m.blocks.size());
        for (const auto& om : s.omega) {
            for (double v : om.values()) EXPECT_DOUBLE_EQ(v, 1.0);  // tanh(0) = 0, 1^beta = 1
        }
        for (double v : s.p_type.values()) EXPECT_DOUBLE_EQ(v, 0.5);  // equal type logits
    }
}

TEST(Detect, MatchesScalarFormulaOracle) {
    AWNetModel m = toy_model(3);
    m.detector.beta = 4.0;
    // Rig one head so that every logit is exactly 0.5: zero weights, bias 0.5.
    for (double& v : m.detector.signal_heads[0].bias.values()) v = 0.5;
    Rng rng(4);
    Tensor x = random_image_batch(rng, 2, 3, 8);
    RegulationSignals s = detect(x, m.detector);
    const double want = std::pow(std::tanh(0.5) + 1.0, 4.0);  // high-precision scalar evaluation
    for (double v : s.omega[0].values()) EXPECT_NEAR(v, want, 1e-10);
}

TEST(Detect, OmegaRangeProperty) {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        AWNetModel m = toy_model(100 + trial);
        const double beta = rng.uniform(0.5, 5.0);
        m.detector.beta = beta;
        for (auto& head : m.detector.signal_heads) {
            for (double& v : head.weight.values()) v = rng.normal(0.0, 2.0);
            for (double& v : head.bias.values()) v = rng.normal(0.0, 2.0);
        }
        Tensor x = random_image_batch(rng, 4, 3, 8);
        RegulationSignals s = detect(x, m.detector);
        const double hi = std::pow(2.0, beta);
        for (const auto& om : s.omega) {
            for (double v : om.values()) {
                EXPECT_GT(v, 0.0);
                EXPECT_LT(v, hi);
            }
        }
        double psum = 0.0;
        for (double v : s.p_type.values()) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
            psum = v;
        }
        (void)psum;
    }
}

TEST(Detect, HeadArityMismatchRejected) {
    AWNetModel m = toy_model(6);
    m.detector.signal_heads.pop_back();
    Rng rng(7);
    Tensor x = random_image_batch(rng, 1, 3, 8);
    EXPECT_THROW(m.forward(x, NetMode::Eval), std::invalid_argument);
}

TEST(Modulate, IdentityAndAnnihilation) {
    Rng rng(8);
    Conv2d c = Conv2d::make(4, 3, 3, 1, 1, rng);
    for (double& v : c.kernel.values()) v = rng.normal();
    Tensor ones({4}, 1.0);
    Conv2d same = modulate(c, ones);
    for (std::size_t i = 0; i < c.kernel.numel(); ++i) {
        EXPECT_DOUBLE_EQ(same.kernel.values()[i], c.kernel.values()[i]);
    }
    Tensor zeros({4}, 0.0);
    Conv2d dead = modulate(c, zeros);
    Tensor x = random_image_batch(rng, 2, 3, 6);
    Tensor out = conv2d(x, dead.kernel, 1, 1);  // pre-bias output vanishes
    for (double v : out.values()) EXPECT_DOUBLE_EQ(v, 0.0);
    EXPECT_THROW(modulate(c, Tensor({3}, 1.0)), std::invalid_argument);
}

TEST(Modulate, FilterScalingEqualsChannelScaling) {
    Rng rng(9);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t cout = 2 + rng.index(4), cin = 1 + rng.index(3);
        Conv2d c = Conv2d::make(cout, cin, 3, 1, 1, rng);
        for (double& v : c.kernel.values()) v = rng.normal();
        Tensor omega({cout});
        for (double& v : omega.values()) v = rng.uniform(0.0, 2.0);
        Tensor x = random_tensor(rng, {2, cin, 6, 6});

        Tensor via_filters = conv2d(x, modulate(c, omega).kernel, 1, 1);
        Tensor raw = conv2d(x, c.kernel, 1, 1);
        Tensor omega_batch({2, cout});
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < cout; ++j) omega_batch.values()[i * cout + j] = omega.values()[j];
        Tensor via_channels = scale_channels(raw, omega_batch);
        EXPECT_LE(max_rel_err(via_filters.values(), via_channels.values()), 1e-10);
    }
}

TEST(MixBN, BlendEndpointsAndTiedBranches) {
    Rng rng(10);
    MixBN bn = MixBN::make(3);
    for (double& v : bn.adv.gamma.values()) v = rng.uniform(0.5, 1.5);
    for (double& v : bn.adv.beta.values()) v = rng.normal();
    randomize_stats(bn.adv.stats, rng);
    for (double& v : bn.nat.gamma.values()) v = rng.uniform(0.5, 1.5);
    for (double& v : bn.nat.beta.values()) v = rng.normal();
    randomize_stats(bn.nat.stats, rng);

    Tensor x = random_tensor(rng, {2, 3, 4, 4});
    Tensor p1({2}, 1.0), p0({2}, 0.0);
    Tensor nat_only = mixbn_apply(x, bn, NetMode::Eval, p1);
    Tensor want_nat = bn.nat.forward(x, BNMode::Eval);
    EXPECT_LE(max_rel_err(nat_only.values(), want_nat.values()), 1e-12);

    Tensor adv_only = mixbn_apply(x, bn, NetMode::Eval, p0);
    Tensor want_adv = bn.adv.forward(x, BNMode::Eval);
    EXPECT_LE(max_rel_err(adv_only.values(), want_adv.values()), 1e-12);

    // identical branches: blend is independent of p
    bn.tie_branches();
    Tensor phalf({2}, 0.37);
    Tensor blended = mixbn_apply(x, bn, NetMode::Eval, phalf);
    Tensor single = bn.nat.forward(x, BNMode::Eval);
    EXPECT_LE(max_rel_err(blended.values(), single.values()), 1e-12);
}

TEST(MixBN, BlendStaysInsideBranchEnvelope) {
    Rng rng(11);
    MixBN bn = MixBN::make(2);
    randomize_stats(bn.adv.stats, rng);
    randomize_stats(bn.nat.stats, rng);
    for (double& v : bn.adv.gamma.values()) v = rng.uniform(0.5, 2.0);
    for (double& v : bn.nat.gamma.values()) v = rng.uniform(0.5, 2.0);
    Tensor x = random_tensor(rng, {3, 2, 4, 4});
    Tensor a = bn.adv.forward(x, BNMode::Eval);
    Tensor b = bn.nat.forward(x, BNMode::Eval);
    for (double pv : {0.0, 0.21, 0.5, 0.83, 1.0}) {
        Tensor p({3}, pv);
        Tensor out = mixbn_apply(x, bn, NetMode::Eval, p);
        for (std::size_t i = 0; i < out.numel(); ++i) {
            const double lo = std::min(a.values()[i], b.values()[i]) - 1e-12;
            const double hi = std::max(a.values()[i], b.values()[i]) + 1e-12;
            EXPECT_GE(out.values()[i], lo);
            EXPECT_LE(out.values()[i], hi);
        }
    }
}

TEST(MixBN, RoutingAndStatIsolation) {
    Rng rng(12);
    MixBN bn = MixBN::make(2);
    Tensor x = random_tensor(rng, {4, 2, 3, 3});
    const auto adv_before = bn.adv.stats.mean;
    Tensor out = mixbn_apply(x, bn, NetMode::TrainClean, std::nullopt);
    EXPECT_EQ(bn.adv.stats.mean, adv_before);        // clean routing leaves the adv branch alone
    EXPECT_NE(bn.nat.stats.mean, std::vector<double>(2, 0.0));
    const auto nat_after = bn.nat.stats.mean;
    mixbn_apply(x, bn, NetMode::TrainAdv, std::nullopt);
    EXPECT_EQ(bn.nat.stats.mean, nat_after);         // adv routing leaves the clean branch alone
    EXPECT_NE(bn.adv.stats.mean, adv_before);

    // p_type contract per mode
    Tensor p({4}, 0.5);
    EXPECT_THROW(mixbn_apply(x, bn, NetMode::TrainClean, p), std::invalid_argument);
    EXPECT_THROW(mixbn_apply(x, bn, NetMode::Eval, std::nullopt), std::invalid_argument);
}

TEST(BlockForward, ReducesToStaticBlock) {
    Rng rng(13);
    AWNetBlock blk = AWNetBlock::make(3, 3, false, rng);
    for (double& v : blk.conv1.bias.values()) v = rng.normal(0.0, 0.1);
    blk.bn1.tie_branches();
    blk.bn2.tie_branches();
    Tensor x = random_tensor(rng, {2, 3, 6, 6});
    Tensor om({2, 3}, 1.0);
    Tensor p({2}, 0.42);
    ForwardOpts opts;
    Tensor dynamic_out = block_forward(x, blk, om, om, NetMode::Eval, p, opts);

    // plain static residual block with the same weights
    Tensor u = relu(blk.bn1.nat.forward(conv_forward(blk.conv1, x), BNMode::Eval));
    Tensor v = blk.bn2.nat.forward(conv_forward(blk.conv2, u), BNMode::Eval);
    Tensor want = relu(add(v, x));
    EXPECT_LE(max_rel_err(dynamic_out.values(), want.values()), 1e-10);
}

TEST(BlockForward, ZeroInputZeroBiasGivesZero) {
    Rng rng(14);
    AWNetBlock blk = AWNetBlock::make(3, 3, false, rng);  // identity shortcut, biases start at zero
    for (auto* bn : {&blk.bn1, &blk.bn2}) {
        bn->adv.beta.values().assign(3, 0.0);
        bn->nat.beta.values().assign(3, 0.0);
    }
    Tensor x({2, 3, 4, 4}, 0.0);
    Tensor om({2, 3}, 1.3);
    Tensor p({2}, 0.5);
    ForwardOpts opts;
    Tensor out = block_forward(x, blk, om, om, NetMode::Eval, p, opts);
    for (double v : out.values()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(BlockForward, MatchesStraightLineReference) {
    Rng rng(15);
    for (int trial = 0; trial < 10; ++trial) {
        const bool down = trial % 2 == 1;
        const std::size_t cin = 2 + rng.index(3);
        const std::size_t cout = down ? cin + 2 : cin;
        AWNetBlock blk = AWNetBlock::make(cin, cout, down, rng);
        for (double& v : blk.conv1.bias.values()) v = rng.normal(0.0, 0.2);
        for (double& v : blk.conv2.bias.values()) v = rng.normal(0.0, 0.2);
        for (auto* bn : {&blk.bn1, &blk.bn2}) {
            randomize_stats(bn->adv.stats, rng);
            randomize_stats(bn->nat.stats, rng);
            for (double& v : bn->adv.gamma.values()) v = rng.uniform(0.5, 1.5);
            for (double& v : bn->nat.gamma.values()) v = rng.uniform(0.5, 1.5);
            for (double& v : bn->adv.beta.values()) v = rng.normal(0.0, 0.3);
            for (double& v : bn->nat.beta.values()) v = rng.normal(0.0, 0.3);
        }
        if (blk.shortcut_bn) {
            randomize_stats(blk.shortcut_bn->adv.stats, rng);
            randomize_stats(blk.shortcut_bn->nat.stats, rng);
        }
        Tensor x = random_tensor(rng, {2, cin, 8, 8});
        Tensor om1({2, cout}), om2({2, cout});
        for (double& v : om1.values()) v = rng.uniform(0.2, 1.8);
        for (double& v : om2.values()) v = rng.uniform(0.2, 1.8);
        std::vector<double> p{rng.uniform(), rng.uniform()};
        Tensor pt = Tensor::from({2}, std::vector<double>(p));
        ForwardOpts opts;
        Tensor got = block_forward(x, blk, om1, om2, NetMode::Eval, pt, opts);
        Tensor want = reference_block_eval(x, blk, om1, om2, p);
        ASSERT_EQ(got.shape(), want.shape());
        EXPECT_LE(max_rel_err(got.values(), want.values()), 1e-8);
    }
}

TEST(Forward, MechanismOffMatchesBaseline) {
    Rng rng(16);
    AWNetModel m = toy_model(17);
    // populate running stats with a few train-mode passes, then tie branches
    for (int i = 0; i < 3; ++i) {
        Tensor xb = random_image_batch(rng, 4, 3, 8);
        m.forward(xb, NetMode::TrainClean);
        m.forward(xb, NetMode::TrainAdv);
    }
    m.stem_bn.stats.mean[0] += 0.1;  // make stats non-trivial asymmetric
    for (auto& blk : m.blocks) {
        blk.bn1.tie_branches();
        blk.bn2.tie_branches();
        if (blk.shortcut_bn) blk.shortcut_bn->tie_branches();
    }
    BaselineNet twin = baseline_twin_of(m);
    Tensor x = random_image_batch(rng, 8, 3, 8);
    Tensor got = m.forward(x, NetMode::Eval).logits;
    Tensor want = twin.forward(x, NetMode::Eval);
    ASSERT_EQ(got.shape(), want.shape());
    EXPECT_LE(max_rel_err(got.values(), want.values()), 1e-10);
}

TEST(Forward, LogitsShapeAndFinite) {
    AWNetModel m = toy_model(18);
    Rng rng(19);
    Tensor x = random_image_batch(rng, 5, 3, 8);
    ForwardResult res = m.forward(x, NetMode::Eval);
    EXPECT_EQ(res.logits.shape(), (Shape{5, 10}));
    EXPECT_TRUE(res.logits.all_finite());
}

TEST(Forward, PTypeSweepIsBounded) {
    AWNetModel m = toy_model(20);
    Rng rng(21);
    // non-trivial detector and BN state
    for (auto& head : m.detector.signal_heads)
        for (double& v : head.weight.values()) v = rng.normal(0.0, 0.3);
    for (int i = 0; i < 2; ++i) {
        m.forward(random_image_batch(rng, 4, 3, 8), NetMode::TrainClean);
        m.forward(random_image_batch(rng, 4, 3, 8), NetMode::TrainAdv);
    }
    Tensor x = random_image_batch(rng, 3, 3, 8);
    std::vector<Tensor> sweep;
    for (double pv : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        ForwardOpts opts;
        opts.p_override = Tensor({3}, pv);
        sweep.push_back(m.forward(x, NetMode::Eval, opts).logits);
    }
    // endpoints bound the spread; intermediate logits stay within a modest
    // envelope of the endpoint range (continuity in p_type)
    for (std::size_t i = 0; i < sweep.front().numel(); ++i) {
        const double lo = std::min(sweep.front().values()[i], sweep.back().values()[i]);
        const double hi = std::max(sweep.front().values()[i], sweep.back().values()[i]);
        const double span = hi - lo + 1e-6;
        for (const auto& t : sweep) {
            EXPECT_GE(t.values()[i], lo - 5.0 * span);
            EXPECT_LE(t.values()[i], hi + 5.0 * span);
        }
    }
    // small detector perturbation produces a small logit change
    ForwardOpts base_opts;
    Tensor base = m.forward(x, NetMode::Eval, base_opts).logits;
    for (double& v : m.detector.type_head.bias.values()) v += 1e-6;
    Tensor nudged = m.forward(x, NetMode::Eval, base_opts).logits;
    for (std::size_t i = 0; i < base.numel(); ++i) {
        EXPECT_NEAR(base.values()[i], nudged.values()[i], 1e-3);
    }
}

TEST(Forward, DeterministicConstruction) {
    AWNetModel a = toy_model(33), b = toy_model(33);
    Rng rng(34);
    Tensor x = random_image_batch(rng, 2, 3, 8);
    Tensor la = a.forward(x, NetMode::Eval).logits;
    Tensor lb = b.forward(x, NetMode::Eval).logits;
    for (std::size_t i = 0; i < la.numel(); ++i) EXPECT_EQ(la.values()[i], lb.values()[i]);
}

TEST(Forward, FrozenExtractorGetsNoGradient) {
    AWNetModel m = toy_model(22);
    m.detector.freeze_extractor();
    Rng rng(23);
    Tensor x = random_image_batch(rng, 4, 3, 8);
    const auto before = m.detector.extractor[0].kernel.values();
    Graph g;
    {
        Graph::Scope scope(g);
        ForwardResult res = m.forward(x, NetMode::TrainAdv);
        g.backward(cross_entropy(res.logits, {1, 2, 3, 4}));
    }
    EXPECT_FALSE(m.detector.extractor[0].kernel.grad_allocated());
    EXPECT_EQ(m.detector.extractor[0].kernel.values(), before);
    // heads do receive gradient through the modulation path
    EXPECT_TRUE(m.detector.signal_heads[0].weight.grad_allocated() ||
                testutil::max_abs(m.detector.signal_heads[0].weight.grad()) == 0.0);
}

TEST(Forward, SignalHeadGradientsMatchFiniteDifferences) {
    // The modulation path is differentiated end-to-end: d loss / d head weights.
    AWNetModel m = toy_model(24, 4, 8);
    Rng rng(25);
    for (auto& head : m.detector.signal_heads)
        for (double& v : head.weight.values()) v = rng.normal(0.0, 0.2);
    Tensor x = random_image_batch(rng, 2, 3, 8);
    std::vector<std::size_t> y{1, 3};

    Tensor& w = m.detector.signal_heads[2].weight;
    auto loss_fn = [&](const Tensor& cand) {
        std::vector<double> saved = w.values();
        w.values() = cand.values();
        ForwardOpts opts;
        opts.update_stats = false;
        Tensor loss = cross_entropy(m.forward(x, NetMode::TrainAdv, opts).logits, y);
        w.values() = saved;
        return loss;
    };
    Graph g;
    {
        Graph::Scope scope(g);
        ForwardOpts opts;
        opts.update_stats = false;
        g.backward(cross_entropy(m.forward(x, NetMode::TrainAdv, opts).logits, y));
    }
    Tensor fd = finite_diff_grad(loss_fn, w, 1e-5);
    EXPECT_LE(max_rel_err(w.grad(), fd.values()), 1e-4);
}
