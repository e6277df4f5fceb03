#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "awnet/errors.hpp"
#include "awnet/nn.hpp"
#include "awnet/rng.hpp"
#include "awnet/tensor.hpp"

namespace awnet {

// ---------------------------------------------------------------------------
// Architecture description
// ---------------------------------------------------------------------------

/// Serializable architecture descriptor. Checkpoints embed the canonical
/// string and loading under a different descriptor is rejected.
struct ModelSpec {
    std::string kind = "awnet";  // "awnet" | "baseline"
    std::size_t in_channels = 3;
    std::size_t image_size = 8;
    std::size_t num_classes = 10;
    std::vector<std::size_t> widths = {8, 16, 32};
    std::size_t blocks_per_stage = 1;
    std::size_t detector_dim = 64;
    double beta = 4.0;
    // Component switches used by the ablation grid; all on for the full AW-Net.
    bool dynamic_weight = true;
    bool mixbn = true;
    bool type_head = true;

    std::string descriptor() const {
        std::ostringstream os;
        os.precision(17);
        os << kind << ";in=" << in_channels << ";img=" << image_size << ";classes=" << num_classes << ";widths=";
        for (std::size_t i = 0; i < widths.size(); ++i) {
            if (i) os << '/';
            os << widths[i];
        }
        os << ";blocks=" << blocks_per_stage;
        if (kind == "awnet") {
            os << ";d=" << detector_dim << ";beta=" << beta << ";dw=" << dynamic_weight << ";mix=" << mixbn
               << ";type=" << type_head;
        }
        return os.str();
    }

    static ModelSpec parse(const std::string& descriptor) {
        ModelSpec s;
        std::istringstream is(descriptor);
        std::string field;
        if (!std::getline(is, field, ';')) throw ConfigError("ModelSpec: empty descriptor");
        s.kind = field;
        if (s.kind != "awnet" && s.kind != "baseline" && s.kind != "plain") {
            throw ConfigError("ModelSpec: unknown kind '" + s.kind + "'");
        }
        while (std::getline(is, field, ';')) {
            const auto eq = field.find('=');
            if (eq == std::string::npos) throw ConfigError("ModelSpec: bad field '" + field + "'");
            const std::string key = field.substr(0, eq);
            const std::string val = field.substr(eq + 1);
            if (key == "in") s.in_channels = std::stoul(val);
            else if (key == "img") s.image_size = std::stoul(val);
            else if (key == "classes") s.num_classes = std::stoul(val);
            else if (key == "blocks") s.blocks_per_stage = std::stoul(val);
            else if (key == "d") s.detector_dim = std::stoul(val);
            else if (key == "beta") s.beta = std::stod(val);
            else if (key == "dw") s.dynamic_weight = val == "1";
            else if (key == "mix") s.mixbn = val == "1";
            else if (key == "type") s.type_head = val == "1";
            else if (key == "widths") {
                s.widths.clear();
                std::istringstream ws(val);
                std::string w;
                while (std::getline(ws, w, '/')) s.widths.push_back(std::stoul(w));
                if (s.widths.empty()) throw ConfigError("ModelSpec: empty widths");
            } else {
                throw ConfigError("ModelSpec: unknown field '" + key + "'");
            }
        }
        return s;
    }

    /// Small configuration for the synthetic-benchmark experiments.
    static ModelSpec toy(std::size_t classes = 10, std::size_t image_size = 8) {
        ModelSpec s;
        s.num_classes = classes;
        s.image_size = image_size;
        return s;
    }

    /// Desk-scale configuration (3 stages x 2 blocks, widths 16/32/64, d=128).
    static ModelSpec desk(std::size_t classes = 10, std::size_t image_size = 32) {
        ModelSpec s;
        s.num_classes = classes;
        s.image_size = image_size;
        s.widths = {16, 32, 64};
        s.blocks_per_stage = 2;
        s.detector_dim = 128;
        return s;
    }

    ModelSpec as_baseline() const {
        ModelSpec s = *this;
        s.kind = "baseline";
        return s;
    }
};

enum class NetMode { TrainClean, TrainAdv, Eval };

struct ForwardOpts {
    /// Fold batch statistics into the running stats (train modes). Attack-time
    /// and finite-difference forwards turn this off to stay pure.
    bool update_stats = true;
    /// Eval-mode override of the detected type probability, one entry per
    /// sample (used by tests and by the type-head-off ablation).
    std::optional<Tensor> p_override;
};

// ---------------------------------------------------------------------------
// MixBN
// ---------------------------------------------------------------------------

/// Paired batch-norm branches. The adversarial and clean branch never share
/// running statistics; training routes each sample type to exactly one branch,
/// testing blends both by the detector's type probability.
struct MixBN {
    BatchNorm adv;
    BatchNorm nat;

    static MixBN make(std::size_t channels) { return MixBN{BatchNorm::make(channels), BatchNorm::make(channels)}; }

    /// Copies the clean branch over the adversarial one (parameters and
    /// running stats), producing tied branches.
    void tie_branches() {
        adv.gamma.values() = nat.gamma.values();
        adv.beta.values() = nat.beta.values();
        adv.stats = nat.stats;
    }

    void visit_params(const std::string& prefix, const ParamVisitor& v) {
        adv.visit_params(prefix + ".adv", v);
        nat.visit_params(prefix + ".nat", v);
    }
    void visit_stats(const std::string& prefix, const StatsVisitor& v) {
        adv.visit_stats(prefix + ".adv", v);
        nat.visit_stats(prefix + ".nat", v);
    }
};

/// Routes a feature map through the MixBN pair.
///   train_clean -> clean branch (updates its stats), train_adv -> adv branch,
///   eval        -> (1 - p) * BN_adv(pi) + p * BN_nat(pi), branches in eval mode.
/// p_type is required in eval mode and rejected in train modes.
inline Tensor mixbn_apply(const Tensor& pi, MixBN& bn, NetMode mode, const std::optional<Tensor>& p_type,
                          bool update_stats = true) {
    if (mode == NetMode::Eval) {
        if (!p_type) throw std::invalid_argument("mixbn_apply: eval mode requires p_type");
        if (p_type->rank() != 1 || p_type->dim(0) != pi.dim(0)) {
            throw std::invalid_argument("mixbn_apply: p_type " + shape_str(p_type->shape()) +
                                        " does not match batch " + shape_str(pi.shape()));
        }
        Tensor a = bn.adv.forward(pi, BNMode::Eval);
        Tensor b = bn.nat.forward(pi, BNMode::Eval);
        return add(mul_rows(a, affine(*p_type, -1.0, 1.0)), mul_rows(b, *p_type));
    }
    if (p_type) throw std::invalid_argument("mixbn_apply: train modes do not take p_type");
    if (mode == NetMode::TrainClean) return bn.nat.forward(pi, BNMode::Train, update_stats);
    return bn.adv.forward(pi, BNMode::Train, update_stats);
}

// ---------------------------------------------------------------------------
// Detector sub-network
// ---------------------------------------------------------------------------

/// Per-sample conditioning computed by the detector: one omega vector per
/// modulated convolution layer (each [N, Cout], components in (0, 2^beta))
/// and the probability that each input is clean.
struct RegulationSignals {
    std::vector<Tensor> omega;
    Tensor p_type;  // [N]
    double beta = 1.0;
};

/// Adversarial detector: a small frozen conv extractor, a 2-way type head and
/// one signal head per modulated convolution layer.
///
/// The extractor is four equal-width conv layers (width d/8). psi_M pools the
/// mean and the root-mean-square of every layer's response map, so it carries
/// both semantic content and the response-energy profile across depths (the
/// footprint an L-inf perturbation leaves at high resolution). A feature
/// standardization fitted on clean data during pretraining is baked in and
/// frozen with the extractor.
struct Detector {
    std::vector<Conv2d> extractor;  // 4 conv layers, ReLU + pooling between
    Linear type_head;               // [2, d]
    std::vector<Linear> signal_heads;
    std::vector<double> norm_scale;  // frozen feature standardization
    std::vector<double> norm_shift;
    bool frozen_extractor = false;
    double beta = 4.0;

    static Detector make(const ModelSpec& spec, const std::vector<std::size_t>& head_widths, Rng& rng) {
        if (spec.detector_dim % 8 != 0 || spec.detector_dim == 0) {
            throw ConfigError("Detector: detector_dim must be a positive multiple of 8");
        }
        Detector d;
        const std::size_t c = spec.detector_dim / 8;  // 2 moments x 4 layers x c = d
        d.extractor.push_back(Conv2d::make(c, spec.in_channels, 3, 1, 1, rng));
        for (int i = 0; i < 3; ++i) d.extractor.push_back(Conv2d::make(c, c, 3, 1, 1, rng));
        // Zero-initialised heads start at omega = 1 (identity modulation) and
        // p_type = 0.5; gradients through tanh'(0) = 1 remain live.
        d.type_head = Linear::make(2, spec.detector_dim, 0.0, rng);
        for (std::size_t w : head_widths) d.signal_heads.push_back(Linear::make(w, spec.detector_dim, 0.0, rng));
        d.norm_scale.assign(spec.detector_dim, 1.0);
        d.norm_shift.assign(spec.detector_dim, 0.0);
        d.beta = spec.beta;
        return d;
    }

    void set_extractor_requires_grad(bool on) {
        for (auto& c : extractor) {
            c.kernel.set_requires_grad(on);
            c.bias.set_requires_grad(on);
        }
    }

    void freeze_extractor() {
        frozen_extractor = true;
        set_extractor_requires_grad(false);
    }

    /// psi_M: per-layer [mean; rms] moments of the conv responses, normalized
    /// by the frozen clean-data standardization. Spatial pooling between
    /// layers while the resolution stays even.
    Tensor features(const Tensor& x) const {
        std::vector<Tensor> parts;
        Tensor h = x;
        for (std::size_t i = 0; i < extractor.size(); ++i) {
            if (i > 0 && h.dim(2) % 2 == 0 && h.dim(3) % 2 == 0) h = avg_pool2x2(h);
            Tensor z = conv_forward(extractor[i], h);
            parts.push_back(global_avg_pool(z));
            parts.push_back(pow_scalar(affine(global_avg_pool(mul(z, z)), 1.0, 1e-8), 0.5));
            h = relu(z);
        }
        return affine_cols(concat_cols(parts), norm_scale, norm_shift);
    }

    /// Fits the standardization so psi_M has zero mean and unit variance on
    /// the given (clean) features; part of extractor pretraining.
    void fit_feature_norm(const Tensor& raw_features) {
        const std::size_t n = raw_features.dim(0), d = raw_features.dim(1);
        std::vector<double> mu(d, 0.0), var(d, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) mu[j] += raw_features.values()[i * d + j];
        }
        for (double& v : mu) v /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                const double diff = raw_features.values()[i * d + j] - mu[j];
                var[j] += diff * diff;
            }
        }
        for (std::size_t j = 0; j < d; ++j) {
            const double sd = std::sqrt(var[j] / static_cast<double>(n)) + 1e-8;
            norm_scale[j] = 1.0 / sd;
            norm_shift[j] = -mu[j] / sd;
        }
    }

    void visit_params(const std::string& prefix, const ParamVisitor& v) {
        for (std::size_t i = 0; i < extractor.size(); ++i) {
            extractor[i].visit_params(prefix + ".extractor." + std::to_string(i), v);
        }
        type_head.visit_params(prefix + ".type_head", v);
        for (std::size_t i = 0; i < signal_heads.size(); ++i) {
            signal_heads[i].visit_params(prefix + ".signal_heads." + std::to_string(i), v);
        }
    }

    void visit_stats(const std::string& prefix, const StatsVisitor& v) {
        v(prefix + ".feature_norm.scale", norm_scale);
        v(prefix + ".feature_norm.shift", norm_shift);
    }
};

/// Runs the detector: p_type = softmax(W_type psi_M) at the clean index (1),
/// omega_j = (tanh(W_j psi_M) + 1)^beta per signal head and sample.
inline RegulationSignals detect(const Tensor& x, const Detector& detector) {
    RegulationSignals out;
    out.beta = detector.beta;
    const Tensor psi = detector.features(x);
    const Tensor type_logits = detector.type_head.forward(psi);
    out.p_type = select_column(softmax_rows(type_logits), 1);
    out.omega.reserve(detector.signal_heads.size());
    for (const auto& head : detector.signal_heads) {
        // tanh lands in [-1, 1] only at saturation; the clamp keeps the base
        // strictly inside (0, 2) so omega stays in the open interval (0, 2^beta).
        Tensor base = clamp_const(affine(tanh(head.forward(psi)), 1.0, 1.0), 1e-12, 2.0 - 1e-12);
        out.omega.push_back(pow_scalar(base, detector.beta));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

/// Filter-level modulation: filter m of the bank scaled by omega[m], bias
/// untouched. The forward path uses the equivalent (and cheaper) post-
/// convolution channel scaling; this form backs the equivalence tests.
inline Conv2d modulate(const Conv2d& filters, const Tensor& omega) {
    if (omega.rank() != 1 || omega.dim(0) != filters.out_channels()) {
        throw std::invalid_argument("modulate: omega " + shape_str(omega.shape()) + " does not match " +
                                    std::to_string(filters.out_channels()) + " filters");
    }
    const Shape kshape = filters.kernel.shape();
    const std::size_t cout = kshape[0];
    const std::size_t rest = filters.kernel.numel() / cout;
    Conv2d out = filters;
    out.kernel = reshape(mul_rows(reshape(filters.kernel, {cout, rest}), omega), kshape);
    return out;
}

/// Two-layer residual AW-Net block: modulated conv -> MixBN -> ReLU ->
/// modulated conv -> MixBN, plus a (1x1 conv + MixBN) shortcut when the
/// channel count changes, ReLU after the residual sum. Downsampling blocks
/// halve the spatial size with an exact 2x2 average pool at entry, keeping
/// every convolution's output size integral.
struct AWNetBlock {
    Conv2d conv1;
    Conv2d conv2;
    MixBN bn1;
    MixBN bn2;
    std::optional<Conv2d> shortcut;  // 1x1, not modulated
    std::optional<MixBN> shortcut_bn;
    bool downsample = false;

    static AWNetBlock make(std::size_t cin, std::size_t cout, bool downsample, Rng& rng) {
        AWNetBlock b;
        b.downsample = downsample;
        b.conv1 = Conv2d::make(cout, cin, 3, 1, 1, rng);
        b.conv2 = Conv2d::make(cout, cout, 3, 1, 1, rng);
        b.bn1 = MixBN::make(cout);
        b.bn2 = MixBN::make(cout);
        if (cin != cout) {
            b.shortcut = Conv2d::make(cout, cin, 1, 1, 0, rng);
            b.shortcut_bn = MixBN::make(cout);
        }
        return b;
    }

    void visit_params(const std::string& prefix, const ParamVisitor& v) {
        conv1.visit_params(prefix + ".conv1", v);
        conv2.visit_params(prefix + ".conv2", v);
        bn1.visit_params(prefix + ".bn1", v);
        bn2.visit_params(prefix + ".bn2", v);
        if (shortcut) shortcut->visit_params(prefix + ".shortcut", v);
        if (shortcut_bn) shortcut_bn->visit_params(prefix + ".shortcut_bn", v);
    }
    void visit_stats(const std::string& prefix, const StatsVisitor& v) {
        bn1.visit_stats(prefix + ".bn1", v);
        bn2.visit_stats(prefix + ".bn2", v);
        if (shortcut_bn) shortcut_bn->visit_stats(prefix + ".shortcut_bn", v);
    }
};

/// Forward pass of one block. omega1/omega2 are per-sample [N, Cout] scale
/// maps; pass dynamic_weight=false to skip modulation entirely.
inline Tensor block_forward(const Tensor& psi, AWNetBlock& block, const Tensor& omega1, const Tensor& omega2,
                            NetMode mode, const std::optional<Tensor>& p_type, const ForwardOpts& opts,
                            bool dynamic_weight = true, bool mixbn_enabled = true) {
    auto route = [&](const Tensor& t, MixBN& bn) {
        if (mixbn_enabled) return mixbn_apply(t, bn, mode, mode == NetMode::Eval ? p_type : std::nullopt,
                                              opts.update_stats);
        // Single-BN ablation: the clean branch serves every sample type.
        return bn.nat.forward(t, mode == NetMode::Eval ? BNMode::Eval : BNMode::Train, opts.update_stats);
    };

    Tensor in = block.downsample ? avg_pool2x2(psi) : psi;
    Tensor u = conv2d(in, block.conv1.kernel, block.conv1.stride, block.conv1.padding);
    if (dynamic_weight) u = scale_channels(u, omega1);
    u = add_channel_bias(u, block.conv1.bias);
    u = relu(route(u, block.bn1));

    Tensor v = conv2d(u, block.conv2.kernel, block.conv2.stride, block.conv2.padding);
    if (dynamic_weight) v = scale_channels(v, omega2);
    v = add_channel_bias(v, block.conv2.bias);
    v = route(v, block.bn2);

    Tensor sc = in;
    if (block.shortcut) {
        sc = conv_forward(*block.shortcut, in);
        sc = route(sc, *block.shortcut_bn);
    }
    return relu(add(v, sc));
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

struct ForwardResult {
    Tensor logits;
    RegulationSignals signals;
};

/// Minimal classifier interface shared by AW-Net and the static baseline so
/// attacks and evaluation work uniformly.
class Model {
public:
    virtual ~Model() = default;
    virtual Tensor eval_logits(const Tensor& x) = 0;
    virtual std::size_t num_classes() const = 0;
    virtual const ModelSpec& model_spec() const = 0;
    virtual void visit_params(const ParamVisitor& v) = 0;
    virtual void visit_stats(const StatsVisitor& v) = 0;
    /// Trainable parameters only (a frozen extractor is excluded).
    virtual void visit_trainable(const ParamVisitor& v) = 0;
    /// Convolution kernels of the classification path, for weight analysis.
    virtual std::vector<std::pair<std::string, Tensor>> conv_kernels() = 0;

    void set_trainable_requires_grad(bool on) {
        visit_trainable([on](const std::string&, Tensor& t) { t.set_requires_grad(on); });
    }
};

/// Plain residual classifier: the static twin of AW-Net (identical topology,
/// single BN, no detector). Serves as teacher, surrogate, ablation baseline
/// and as the subject of the weight-distribution experiments.
class BaselineNet final : public Model {
public:
    ModelSpec spec;
    Conv2d stem;
    BatchNorm stem_bn;
    struct Block {
        Conv2d conv1, conv2;
        BatchNorm bn1, bn2;
        std::optional<Conv2d> shortcut;
        std::optional<BatchNorm> shortcut_bn;
        bool downsample = false;
    };
    std::vector<Block> blocks;
    Linear fc;

    static BaselineNet make(const ModelSpec& spec_in, Rng& rng) {
        BaselineNet m;
        m.spec = spec_in;
        m.spec.kind = "baseline";
        m.stem = Conv2d::make(m.spec.widths[0], m.spec.in_channels, 3, 1, 1, rng);
        m.stem_bn = BatchNorm::make(m.spec.widths[0]);
        std::size_t cin = m.spec.widths[0];
        for (std::size_t stage = 0; stage < m.spec.widths.size(); ++stage) {
            for (std::size_t b = 0; b < m.spec.blocks_per_stage; ++b) {
                const std::size_t cout = m.spec.widths[stage];
                Block blk;
                blk.downsample = stage > 0 && b == 0;
                blk.conv1 = Conv2d::make(cout, cin, 3, 1, 1, rng);
                blk.conv2 = Conv2d::make(cout, cout, 3, 1, 1, rng);
                blk.bn1 = BatchNorm::make(cout);
                blk.bn2 = BatchNorm::make(cout);
                if (cin != cout) {
                    blk.shortcut = Conv2d::make(cout, cin, 1, 1, 0, rng);
                    blk.shortcut_bn = BatchNorm::make(cout);
                }
                m.blocks.push_back(std::move(blk));
                cin = cout;
            }
        }
        m.fc = Linear::make(m.spec.num_classes, m.spec.widths.back(),
                            std::sqrt(2.0 / static_cast<double>(m.spec.widths.back())), rng);
        return m;
    }

    Tensor forward(const Tensor& x, NetMode mode, const ForwardOpts& opts = {}) {
        const BNMode bmode = mode == NetMode::Eval ? BNMode::Eval : BNMode::Train;
        Tensor h = relu(stem_bn.forward(conv_forward(stem, x), bmode, opts.update_stats));
        for (auto& blk : blocks) {
            if (blk.downsample) h = avg_pool2x2(h);
            Tensor u = relu(blk.bn1.forward(conv_forward(blk.conv1, h), bmode, opts.update_stats));
            Tensor v = blk.bn2.forward(conv_forward(blk.conv2, u), bmode, opts.update_stats);
            Tensor sc = h;
            if (blk.shortcut) {
                sc = blk.shortcut_bn->forward(conv_forward(*blk.shortcut, h), bmode, opts.update_stats);
            }
            h = relu(add(v, sc));
        }
        return fc.forward(global_avg_pool(h));
    }

    Tensor eval_logits(const Tensor& x) override { return forward(x, NetMode::Eval); }
    std::size_t num_classes() const override { return spec.num_classes; }
    const ModelSpec& model_spec() const override { return spec; }

    void visit_params(const ParamVisitor& v) override {
        stem.visit_params("stem", v);
        stem_bn.visit_params("stem_bn", v);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = "blocks." + std::to_string(i);
            blocks[i].conv1.visit_params(p + ".conv1", v);
            blocks[i].conv2.visit_params(p + ".conv2", v);
            blocks[i].bn1.visit_params(p + ".bn1", v);
            blocks[i].bn2.visit_params(p + ".bn2", v);
            if (blocks[i].shortcut) blocks[i].shortcut->visit_params(p + ".shortcut", v);
            if (blocks[i].shortcut_bn) blocks[i].shortcut_bn->visit_params(p + ".shortcut_bn", v);
        }
        fc.visit_params("fc", v);
    }
    void visit_stats(const StatsVisitor& v) override {
        stem_bn.visit_stats("stem_bn", v);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = "blocks." + std::to_string(i);
            blocks[i].bn1.visit_stats(p + ".bn1", v);
            blocks[i].bn2.visit_stats(p + ".bn2", v);
            if (blocks[i].shortcut_bn) blocks[i].shortcut_bn->visit_stats(p + ".shortcut_bn", v);
        }
    }
    void visit_trainable(const ParamVisitor& v) override { visit_params(v); }

    std::vector<std::pair<std::string, Tensor>> conv_kernels() override {
        std::vector<std::pair<std::string, Tensor>> out;
        out.emplace_back("stem", stem.kernel);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = "blocks." + std::to_string(i);
            out.emplace_back(p + ".conv1", blocks[i].conv1.kernel);
            out.emplace_back(p + ".conv2", blocks[i].conv2.kernel);
            if (blocks[i].shortcut) out.emplace_back(p + ".shortcut", blocks[i].shortcut->kernel);
        }
        return out;
    }
};

/// The AW-Net: dynamic weight sub-network (stem + modulated residual blocks +
/// classifier) conditioned by the adversarial detector sub-network.
class AWNetModel final : public Model {
public:
    ModelSpec spec;
    Conv2d stem;        // unmodulated; plain BN shared by both sample types
    BatchNorm stem_bn;
    std::vector<AWNetBlock> blocks;
    Linear fc;
    Detector detector;

    static AWNetModel make(const ModelSpec& spec_in, Rng& rng) {
        AWNetModel m;
        m.spec = spec_in;
        m.spec.kind = "awnet";
        m.stem = Conv2d::make(m.spec.widths[0], m.spec.in_channels, 3, 1, 1, rng);
        m.stem_bn = BatchNorm::make(m.spec.widths[0]);
        std::vector<std::size_t> head_widths;
        std::size_t cin = m.spec.widths[0];
        for (std::size_t stage = 0; stage < m.spec.widths.size(); ++stage) {
            for (std::size_t b = 0; b < m.spec.blocks_per_stage; ++b) {
                const std::size_t cout = m.spec.widths[stage];
                const bool downsample = stage > 0 && b == 0;
                m.blocks.push_back(AWNetBlock::make(cin, cout, downsample, rng));
                head_widths.push_back(cout);  // conv1 head
                head_widths.push_back(cout);  // conv2 head
                cin = cout;
            }
        }
        m.fc = Linear::make(m.spec.num_classes, m.spec.widths.back(),
                            std::sqrt(2.0 / static_cast<double>(m.spec.widths.back())), rng);
        m.detector = Detector::make(m.spec, head_widths, rng);
        return m;
    }

    /// Detector head arity must match the modulated conv layers (two per block).
    void check_configuration() const {
        if (detector.signal_heads.size() != 2 * blocks.size()) {
            throw std::invalid_argument("AWNetModel: " + std::to_string(detector.signal_heads.size()) +
                                        " signal heads for " + std::to_string(blocks.size()) + " blocks");
        }
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::size_t c1 = blocks[i].conv1.out_channels();
            const std::size_t c2 = blocks[i].conv2.out_channels();
            if (detector.signal_heads[2 * i].weight.dim(0) != c1 ||
                detector.signal_heads[2 * i + 1].weight.dim(0) != c2) {
                throw std::invalid_argument("AWNetModel: signal head width mismatch at block " + std::to_string(i));
            }
        }
    }

    ForwardResult forward(const Tensor& x, NetMode mode, const ForwardOpts& opts = {}) {
        check_configuration();
        ForwardResult res;
        res.signals = detect(x, detector);
        std::optional<Tensor> p;
        if (mode == NetMode::Eval) {
            p = opts.p_override ? *opts.p_override : res.signals.p_type;
            if (!spec.type_head && !opts.p_override) {
                // Type-head-off ablation: the MixBN blend collapses to the
                // adversarial branch in testing.
                p = Tensor({x.dim(0)}, 0.0);
            }
        }
        const BNMode stem_mode = mode == NetMode::Eval ? BNMode::Eval : BNMode::Train;
        Tensor h = relu(stem_bn.forward(conv_forward(stem, x), stem_mode, opts.update_stats));
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            h = block_forward(h, blocks[i], res.signals.omega[2 * i], res.signals.omega[2 * i + 1], mode, p, opts,
                              spec.dynamic_weight, spec.mixbn);
        }
        res.logits = fc.forward(global_avg_pool(h));
        return res;
    }

    Tensor eval_logits(const Tensor& x) override { return forward(x, NetMode::Eval).logits; }
    std::size_t num_classes() const override { return spec.num_classes; }
    const ModelSpec& model_spec() const override { return spec; }

    void visit_params(const ParamVisitor& v) override {
        visit_main(v);
        detector.visit_params("detector", v);
    }
    void visit_stats(const StatsVisitor& v) override {
        stem_bn.visit_stats("stem_bn", v);
        for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit_stats("blocks." + std::to_string(i), v);
        detector.visit_stats("detector", v);
    }
    void visit_trainable(const ParamVisitor& v) override {
        visit_main(v);
        detector.type_head.visit_params("detector.type_head", v);
        for (std::size_t i = 0; i < detector.signal_heads.size(); ++i) {
            detector.signal_heads[i].visit_params("detector.signal_heads." + std::to_string(i), v);
        }
        if (!detector.frozen_extractor) {
            for (std::size_t i = 0; i < detector.extractor.size(); ++i) {
                detector.extractor[i].visit_params("detector.extractor." + std::to_string(i), v);
            }
        }
    }

    /// Dynamic-weight-network parameters (learning rate eta of the main net).
    void visit_main(const ParamVisitor& v) {
        stem.visit_params("stem", v);
        stem_bn.visit_params("stem_bn", v);
        for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit_params("blocks." + std::to_string(i), v);
        fc.visit_params("fc", v);
    }

    /// Adversarial-weight-regulator parameters (their own learning rate).
    void visit_regulator(const ParamVisitor& v) {
        detector.type_head.visit_params("detector.type_head", v);
        for (std::size_t i = 0; i < detector.signal_heads.size(); ++i) {
            detector.signal_heads[i].visit_params("detector.signal_heads." + std::to_string(i), v);
        }
    }

    std::vector<std::pair<std::string, Tensor>> conv_kernels() override {
        std::vector<std::pair<std::string, Tensor>> out;
        out.emplace_back("stem", stem.kernel);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = "blocks." + std::to_string(i);
            out.emplace_back(p + ".conv1", blocks[i].conv1.kernel);
            out.emplace_back(p + ".conv2", blocks[i].conv2.kernel);
            if (blocks[i].shortcut) out.emplace_back(p + ".shortcut", blocks[i].shortcut->kernel);
        }
        return out;
    }
};

/// Normalization-free stack of conv+ReLU stages (pooling between stages, GAP,
/// linear head). The instrument for the weight-distribution experiments:
/// without batch norm the filter scale is functionally meaningful, so the
/// gradient-regularization effect of adversarial training shows up directly
/// in the per-filter statistics.
class PlainNet final : public Model {
public:
    ModelSpec spec;
    std::vector<Conv2d> convs;
    std::vector<bool> pool_before;
    Linear fc;

    static PlainNet make(const ModelSpec& spec_in, Rng& rng) {
        PlainNet m;
        m.spec = spec_in;
        m.spec.kind = "plain";
        std::size_t cin = m.spec.in_channels;
        for (std::size_t stage = 0; stage < m.spec.widths.size(); ++stage) {
            for (std::size_t b = 0; b < m.spec.blocks_per_stage; ++b) {
                m.convs.push_back(Conv2d::make(m.spec.widths[stage], cin, 3, 1, 1, rng));
                m.pool_before.push_back(stage > 0 && b == 0);
                cin = m.spec.widths[stage];
            }
        }
        m.fc = Linear::make(m.spec.num_classes, m.spec.widths.back(),
                            std::sqrt(2.0 / static_cast<double>(m.spec.widths.back())), rng);
        return m;
    }

    Tensor forward(const Tensor& x, NetMode /*mode*/ = NetMode::Eval, const ForwardOpts& /*opts*/ = {}) {
        Tensor h = x;
        for (std::size_t i = 0; i < convs.size(); ++i) {
            if (pool_before[i]) h = avg_pool2x2(h);
            h = relu(conv_forward(convs[i], h));
        }
        return fc.forward(global_avg_pool(h));
    }

    Tensor eval_logits(const Tensor& x) override { return forward(x); }
    std::size_t num_classes() const override { return spec.num_classes; }
    const ModelSpec& model_spec() const override { return spec; }

    void visit_params(const ParamVisitor& v) override {
        for (std::size_t i = 0; i < convs.size(); ++i) convs[i].visit_params("convs." + std::to_string(i), v);
        fc.visit_params("fc", v);
    }
    void visit_stats(const StatsVisitor&) override {}
    void visit_trainable(const ParamVisitor& v) override { visit_params(v); }

    std::vector<std::pair<std::string, Tensor>> conv_kernels() override {
        std::vector<std::pair<std::string, Tensor>> out;
        for (std::size_t i = 0; i < convs.size(); ++i) {
            out.emplace_back("convs." + std::to_string(i), convs[i].kernel);
        }
        return out;
    }
};

/// Static twin with AW-Net's weights: stem/conv/fc copied, BN taken from the
/// clean branch. With zeroed signal heads and tied MixBN branches the AW-Net
/// must reproduce this network's logits exactly.
inline BaselineNet baseline_twin_of(AWNetModel& m) {
    Rng dummy(0);
    BaselineNet b = BaselineNet::make(m.spec.as_baseline(), dummy);
    b.stem.kernel.values() = m.stem.kernel.values();
    b.stem.bias.values() = m.stem.bias.values();
    b.stem_bn.gamma.values() = m.stem_bn.gamma.values();
    b.stem_bn.beta.values() = m.stem_bn.beta.values();
    b.stem_bn.stats = m.stem_bn.stats;
    for (std::size_t i = 0; i < m.blocks.size(); ++i) {
        auto& src = m.blocks[i];
        auto& dst = b.blocks[i];
        dst.conv1.kernel.values() = src.conv1.kernel.values();
        dst.conv1.bias.values() = src.conv1.bias.values();
        dst.conv2.kernel.values() = src.conv2.kernel.values();
        dst.conv2.bias.values() = src.conv2.bias.values();
        dst.bn1.gamma.values() = src.bn1.nat.gamma.values();
        dst.bn1.beta.values() = src.bn1.nat.beta.values();
        dst.bn1.stats = src.bn1.nat.stats;
        dst.bn2.gamma.values() = src.bn2.nat.gamma.values();
        dst.bn2.beta.values() = src.bn2.nat.beta.values();
        dst.bn2.stats = src.bn2.nat.stats;
        if (src.shortcut) {
            dst.shortcut->kernel.values() = src.shortcut->kernel.values();
            dst.shortcut->bias.values() = src.shortcut->bias.values();
            dst.shortcut_bn->gamma.values() = src.shortcut_bn->nat.gamma.values();
            dst.shortcut_bn->beta.values() = src.shortcut_bn->nat.beta.values();
            dst.shortcut_bn->stats = src.shortcut_bn->nat.stats;
        }
    }
    b.fc.weight.values() = m.fc.weight.values();
    b.fc.bias.values() = m.fc.bias.values();
    return b;
}

}  // namespace awnet
