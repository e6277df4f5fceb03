#pragma once

#include <algorithm>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "awnet/attacks.hpp"
#include "awnet/data.hpp"
#include "awnet/errors.hpp"
#include "awnet/model.hpp"
#include "awnet/report.hpp"
#include "awnet/tensor.hpp"

namespace awnet {

// ---------------------------------------------------------------------------
// Per-filter weight statistics
// ---------------------------------------------------------------------------

/// Mean and population variance of each output filter's Cin*k*k weights, plus
/// layer-level summaries.
struct FilterStats {
    std::string layer;
    std::vector<double> mean;      // per filter
    std::vector<double> variance;  // per filter, population convention
    double mean_abs_mean = 0.0;    // layer summary: mean of |mean|
    double mean_variance = 0.0;    // layer summary: mean of variances
};

inline FilterStats filter_stats(const Tensor& kernel, const std::string& layer = "") {
    if (kernel.rank() != 4 || kernel.numel() == 0) {
        throw std::invalid_argument("filter_stats: need a non-empty [Cout,Cin,k,k] kernel, got " +
                                    shape_str(kernel.shape()));
    }
    const std::size_t cout = kernel.dim(0);
    const std::size_t per = kernel.numel() / cout;
    FilterStats fs;
    fs.layer = layer;
    fs.mean.resize(cout);
    fs.variance.resize(cout);
    for (std::size_t f = 0; f < cout; ++f) {
        const double* w = kernel.data() + f * per;
        double mu = 0.0;
        for (std::size_t i = 0; i < per; ++i) mu += w[i];
        mu /= static_cast<double>(per);
        double var = 0.0;
        for (std::size_t i = 0; i < per; ++i) var += (w[i] - mu) * (w[i] - mu);
        var /= static_cast<double>(per);
        fs.mean[f] = mu;
        fs.variance[f] = var;
        fs.mean_abs_mean += std::abs(mu);
        fs.mean_variance += var;
    }
    fs.mean_abs_mean /= static_cast<double>(cout);
    fs.mean_variance /= static_cast<double>(cout);
    return fs;
}

inline std::vector<FilterStats> model_filter_stats(Model& model) {
    std::vector<FilterStats> out;
    for (auto& [name, kernel] : model.conv_kernels()) out.push_back(filter_stats(kernel, name));
    return out;
}

/// One row per filter: layer, index, mean, variance.
inline void write_filter_stats_csv(std::ostream& os, const std::vector<FilterStats>& stats) {
    os << "layer,index,mean,variance\n";
    os.precision(17);
    for (const auto& fs : stats) {
        for (std::size_t i = 0; i < fs.mean.size(); ++i) {
            os << fs.layer << ',' << i << ',' << fs.mean[i] << ',' << fs.variance[i] << '\n';
        }
    }
}

// ---------------------------------------------------------------------------
// Distribution comparison
// ---------------------------------------------------------------------------

/// Two-sample Kolmogorov-Smirnov statistic, tie-aware: the empirical CDFs are
/// compared after every distinct value.
inline double ks_statistic(std::vector<double> a, std::vector<double> b) {
    if (a.empty() || b.empty()) throw std::invalid_argument("ks_statistic: empty sample");
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    double d = 0.0;
    std::size_t i = 0, j = 0;
    while (i < a.size() || j < b.size()) {
        double v;
        if (i < a.size() && j < b.size()) {
            v = std::min(a[i], b[j]);
        } else if (i < a.size()) {
            v = a[i];
        } else {
            v = b[j];
        }
        while (i < a.size() && a[i] == v) ++i;
        while (j < b.size() && b[j] == v) ++j;
        const double fa = static_cast<double>(i) / static_cast<double>(a.size());
        const double fb = static_cast<double>(j) / static_cast<double>(b.size());
        d = std::max(d, std::abs(fa - fb));
    }
    return d;
}

/// Freedman-Diaconis bin edges on the pooled sample, so compared histograms
/// share identical bins.
inline std::vector<double> fd_bin_edges(std::vector<double> pooled) {
    if (pooled.empty()) throw std::invalid_argument("fd_bin_edges: empty sample");
    std::sort(pooled.begin(), pooled.end());
    const double lo = pooled.front(), hi = pooled.back();
    const std::size_t n = pooled.size();
    const double q1 = pooled[(n - 1) / 4];
    const double q3 = pooled[(3 * (n - 1)) / 4];
    double width = 2.0 * (q3 - q1) / std::cbrt(static_cast<double>(n));
    std::size_t bins;
    if (width <= 0.0 || hi <= lo) {
        bins = 1;
    } else {
        bins = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil((hi - lo) / width)), 1, 512);
    }
    std::vector<double> edges(bins + 1);
    const double span = hi > lo ? hi - lo : 1.0;
    for (std::size_t i = 0; i <= bins; ++i) {
        edges[i] = lo + span * static_cast<double>(i) / static_cast<double>(bins);
    }
    return edges;
}

inline std::vector<std::size_t> histogram_counts(const std::vector<double>& sample,
                                                 const std::vector<double>& edges) {
    std::vector<std::size_t> counts(edges.size() - 1, 0);
    for (double v : sample) {
        std::size_t bin = counts.size() - 1;
        for (std::size_t i = 0; i + 1 < edges.size(); ++i) {
            if (v < edges[i + 1] || i + 2 == edges.size()) {
                bin = i;
                break;
            }
        }
        ++counts[bin];
    }
    return counts;
}

struct LayerComparison {
    std::string layer;
    double ks_means = 0.0;        // KS statistic over per-filter means
    double variance_ratio = 1.0;  // layer mean variance, model_a / model_b
    std::vector<double> bin_edges;
    std::vector<std::size_t> counts_a;
    std::vector<std::size_t> counts_b;
};

struct DistributionComparison {
    std::vector<LayerComparison> layers;
};

/// Layer-by-layer comparison of two architecturally matching models.
/// `selector` filters layers by name; empty matches everything.
inline DistributionComparison compare_distributions(Model& model_a, Model& model_b,
                                                    const std::string& selector = "") {
    auto ka = model_a.conv_kernels();
    auto kb = model_b.conv_kernels();
    if (ka.size() != kb.size()) {
        throw std::invalid_argument("compare_distributions: models have different conv layer counts");
    }
    DistributionComparison out;
    for (std::size_t i = 0; i < ka.size(); ++i) {
        if (ka[i].first != kb[i].first || ka[i].second.shape() != kb[i].second.shape()) {
            throw std::invalid_argument("compare_distributions: layer mismatch at " + ka[i].first);
        }
        if (!selector.empty() && ka[i].first.find(selector) == std::string::npos) continue;
        FilterStats fa = filter_stats(ka[i].second, ka[i].first);
        FilterStats fb = filter_stats(kb[i].second, kb[i].first);
        LayerComparison cmp;
        cmp.layer = ka[i].first;
        cmp.ks_means = ks_statistic(fa.mean, fb.mean);
        cmp.variance_ratio = fa.mean_variance / std::max(fb.mean_variance, 1e-300);
        std::vector<double> pooled = fa.mean;
        pooled.insert(pooled.end(), fb.mean.begin(), fb.mean.end());
        cmp.bin_edges = fd_bin_edges(pooled);
        cmp.counts_a = histogram_counts(fa.mean, cmp.bin_edges);
        cmp.counts_b = histogram_counts(fb.mean, cmp.bin_edges);
        out.layers.push_back(std::move(cmp));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// A_nat over the clean set, A_adv over the attacked copies of the same
/// samples, A_w via w_robust_acc. Without an attack, a_adv repeats a_nat and
/// the report is flagged unattacked.
inline EvalReport evaluate(Model& model, const DatasetHandle& data, const std::optional<AttackSpec>& attack,
                           Rng& rng, double gamma_nat = 0.5, double gamma_adv = 0.5,
                           std::size_t batch_size = 64) {
    if (data.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
    EvalReport rep;
    rep.gamma_nat = gamma_nat;
    rep.gamma_adv = gamma_adv;
    rep.sample_count = data.size();
    std::size_t nat_correct = 0, adv_correct = 0;
    const auto idx = data.all_indices();
    for (std::size_t start = 0; start < idx.size(); start += batch_size) {
        const std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                             idx.begin() + static_cast<std::ptrdiff_t>(std::min(
                                                               start + batch_size, idx.size())));
        Tensor xb = data.batch(chunk);
        const auto yb = data.batch_labels(chunk);
        {
            Graph::NoGrad off;
            const auto pred = predict_labels(model.eval_logits(xb));
            for (std::size_t i = 0; i < yb.size(); ++i) nat_correct += pred[i] == yb[i];
        }
        if (attack) {
            AdversarialBatch ab = run_attack(model, xb, yb, *attack, rng);
            for (std::size_t i = 0; i < yb.size(); ++i) adv_correct += !ab.success[i];
        }
    }
    rep.a_nat = static_cast<double>(nat_correct) / static_cast<double>(data.size());
    if (attack) {
        rep.attacked = true;
        rep.attack = attack_family_name(attack->family);
        rep.a_adv = static_cast<double>(adv_correct) / static_cast<double>(data.size());
    } else {
        rep.a_adv = rep.a_nat;
    }
    rep.a_w = w_robust_acc(rep.a_nat, rep.a_adv, gamma_nat, gamma_adv);
    return rep;
}

/// Balanced detection accuracy of the type head: p_type >= 0.5 reads 'clean'.
inline double detector_balanced_accuracy(AWNetModel& model, const Tensor& x_clean, const Tensor& x_adv) {
    Graph::NoGrad off;
    const Tensor p_clean = model.forward(x_clean, NetMode::Eval).signals.p_type;
    const Tensor p_adv = model.forward(x_adv, NetMode::Eval).signals.p_type;
    double tpr = 0.0, tnr = 0.0;
    for (double v : p_clean.values()) tpr += v >= 0.5;
    for (double v : p_adv.values()) tnr += v < 0.5;
    tpr /= static_cast<double>(p_clean.numel());
    tnr /= static_cast<double>(p_adv.numel());
    return 0.5 * (tpr + tnr);
}

// ---------------------------------------------------------------------------
// First-order expansion of the adversarial loss
// ---------------------------------------------------------------------------

/// Per-sample residual |L_adv(x) - L(x) - (eps/2) * ||d/dx L||_1| with
/// L_adv = (L(x) + L(x + eps * sign(grad))) / 2 evaluated at the FGSM vertex
/// of the linearized objective (the domain is not clipped; this probes the
/// expansion itself, not the attack). Shrinks as O(eps^2) for a smooth loss.
inline std::vector<double> first_order_residuals(Model& model, const Tensor& x,
                                                 const std::vector<std::size_t>& y, double eps) {
    if (x.dim(0) != y.size()) throw std::invalid_argument("first_order_residuals: batch/label mismatch");
    const std::size_t n = x.dim(0);
    const std::size_t sn = x.numel() / n;
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        Tensor xi(Shape{1, x.dim(1), x.dim(2), x.dim(3)});
        std::copy_n(x.values().begin() + static_cast<std::ptrdiff_t>(i * sn), sn, xi.values().begin());
        xi.set_requires_grad(true);
        Graph graph;
        double loss_at_x;
        {
            Graph::Scope scope(graph);
            Tensor loss = cross_entropy(model.eval_logits(xi), {y[i]});
            loss_at_x = loss.scalar_value();
            graph.backward(loss);
        }
        double grad_l1 = 0.0;
        Tensor vertex = xi.clone();
        for (std::size_t j = 0; j < sn; ++j) {
            const double g = xi.grad()[j];
            grad_l1 += std::abs(g);
            vertex.values()[j] += eps * (g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0));
        }
        double loss_at_vertex;
        {
            Graph::NoGrad off;
            loss_at_vertex = cross_entropy(model.eval_logits(vertex), {y[i]}).scalar_value();
        }
        const double l_adv = 0.5 * (loss_at_x + loss_at_vertex);
        out[i] = std::abs(l_adv - loss_at_x - 0.5 * eps * grad_l1);
    }
    return out;
}

}  // namespace awnet
