#pragma once

#include <functional>
#include <string>
#include <vector>

#include "awnet/rng.hpp"
#include "awnet/tensor.hpp"

namespace awnet {

/// Visits named parameter tensors (checkpointing, optimizers, freezing).
using ParamVisitor = std::function<void(const std::string&, Tensor&)>;
/// Visits named non-parameter state buffers (BN running statistics).
using StatsVisitor = std::function<void(const std::string&, std::vector<double>&)>;

/// A bank of Cout convolution filters plus an unmodulated per-filter bias.
struct Conv2d {
    Tensor kernel;  // [Cout, Cin, k, k]
    Tensor bias;    // [Cout]
    std::size_t stride = 1;
    std::size_t padding = 1;

    std::size_t out_channels() const { return kernel.dim(0); }

    static Conv2d make(std::size_t cout, std::size_t cin, std::size_t k, std::size_t stride, std::size_t padding,
                       Rng& rng) {
        Conv2d c;
        c.kernel = Tensor({cout, cin, k, k}, 0.0, true);
        const double stddev = std::sqrt(2.0 / static_cast<double>(cin * k * k));
        for (double& v : c.kernel.values()) v = rng.normal(0.0, stddev);
        c.bias = Tensor({cout}, 0.0, true);
        c.stride = stride;
        c.padding = padding;
        return c;
    }

    void visit_params(const std::string& prefix, const ParamVisitor& v) {
        v(prefix + ".kernel", kernel);
        v(prefix + ".bias", bias);
    }
};

/// Convolution followed by its bias. Modulated layers scale the raw
/// convolution output before the bias is added, so they call conv2d directly.
inline Tensor conv_forward(const Conv2d& c, const Tensor& x) {
    return add_channel_bias(conv2d(x, c.kernel, c.stride, c.padding), c.bias);
}

struct Linear {
    Tensor weight;  // [K, D]
    Tensor bias;    // [K]

    static Linear make(std::size_t out, std::size_t in, double stddev, Rng& rng) {
        Linear l;
        l.weight = Tensor({out, in}, 0.0, true);
        if (stddev > 0.0) {
            for (double& v : l.weight.values()) v = rng.normal(0.0, stddev);
        }
        l.bias = Tensor({out}, 0.0, true);
        return l;
    }

    Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }

    void visit_params(const std::string& prefix, const ParamVisitor& v) {
        v(prefix + ".weight", weight);
        v(prefix + ".bias", bias);
    }
};

struct BatchNorm {
    Tensor gamma;
    Tensor beta;
    RunningStats stats;

    static BatchNorm make(std::size_t channels) {
        BatchNorm bn;
        bn.gamma = Tensor({channels}, 1.0, true);
        bn.beta = Tensor({channels}, 0.0, true);
        bn.stats = RunningStats(channels);
        return bn;
    }

    Tensor forward(const Tensor& x, BNMode mode, bool update_running = true) {
        return batchnorm(x, gamma, beta, stats, mode, update_running);
    }

    void visit_params(const std::string& prefix, const ParamVisitor& v) {
        v(prefix + ".gamma", gamma);
        v(prefix + ".beta", beta);
    }
    void visit_stats(const std::string& prefix, const StatsVisitor& v) {
        v(prefix + ".running_mean", stats.mean);
        v(prefix + ".running_var", stats.var);
    }
};

}  // namespace awnet
