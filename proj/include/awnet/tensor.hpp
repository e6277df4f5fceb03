#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "awnet/errors.hpp"

namespace awnet {

using Shape = std::vector<std::size_t>;

namespace detail {

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

struct TensorData {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until first touched; empty means "all zero"
    bool requires_grad = false;

    std::vector<double>& ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), 0.0);
        return grad;
    }
};

}  // namespace detail

/// Dense row-major tensor of 64-bit floats. Value-semantic handle over shared
/// storage: copies alias the same buffer, clone() makes a deep copy. Gradient
/// participation is opt-in via requires_grad.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
        : d_(std::make_shared<detail::TensorData>()) {
        d_->shape = std::move(shape);
        d_->values.assign(detail::shape_numel(d_->shape), fill);
        d_->requires_grad = requires_grad;
    }

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (detail::shape_numel(shape) != values.size()) {
            throw std::invalid_argument("Tensor::from: shape " + shape_str(shape) + " does not match " +
                                        std::to_string(values.size()) + " values");
        }
        Tensor t;
        t.d_ = std::make_shared<detail::TensorData>();
        t.d_->shape = std::move(shape);
        t.d_->values = std::move(values);
        t.d_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t dim(std::size_t i) const { return d_->shape.at(i); }
    std::size_t numel() const { return d_->values.size(); }

    std::vector<double>& values() { return d_->values; }
    const std::vector<double>& values() const { return d_->values; }
    double* data() { return d_->values.data(); }
    const double* data() const { return d_->values.data(); }

    double scalar_value() const {
        if (numel() != 1) {
            throw std::invalid_argument("scalar_value: tensor has shape " + shape_str(shape()));
        }
        return d_->values[0];
    }

    bool requires_grad() const { return d_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        d_->requires_grad = rg;
        return *this;
    }

    /// Gradient buffer, allocated as zeros on first access. A tensor that never
    /// received an adjoint therefore reads as all-zero gradient.
    std::vector<double>& grad() { return d_->ensure_grad(); }
    const std::vector<double>& grad() const { return d_->ensure_grad(); }
    bool grad_allocated() const { return !d_->grad.empty(); }
    void zero_grad() {
        if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
    }

    /// Deep copy of values (fresh storage, no gradient, keeps requires_grad off).
    Tensor clone() const {
        Tensor t;
        t.d_ = std::make_shared<detail::TensorData>();
        t.d_->shape = d_->shape;
        t.d_->values = d_->values;
        t.d_->requires_grad = false;
        return t;
    }

    bool all_finite() const {
        for (double v : d_->values) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    std::shared_ptr<detail::TensorData> impl() const { return d_; }

private:
    std::shared_ptr<detail::TensorData> d_;
};

/// Ordered record of the primitive operations executed while the graph was
/// active. backward() replays the adjoint closures in exact reverse execution
/// order. Calling backward twice without zeroing gradients accumulates.
/// A Graph is a single-threaded unit; distinct graphs may live on distinct
/// threads (the active-graph pointer is thread-local).
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    void record(std::shared_ptr<detail::TensorData> output, std::function<void()> node) {
        outputs_.push_back(std::move(output));
        nodes_.push_back(std::move(node));
    }
    std::size_t size() const { return nodes_.size(); }
    void clear() {
        nodes_.clear();
        outputs_.clear();
    }

    void backward(const Tensor& loss) {
        if (loss.numel() != 1) {
            throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        }
        // Adjoints of op outputs (intermediates) are rebuilt per pass; only
        // leaf gradients accumulate across repeated backward calls.
        for (auto& o : outputs_) {
            if (!o->grad.empty()) std::fill(o->grad.begin(), o->grad.end(), 0.0);
        }
        loss.impl()->ensure_grad()[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    static Graph*& active_slot() {
        thread_local Graph* active = nullptr;
        return active;
    }
    static Graph* active() { return active_slot(); }

    /// Makes a graph the active tape for the current scope.
    class Scope {
    public:
        explicit Scope(Graph& g) : prev_(active_slot()) { active_slot() = &g; }
        ~Scope() { active_slot() = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Graph* prev_;
    };

    /// Suspends taping (teacher forwards, finite differences, plain evaluation).
    class NoGrad {
    public:
        NoGrad() : prev_(active_slot()) { active_slot() = nullptr; }
        ~NoGrad() { active_slot() = prev_; }
        NoGrad(const NoGrad&) = delete;
        NoGrad& operator=(const NoGrad&) = delete;

    private:
        Graph* prev_;
    };

private:
    std::vector<std::function<void()>> nodes_;
    std::vector<std::shared_ptr<detail::TensorData>> outputs_;
};

inline void backward(const Tensor& loss, Graph& graph) { graph.backward(loss); }

namespace detail {

using DataPtr = std::shared_ptr<TensorData>;

inline Graph* tape_for(bool any_requires_grad) {
    Graph* g = Graph::active();
    return (g && any_requires_grad) ? g : nullptr;
}

/// Adjoint of `out` or nullptr when no adjoint ever reached it (treated as zero).
inline const std::vector<double>* out_grad(const DataPtr& out) {
    return out->grad.empty() ? nullptr : &out->grad;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    Tensor out(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] + b.values()[i];
    if (Graph* g = detail::tape_for(a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        auto ad = a.impl(), bd = b.impl(), od = out.impl();
        g->record(od, [ad, bd, od] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            if (ad->requires_grad) {
                auto& ga = ad->ensure_grad();
                for (std::size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i];
            }
            if (bd->requires_grad) {
                auto& gb = bd->ensure_grad();
                for (std::size_t i = 0; i < go->size(); ++i) gb[i] += (*go)[i];
            }
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor out(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] - b.values()[i];
    if (Graph* g = detail::tape_for(a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        auto ad = a.impl(), bd = b.impl(), od = out.impl();
        g->record(od, [ad, bd, od] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            if (ad->requires_grad) {
                auto& ga = ad->ensure_grad();
                for (std::size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i];
            }
            if (bd->requires_grad) {
                auto& gb = bd->ensure_grad();
                for (std::size_t i = 0; i < go->size(); ++i) gb[i] -= (*go)[i];
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor out(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] * b.values()[i];
    if (Graph* g = detail::tape_for(a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        auto ad = a.impl(), bd = b.impl(), od = out.impl();
        g->record(od, [ad, bd, od] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            if (ad->requires_grad) {
                auto& ga = ad->ensure_grad();
                for (std::size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i] * bd->values[i];
            }
            if (bd->requires_grad) {
                auto& gb = bd->ensure_grad();
                for (std::size_t i = 0; i < go->size(); ++i) gb[i] += (*go)[i] * ad->values[i];
            }
        });
    }
    return out;
}

/// out = scale * x + shift, elementwise.
inline Tensor affine(const Tensor& x, double scale, double shift) {
    Tensor out(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = scale * x.values()[i] + shift;
    if (Graph* g = detail::tape_for(x.requires_grad())) {
        out.set_requires_grad(true);
        auto xd = x.impl(), od = out.impl();
        g->record(od, [xd, od, scale] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            auto& gx = xd->ensure_grad();
            for (std::size_t i = 0; i < go->size(); ++i) gx[i] += scale * (*go)[i];
        });
    }
    return out;
}

inline Tensor relu(const Tensor& x) {
    Tensor out(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = x.values()[i] > 0.0 ? x.values()[i] : 0.0;
    if (Graph* g = detail::tape_for(x.requires_grad())) {
        out.set_requires_grad(true);
        auto xd = x.impl(), od = out.impl();
        g->record(od, [xd, od] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            auto& gx = xd->ensure_grad();
            for (std::size_t i = 0; i < go->size(); ++i) {
                if (xd->values[i] > 0.0) gx[i] += (*go)[i];
            }
        });
    }
    return out;
}

inline Tensor tanh(const Tensor& x) {
    Tensor out(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = std::tanh(x.values()[i]);
    if (Graph* g = detail::tape_for(x.requires_grad())) {
        out.set_requires_grad(true);
        auto xd = x.impl(), od = out.impl();
        g->record(od, [xd, od] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            auto& gx = xd->ensure_grad();
            for (std::size_t i = 0; i < go->size(); ++i) {
                const double t = od->values[i];
                gx[i] += (*go)[i] * (1.0 - t * t);
            }
        });
    }
    return out;
}

/// out = x^p for strictly positive x (regulation signals live in (0, 2)).
inline Tensor pow_scalar(const Tensor& x, double p) {
    Tensor out(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) {
        if (!(x.values()[i] > 0.0)) {
            throw std::invalid_argument("pow_scalar: base must be > 0, got " + std::to_string(x.values()[i]));
        }
        out.values()[i] = std::pow(x.values()[i], p);
    }
    if (Graph* g = detail::tape_for(x.requires_grad())) {
        out.set_requires_grad(true);
        auto xd = x.impl(), od = out.impl();
        g->record(od, [xd, od, p] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            auto& gx = xd->ensure_grad();
            for (std::size_t i = 0; i < go->size(); ++i) {
                // d/dx x^p = p * x^(p-1) = p * out / x  (x > 0)
                gx[i] += (*go)[i] * p * od->values[i] / xd->values[i];
            }
        });
    }
    return out;
}

/// log(max(x, eps)); gradient is 1/x above the guard and 0 inside it.
inline Tensor log_guard(const Tensor& x, double eps = 1e-12) {
    Tensor out(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = std::log(std::max(x.values()[i], eps));
    if (Graph* g = detail::tape_for(x.requires_grad())) {
        out.set_requires_grad(true);
        auto xd = x.impl(), od = out.impl();
        g->record(od, [xd, od, eps] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            auto& gx = xd->ensure_grad();
            for (std::size_t i = 0; i < go->size(); ++i) {
                if (xd->values[i] > eps) gx[i] += (*go)[i] / xd->values[i];
            }
        });
    }
    return out;
}

/// out = min(x, cap), elementwise; gradient passes where x < cap.
inline Tensor min_with_const(const Tensor& x, double cap) {
    Tensor out(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = std::min(x.values()[i], cap);
    if (Graph* g = detail::tape_for(x.requires_grad())) {
        out.set_requires_grad(true);
        auto xd = x.impl(), od = out.impl();
        g->record(od, [xd, od, cap] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            auto& gx = xd->ensure_grad();
            for (std::size_t i = 0; i < go->size(); ++i) {
                if (xd->values[i] < cap) gx[i] += (*go)[i];
            }
        });
    }
    return out;
}

/// Clamps into [lo, hi]; gradient passes strictly inside the interval.
inline Tensor clamp_const(const Tensor& x, double lo, double hi) {
    Tensor out(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = std::clamp(x.values()[i], lo, hi);
    if (Graph* g = detail::tape_for(x.requires_grad())) {
        out.set_requires_grad(true);
        auto xd = x.impl(), od = out.impl();
        g->record(od, [xd, od, lo, hi] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            auto& gx = xd->ensure_grad();
            for (std::size_t i = 0; i < go->size(); ++i) {
                if (xd->values[i] > lo && xd->values[i] < hi) gx[i] += (*go)[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape and reduction primitives
// ---------------------------------------------------------------------------

/// Concatenates two rank-1 tensors.
inline Tensor concat_vec(const Tensor& a, const Tensor& b) {
    if (a.rank() != 1 || b.rank() != 1) {
        throw std::invalid_argument("concat_vec: need rank-1 tensors, got " + shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()));
    }
    const std::size_t na = a.numel(), nb = b.numel();
    Tensor out({na + nb});
    std::copy(a.values().begin(), a.values().end(), out.values().begin());
    std::copy(b.values().begin(), b.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(na));
    if (Graph* g = detail::tape_for(a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        auto ad = a.impl(), bd = b.impl(), od = out.impl();
        g->record(od, [ad, bd, od, na, nb] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            if (ad->requires_grad) {
                auto& ga = ad->ensure_grad();
                for (std::size_t i = 0; i < na; ++i) ga[i] += (*go)[i];
            }
            if (bd->requires_grad) {
                auto& gb = bd->ensure_grad();
                for (std::size_t i = 0; i < nb; ++i) gb[i] += (*go)[na + i];
            }
        });
    }
    return out;
}

inline Tensor reshape(const Tensor& x, Shape new_shape) {
    if (detail::shape_numel(new_shape) != x.numel()) {
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
    }
    Tensor out = Tensor::from(std::move(new_shape), x.values());
    if (Graph* g = detail::tape_for(x.requires_grad())) {
        out.set_requires_grad(true);
        auto xd = x.impl(), od = out.impl();
        g->record(od, [xd, od] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            auto& gx = xd->ensure_grad();
            for (std::size_t i = 0; i < go->size(); ++i) gx[i] += (*go)[i];
        });
    }
    return out;
}

inline Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    Tensor out = Tensor::scalar(s);
    if (Graph* g = detail::tape_for(x.requires_grad())) {
        out.set_requires_grad(true);
        auto xd = x.impl(), od = out.impl();
        g->record(od, [xd, od] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            auto& gx = xd->ensure_grad();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (*go)[0];
        });
    }
    return out;
}

inline Tensor mean_all(const Tensor& x) {
    if (x.numel() == 0) throw std::invalid_argument("mean_all: empty tensor");
    return affine(sum_all(x), 1.0 / static_cast<double>(x.numel()), 0.0);
}

/// Inner product with a constant weight vector: out = sum_i x_i * w_i.
inline Tensor weighted_sum(const Tensor& x, const std::vector<double>& w) {
    if (w.size() != x.numel()) {
        throw std::invalid_argument("weighted_sum: weight size " + std::to_string(w.size()) +
                                    " vs tensor numel " + std::to_string(x.numel()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += x.values()[i] * w[i];
    Tensor out = Tensor::scalar(s);
    if (Graph* g = detail::tape_for(x.requires_grad())) {
        out.set_requires_grad(true);
        auto xd = x.impl(), od = out.impl();
        g->record(od, [xd, od, w] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            auto& gx = xd->ensure_grad();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (*go)[0] * w[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Row-wise (per-sample) and channel-wise primitives
// ---------------------------------------------------------------------------

/// Scales each sample n (the leading axis) of x by w[n].
inline Tensor mul_rows(const Tensor& x, const Tensor& w) {
    if (x.rank() < 1 || w.rank() != 1 || w.dim(0) != x.dim(0)) {
        throw std::invalid_argument("mul_rows: x " + shape_str(x.shape()) + " vs weights " + shape_str(w.shape()));
    }
    const std::size_t n = x.dim(0);
    const std::size_t row = x.numel() / n;
    Tensor out(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
        const double wi = w.values()[i];
        for (std::size_t j = 0; j < row; ++j) out.values()[i * row + j] = x.values()[i * row + j] * wi;
    }
    if (Graph* g = detail::tape_for(x.requires_grad() || w.requires_grad())) {
        out.set_requires_grad(true);
        auto xd = x.impl(), wd = w.impl(), od = out.impl();
        g->record(od, [xd, wd, od, n, row] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            if (xd->requires_grad) {
                auto& gx = xd->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    const double wi = wd->values[i];
                    for (std::size_t j = 0; j < row; ++j) gx[i * row + j] += (*go)[i * row + j] * wi;
                }
            }
            if (wd->requires_grad) {
                auto& gw = wd->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < row; ++j) acc += (*go)[i * row + j] * xd->values[i * row + j];
                    gw[i] += acc;
                }
            }
        });
    }
    return out;
}

/// Scales channel c of sample n by s[n, c]; x is [N,C,H,W], s is [N,C].
/// This is the post-convolution form of filter-wise weight modulation.
inline Tensor scale_channels(const Tensor& x, const Tensor& s) {
    if (x.rank() != 4 || s.rank() != 2 || s.dim(0) != x.dim(0) || s.dim(1) != x.dim(1)) {
        throw std::invalid_argument("scale_channels: x " + shape_str(x.shape()) + " vs scales " +
                                    shape_str(s.shape()));
    }
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double sv = s.values()[i * c + ch];
            const std::size_t base = (i * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j) out.values()[base + j] = x.values()[base + j] * sv;
        }
    }
    if (Graph* g = detail::tape_for(x.requires_grad() || s.requires_grad())) {
        out.set_requires_grad(true);
        auto xd = x.impl(), sd = s.impl(), od = out.impl();
        g->record(od, [xd, sd, od, n, c, hw] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            if (xd->requires_grad) {
                auto& gx = xd->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        const double sv = sd->values[i * c + ch];
                        const std::size_t base = (i * c + ch) * hw;
                        for (std::size_t j = 0; j < hw; ++j) gx[base + j] += (*go)[base + j] * sv;
                    }
                }
            }
            if (sd->requires_grad) {
                auto& gs = sd->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        const std::size_t base = (i * c + ch) * hw;
                        double acc = 0.0;
                        for (std::size_t j = 0; j < hw; ++j) acc += (*go)[base + j] * xd->values[base + j];
                        gs[i * c + ch] += acc;
                    }
                }
            }
        });
    }
    return out;
}

/// Column j of a [N,K] tensor as a [N] vector.
inline Tensor select_column(const Tensor& x, std::size_t col) {
    if (x.rank() != 2 || col >= x.dim(1)) {
        throw std::invalid_argument("select_column: index " + std::to_string(col) + " out of " +
                                    shape_str(x.shape()));
    }
    const std::size_t n = x.dim(0), k = x.dim(1);
    Tensor out({n});
    for (std::size_t i = 0; i < n; ++i) out.values()[i] = x.values()[i * k + col];
    if (Graph* g = detail::tape_for(x.requires_grad())) {
        out.set_requires_grad(true);
        auto xd = x.impl(), od = out.impl();
        g->record(od, [xd, od, n, k, col] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            auto& gx = xd->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) gx[i * k + col] += (*go)[i];
        });
    }
    return out;
}

/// Concatenates [N,C_i] blocks along the feature axis.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const std::size_t n = parts.front().dim(0);
    std::size_t total = 0;
    bool any_rg = false;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != n) {
            throw std::invalid_argument("concat_cols: need matching [N,C] blocks, got " + shape_str(p.shape()));
        }
        total += p.dim(1);
        any_rg = any_rg || p.requires_grad();
    }
    Tensor out({n, total});
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t c = p.dim(1);
        for (std::size_t i = 0; i < n; ++i) {
            std::copy_n(p.values().begin() + static_cast<std::ptrdiff_t>(i * c), c,
                        out.values().begin() + static_cast<std::ptrdiff_t>(i * total + off));
        }
        off += c;
    }
    if (Graph* g = detail::tape_for(any_rg)) {
        out.set_requires_grad(true);
        std::vector<detail::DataPtr> ins;
        std::vector<std::size_t> cols;
        for (const auto& p : parts) {
            ins.push_back(p.impl());
            cols.push_back(p.dim(1));
        }
        auto od = out.impl();
        g->record(od, [ins, cols, od, n, total] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            std::size_t off2 = 0;
            for (std::size_t k = 0; k < ins.size(); ++k) {
                if (ins[k]->requires_grad) {
                    auto& gi = ins[k]->ensure_grad();
                    for (std::size_t i = 0; i < n; ++i) {
                        for (std::size_t j = 0; j < cols[k]; ++j) {
                            gi[i * cols[k] + j] += (*go)[i * total + off2 + j];
                        }
                    }
                }
                off2 += cols[k];
            }
        });
    }
    return out;
}

/// Per-column affine map with constant coefficients:
/// out[n,j] = scale[j] * x[n,j] + shift[j].
inline Tensor affine_cols(const Tensor& x, const std::vector<double>& scale, const std::vector<double>& shift) {
    if (x.rank() != 2 || scale.size() != x.dim(1) || shift.size() != x.dim(1)) {
        throw std::invalid_argument("affine_cols: x " + shape_str(x.shape()) + " vs " +
                                    std::to_string(scale.size()) + " coefficients");
    }
    const std::size_t n = x.dim(0), c = x.dim(1);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) out.values()[i * c + j] = scale[j] * x.values()[i * c + j] + shift[j];
    }
    if (Graph* g = detail::tape_for(x.requires_grad())) {
        out.set_requires_grad(true);
        auto xd = x.impl(), od = out.impl();
        const auto scale_copy = scale;
        g->record(od, [xd, od, scale_copy, n, c] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            auto& gx = xd->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += scale_copy[j] * (*go)[i * c + j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra primitives
// ---------------------------------------------------------------------------

/// y = x W^T + b with x [N,D], W [K,D], b [K] -> [N,K].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.rank() != 2 || weight.rank() != 2 || bias.rank() != 1 || x.dim(1) != weight.dim(1) ||
        bias.dim(0) != weight.dim(0)) {
        throw std::invalid_argument("linear: x " + shape_str(x.shape()) + ", W " + shape_str(weight.shape()) +
                                    ", b " + shape_str(bias.shape()));
    }
    const std::size_t n = x.dim(0), d = x.dim(1), k = weight.dim(0);
    Tensor out({n, k});
    for (std::size_t i = 0; i < n; ++i) {
        const double* xr = x.data() + i * d;
        for (std::size_t j = 0; j < k; ++j) {
            const double* wr = weight.data() + j * d;
            double acc = bias.values()[j];
            for (std::size_t t = 0; t < d; ++t) acc += xr[t] * wr[t];
            out.values()[i * k + j] = acc;
        }
    }
    if (Graph* g = detail::tape_for(x.requires_grad() || weight.requires_grad() || bias.requires_grad())) {
        out.set_requires_grad(true);
        auto xd = x.impl(), wd = weight.impl(), bd = bias.impl(), od = out.impl();
        g->record(od, [xd, wd, bd, od, n, d, k] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            if (xd->requires_grad) {
                auto& gx = xd->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < k; ++j) {
                        const double gij = (*go)[i * k + j];
                        if (gij == 0.0) continue;
                        const double* wr = wd->values.data() + j * d;
                        double* gxr = gx.data() + i * d;
                        for (std::size_t t = 0; t < d; ++t) gxr[t] += gij * wr[t];
                    }
                }
            }
            if (wd->requires_grad) {
                auto& gw = wd->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    const double* xr = xd->values.data() + i * d;
                    for (std::size_t j = 0; j < k; ++j) {
                        const double gij = (*go)[i * k + j];
                        if (gij == 0.0) continue;
                        double* gwr = gw.data() + j * d;
                        for (std::size_t t = 0; t < d; ++t) gwr[t] += gij * xr[t];
                    }
                }
            }
            if (bd->requires_grad) {
                auto& gb = bd->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < k; ++j) gb[j] += (*go)[i * k + j];
                }
            }
        });
    }
    return out;
}

/// 2-D cross-correlation (deep-learning "convolution"), no bias.
/// input [N,Cin,H,W], kernel [Cout,Cin,kh,kw] -> [N,Cout,H',W'].
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
    if (input.rank() != 4 || kernel.rank() != 4) {
        throw std::invalid_argument("conv2d: need 4-D input and kernel, got input " + shape_str(input.shape()) +
                                    ", kernel " + shape_str(kernel.shape()));
    }
    if (input.dim(1) != kernel.dim(1)) {
        throw std::invalid_argument("conv2d: input channels " + std::to_string(input.dim(1)) +
                                    " do not match kernel channels " + std::to_string(kernel.dim(1)) +
                                    " (input " + shape_str(input.shape()) + ", kernel " + shape_str(kernel.shape()) +
                                    ")");
    }
    if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
    const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    const std::size_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    const long hpad = static_cast<long>(h) + 2 * static_cast<long>(padding) - static_cast<long>(kh);
    const long wpad = static_cast<long>(w) + 2 * static_cast<long>(padding) - static_cast<long>(kw);
    if (hpad < 0 || wpad < 0 || hpad % static_cast<long>(stride) != 0 || wpad % static_cast<long>(stride) != 0) {
        throw std::invalid_argument("conv2d: output size (" + std::to_string(hpad) + "/" + std::to_string(stride) +
                                    "+1, " + std::to_string(wpad) + "/" + std::to_string(stride) +
                                    "+1) is not a positive integer for input " + shape_str(input.shape()) +
                                    ", kernel " + shape_str(kernel.shape()));
    }
    const std::size_t oh = static_cast<std::size_t>(hpad) / stride + 1;
    const std::size_t ow = static_cast<std::size_t>(wpad) / stride + 1;

    Tensor out({n, cout, oh, ow});
    const long p = static_cast<long>(padding);
    const long ls = static_cast<long>(stride);
    for (std::size_t in = 0; in < n; ++in) {
        for (std::size_t oc = 0; oc < cout; ++oc) {
            double* oplane = out.data() + ((in * cout + oc) * oh) * ow;
            for (std::size_t ic = 0; ic < cin; ++ic) {
                const double* xplane = input.data() + ((in * cin + ic) * h) * w;
                const double* kplane = kernel.data() + ((oc * cin + ic) * kh) * kw;
                for (std::size_t r = 0; r < kh; ++r) {
                    for (std::size_t c = 0; c < kw; ++c) {
                        const double kv = kplane[r * kw + c];
                        if (kv == 0.0) continue;
                        for (std::size_t y = 0; y < oh; ++y) {
                            const long iy = static_cast<long>(y) * ls + static_cast<long>(r) - p;
                            if (iy < 0 || iy >= static_cast<long>(h)) continue;
                            const double* xrow = xplane + static_cast<std::size_t>(iy) * w;
                            double* orow = oplane + y * ow;
                            for (std::size_t xo = 0; xo < ow; ++xo) {
                                const long ix = static_cast<long>(xo) * ls + static_cast<long>(c) - p;
                                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                                orow[xo] += kv * xrow[static_cast<std::size_t>(ix)];
                            }
                        }
                    }
                }
            }
        }
    }
    if (Graph* g = detail::tape_for(input.requires_grad() || kernel.requires_grad())) {
        out.set_requires_grad(true);
        auto xd = input.impl(), kd = kernel.impl(), od = out.impl();
        g->record(od, [xd, kd, od, n, cin, h, w, cout, kh, kw, oh, ow, p, ls] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            const bool need_gx = xd->requires_grad;
            const bool need_gk = kd->requires_grad;
            auto* gx = need_gx ? &xd->ensure_grad() : nullptr;
            auto* gk = need_gk ? &kd->ensure_grad() : nullptr;
            for (std::size_t in = 0; in < n; ++in) {
                for (std::size_t oc = 0; oc < cout; ++oc) {
                    const double* gplane = go->data() + ((in * cout + oc) * oh) * ow;
                    for (std::size_t ic = 0; ic < cin; ++ic) {
                        const double* xplane = xd->values.data() + ((in * cin + ic) * h) * w;
                        const double* kplane = kd->values.data() + ((oc * cin + ic) * kh) * kw;
                        double* gxplane = need_gx ? gx->data() + ((in * cin + ic) * h) * w : nullptr;
                        double* gkplane = need_gk ? gk->data() + ((oc * cin + ic) * kh) * kw : nullptr;
                        for (std::size_t r = 0; r < kh; ++r) {
                            for (std::size_t c = 0; c < kw; ++c) {
                                const double kv = kplane[r * kw + c];
                                double acc = 0.0;
                                for (std::size_t y = 0; y < oh; ++y) {
                                    const long iy = static_cast<long>(y) * ls + static_cast<long>(r) - p;
                                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                                    const double* xrow = xplane + static_cast<std::size_t>(iy) * w;
                                    double* gxrow =
                                        need_gx ? gxplane + static_cast<std::size_t>(iy) * w : nullptr;
                                    const double* grow = gplane + y * ow;
                                    for (std::size_t xo = 0; xo < ow; ++xo) {
                                        const long ix = static_cast<long>(xo) * ls + static_cast<long>(c) - p;
                                        if (ix < 0 || ix >= static_cast<long>(w)) continue;
                                        const double gv = grow[xo];
                                        if (need_gx) gxrow[static_cast<std::size_t>(ix)] += gv * kv;
                                        if (need_gk) acc += gv * xrow[static_cast<std::size_t>(ix)];
                                    }
                                }
                                if (need_gk) gkplane[r * kw + c] += acc;
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

/// Adds a per-channel bias to a [N,C,H,W] map.
inline Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    if (x.rank() != 4 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
        throw std::invalid_argument("add_channel_bias: x " + shape_str(x.shape()) + " vs bias " +
                                    shape_str(bias.shape()));
    }
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double b = bias.values()[ch];
            const std::size_t base = (i * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j) out.values()[base + j] = x.values()[base + j] + b;
        }
    }
    if (Graph* g = detail::tape_for(x.requires_grad() || bias.requires_grad())) {
        out.set_requires_grad(true);
        auto xd = x.impl(), bd = bias.impl(), od = out.impl();
        g->record(od, [xd, bd, od, n, c, hw] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            if (xd->requires_grad) {
                auto& gx = xd->ensure_grad();
                for (std::size_t i = 0; i < go->size(); ++i) gx[i] += (*go)[i];
            }
            if (bd->requires_grad) {
                auto& gb = bd->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        const std::size_t base = (i * c + ch) * hw;
                        double acc = 0.0;
                        for (std::size_t j = 0; j < hw; ++j) acc += (*go)[base + j];
                        gb[ch] += acc;
                    }
                }
            }
        });
    }
    return out;
}

/// Non-overlapping 2x2 average pooling: [N,C,H,W] -> [N,C,H/2,W/2].
/// H and W must be even, so downsampling stays exact.
inline Tensor avg_pool2x2(const Tensor& x) {
    if (x.rank() != 4) throw std::invalid_argument("avg_pool2x2: need [N,C,H,W], got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 != 0 || w % 2 != 0) {
        throw std::invalid_argument("avg_pool2x2: spatial size must be even, got " + shape_str(x.shape()));
    }
    const std::size_t oh = h / 2, ow = w / 2;
    Tensor out({n, c, oh, ow});
    for (std::size_t p = 0; p < n * c; ++p) {
        const double* xp = x.data() + p * h * w;
        double* op = out.data() + p * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t xo = 0; xo < ow; ++xo) {
                op[y * ow + xo] = 0.25 * (xp[2 * y * w + 2 * xo] + xp[2 * y * w + 2 * xo + 1] +
                                          xp[(2 * y + 1) * w + 2 * xo] + xp[(2 * y + 1) * w + 2 * xo + 1]);
            }
        }
    }
    if (Graph* g = detail::tape_for(x.requires_grad())) {
        out.set_requires_grad(true);
        auto xd = x.impl(), od = out.impl();
        g->record(od, [xd, od, n, c, h, w, oh, ow] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            auto& gx = xd->ensure_grad();
            for (std::size_t p = 0; p < n * c; ++p) {
                const double* gp = go->data() + p * oh * ow;
                double* gxp = gx.data() + p * h * w;
                for (std::size_t y = 0; y < oh; ++y) {
                    for (std::size_t xo = 0; xo < ow; ++xo) {
                        const double gv = 0.25 * gp[y * ow + xo];
                        gxp[2 * y * w + 2 * xo] += gv;
                        gxp[2 * y * w + 2 * xo + 1] += gv;
                        gxp[(2 * y + 1) * w + 2 * xo] += gv;
                        gxp[(2 * y + 1) * w + 2 * xo + 1] += gv;
                    }
                }
            }
        });
    }
    return out;
}

/// Mean over the spatial axes: [N,C,H,W] -> [N,C].
inline Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 4) throw std::invalid_argument("global_avg_pool: need [N,C,H,W], got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out({n, c});
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t i = 0; i < n * c; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < hw; ++j) acc += x.values()[i * hw + j];
        out.values()[i] = acc * inv;
    }
    if (Graph* g = detail::tape_for(x.requires_grad())) {
        out.set_requires_grad(true);
        auto xd = x.impl(), od = out.impl();
        g->record(od, [xd, od, n, c, hw, inv] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            auto& gx = xd->ensure_grad();
            for (std::size_t i = 0; i < n * c; ++i) {
                const double gv = (*go)[i] * inv;
                for (std::size_t j = 0; j < hw; ++j) gx[i * hw + j] += gv;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

enum class BNMode { Train, Eval };

/// Per-channel running statistics updated by exponential moving average.
/// Population (biased) variance is used both inside the normalization and in
/// the running update; this is the single variance convention of the project.
struct RunningStats {
    std::vector<double> mean;
    std::vector<double> var;
    double momentum = 0.1;
    double eps = 1e-5;

    explicit RunningStats(std::size_t channels = 0) : mean(channels, 0.0), var(channels, 1.0) {}
};

/// Batch normalization over [N,C,H,W].
/// Train mode normalizes by batch statistics (and, when update_running is set,
/// folds them into the running stats); eval mode normalizes by running stats.
/// update_running=false gives a pure function of the inputs, which is what
/// attack-time forwards and finite-difference probes need.
inline Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta_shift, RunningStats& stats,
                        BNMode mode, bool update_running = true) {
    if (x.rank() != 4) throw std::invalid_argument("batchnorm: need [N,C,H,W], got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (gamma.rank() != 1 || gamma.dim(0) != c || beta_shift.rank() != 1 || beta_shift.dim(0) != c) {
        throw std::invalid_argument("batchnorm: gamma " + shape_str(gamma.shape()) + " / beta " +
                                    shape_str(beta_shift.shape()) + " do not match channels " + std::to_string(c));
    }
    if (stats.mean.size() != c || stats.var.size() != c) {
        throw std::invalid_argument("batchnorm: running stats sized " + std::to_string(stats.mean.size()) +
                                    " do not match channels " + std::to_string(c));
    }
    const std::size_t m = n * h * w;
    const std::size_t hw = h * w;
    if (mode == BNMode::Train && m < 2) {
        throw std::invalid_argument("batchnorm: train mode needs at least 2 elements per channel, got " +
                                    std::to_string(m));
    }

    Tensor out(x.shape());
    std::vector<double> mu(c, 0.0), invstd(c, 0.0);
    auto xhat = std::make_shared<std::vector<double>>(x.numel());

    if (mode == BNMode::Train) {
        std::vector<double> var(c, 0.0);
        for (std::size_t ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double* plane = x.data() + ((i * c + ch) * hw);
                for (std::size_t j = 0; j < hw; ++j) acc += plane[j];
            }
            mu[ch] = acc / static_cast<double>(m);
            double vacc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double* plane = x.data() + ((i * c + ch) * hw);
                for (std::size_t j = 0; j < hw; ++j) {
                    const double d = plane[j] - mu[ch];
                    vacc += d * d;
                }
            }
            var[ch] = vacc / static_cast<double>(m);
            invstd[ch] = 1.0 / std::sqrt(var[ch] + stats.eps);
        }
        if (update_running) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                stats.mean[ch] = (1.0 - stats.momentum) * stats.mean[ch] + stats.momentum * mu[ch];
                stats.var[ch] = (1.0 - stats.momentum) * stats.var[ch] + stats.momentum * var[ch];
            }
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            mu[ch] = stats.mean[ch];
            invstd[ch] = 1.0 / std::sqrt(stats.var[ch] + stats.eps);
        }
    }

    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double g = gamma.values()[ch], b = beta_shift.values()[ch];
            const std::size_t base = (i * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j) {
                const double xh = (x.values()[base + j] - mu[ch]) * invstd[ch];
                (*xhat)[base + j] = xh;
                out.values()[base + j] = g * xh + b;
            }
        }
    }

    if (Graph* g = detail::tape_for(x.requires_grad() || gamma.requires_grad() || beta_shift.requires_grad())) {
        out.set_requires_grad(true);
        auto xd = x.impl(), gd = gamma.impl(), bd = beta_shift.impl(), od = out.impl();
        const bool train = mode == BNMode::Train;
        g->record(od, [xd, gd, bd, od, xhat, invstd, n, c, hw, m, train] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            for (std::size_t ch = 0; ch < c; ++ch) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t base = (i * c + ch) * hw;
                    for (std::size_t j = 0; j < hw; ++j) {
                        sum_g += (*go)[base + j];
                        sum_gx += (*go)[base + j] * (*xhat)[base + j];
                    }
                }
                if (gd->requires_grad) gd->ensure_grad()[ch] += sum_gx;
                if (bd->requires_grad) bd->ensure_grad()[ch] += sum_g;
                if (xd->requires_grad) {
                    auto& gx = xd->ensure_grad();
                    const double gch = gd->values[ch];
                    const double scale = gch * invstd[ch];
                    if (train) {
                        // dx = gamma*invstd*(g - mean(g) - xhat*mean(g*xhat))
                        const double mg = sum_g / static_cast<double>(m);
                        const double mgx = sum_gx / static_cast<double>(m);
                        for (std::size_t i = 0; i < n; ++i) {
                            const std::size_t base = (i * c + ch) * hw;
                            for (std::size_t j = 0; j < hw; ++j) {
                                gx[base + j] += scale * ((*go)[base + j] - mg - (*xhat)[base + j] * mgx);
                            }
                        }
                    } else {
                        for (std::size_t i = 0; i < n; ++i) {
                            const std::size_t base = (i * c + ch) * hw;
                            for (std::size_t j = 0; j < hw; ++j) gx[base + j] += scale * (*go)[base + j];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

/// Row-wise softmax on [N,K] logits.
inline Tensor softmax_rows(const Tensor& x) {
    if (x.rank() != 2) throw std::invalid_argument("softmax_rows: need [N,K], got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), k = x.dim(1);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
        const double* xr = x.data() + i * k;
        double* orow = out.data() + i * k;
        double mx = xr[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, xr[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            orow[j] = std::exp(xr[j] - mx);
            denom += orow[j];
        }
        for (std::size_t j = 0; j < k; ++j) orow[j] /= denom;
    }
    if (Graph* g = detail::tape_for(x.requires_grad())) {
        out.set_requires_grad(true);
        auto xd = x.impl(), od = out.impl();
        g->record(od, [xd, od, n, k] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            auto& gx = xd->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const double* p = od->values.data() + i * k;
                const double* gr = go->data() + i * k;
                double dot = 0.0;
                for (std::size_t j = 0; j < k; ++j) dot += gr[j] * p[j];
                for (std::size_t j = 0; j < k; ++j) gx[i * k + j] += p[j] * (gr[j] - dot);
            }
        });
    }
    return out;
}

/// Row-wise log-softmax on [N,K] logits.
inline Tensor log_softmax_rows(const Tensor& x) {
    if (x.rank() != 2) throw std::invalid_argument("log_softmax_rows: need [N,K], got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), k = x.dim(1);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
        const double* xr = x.data() + i * k;
        double* orow = out.data() + i * k;
        double mx = xr[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, xr[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < k; ++j) denom += std::exp(xr[j] - mx);
        const double lse = mx + std::log(denom);
        for (std::size_t j = 0; j < k; ++j) orow[j] = xr[j] - lse;
    }
    if (Graph* g = detail::tape_for(x.requires_grad())) {
        out.set_requires_grad(true);
        auto xd = x.impl(), od = out.impl();
        g->record(od, [xd, od, n, k] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            auto& gx = xd->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const double* lp = od->values.data() + i * k;
                const double* gr = go->data() + i * k;
                double sum_g = 0.0;
                for (std::size_t j = 0; j < k; ++j) sum_g += gr[j];
                for (std::size_t j = 0; j < k; ++j) gx[i * k + j] += gr[j] - std::exp(lp[j]) * sum_g;
            }
        });
    }
    return out;
}

/// Mean negative log-likelihood of the labelled entries of [N,K] log-probs.
inline Tensor nll_rows(const Tensor& log_probs, const std::vector<std::size_t>& labels) {
    if (log_probs.rank() != 2 || labels.size() != log_probs.dim(0)) {
        throw std::invalid_argument("nll_rows: log-probs " + shape_str(log_probs.shape()) + " vs " +
                                    std::to_string(labels.size()) + " labels");
    }
    const std::size_t n = log_probs.dim(0), k = log_probs.dim(1);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= k) throw std::invalid_argument("nll_rows: label " + std::to_string(labels[i]) +
                                                        " out of range " + std::to_string(k));
        acc -= log_probs.values()[i * k + labels[i]];
    }
    Tensor out = Tensor::scalar(acc / static_cast<double>(n));
    if (Graph* g = detail::tape_for(log_probs.requires_grad())) {
        out.set_requires_grad(true);
        auto xd = log_probs.impl(), od = out.impl();
        const auto labels_copy = labels;
        g->record(od, [xd, od, labels_copy, n, k] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            auto& gx = xd->ensure_grad();
            const double gv = (*go)[0] / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) gx[i * k + labels_copy[i]] -= gv;
        });
    }
    return out;
}

/// Mean cross-entropy between logits and integer labels.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
    return nll_rows(log_softmax_rows(logits), labels);
}

/// Per-row CW margin: max_{i != y} z_i - z_y. Argmax ties break toward the
/// lowest class index.
inline Tensor margin_rows(const Tensor& logits, const std::vector<std::size_t>& labels) {
    if (logits.rank() != 2 || labels.size() != logits.dim(0)) {
        throw std::invalid_argument("margin_rows: logits " + shape_str(logits.shape()) + " vs " +
                                    std::to_string(labels.size()) + " labels");
    }
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    if (k < 2) throw std::invalid_argument("margin_rows: need at least 2 classes");
    Tensor out({n});
    auto rival = std::make_shared<std::vector<std::size_t>>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t y = labels[i];
        if (y >= k) throw std::invalid_argument("margin_rows: label out of range");
        const double* zr = logits.data() + i * k;
        std::size_t best = y == 0 ? 1 : 0;
        for (std::size_t j = 0; j < k; ++j) {
            if (j != y && zr[j] > zr[best]) best = j;
        }
        (*rival)[i] = best;
        out.values()[i] = zr[best] - zr[y];
    }
    if (Graph* g = detail::tape_for(logits.requires_grad())) {
        out.set_requires_grad(true);
        auto xd = logits.impl(), od = out.impl();
        const auto labels_copy = labels;
        g->record(od, [xd, od, labels_copy, rival, n, k] {
            const auto* go = detail::out_grad(od);
            if (!go) return;
            auto& gx = xd->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                gx[i * k + (*rival)[i]] += (*go)[i];
                gx[i * k + labels_copy[i]] -= (*go)[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Finite differences — the independent oracle for all gradient claims
// ---------------------------------------------------------------------------

/// Central-difference gradient of a scalar-valued function at x:
/// (f(x + h e_i) - f(x - h e_i)) / (2h) per coordinate. The evaluation never
/// touches the tape, so the estimate stays independent of reverse mode.
inline Tensor finite_diff_grad(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
    if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: h must be positive");
    Graph::NoGrad off;
    Tensor probe = x.clone();
    {
        Tensor y = f(probe);
        if (y.numel() != 1) {
            throw std::invalid_argument("finite_diff_grad: f must be scalar-valued, got " + shape_str(y.shape()));
        }
    }
    Tensor grad(x.shape());
    for (std::size_t i = 0; i < probe.numel(); ++i) {
        const double orig = probe.values()[i];
        probe.values()[i] = orig + h;
        const double fp = f(probe).scalar_value();
        probe.values()[i] = orig - h;
        const double fm = f(probe).scalar_value();
        probe.values()[i] = orig;
        grad.values()[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

}  // namespace awnet
