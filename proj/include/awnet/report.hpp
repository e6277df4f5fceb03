#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

#include "awnet/tensor.hpp"

namespace awnet {

/// Weighted Robust Accuracy: A_w = gamma_nat * A_nat + gamma_adv * A_adv.
inline double w_robust_acc(double a_nat, double a_adv, double gamma_nat = 0.5, double gamma_adv = 0.5) {
    if (a_nat < 0.0 || a_nat > 1.0 || a_adv < 0.0 || a_adv > 1.0) {
        throw std::invalid_argument("w_robust_acc: accuracies must lie in [0,1]");
    }
    if (gamma_nat < 0.0 || gamma_adv < 0.0) {
        throw std::invalid_argument("w_robust_acc: gamma weights must be nonnegative");
    }
    return gamma_nat * a_nat + gamma_adv * a_adv;
}

/// Accuracy triple of one evaluation: clean accuracy, accuracy under attack
/// and their weighted combination.
struct EvalReport {
    double a_nat = 0.0;
    double a_adv = 0.0;
    double a_w = 0.0;
    double gamma_nat = 0.5;
    double gamma_adv = 0.5;
    std::string attack = "none";
    bool attacked = false;  // false: a_adv simply repeats a_nat
    std::size_t sample_count = 0;
};

/// Row-wise argmax with ties broken toward the lowest class index.
inline std::vector<std::size_t> predict_labels(const Tensor& logits) {
    if (logits.rank() != 2) throw std::invalid_argument("predict_labels: need [N,K] logits");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    std::vector<std::size_t> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j) {
            if (logits.values()[i * k + j] > logits.values()[i * k + best]) best = j;
        }
        out[i] = best;
    }
    return out;
}

}  // namespace awnet
