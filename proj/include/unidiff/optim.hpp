#pragma once

#include <cmath>
#include <vector>

#include "unidiff/parameters.hpp"

namespace unidiff {

struct AdamOptions {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // L2 term added to the gradient
};

// Adam over the trainable entries of one ParameterStore. Moment buffers are
// laid out by parameter index, so the store must not change shape between
// steps.
template <typename T>
class Adam {
public:
    Adam() = default;
    Adam(const ParameterStore<T>& store, AdamOptions opts) : opts_(opts) {
        for (const auto& p : store) {
            m_.emplace_back(p.trainable ? p.value.size() : 0, 0.0);
            v_.emplace_back(p.trainable ? p.value.size() : 0, 0.0);
        }
    }

    const AdamOptions& options() const { return opts_; }
    long steps() const { return t_; }

    void step(ParameterStore<T>& store) {
        ++t_;
        const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
        const double lr = opts_.learning_rate;
        for (std::size_t i = 0; i < store.size(); ++i) {
            auto& p = store[static_cast<int>(i)];
            if (!p.trainable) continue;
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < p.value.size(); ++j) {
                const double g = static_cast<double>(p.grad[j]) + opts_.weight_decay * static_cast<double>(p.value[j]);
                m[j] = opts_.beta1 * m[j] + (1.0 - opts_.beta1) * g;
                v[j] = opts_.beta2 * v[j] + (1.0 - opts_.beta2) * g * g;
                const double upd = lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + opts_.eps);
                p.value[j] = static_cast<T>(static_cast<double>(p.value[j]) - upd);
            }
        }
    }

private:
    AdamOptions opts_;
    long t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

}  // namespace unidiff
