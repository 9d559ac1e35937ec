#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "unidiff/tensor.hpp"

namespace unidiff {

// Discrete forward diffusion process. Index 0 is the clean image
// (alpha_bar[0] == 1); steps run 1..T.
struct NoiseSchedule {
    int steps = 0;                  // T
    std::vector<double> beta;       // beta[t-1] for t in 1..T
    std::vector<double> alpha_bar;  // length T + 1

    double beta_at(int t) const { return beta.at(static_cast<std::size_t>(t - 1)); }
    double alpha_at(int t) const { return 1.0 - beta_at(t); }
    void check_timestep(int t) const;
};

NoiseSchedule make_linear_schedule(int steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, one timestep for the whole tensor.
template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& sched);

// Per-sample variant over the leading (batch) dimension.
template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, std::span<const int> t, const Tensor<T>& eps, const NoiseSchedule& sched);

constexpr double kEmbeddingBase = 10000.0;

// Sinusoidal features: [sin(t f_0) .. sin(t f_{h-1}), cos(t f_0) .. cos(t f_{h-1})]
// with f_i = base^(-i/h), h = dim/2.
std::vector<double> timestep_embedding(int t, int dim);

}  // namespace unidiff
