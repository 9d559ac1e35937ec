#include "unidiff/schedule.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace unidiff {

void NoiseSchedule::check_timestep(int t) const {
    if (t < 0 || t > steps) {
        throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps) + "]");
    }
}

NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
    if (steps < 1) throw std::invalid_argument("schedule needs at least one step");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
        throw std::invalid_argument("schedule betas must satisfy 0 < beta_start <= beta_end < 1");
    }
    NoiseSchedule s;
    s.steps = steps;
    s.beta.resize(steps);
    s.alpha_bar.resize(steps + 1);
    s.alpha_bar[0] = 1.0;
    for (int i = 0; i < steps; ++i) {
        const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
        s.beta[i] = beta_start + (beta_end - beta_start) * frac;
        s.alpha_bar[i + 1] = s.alpha_bar[i] * (1.0 - s.beta[i]);
    }
    return s;
}

template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& sched) {
    sched.check_timestep(t);
    if (!x0.same_shape(eps)) throw std::invalid_argument("q_sample: noise shape differs from input");
    const T a = static_cast<T>(std::sqrt(sched.alpha_bar[t]));
    const T b = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar[t]));
    Tensor<T> out(x0.shape());
    for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, std::span<const int> t, const Tensor<T>& eps, const NoiseSchedule& sched) {
    if (!x0.same_shape(eps)) throw std::invalid_argument("q_sample: noise shape differs from input");
    if (x0.rank() == 0 || static_cast<std::size_t>(x0.dim(0)) != t.size()) {
        throw std::invalid_argument("q_sample: one timestep per batch item required");
    }
    const std::size_t per = x0.size() / t.size();
    Tensor<T> out(x0.shape());
    for (std::size_t n = 0; n < t.size(); ++n) {
        sched.check_timestep(t[n]);
        const T a = static_cast<T>(std::sqrt(sched.alpha_bar[t[n]]));
        const T b = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar[t[n]]));
        for (std::size_t i = n * per; i < (n + 1) * per; ++i) out[i] = a * x0[i] + b * eps[i];
    }
    return out;
}

std::vector<double> timestep_embedding(int t, int dim) {
    if (t < 0) throw std::invalid_argument("timestep must be non-negative");
    if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("embedding width must be even and >= 2");
    const int half = dim / 2;
    std::vector<double> out(dim);
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(kEmbeddingBase) * static_cast<double>(i) / half);
        out[i] = std::sin(t * freq);
        out[half + i] = std::cos(t * freq);
    }
    return out;
}

template Tensor<float> q_sample(const Tensor<float>&, int, const Tensor<float>&, const NoiseSchedule&);
template Tensor<double> q_sample(const Tensor<double>&, int, const Tensor<double>&, const NoiseSchedule&);
template Tensor<float> q_sample(const Tensor<float>&, std::span<const int>, const Tensor<float>&, const NoiseSchedule&);
template Tensor<double> q_sample(const Tensor<double>&, std::span<const int>, const Tensor<double>&, const NoiseSchedule&);

}  // namespace unidiff
