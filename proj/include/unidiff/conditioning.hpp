#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "unidiff/autograd.hpp"
#include "unidiff/parameters.hpp"
#include "unidiff/schedule.hpp"

namespace unidiff {

// Input representation. Integer codes are part of the file formats.
enum class Modality : int { PRGB = 0, PCA = 1, SAR = 2 };

inline constexpr std::array<Modality, 3> kAllModalities{Modality::PRGB, Modality::PCA, Modality::SAR};
inline constexpr int kModalityCount = 3;

std::string_view modality_name(Modality m);
Modality parse_modality(std::string_view name);
inline int modality_code(Modality m) { return static_cast<int>(m); }

template <typename T>
struct FiLMParams {
    std::vector<T> gamma;
    std::vector<T> beta;
};

struct FilmSite {
    int site_id = 0;
    int channels = 0;
};

struct ConditionerConfig {
    int cond_width = 256;
    int hidden_width = 64;
};

// Per-site gamma/beta nodes for one batch, each [N, C].
struct SiteModulation {
    nn::Var gamma;
    nn::Var beta;
};

// Joint timestep/modality FiLM generator. Every AdaGN site owns a
// (gamma, beta) MLP pair fed with e_t + e_m; the modality table is shared.
// gamma = 1 + mlp_gamma(c), beta = mlp_beta(c), so zeroed output layers
// give the identity modulation.
template <typename T>
class Conditioner {
public:
    Conditioner() = default;
    Conditioner(ConditionerConfig cfg, std::vector<int> site_channels);

    const ConditionerConfig& config() const { return cfg_; }
    const std::vector<FilmSite>& sites() const { return sites_; }
    ParameterStore<T>& parameters() { return params_; }
    const ParameterStore<T>& parameters() const { return params_; }

    // Zeroes every output layer; hidden layers get fan-in init and the
    // modality table a small normal init.
    void init_identity(std::uint64_t seed);
    // Fully random init (output layers included), for tests that need a
    // non-trivial conditioner.
    void init_random(std::uint64_t seed, double output_scale);

    std::vector<SiteModulation> build(nn::Graph<T>& g, std::span<const int> timesteps,
                                      std::span<const Modality> modalities);
    std::vector<SiteModulation> build(nn::Graph<T>& g, std::span<const int> timesteps,
                                      std::span<const Modality> modalities) const;

    FiLMParams<T> film_params(int t, Modality m, int site, const NoiseSchedule& sched) const;

    template <typename U>
    Conditioner<U> cast() const;

private:
    template <typename Store>
    std::vector<SiteModulation> build_impl(Store& store, nn::Graph<T>& g, std::span<const int> timesteps,
                                           std::span<const Modality> modalities) const;

    struct SiteParams {
        int gamma_fc1_w, gamma_fc1_b, gamma_fc2_w, gamma_fc2_b;
        int beta_fc1_w, beta_fc1_b, beta_fc2_w, beta_fc2_b;
    };

    template <typename U>
    friend class Conditioner;

    ConditionerConfig cfg_;
    std::vector<FilmSite> sites_;
    ParameterStore<T> params_;
    int table_ = -1;
    std::vector<SiteParams> site_params_;
};

// GroupNorm(h) * gamma + beta on an NCHW tensor, same params for every sample.
template <typename T>
Tensor<T> adagn(const Tensor<T>& h, const FiLMParams<T>& p, int groups, double eps = 1e-5);

inline int default_groups(int channels) {
    int g = channels < 32 ? channels : 32;
    while (channels % g != 0) --g;
    return g;
}

}  // namespace unidiff
