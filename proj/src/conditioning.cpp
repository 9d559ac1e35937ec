#include "unidiff/conditioning.hpp"

#include <cctype>
#include <cmath>
#include <stdexcept>

namespace unidiff {

std::string_view modality_name(Modality m) {
    switch (m) {
        case Modality::PRGB: return "pRGB";
        case Modality::PCA: return "PCA";
        case Modality::SAR: return "SAR";
    }
    throw std::invalid_argument("invalid modality code");
}

Modality parse_modality(std::string_view name) {
    std::string lower(name);
    for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (lower == "prgb" || lower == "rgb" || lower == "0") return Modality::PRGB;
    if (lower == "pca" || lower == "1") return Modality::PCA;
    if (lower == "sar" || lower == "2") return Modality::SAR;
    throw std::invalid_argument("unknown modality: " + std::string(name));
}

template <typename T>
Conditioner<T>::Conditioner(ConditionerConfig cfg, std::vector<int> site_channels) : cfg_(cfg) {
    if (cfg_.cond_width < 2 || cfg_.cond_width % 2 != 0) throw std::invalid_argument("conditioning width must be even");
    if (cfg_.hidden_width < 1) throw std::invalid_argument("conditioner hidden width must be positive");
    table_ = params_.add("cond.modality_embedding", {kModalityCount, cfg_.cond_width}, true);
    const int e = cfg_.cond_width, h = cfg_.hidden_width;
    for (std::size_t i = 0; i < site_channels.size(); ++i) {
        const int c = site_channels[i];
        sites_.push_back({static_cast<int>(i), c});
        const std::string base = "cond.site" + std::to_string(i);
        SiteParams sp{};
        sp.gamma_fc1_w = params_.add(base + ".gamma.fc1.weight", {h, e}, true);
        sp.gamma_fc1_b = params_.add(base + ".gamma.fc1.bias", {h}, true);
        sp.gamma_fc2_w = params_.add(base + ".gamma.fc2.weight", {c, h}, true);
        sp.gamma_fc2_b = params_.add(base + ".gamma.fc2.bias", {c}, true);
        sp.beta_fc1_w = params_.add(base + ".beta.fc1.weight", {h, e}, true);
        sp.beta_fc1_b = params_.add(base + ".beta.fc1.bias", {h}, true);
        sp.beta_fc2_w = params_.add(base + ".beta.fc2.weight", {c, h}, true);
        sp.beta_fc2_b = params_.add(base + ".beta.fc2.bias", {c}, true);
        site_params_.push_back(sp);
    }
}

template <typename T>
void Conditioner<T>::init_identity(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> small(0.0, 0.02);
    for (auto& v : params_[table_].value.values()) v = static_cast<T>(small(rng));
    const int e = cfg_.cond_width;
    for (const auto& sp : site_params_) {
        for (int idx : {sp.gamma_fc1_w, sp.gamma_fc1_b, sp.beta_fc1_w, sp.beta_fc1_b}) {
            init_fan_in_uniform(params_[idx].value, e, rng);
        }
        for (int idx : {sp.gamma_fc2_w, sp.gamma_fc2_b, sp.beta_fc2_w, sp.beta_fc2_b}) {
            params_[idx].value.fill(T{0});
        }
    }
}

template <typename T>
void Conditioner<T>::init_random(std::uint64_t seed, double output_scale) {
    init_identity(seed);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_real_distribution<double> dist(-output_scale, output_scale);
    for (const auto& sp : site_params_) {
        for (int idx : {sp.gamma_fc2_w, sp.gamma_fc2_b, sp.beta_fc2_w, sp.beta_fc2_b}) {
            for (auto& v : params_[idx].value.values()) v = static_cast<T>(dist(rng));
        }
    }
    std::normal_distribution<double> table(0.0, 0.5);
    for (auto& v : params_[table_].value.values()) v = static_cast<T>(table(rng));
}

template <typename T>
template <typename Store>
std::vector<SiteModulation> Conditioner<T>::build_impl(Store& store, nn::Graph<T>& g, std::span<const int> timesteps,
                                                       std::span<const Modality> modalities) const {
    if (timesteps.size() != modalities.size()) throw std::invalid_argument("one modality per timestep required");
    const int n = static_cast<int>(timesteps.size());
    const int e = cfg_.cond_width;
    if (store[table_].value.dim(1) != e) throw std::invalid_argument("modality embedding width differs from timestep embedding width");
    Tensor<T> et({n, e});
    for (int i = 0; i < n; ++i) {
        const auto emb = timestep_embedding(timesteps[i], e);
        for (int j = 0; j < e; ++j) et[static_cast<std::size_t>(i) * e + j] = static_cast<T>(emb[j]);
    }
    std::vector<int> ids(n);
    for (int i = 0; i < n; ++i) ids[i] = modality_code(modalities[i]);

    const nn::Var em = nn::embedding(g, store.bind(g, table_), std::span<const int>(ids));
    const nn::Var c = nn::add(g, g.input(std::move(et)), em);

    std::vector<SiteModulation> out;
    out.reserve(site_params_.size());
    for (const auto& sp : site_params_) {
        auto mlp = [&](int w1, int b1, int w2, int b2) {
            const nn::Var h = nn::silu(g, nn::linear(g, c, store.bind(g, w1), store.bind(g, b1)));
            return nn::linear(g, h, store.bind(g, w2), store.bind(g, b2));
        };
        SiteModulation mod;
        mod.gamma = nn::add_scalar(g, mlp(sp.gamma_fc1_w, sp.gamma_fc1_b, sp.gamma_fc2_w, sp.gamma_fc2_b), T{1});
        mod.beta = mlp(sp.beta_fc1_w, sp.beta_fc1_b, sp.beta_fc2_w, sp.beta_fc2_b);
        out.push_back(mod);
    }
    return out;
}

template <typename T>
std::vector<SiteModulation> Conditioner<T>::build(nn::Graph<T>& g, std::span<const int> timesteps,
                                                  std::span<const Modality> modalities) {
    return build_impl(params_, g, timesteps, modalities);
}

template <typename T>
std::vector<SiteModulation> Conditioner<T>::build(nn::Graph<T>& g, std::span<const int> timesteps,
                                                  std::span<const Modality> modalities) const {
    return build_impl(params_, g, timesteps, modalities);
}

template <typename T>
FiLMParams<T> Conditioner<T>::film_params(int t, Modality m, int site, const NoiseSchedule& sched) const {
    sched.check_timestep(t);
    if (site < 0 || site >= static_cast<int>(sites_.size())) throw std::out_of_range("FiLM site index out of range");
    nn::Graph<T> g(false);
    const int ts[1] = {t};
    const Modality ms[1] = {m};
    const auto mods = build(g, ts, ms);
    FiLMParams<T> p;
    const auto& gv = g.value(mods[site].gamma);
    const auto& bv = g.value(mods[site].beta);
    p.gamma.assign(gv.data(), gv.data() + gv.size());
    p.beta.assign(bv.data(), bv.data() + bv.size());
    return p;
}

template <typename T>
template <typename U>
Conditioner<U> Conditioner<T>::cast() const {
    Conditioner<U> out;
    out.cfg_ = cfg_;
    out.sites_ = sites_;
    out.params_ = params_.template cast<U>();
    out.table_ = table_;
    out.site_params_.reserve(site_params_.size());
    for (const auto& sp : site_params_) {
        out.site_params_.push_back({sp.gamma_fc1_w, sp.gamma_fc1_b, sp.gamma_fc2_w, sp.gamma_fc2_b, sp.beta_fc1_w,
                                    sp.beta_fc1_b, sp.beta_fc2_w, sp.beta_fc2_b});
    }
    return out;
}

template <typename T>
Tensor<T> adagn(const Tensor<T>& h, const FiLMParams<T>& p, int groups, double eps) {
    if (h.rank() != 4) throw std::invalid_argument("adagn expects NCHW activations");
    const int c = h.dim(1);
    if (groups <= 0 || c % groups != 0) throw std::invalid_argument("adagn: channels not divisible by groups");
    if (p.gamma.size() != static_cast<std::size_t>(c) || p.beta.size() != static_cast<std::size_t>(c)) {
        throw std::invalid_argument("adagn: FiLM parameter length differs from channel count");
    }
    nn::Graph<T> g(false);
    const nn::Var x = g.input(h);
    const nn::Var gamma = g.input(Tensor<T>({c}, p.gamma));
    const nn::Var beta = g.input(Tensor<T>({c}, p.beta));
    const nn::Var y = nn::scale_shift(g, nn::group_norm(g, x, groups, eps), gamma, beta);
    return g.value(y);
}

template class Conditioner<float>;
template class Conditioner<double>;
template Conditioner<double> Conditioner<float>::cast<double>() const;
template Conditioner<float> Conditioner<double>::cast<float>() const;
template Tensor<float> adagn(const Tensor<float>&, const FiLMParams<float>&, int, double);
template Tensor<double> adagn(const Tensor<double>&, const FiLMParams<double>&, int, double);

}  // namespace unidiff
