#include "unidiff/adaptation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "unidiff/errors.hpp"
#include "unidiff/optim.hpp"
#include "unidiff/rng.hpp"

namespace unidiff {

MixPolicy MixPolicy::parse(const std::string& spec) {
    std::string s;
    for (char c : spec) s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    MixPolicy p;
    if (s == "joint" || s == "all" || s.empty()) return p;
    if (s == "pca-only") {
        p.modalities = {Modality::PCA};
        return p;
    }
    p.modalities.clear();
    std::string item;
    std::stringstream ss(s);
    while (std::getline(ss, item, '+')) {
        std::stringstream inner(item);
        std::string name;
        while (std::getline(inner, name, ',')) {
            if (name.empty()) continue;
            const Modality m = parse_modality(name);
            if (std::find(p.modalities.begin(), p.modalities.end(), m) != p.modalities.end()) {
                throw std::invalid_argument("modality listed twice in mix policy: " + spec);
            }
            p.modalities.push_back(m);
        }
    }
    if (p.modalities.empty()) throw std::invalid_argument("empty mix policy: " + spec);
    std::sort(p.modalities.begin(), p.modalities.end());
    return p;
}

std::string MixPolicy::name() const {
    std::string out;
    for (Modality m : modalities) {
        if (!out.empty()) out += "+";
        out += modality_name(m);
    }
    return out;
}

void AdaptationConfig::validate() const {
    if (steps < 0) throw std::invalid_argument("adaptation steps must be non-negative");
    if (batch_size < 1) throw std::invalid_argument("adaptation batch size must be positive");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw std::invalid_argument("learning rate must be finite and non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw std::invalid_argument("Adam betas must lie in [0, 1)");
    if (policy.modalities.empty()) throw std::invalid_argument("mix policy lists no modality");
}

const RasterStack& representation(const SceneBundle& scene, Modality m) {
    switch (m) {
        case Modality::PRGB: return scene.prgb;
        case Modality::PCA: return scene.pca3;
        case Modality::SAR: return scene.sar3;
    }
    throw std::invalid_argument("invalid modality");
}

void copy_patch(const RasterStack& img, int row, int col, Tensor<float>& dst, int item) {
    const int s = dst.dim(2);
    if (img.channels != dst.dim(1)) throw std::invalid_argument("patch channel count differs from the raster");
    if (row < 0 || col < 0 || row + s > img.height || col + s > img.width) throw std::out_of_range("patch window outside the raster");
    for (int c = 0; c < img.channels; ++c) {
        for (int y = 0; y < s; ++y) {
            const float* src = &img.values[(static_cast<std::size_t>(c) * img.height + row + y) * img.width + col];
            std::copy(src, src + s, &dst.at(item, c, y, 0));
        }
    }
}

std::vector<Modality> assign_modalities(const MixPolicy& policy, int batch_size, int step, std::mt19937_64& rng) {
    const auto& mods = policy.modalities;
    const int k = static_cast<int>(mods.size());
    if (policy.assignment == MixPolicy::Assignment::PerBatch) {
        return std::vector<Modality>(batch_size, mods[static_cast<std::size_t>(step) % k]);
    }
    std::vector<int> counts(k, batch_size / k);
    int left = batch_size % k;
    std::vector<int> order(k);
    for (int i = 0; i < k; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    // The anchor takes a leftover slot first so small batches still see it.
    auto anchor = std::find(mods.begin(), mods.end(), Modality::PRGB);
    if (anchor != mods.end()) {
        const int a = static_cast<int>(anchor - mods.begin());
        std::stable_partition(order.begin(), order.end(), [a](int i) { return i == a; });
    }
    for (int i = 0; i < left; ++i) ++counts[order[i]];
    std::vector<Modality> out;
    out.reserve(batch_size);
    for (int i = 0; i < k; ++i) out.insert(out.end(), counts[i], mods[i]);
    std::shuffle(out.begin(), out.end(), rng);
    return out;
}

TrainingBatch sample_training_batch(const SceneBundle& scene, const AdaptationConfig& cfg, int step, int patch_size) {
    if (!scene.prepared()) throw std::invalid_argument("scene has no prepared representations");
    if (scene.height() < patch_size || scene.width() < patch_size) {
        throw std::invalid_argument("scene " + std::to_string(scene.height()) + "x" + std::to_string(scene.width()) +
                                    " yields no " + std::to_string(patch_size) + "-pixel patch");
    }
    std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(step) * 2));
    TrainingBatch b;
    b.modalities = assign_modalities(cfg.policy, cfg.batch_size, step, rng);
    b.x0 = Tensor<float>({cfg.batch_size, 3, patch_size, patch_size});
    std::uniform_int_distribution<int> row(0, scene.height() - patch_size);
    std::uniform_int_distribution<int> col(0, scene.width() - patch_size);
    for (int i = 0; i < cfg.batch_size; ++i) {
        const int r = row(rng);
        const int c = col(rng);
        b.origins.emplace_back(r, c);
        copy_patch(representation(scene, b.modalities[i]), r, c, b.x0, i);
    }
    return b;
}

NoiseDraw draw_noise(const std::vector<int>& shape, const NoiseSchedule& sched, std::mt19937_64& rng) {
    NoiseDraw d;
    std::uniform_int_distribution<int> tdist(1, sched.steps);
    for (int i = 0; i < shape.at(0); ++i) d.timesteps.push_back(tdist(rng));
    d.eps = Tensor<float>(shape);
    std::normal_distribution<double> n01;
    for (auto& v : d.eps.values()) v = static_cast<float>(n01(rng));
    return d;
}

template <typename T>
void check_normalized(const Tensor<T>& x0) {
    for (std::size_t i = 0; i < x0.size(); ++i) {
        const double v = static_cast<double>(x0[i]);
        if (!(std::fabs(v) <= 1.0 + 1e-6)) {
            throw std::invalid_argument("denoising input not normalised to [-1, 1]: element " + std::to_string(i) + " = " + std::to_string(v));
        }
    }
}

double denoise_loss(const NoisePredictor& predict, const Tensor<float>& x0, std::span<const Modality> modalities,
                    const NoiseDraw& noise, const NoiseSchedule& sched) {
    check_normalized(x0);
    const Tensor<float> xt = q_sample(x0, noise.timesteps, noise.eps, sched);
    const Tensor<float> pred = predict(xt, noise.timesteps, modalities);
    if (!pred.same_shape(noise.eps)) throw std::invalid_argument("noise predictor changed the tensor shape");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = static_cast<double>(noise.eps[i]) - pred[i];
        s += d * d;
    }
    return s / static_cast<double>(pred.size());
}

template <typename T>
nn::Var denoise_loss(nn::Graph<T>& g, Denoiser<T>& model, const Tensor<T>& x0, std::span<const Modality> modalities,
                     std::span<const int> timesteps, const Tensor<T>& eps, const NoiseSchedule& sched) {
    check_normalized(x0);
    const Tensor<T> xt = q_sample(x0, timesteps, eps, sched);
    const auto r = model.forward(g, g.input(xt), timesteps, modalities, typename Denoiser<T>::ForwardOptions{});
    return nn::mse(g, r.output, eps);
}

double LossTrace::mean(std::size_t begin, std::size_t end) const {
    end = std::min(end, loss.size());
    if (begin >= end) throw std::invalid_argument("empty loss window");
    double s = 0.0;
    for (std::size_t i = begin; i < end; ++i) s += loss[i];
    return s / static_cast<double>(end - begin);
}

std::string LossTrace::to_csv() const {
    std::ostringstream out;
    out.precision(9);
    out << "step,loss,prgb,pca,sar\n";
    std::array<double, kModalityCount> sum{};
    std::array<int, kModalityCount> cnt{};
    for (std::size_t i = 0; i < loss.size(); ++i) {
        out << i + 1 << ',' << loss[i];
        for (int m = 0; m < kModalityCount; ++m) {
            if (!std::isnan(per_modality[i][m])) {
                sum[m] += per_modality[i][m];
                ++cnt[m];
            }
            out << ',';
            if (cnt[m]) out << sum[m] / cnt[m];
        }
        out << '\n';
    }
    return out.str();
}

namespace {

// Re-runs a failed batch item by item to name the modalities that blow up.
std::string offending_modalities(const Denoiser<float>& model, const Tensor<float>& xt, const std::vector<int>& t,
                                 const std::vector<Modality>& mods) {
    std::array<bool, kModalityCount> bad{};
    const int n = xt.dim(0);
    const std::size_t item = xt.size() / static_cast<std::size_t>(n);
    for (int i = 0; i < n; ++i) {
        AlignedVector<float> one(xt.data() + i * item, xt.data() + (i + 1) * item);
        const Tensor<float> x({1, xt.dim(1), xt.dim(2), xt.dim(3)}, std::move(one));
        try {
            const Tensor<float> y = model.predict_noise(x, std::span<const int>(&t[i], 1), std::span<const Modality>(&mods[i], 1));
            for (float v : y.values()) {
                if (!std::isfinite(v)) throw std::domain_error("non-finite output");
            }
        } catch (const std::domain_error&) {
            bad[modality_code(mods[i])] = true;
        }
    }
    std::string out;
    for (int m = 0; m < kModalityCount; ++m) {
        if (bad[m]) out += (out.empty() ? "" : ", ") + std::string(modality_name(static_cast<Modality>(m)));
    }
    return out.empty() ? "unknown" : out;
}

}  // namespace

LossTrace adapt(Denoiser<float>& model, const SceneBundle& scene, const AdaptationConfig& cfg, const NoiseSchedule& sched,
                const AdaptProgress& progress) {
    cfg.validate();
    LossTrace trace;
    trace.running_mean.fill(std::numeric_limits<double>::quiet_NaN());
    if (cfg.steps == 0) return trace;
    const auto hashes_before = frozen_hashes(model);
    const int s = model.config().image_size;
    auto& params = model.conditioner().parameters();
    Adam<float> opt(params, AdamOptions{cfg.learning_rate, cfg.beta1, cfg.beta2, 1e-8, 0.0});
    std::array<double, kModalityCount> sum{};
    std::array<int, kModalityCount> cnt{};

    for (int step = 0; step < cfg.steps; ++step) {
        TrainingBatch batch = sample_training_batch(scene, cfg, step, s);
        std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(step) * 2 + 1));
        const NoiseDraw noise = draw_noise(batch.x0.shape(), sched, rng);

        nn::Graph<float> g(true);
        params.zero_grad();
        check_normalized(batch.x0);
        const Tensor<float> xt = q_sample(batch.x0, noise.timesteps, noise.eps, sched);
        Denoiser<float>::ForwardResult fwd;
        try {
            fwd = model.forward(g, g.input(xt), noise.timesteps, batch.modalities, Denoiser<float>::ForwardOptions{});
        } catch (const std::domain_error& e) {
            throw NumericalError("non-finite activation at step " + std::to_string(step + 1) + " (modality " +
                                 offending_modalities(model, xt, noise.timesteps, batch.modalities) + "): " + e.what());
        }
        const nn::Var loss = nn::mse(g, fwd.output, noise.eps);
        const double value = static_cast<double>(g.value(loss)[0]);

        // Per-modality batch means from the same prediction.
        const Tensor<float>& pred = g.value(fwd.output);
        std::array<double, kModalityCount> msum{};
        std::array<std::size_t, kModalityCount> mcnt{};
        const std::size_t item = pred.size() / static_cast<std::size_t>(cfg.batch_size);
        for (int i = 0; i < cfg.batch_size; ++i) {
            double e = 0.0;
            for (std::size_t j = 0; j < item; ++j) {
                const double d = static_cast<double>(noise.eps[i * item + j]) - pred[i * item + j];
                e += d * d;
            }
            const int m = modality_code(batch.modalities[i]);
            msum[m] += e / static_cast<double>(item);
            ++mcnt[m];
        }
        std::array<double, kModalityCount> row;
        std::string bad;
        for (int m = 0; m < kModalityCount; ++m) {
            row[m] = mcnt[m] ? msum[m] / static_cast<double>(mcnt[m]) : std::numeric_limits<double>::quiet_NaN();
            if (mcnt[m] && !std::isfinite(row[m])) bad += (bad.empty() ? "" : ", ") + std::string(modality_name(static_cast<Modality>(m)));
        }
        if (!std::isfinite(value)) {
            throw NumericalError("non-finite denoising loss at step " + std::to_string(step + 1) + " (modality " +
                                 (bad.empty() ? std::string("unknown") : bad) + ")");
        }
        g.backward(loss);
        for (const auto& p : params) {
            for (float v : p.grad.values()) {
                if (!std::isfinite(v)) {
                    throw NumericalError("non-finite gradient in " + p.name + " at step " + std::to_string(step + 1));
                }
            }
        }
        opt.step(params);

        trace.loss.push_back(value);
        trace.per_modality.push_back(row);
        for (int m = 0; m < kModalityCount; ++m) {
            if (mcnt[m]) {
                sum[m] += row[m];
                ++cnt[m];
                trace.running_mean[m] = sum[m] / cnt[m];
            }
        }
        if (progress) progress(step + 1, value);
    }
    if (frozen_hashes(model) != hashes_before) throw std::logic_error("adaptation modified a frozen backbone tensor");
    return trace;
}

template void check_normalized(const Tensor<float>&);
template void check_normalized(const Tensor<double>&);
template nn::Var denoise_loss(nn::Graph<float>&, Denoiser<float>&, const Tensor<float>&, std::span<const Modality>,
                              std::span<const int>, const Tensor<float>&, const NoiseSchedule&);
template nn::Var denoise_loss(nn::Graph<double>&, Denoiser<double>&, const Tensor<double>&, std::span<const Modality>,
                              std::span<const int>, const Tensor<double>&, const NoiseSchedule&);

}  // namespace unidiff
