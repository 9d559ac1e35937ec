#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "unidiff/backbone.hpp"
#include "unidiff/dataio.hpp"

namespace unidiff {

// Which representations enter Stage A and how they are spread over a batch.
// Stratified mixes every listed modality inside each batch (counts differ by
// at most one, leftovers go to pRGB first). PerBatch gives the whole batch
// one modality, cycling through the list.
struct MixPolicy {
    enum class Assignment { Stratified, PerBatch };
    std::vector<Modality> modalities{Modality::PRGB, Modality::PCA, Modality::SAR};
    Assignment assignment = Assignment::Stratified;

    // "joint" (all three), "pca-only", "prgb+pca", or any '+'/','-separated
    // list of modality names.
    static MixPolicy parse(const std::string& spec);
    std::string name() const;
};

struct AdaptationConfig {
    int steps = 2000;
    int batch_size = 32;
    double learning_rate = 0.003;
    double beta1 = 0.9;
    double beta2 = 0.999;
    MixPolicy policy;
    std::uint64_t seed = 0;

    void validate() const;
};

// The prepared 3-channel stack a modality refers to.
const RasterStack& representation(const SceneBundle& scene, Modality m);

// Copies the S x S window at (row, col) of a 3-channel stack into item i of
// an [N, 3, S, S] tensor.
void copy_patch(const RasterStack& img, int row, int col, Tensor<float>& dst, int item);

struct TrainingBatch {
    Tensor<float> x0;                          // [B, 3, S, S] in [-1, 1]
    std::vector<Modality> modalities;          // per item
    std::vector<std::pair<int, int>> origins;  // patch top-left (row, col)
};

// Step-indexed and seeded: the same (scene, cfg, step) gives the same batch.
TrainingBatch sample_training_batch(const SceneBundle& scene, const AdaptationConfig& cfg, int step, int patch_size);

// Per-item modality assignment for one batch.
std::vector<Modality> assign_modalities(const MixPolicy& policy, int batch_size, int step, std::mt19937_64& rng);

// Timesteps uniform on [1, T] and standard-normal eps, one per item.
struct NoiseDraw {
    std::vector<int> timesteps;
    Tensor<float> eps;
};
NoiseDraw draw_noise(const std::vector<int>& shape, const NoiseSchedule& sched, std::mt19937_64& rng);

// Rejects inputs outside [-1 - 1e-6, 1 + 1e-6].
template <typename T>
void check_normalized(const Tensor<T>& x0);

// Mean over batch, channels and pixels of (eps - eps_hat)^2 for any noise
// predictor. The graph variant below is the one used for training.
using NoisePredictor =
    std::function<Tensor<float>(const Tensor<float>& x_t, std::span<const int> t, std::span<const Modality> m)>;
double denoise_loss(const NoisePredictor& predict, const Tensor<float>& x0, std::span<const Modality> modalities,
                    const NoiseDraw& noise, const NoiseSchedule& sched);

template <typename T>
nn::Var denoise_loss(nn::Graph<T>& g, Denoiser<T>& model, const Tensor<T>& x0, std::span<const Modality> modalities,
                     std::span<const int> timesteps, const Tensor<T>& eps, const NoiseSchedule& sched);

struct LossTrace {
    std::vector<double> loss;                                   // per step
    std::vector<std::array<double, kModalityCount>> per_modality;  // batch mean per modality, NaN if absent
    std::array<double, kModalityCount> running_mean{};             // over all steps where the modality appeared

    std::size_t size() const { return loss.size(); }
    double mean(std::size_t begin, std::size_t end) const;
    // step, loss, then running means per modality (prgb, pca, sar).
    std::string to_csv() const;
};

using AdaptProgress = std::function<void(int step, double loss)>;

// Stage A. Updates only the conditioner; verifies the frozen hashes after
// the run. Throws NumericalError naming the step and modality on a
// non-finite loss.
LossTrace adapt(Denoiser<float>& model, const SceneBundle& scene, const AdaptationConfig& cfg, const NoiseSchedule& sched,
                const AdaptProgress& progress = {});

}  // namespace unidiff
