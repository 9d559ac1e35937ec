#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "unidiff/checkpoint.hpp"
#include "unidiff/conditioning.hpp"
#include "unidiff/parameters.hpp"
#include "unidiff/schedule.hpp"

namespace unidiff {

struct DenoiserConfig {
    int in_channels = 3;
    int image_size = 64;
    int base_width = 64;
    std::vector<int> channel_mult{1, 2, 4};
    int num_res_blocks = 2;
    std::vector<int> attention_resolutions{16};
    int head_channels = 64;
    int cond_width = 256;
    int film_hidden = 64;

    // Desk-scale reference network.
    static DenoiserConfig reference();
    // Reduced width/depth for quick CPU runs; same topology family.
    static DenoiserConfig compact();

    int levels() const { return static_cast<int>(channel_mult.size()); }
    void validate() const;
    std::map<std::string, std::string> to_metadata() const;
    static DenoiserConfig from_metadata(const std::map<std::string, std::string>& meta);
};

// Feature tap output: values [N, C_f, S, S] aligned with the input grid.
template <typename T>
struct FeatureMap {
    Tensor<T> values;
    int layer = 0;
    int timestep = 0;
    Modality modality = Modality::PRGB;
};

struct TapInfo {
    int layer;
    int channels;
    int resolution;
};

struct ParamPartition {
    std::vector<std::string> frozen;
    std::vector<std::string> trainable;
    std::size_t frozen_count = 0;
    std::size_t trainable_count = 0;
    double ratio() const {
        const std::size_t total = frozen_count + trainable_count;
        return total ? static_cast<double>(trainable_count) / static_cast<double>(total) : 0.0;
    }
};

// How extraction noise is drawn for t > 0. Fixed reuses one noise field
// derived from the seed; Fresh derives a distinct field per draw index.
struct NoisePolicy {
    enum class Mode { Fresh, Fixed };
    Mode mode = Mode::Fresh;
    std::uint64_t seed = 0;
};

// U-Net noise predictor eps(x_t, t, m). The backbone (convolutions, plain
// norms, attention) is frozen; only the conditioner is trainable. AdaGN
// sites sit at the second norm of every residual block.
template <typename T>
class Denoiser {
public:
    struct ForwardOptions {
        bool use_film = true;
        int tap_layer = -1;
        bool stop_at_tap = false;
    };
    struct ForwardResult {
        nn::Var output;
        nn::Var tap;
    };

    Denoiser() = default;
    Denoiser(DenoiserConfig cfg, std::uint64_t seed);

    const DenoiserConfig& config() const { return cfg_; }
    Conditioner<T>& conditioner() { return cond_; }
    const Conditioner<T>& conditioner() const { return cond_; }
    ParameterStore<T>& backbone() { return backbone_; }
    const ParameterStore<T>& backbone() const { return backbone_; }

    ForwardResult forward(nn::Graph<T>& g, nn::Var x, std::span<const int> timesteps,
                          std::span<const Modality> modalities, const ForwardOptions& opts);
    ForwardResult forward(nn::Graph<T>& g, nn::Var x, std::span<const int> timesteps,
                          std::span<const Modality> modalities, const ForwardOptions& opts) const;

    Tensor<T> predict_noise(const Tensor<T>& x_t, std::span<const int> timesteps,
                            std::span<const Modality> modalities) const;
    // Same backbone with every AdaGN site reduced to a plain GroupNorm.
    Tensor<T> predict_noise_unconditioned(const Tensor<T>& x_t) const;

    // Decoder block outputs, 0 = closest to the bottleneck.
    int tap_count() const { return static_cast<int>(decoder_.size()); }
    TapInfo tap_info(int layer) const;

    template <typename U>
    Denoiser<U> cast() const;

    // Free-form provenance (seeds, step counts) carried through checkpoints.
    std::map<std::string, std::string>& provenance() { return provenance_; }
    const std::map<std::string, std::string>& provenance() const { return provenance_; }

    Checkpoint to_checkpoint() const;
    static Denoiser from_checkpoint(const Checkpoint& ckpt);

private:
    struct ResBlock {
        int in_ch, out_ch, site;
        int gn1_w, gn1_b, conv1_w, conv1_b, conv2_w, conv2_b;
        int skip_w = -1, skip_b = -1;
    };
    struct AttnBlock {
        int ch, heads;
        int gn_w, gn_b, qkv_w, qkv_b, proj_w, proj_b;
    };
    struct EncoderStep {
        int res = -1;
        int attn = -1;
        int down_w = -1, down_b = -1;
    };
    struct DecoderStep {
        int res = -1;
        int attn = -1;
        int up_w = -1, up_b = -1;
        int resolution = 0;
    };

    template <typename Store, typename Cond>
    ForwardResult forward_impl(Store& store, Cond& cond, nn::Graph<T>& g, nn::Var x, std::span<const int> timesteps,
                               std::span<const Modality> modalities, const ForwardOptions& opts) const;
    template <typename Store>
    nn::Var res_forward(Store& store, nn::Graph<T>& g, const ResBlock& rb, nn::Var h,
                        const std::vector<SiteModulation>* mods) const;
    template <typename Store>
    nn::Var attn_forward(Store& store, nn::Graph<T>& g, const AttnBlock& ab, nn::Var h) const;
    void check_input(const Tensor<T>& x) const;

    template <typename U>
    friend class Denoiser;

    DenoiserConfig cfg_;
    ParameterStore<T> backbone_;
    Conditioner<T> cond_;
    std::vector<ResBlock> res_;
    std::vector<AttnBlock> attn_;
    int in_w_ = -1, in_b_ = -1;
    std::vector<EncoderStep> encoder_;
    int mid_res1_ = -1, mid_attn_ = -1, mid_res2_ = -1;
    std::vector<DecoderStep> decoder_;
    int out_gn_w_ = -1, out_gn_b_ = -1, out_w_ = -1, out_b_ = -1;
    std::map<std::string, std::string> provenance_;
};

template <typename T>
FeatureMap<T> extract_features(const Denoiser<T>& model, const Tensor<T>& patches, int t, Modality m, int layer,
                               const NoiseSchedule& sched, const NoisePolicy& noise, std::uint64_t draw = 0);

// Bilinear resize of an NCHW tensor (half-pixel centres, edge clamped).
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w);

template <typename T>
ParamPartition partition_parameters(const Denoiser<T>& model);

// SHA-256 of every frozen tensor, keyed by parameter name.
template <typename T>
std::map<std::string, std::string> frozen_hashes(const Denoiser<T>& model);

// DDPM ancestral sampling, optionally on an evenly respaced subset of
// `sample_steps` timesteps. Returns [n, 3, S, S] clipped to [-1, 1].
template <typename T>
Tensor<T> sample_patches(const Denoiser<T>& model, Modality m, int n, const NoiseSchedule& sched, std::uint64_t seed,
                         int sample_steps = 0);

template <typename T>
Tensor<T> standard_normal(std::vector<int> shape, std::uint64_t seed);

void save_denoiser(const Denoiser<float>& model, const std::filesystem::path& path);
Denoiser<float> load_denoiser(const std::filesystem::path& path);

}  // namespace unidiff
