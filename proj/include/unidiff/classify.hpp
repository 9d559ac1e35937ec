#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "unidiff/adaptation.hpp"
#include "unidiff/backbone.hpp"
#include "unidiff/dataio.hpp"
#include "unidiff/metrics.hpp"

namespace unidiff {

// Where and how Stage-B features are read from the frozen model.
struct FeatureSpec {
    int layer = 0;
    int timestep = 0;
    std::vector<Modality> modalities{Modality::PRGB, Modality::PCA, Modality::SAR};
    NoisePolicy noise{NoisePolicy::Mode::Fresh, 0};
    int stride = 32;
    int batch = 8;  // patches per forward pass

    // Sorts into the fixed pRGB, PCA, SAR order and rejects empty or
    // repeated sets.
    void normalize();
    std::string modality_key() const;  // e.g. "pRGB+SAR"
};

// Whole-scene features per modality, [C_f, H, W] each, overlaps averaged.
struct DenseFeatures {
    int height = 0;
    int width = 0;
    int layer = 0;
    int timestep = 0;
    std::vector<Modality> modalities;
    std::vector<Tensor<float>> maps;

    int dim() const;
};

using ExtractProgress = std::function<void(Modality m, int done, int total)>;

DenseFeatures compute_dense_features(const SceneBundle& scene, const Denoiser<float>& model, FeatureSpec spec,
                                     const NoiseSchedule& sched, const ExtractProgress& progress = {});

// Rows are gathered in label-file order; columns concatenate the modalities
// in pRGB, PCA, SAR order.
struct PixelFeatureSet {
    int dim = 0;
    int num_classes = 0;
    std::vector<float> features;  // N x dim, row-major
    std::vector<int> labels;      // 1..K
    int layer = 0;
    int timestep = 0;
    std::vector<Modality> modalities;

    std::size_t size() const { return labels.size(); }
    const float* row(std::size_t i) const { return features.data() + i * static_cast<std::size_t>(dim); }
};

PixelFeatureSet gather_features(const DenseFeatures& dense, const SparseLabelSet& labels);

// Convenience: compute_dense_features + gather_features on one split.
PixelFeatureSet build_feature_dataset(const SceneBundle& scene, const Denoiser<float>& model, const FeatureSpec& spec,
                                      const NoiseSchedule& sched, const SparseLabelSet& labels);

// Keeps only the columns belonging to `subset` (which must be contained in
// the set's modalities); each modality contributes dim / |modalities|
// columns.
PixelFeatureSet select_modalities(const PixelFeatureSet& set, const std::vector<Modality>& subset);

// Feature set in the checkpoint container ("unidiff-features"): tensors
// "features" [N, D] and "labels" [N], provenance in the metadata.
Checkpoint features_to_checkpoint(const PixelFeatureSet& set);
PixelFeatureSet features_from_checkpoint(const Checkpoint& ckpt);

struct ClassifierConfig {
    double learning_rate = 1e-3;
    double weight_decay = 5e-4;
    int batch_size = 64;
    int max_epochs = 10;
    int patience = 3;
    std::vector<int> hidden{256, 128};
    double validation_fraction = 0.1;
    bool balanced_sampling = false;  // oversample rare classes within each epoch
    std::uint64_t seed = 0;

    void validate() const;
};

// z-scored input -> [Linear, ReLU] per hidden width -> Linear to K logits.
class MlpHead {
public:
    MlpHead() = default;
    MlpHead(int input_dim, std::vector<int> hidden, int num_classes, std::uint64_t seed);

    int input_dim() const { return input_dim_; }
    int num_classes() const { return num_classes_; }
    const std::vector<int>& hidden() const { return hidden_; }
    ParameterStore<float>& parameters() { return params_; }
    const ParameterStore<float>& parameters() const { return params_; }

    // Feature standardisation; std entries below 1e-8 are treated as 1.
    void set_normalization(std::vector<float> mean, std::vector<float> stddev);
    const std::vector<float>& mean() const { return mean_; }
    const std::vector<float>& stddev() const { return std_; }

    // rows: N x input_dim raw features.
    nn::Var logits(nn::Graph<float>& g, const float* rows, int n);
    nn::Var logits(nn::Graph<float>& g, const float* rows, int n) const;
    // Row-wise softmax probabilities, N x K.
    std::vector<float> predict_proba(const float* rows, int n) const;

    // Free-form provenance (layer, timestep, modalities) kept in checkpoints.
    std::map<std::string, std::string>& provenance() { return provenance_; }
    const std::map<std::string, std::string>& provenance() const { return provenance_; }

    Checkpoint to_checkpoint() const;
    static MlpHead from_checkpoint(const Checkpoint& ckpt);

private:
    template <typename Store>
    nn::Var logits_impl(Store& store, nn::Graph<float>& g, const float* rows, int n) const;

    int input_dim_ = 0;
    int num_classes_ = 0;
    std::vector<int> hidden_;
    ParameterStore<float> params_;
    std::vector<int> weights_, biases_;
    std::vector<float> mean_, std_;
    std::map<std::string, std::string> provenance_;
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
};

struct TrainLog {
    std::vector<EpochRecord> epochs;
    int best_epoch = 0;  // 0 when no epoch ran
    std::size_t train_rows = 0;
    std::size_t val_rows = 0;

    std::string to_csv() const;
};

struct TrainedHead {
    MlpHead head;
    TrainLog log;
};

// Stratified split: each class with at least 2 rows gives round(f * n)
// rows (at least 1) to validation. Returns (train idx, val idx).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(const std::vector<int>& labels,
                                                                               double fraction, std::uint64_t seed);

// Cross-entropy with weight decay; keeps the weights of the epoch with the
// lowest validation loss and stops after `patience` epochs without
// improvement.
TrainedHead train_classifier(const PixelFeatureSet& data, const ClassifierConfig& cfg);

struct DensePrediction {
    int height = 0;
    int width = 0;
    int num_classes = 0;
    std::vector<int> class_map;  // H x W, 1..K
    Tensor<float> probs;         // [K, H, W]
};

// Argmax over [K, H, W]; ties go to the lowest class id.
std::vector<int> argmax_classes(const Tensor<float>& probs);

DensePrediction predict_dense(const SceneBundle& scene, const Denoiser<float>& model, const MlpHead& head,
                              FeatureSpec spec, const NoiseSchedule& sched, const ExtractProgress& progress = {});

// Labels and predictions at the split's coordinates.
ConfusionMatrix evaluate_split(const std::vector<int>& class_map, int width, const SparseLabelSet& labels);

// Class map as a 1-channel raster holding class ids as floats.
RasterStack class_map_raster(const DensePrediction& pred);
// Binary PPM colour rendering of a class map.
void write_class_map_ppm(const DensePrediction& pred, const std::filesystem::path& path);

}  // namespace unidiff
