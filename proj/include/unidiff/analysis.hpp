#pragma once

#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "unidiff/adaptation.hpp"
#include "unidiff/classify.hpp"
#include "unidiff/metrics.hpp"

namespace unidiff {

// Published figures shown next to desk-scale results. Never used as
// thresholds. Values are percentages; NaN where the source gives none.
struct ReferenceRow {
    std::string source;
    double oa = std::numeric_limits<double>::quiet_NaN();
    double kappa = std::numeric_limits<double>::quiet_NaN();
    double mf1 = std::numeric_limits<double>::quiet_NaN();
    double miou = std::numeric_limits<double>::quiet_NaN();
};

struct SweepRecord {
    std::string key;
    std::map<std::string, std::string> config;  // modalities, timestep, variant, policy, seed, ...
    ConfusionMatrix confusion;
    Scores scores;
    std::optional<ReferenceRow> reference;
};

struct SweepTable {
    std::string name;
    std::vector<SweepRecord> records;
    std::map<std::string, std::string> metadata;

    // config,OA,KC,mF1,mIoU then ref_* columns; percent, two decimals.
    std::string to_csv() const;
};

// Scores rebuilt from each stored confusion matrix; returns the keys of
// records whose recorded metrics disagree beyond `tol`.
std::vector<std::string> verify_records(const SweepTable& table, double tol = 1e-12);

// JSON round trip keeps confusion counts and full-precision metrics.
std::string sweep_to_json(const SweepTable& table);
SweepTable sweep_from_json(const std::string& text);

// Writes <stem>.csv and <stem>.json into dir and returns both paths.
std::vector<std::filesystem::path> write_sweep(const SweepTable& table, const std::filesystem::path& dir,
                                               const std::string& stem);

using SweepProgress = std::function<void(const std::string& message)>;

// Dense features for all three modalities computed once, then one head per
// non-empty subset, scored on the test split. Rows follow subset size, then
// pRGB, PCA, SAR order.
SweepTable modality_combo_ablation(const SceneBundle& scene, const Denoiser<float>& model, const FeatureSpec& spec,
                                   const NoiseSchedule& sched, const ClassifierConfig& head,
                                   const SweepProgress& progress = {});

// Pretrained, PCA-only adaptation and joint pRGB+PCA adaptation from the
// same base, every row scored on PCA features only.
SweepTable anchoring_ablation(const SceneBundle& scene, const Denoiser<float>& base, const AdaptationConfig& adapt_cfg,
                              const FeatureSpec& spec, const NoiseSchedule& sched, const ClassifierConfig& head,
                              const SweepProgress& progress = {});

struct SweepVariant {
    std::string name;  // e.g. "adapted pRGB+PCA+SAR"
    const Denoiser<float>* model = nullptr;
    std::vector<Modality> modalities;
};

// One record per (timestep, variant), ordered by timestep then variant.
SweepTable timestep_sweep(const SceneBundle& scene, const std::vector<SweepVariant>& variants,
                          const std::vector<int>& timesteps, const FeatureSpec& spec, const NoiseSchedule& sched,
                          const ClassifierConfig& head, const SweepProgress& progress = {});

// Line plot of mean F1 (percent) against timestep, one line per variant.
std::string timestep_plot_svg(const SweepTable& sweep);

struct ClassSimilarity {
    int class_id = 0;
    std::size_t count = 0;
    double mean = 0.0;
    double variance = 0.0;  // population variance
};

struct PairSimilarity {
    Modality a = Modality::PRGB;
    Modality b = Modality::PCA;
    std::vector<ClassSimilarity> per_class;  // classes 1..K, count 0 when no pixel survived
    std::size_t skipped = 0;                 // pixels with a zero-norm vector
};

struct SimilarityReport {
    std::vector<PairSimilarity> pairs;

    // pair,class,count,mean_cosine,variance,skipped
    std::string to_csv() const;
};

// Cosine similarity between the per-modality slices of each labelled row.
// Requires at least two modalities.
SimilarityReport cross_modal_similarity(const PixelFeatureSet& features);

// Classes (over all pairs) where adapted within-class variance is at most
// the pretrained one, out of classes present in both.
struct VarianceComparison {
    int not_larger = 0;
    int compared = 0;
};
VarianceComparison compare_variance(const SimilarityReport& adapted, const SimilarityReport& pretrained);

struct SeedSummary {
    double mean = 0.0;
    double min = 0.0;
    double max = 0.0;
};
SeedSummary summarize(const std::vector<double>& values);

// Published reference rows keyed by configuration.
std::map<std::string, ReferenceRow> modality_reference();
std::map<std::string, ReferenceRow> anchoring_reference();
// Notes on published headline figures. The Augsburg HSI+SAR OA is published
// both as 93.08 and as 93.17; both are kept.
std::map<std::string, std::string> reference_notes();

}  // namespace unidiff
