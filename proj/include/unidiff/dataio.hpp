#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "unidiff/tensor.hpp"

namespace unidiff {

// H x W x C raster stored planar (band-major): values[(c * H + r) * W + col].
struct RasterStack {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> values;
    std::vector<double> wavelengths;  // nm, empty or one per channel

    RasterStack() = default;
    RasterStack(int h, int w, int c, float fill = 0.0f);

    std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }
    float& at(int c, int r, int col) { return values[(static_cast<std::size_t>(c) * height + r) * width + col]; }
    float at(int c, int r, int col) const { return values[(static_cast<std::size_t>(c) * height + r) * width + col]; }
    std::span<float> band(int c) { return {values.data() + c * plane_size(), plane_size()}; }
    std::span<const float> band(int c) const { return {values.data() + c * plane_size(), plane_size()}; }

    // Throws on shape/payload mismatch, non-finite values, bad wavelength list.
    void validate() const;
};

struct LabelEntry {
    int row = 0;
    int col = 0;
    int class_id = 0;  // 1..K
};

struct SparseLabelSet {
    std::vector<LabelEntry> entries;
    int num_classes = 0;
    std::string split;

    // Bounds, class range and duplicate checks; messages name the entry index.
    void validate(int height, int width) const;
    std::vector<std::size_t> class_counts() const;  // index 0 unused
};

struct SceneBundle {
    RasterStack hsi;
    RasterStack sar;
    RasterStack prgb;
    RasterStack pca3;
    RasterStack sar3;
    SparseLabelSet train;
    SparseLabelSet test;
    std::vector<std::string> class_names;
    std::map<std::string, std::string> metadata;

    int height() const { return hsi.height; }
    int width() const { return hsi.width; }
    int num_classes() const { return train.num_classes; }
    bool prepared() const { return prgb.channels == 3 && pca3.channels == 3 && sar3.channels == 3; }
};

// ---- representation construction ----

struct StretchOptions {
    double p_lo = 2.0;
    double p_hi = 98.0;
};

// Percentile with linear interpolation between order statistics
// (position p/100 * (n - 1) in the sorted sample).
double percentile(std::span<const float> values, double p);

// (v - P_lo) / (P_hi - P_lo) clipped to [0, 1]; degenerate bands give 0.5.
std::vector<float> percentile_stretch(std::span<const float> band, const StretchOptions& opts = {});

// Stretch then 2v - 1, applied per band.
RasterStack stretch_to_unit(const RasterStack& raw, const StretchOptions& opts = {});

// Band indices nearest to 650/550/450 nm (ties go to the lower index).
std::array<int, 3> nearest_rgb_bands(const std::vector<double>& wavelengths);

RasterStack hsi_to_prgb(const RasterStack& cube, std::optional<std::array<int, 3>> bands = std::nullopt,
                        const StretchOptions& opts = {});

struct PcaResult {
    RasterStack image;                // stretched to [-1, 1]
    RasterStack scores;               // raw projections, 3 channels
    std::vector<double> mean;         // per band
    std::vector<double> components;   // 3 x C, row-major, unit rows
    std::vector<double> eigenvalues;  // all C, descending
    int rank = 0;
    std::vector<std::string> warnings;

    double explained(int k) const;
};

// Top-3 principal components over all pixels. Sign convention: the entry of
// largest magnitude in each component is positive. Components whose
// eigenvalue is numerically zero are filled with a constant (0 after the
// [-1, 1] mapping) and reported in warnings.
PcaResult hsi_to_pca3(const RasterStack& cube, const StretchOptions& opts = {});

// Pre-stretch Pauli channels. 4 channels are (HH, HV, VH, VV) amplitudes and
// give (|HH+VV|, |HH-VV|, |HV+VH|) / sqrt(2); 2 channels are (VV, VH) and
// give (VV, VH, (VV+VH)/2).
RasterStack pauli_channels(const RasterStack& sar);
RasterStack sar_to_pauli(const RasterStack& sar, const StretchOptions& opts = {});

struct PrepareOptions {
    std::optional<std::array<int, 3>> rgb_bands;
    StretchOptions stretch;
};

// Fills prgb / pca3 / sar3 from hsi and sar and records how they were made.
void prepare_representations(SceneBundle& scene, const PrepareOptions& opts = {});

// ---- tiling ----

struct PatchGrid {
    int size = 64;
    int stride = 32;
    int height = 0;
    int width = 0;
    std::vector<std::pair<int, int>> origins;  // (row, col), row-major order
};

// Origins at multiples of stride plus a flush origin at H - S (W - S) when
// the stride does not land there.
std::vector<int> axis_origins(int length, int size, int stride);
PatchGrid make_patch_grid(int height, int width, int size = 64, int stride = 32);

// [N, C, S, S] patches of a raster in grid order.
Tensor<float> tile_patches(const RasterStack& img, const PatchGrid& grid);

// Streaming form of merge_overlaps: add patch maps in any grouping, in grid
// order, then finish. Sums are kept in double.
class OverlapAccumulator {
public:
    OverlapAccumulator(const PatchGrid& grid, int channels);
    // maps: [n, K, S, S] for grid origins first .. first + n - 1.
    template <typename T>
    void add(const Tensor<T>& maps, int first);
    template <typename T>
    Tensor<T> finish() const;  // [K, H, W]

private:
    const PatchGrid* grid_;
    int channels_;
    std::vector<double> acc_;
    std::vector<int> cover_;
};

// Per-pixel mean over every patch covering it. maps: [N, K, S, S] in grid
// order. Returns planar [K, H, W]. Accumulates in double in grid order.
template <typename T>
Tensor<T> merge_overlaps(const Tensor<T>& maps, const PatchGrid& grid);

// ---- files ----

inline constexpr char kRasterMagic[4] = {'U', 'R', 'D', 'S'};
inline constexpr std::uint16_t kRasterVersion = 1;

// "URDS" u16 version, u32 H, u32 W, u32 C, u8 dtype (0 = f32 LE),
// u8 has_wavelengths, [f64 wavelengths[C]], f32 payload planar band-major.
std::vector<std::uint8_t> encode_raster(const RasterStack& r);
RasterStack decode_raster(const std::vector<std::uint8_t>& bytes);
void write_raster(const RasterStack& r, const std::filesystem::path& path);
RasterStack read_raster(const std::filesystem::path& path);

// "row,col,class_id" with one header line. Errors name the file line.
void write_labels(const SparseLabelSet& labels, const std::filesystem::path& path);
SparseLabelSet read_labels(const std::filesystem::path& path, int num_classes, const std::string& split, int height,
                           int width);

// Directory layout: hsi.urds, sar.urds, [prgb|pca3|sar3].urds,
// train_labels.csv, test_labels.csv, scene.json.
void save_scene(const SceneBundle& scene, const std::filesystem::path& dir);
SceneBundle load_scene(const std::filesystem::path& dir);

// ---- synthetic data ----

struct SynthOptions {
    std::uint64_t seed = 7;
    int height = 192;
    int width = 192;
    int num_classes = 6;
    int bands = 48;
    double train_fraction = 0.008;  // of all pixels, kept below 1%
    int min_train_per_class = 12;
    double smoothing = 10.0;  // spatial correlation length of class regions, px
};

SceneBundle synth_scene(const SynthOptions& opts);

}  // namespace unidiff
