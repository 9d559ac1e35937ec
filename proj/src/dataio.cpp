#include "unidiff/dataio.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <string>

namespace unidiff {

RasterStack::RasterStack(int h, int w, int c, float fill) : height(h), width(w), channels(c) {
    if (h <= 0 || w <= 0 || c <= 0) throw std::invalid_argument("raster dimensions must be positive");
    values.assign(static_cast<std::size_t>(h) * w * c, fill);
}

void RasterStack::validate() const {
    if (height <= 0 || width <= 0 || channels <= 0) throw std::invalid_argument("raster dimensions must be positive");
    if (values.size() != plane_size() * channels) throw std::invalid_argument("raster payload size does not match H*W*C");
    if (!wavelengths.empty() && wavelengths.size() != static_cast<std::size_t>(channels)) {
        throw std::invalid_argument("wavelength list length " + std::to_string(wavelengths.size()) + " differs from channel count " +
                                    std::to_string(channels));
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) throw std::invalid_argument("raster holds a non-finite value at index " + std::to_string(i));
    }
}

void SparseLabelSet::validate(int height, int width) const {
    if (num_classes < 1) throw std::invalid_argument("label set needs at least one class");
    std::vector<char> seen(static_cast<std::size_t>(height) * width, 0);
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        const std::string where = split + " label " + std::to_string(i) + " (" + std::to_string(e.row) + "," + std::to_string(e.col) + ")";
        if (e.row < 0 || e.row >= height || e.col < 0 || e.col >= width) throw std::out_of_range(where + " lies outside the raster");
        if (e.class_id < 1 || e.class_id > num_classes) throw std::out_of_range(where + " has class id outside [1, K]");
        char& s = seen[static_cast<std::size_t>(e.row) * width + e.col];
        if (s) throw std::invalid_argument(where + " duplicates an earlier coordinate");
        s = 1;
    }
}

std::vector<std::size_t> SparseLabelSet::class_counts() const {
    std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes) + 1, 0);
    for (const auto& e : entries) {
        if (e.class_id >= 1 && e.class_id <= num_classes) ++counts[e.class_id];
    }
    return counts;
}

namespace {

double sorted_percentile(const std::vector<float>& sorted, double p) {
    const double pos = p / 100.0 * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return static_cast<double>(sorted[lo]) + frac * (static_cast<double>(sorted[hi]) - sorted[lo]);
}

void check_percentiles(const StretchOptions& o) {
    if (!(o.p_lo >= 0.0 && o.p_lo < o.p_hi && o.p_hi <= 100.0)) {
        throw std::invalid_argument("stretch percentiles must satisfy 0 <= lo < hi <= 100");
    }
}

}  // namespace

double percentile(std::span<const float> values, double p) {
    if (values.empty()) throw std::invalid_argument("percentile of an empty band");
    if (!(p >= 0.0 && p <= 100.0)) throw std::invalid_argument("percentile outside [0, 100]");
    std::vector<float> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    return sorted_percentile(sorted, p);
}

std::vector<float> percentile_stretch(std::span<const float> band, const StretchOptions& opts) {
    if (band.empty()) throw std::invalid_argument("cannot stretch an empty band");
    check_percentiles(opts);
    std::vector<float> sorted(band.begin(), band.end());
    std::sort(sorted.begin(), sorted.end());
    const double lo = sorted_percentile(sorted, opts.p_lo);
    const double hi = sorted_percentile(sorted, opts.p_hi);
    std::vector<float> out(band.size());
    if (hi - lo < 1e-12) {
        std::fill(out.begin(), out.end(), 0.5f);
        return out;
    }
    const double inv = 1.0 / (hi - lo);
    for (std::size_t i = 0; i < band.size(); ++i) out[i] = static_cast<float>(std::clamp((band[i] - lo) * inv, 0.0, 1.0));
    return out;
}

RasterStack stretch_to_unit(const RasterStack& raw, const StretchOptions& opts) {
    RasterStack out(raw.height, raw.width, raw.channels);
    for (int c = 0; c < raw.channels; ++c) {
        const auto s = percentile_stretch(raw.band(c), opts);
        auto dst = out.band(c);
        for (std::size_t i = 0; i < s.size(); ++i) dst[i] = 2.0f * s[i] - 1.0f;
    }
    return out;
}

std::array<int, 3> nearest_rgb_bands(const std::vector<double>& wavelengths) {
    if (wavelengths.size() < 3) throw std::invalid_argument("need at least 3 bands for pseudo-RGB");
    std::array<int, 3> out{};
    const double targets[3] = {650.0, 550.0, 450.0};
    for (int k = 0; k < 3; ++k) {
        int best = 0;
        for (int i = 1; i < static_cast<int>(wavelengths.size()); ++i) {
            if (std::fabs(wavelengths[i] - targets[k]) < std::fabs(wavelengths[best] - targets[k])) best = i;
        }
        out[k] = best;
    }
    return out;
}

RasterStack hsi_to_prgb(const RasterStack& cube, std::optional<std::array<int, 3>> bands, const StretchOptions& opts) {
    if (cube.channels < 3) throw std::invalid_argument("pseudo-RGB needs at least 3 bands, got " + std::to_string(cube.channels));
    std::array<int, 3> idx{};
    if (bands) {
        idx = *bands;
    } else if (!cube.wavelengths.empty()) {
        idx = nearest_rgb_bands(cube.wavelengths);
    } else {
        throw std::invalid_argument("pseudo-RGB needs wavelengths or explicit band indices");
    }
    RasterStack sel(cube.height, cube.width, 3);
    for (int k = 0; k < 3; ++k) {
        if (idx[k] < 0 || idx[k] >= cube.channels) {
            throw std::out_of_range("pseudo-RGB band index " + std::to_string(idx[k]) + " outside [0, " + std::to_string(cube.channels) + ")");
        }
        const auto src = cube.band(idx[k]);
        std::copy(src.begin(), src.end(), sel.band(k).begin());
        if (!cube.wavelengths.empty()) sel.wavelengths.push_back(cube.wavelengths[idx[k]]);
    }
    RasterStack out = stretch_to_unit(sel, opts);
    out.wavelengths = sel.wavelengths;
    return out;
}

double PcaResult::explained(int k) const {
    const double total = std::accumulate(eigenvalues.begin(), eigenvalues.end(), 0.0);
    return total > 0.0 ? eigenvalues.at(k) / total : 0.0;
}

PcaResult hsi_to_pca3(const RasterStack& cube, const StretchOptions& opts) {
    const int c = cube.channels;
    const std::size_t n = cube.plane_size();
    if (c < 3) throw std::invalid_argument("PCA-3 needs at least 3 bands, got " + std::to_string(c));
    if (n < 3) throw std::invalid_argument("PCA-3 needs at least 3 pixels");
    check_percentiles(opts);

    PcaResult res;
    res.mean.assign(c, 0.0);
    for (int b = 0; b < c; ++b) {
        double s = 0.0;
        for (float v : cube.band(b)) s += v;
        res.mean[b] = s / static_cast<double>(n);
    }

    // Covariance accumulated in pixel chunks to bound memory on large cubes.
    constexpr std::size_t kChunk = 4096;
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(c, c);
    Eigen::MatrixXd block(c, kChunk);
    for (std::size_t start = 0; start < n; start += kChunk) {
        const std::size_t len = std::min(kChunk, n - start);
        for (int b = 0; b < c; ++b) {
            const float* src = cube.band(b).data() + start;
            for (std::size_t j = 0; j < len; ++j) block(b, static_cast<Eigen::Index>(j)) = src[j] - res.mean[b];
        }
        const auto used = block.leftCols(static_cast<Eigen::Index>(len));
        cov.selfadjointView<Eigen::Lower>().rankUpdate(used);
    }
    cov = cov.selfadjointView<Eigen::Lower>();
    cov /= static_cast<double>(n - 1);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    if (eig.info() != Eigen::Success) throw std::runtime_error("PCA eigendecomposition failed");
    const Eigen::VectorXd evals = eig.eigenvalues().reverse();
    const Eigen::MatrixXd evecs = eig.eigenvectors().rowwise().reverse();
    res.eigenvalues.assign(evals.data(), evals.data() + c);
    const double top = std::max(evals(0), 0.0);
    const double tol = top * c * 1e-12;
    res.rank = 0;
    for (int i = 0; i < c; ++i) res.rank += evals(i) > tol && evals(i) > 0.0 ? 1 : 0;

    res.components.assign(static_cast<std::size_t>(3) * c, 0.0);
    for (int k = 0; k < 3; ++k) {
        Eigen::VectorXd v = evecs.col(k);
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0) v = -v;
        for (int b = 0; b < c; ++b) res.components[static_cast<std::size_t>(k) * c + b] = v(b);
    }

    res.scores = RasterStack(cube.height, cube.width, 3);
    std::vector<double> proj(n);
    for (int k = 0; k < 3; ++k) {
        std::fill(proj.begin(), proj.end(), 0.0);
        for (int b = 0; b < c; ++b) {
            const double w = res.components[static_cast<std::size_t>(k) * c + b];
            const double m = res.mean[b];
            const auto src = cube.band(b);
            for (std::size_t j = 0; j < n; ++j) proj[j] += w * (src[j] - m);
        }
        auto dst = res.scores.band(k);
        for (std::size_t j = 0; j < n; ++j) dst[j] = static_cast<float>(proj[j]);
    }

    res.image = RasterStack(cube.height, cube.width, 3);
    for (int k = 0; k < 3; ++k) {
        auto dst = res.image.band(k);
        if (k >= res.rank) {
            res.warnings.push_back("PCA component " + std::to_string(k + 1) + " has zero variance (covariance rank " +
                                   std::to_string(res.rank) + "); filled with a constant");
            std::fill(dst.begin(), dst.end(), 0.0f);
            continue;
        }
        const auto s = percentile_stretch(res.scores.band(k), opts);
        for (std::size_t j = 0; j < n; ++j) dst[j] = 2.0f * s[j] - 1.0f;
    }
    return res;
}

RasterStack pauli_channels(const RasterStack& sar) {
    RasterStack out(sar.height, sar.width, 3);
    const std::size_t n = sar.plane_size();
    if (sar.channels == 4) {
        const double r2 = 1.0 / std::sqrt(2.0);
        const auto hh = sar.band(0), hv = sar.band(1), vh = sar.band(2), vv = sar.band(3);
        for (std::size_t i = 0; i < n; ++i) {
            out.band(0)[i] = static_cast<float>(std::fabs(static_cast<double>(hh[i]) + vv[i]) * r2);
            out.band(1)[i] = static_cast<float>(std::fabs(static_cast<double>(hh[i]) - vv[i]) * r2);
            out.band(2)[i] = static_cast<float>(std::fabs(static_cast<double>(hv[i]) + vh[i]) * r2);
        }
    } else if (sar.channels == 2) {
        const auto vv = sar.band(0), vh = sar.band(1);
        for (std::size_t i = 0; i < n; ++i) {
            out.band(0)[i] = vv[i];
            out.band(1)[i] = vh[i];
            out.band(2)[i] = static_cast<float>((static_cast<double>(vv[i]) + vh[i]) / 2.0);
        }
    } else {
        throw std::invalid_argument("SAR must have 2 (VV, VH) or 4 (HH, HV, VH, VV) channels, got " + std::to_string(sar.channels));
    }
    return out;
}

RasterStack sar_to_pauli(const RasterStack& sar, const StretchOptions& opts) {
    return stretch_to_unit(pauli_channels(sar), opts);
}

void prepare_representations(SceneBundle& scene, const PrepareOptions& opts) {
    scene.hsi.validate();
    scene.sar.validate();
    if (scene.sar.height != scene.hsi.height || scene.sar.width != scene.hsi.width) {
        throw std::invalid_argument("HSI and SAR rasters must share H and W");
    }
    std::array<int, 3> bands{};
    if (opts.rgb_bands) {
        bands = *opts.rgb_bands;
    } else if (!scene.hsi.wavelengths.empty()) {
        bands = nearest_rgb_bands(scene.hsi.wavelengths);
    } else {
        throw std::invalid_argument("pseudo-RGB needs HSI wavelengths or explicit band indices");
    }
    scene.prgb = hsi_to_prgb(scene.hsi, bands, opts.stretch);
    PcaResult pca = hsi_to_pca3(scene.hsi, opts.stretch);
    scene.pca3 = std::move(pca.image);
    scene.sar3 = sar_to_pauli(scene.sar, opts.stretch);

    scene.metadata["prgb_bands"] = std::to_string(bands[0]) + "," + std::to_string(bands[1]) + "," + std::to_string(bands[2]);
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%.6f", pca.explained(0), pca.explained(1), pca.explained(2));
    scene.metadata["pca_explained"] = buf;
    scene.metadata["pca_rank"] = std::to_string(pca.rank);
    if (!pca.warnings.empty()) scene.metadata["pca_warning"] = pca.warnings.front();
    scene.metadata["sar_pauli"] = scene.sar.channels == 4 ? "quad-pol" : "dual-pol fallback (VV, VH, (VV+VH)/2)";
    std::snprintf(buf, sizeof(buf), "%g,%g", opts.stretch.p_lo, opts.stretch.p_hi);
    scene.metadata["stretch_percentiles"] = buf;
}

std::vector<int> axis_origins(int length, int size, int stride) {
    if (size <= 0 || stride <= 0) throw std::invalid_argument("patch size and stride must be positive");
    if (stride > size) throw std::invalid_argument("patch stride larger than the patch leaves pixels uncovered");
    if (length < size) {
        throw std::invalid_argument("image extent " + std::to_string(length) + " smaller than patch size " + std::to_string(size));
    }
    std::vector<int> out;
    for (int o = 0; o + size <= length; o += stride) out.push_back(o);
    if (out.back() != length - size) out.push_back(length - size);
    return out;
}

PatchGrid make_patch_grid(int height, int width, int size, int stride) {
    PatchGrid g;
    g.size = size;
    g.stride = stride;
    g.height = height;
    g.width = width;
    const auto rows = axis_origins(height, size, stride);
    const auto cols = axis_origins(width, size, stride);
    for (int r : rows) {
        for (int c : cols) g.origins.emplace_back(r, c);
    }
    return g;
}

Tensor<float> tile_patches(const RasterStack& img, const PatchGrid& grid) {
    if (img.height != grid.height || img.width != grid.width) throw std::invalid_argument("patch grid built for a different raster size");
    const int s = grid.size;
    Tensor<float> out({static_cast<int>(grid.origins.size()), img.channels, s, s});
    for (std::size_t p = 0; p < grid.origins.size(); ++p) {
        const auto [r0, c0] = grid.origins[p];
        for (int c = 0; c < img.channels; ++c) {
            for (int y = 0; y < s; ++y) {
                const float* src = &img.values[(static_cast<std::size_t>(c) * img.height + r0 + y) * img.width + c0];
                std::copy(src, src + s, &out.at(static_cast<int>(p), c, y, 0));
            }
        }
    }
    return out;
}

OverlapAccumulator::OverlapAccumulator(const PatchGrid& grid, int channels)
    : grid_(&grid),
      channels_(channels),
      acc_(static_cast<std::size_t>(channels) * grid.height * grid.width, 0.0),
      cover_(static_cast<std::size_t>(grid.height) * grid.width, 0) {
    if (channels < 1) throw std::invalid_argument("overlap merge needs at least one channel");
}

template <typename T>
void OverlapAccumulator::add(const Tensor<T>& maps, int first) {
    const PatchGrid& grid = *grid_;
    const int s = grid.size;
    if (maps.rank() != 4 || maps.dim(1) != channels_ || maps.dim(2) != s || maps.dim(3) != s) {
        throw std::invalid_argument("merge expects [n, " + std::to_string(channels_) + ", S, S] maps, got " + shape_string(maps.shape()));
    }
    if (first < 0 || first + maps.dim(0) > static_cast<int>(grid.origins.size())) {
        throw std::out_of_range("patch maps run past the end of the grid");
    }
    for (int p = 0; p < maps.dim(0); ++p) {
        const auto [r0, c0] = grid.origins[static_cast<std::size_t>(first + p)];
        for (int y = 0; y < s; ++y) {
            for (int x = 0; x < s; ++x) ++cover_[static_cast<std::size_t>(r0 + y) * grid.width + c0 + x];
        }
        for (int c = 0; c < channels_; ++c) {
            for (int y = 0; y < s; ++y) {
                double* dst = &acc_[(static_cast<std::size_t>(c) * grid.height + r0 + y) * grid.width + c0];
                const T* src = &maps.at(p, c, y, 0);
                for (int x = 0; x < s; ++x) dst[x] += src[x];
            }
        }
    }
}

template <typename T>
Tensor<T> OverlapAccumulator::finish() const {
    const PatchGrid& grid = *grid_;
    const std::size_t plane = static_cast<std::size_t>(grid.height) * grid.width;
    for (std::size_t i = 0; i < plane; ++i) {
        if (cover_[i] == 0) throw std::logic_error("patch grid leaves pixel " + std::to_string(i) + " uncovered");
    }
    Tensor<T> out({channels_, grid.height, grid.width});
    for (int c = 0; c < channels_; ++c) {
        for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = static_cast<T>(acc_[c * plane + i] / cover_[i]);
    }
    return out;
}

template <typename T>
Tensor<T> merge_overlaps(const Tensor<T>& maps, const PatchGrid& grid) {
    if (maps.rank() != 4 || maps.dim(0) != static_cast<int>(grid.origins.size())) {
        throw std::invalid_argument("merge expects one [K, S, S] map per grid origin, got " + shape_string(maps.shape()));
    }
    OverlapAccumulator acc(grid, maps.dim(1));
    acc.add(maps, 0);
    return acc.template finish<T>();
}

template void OverlapAccumulator::add(const Tensor<float>&, int);
template void OverlapAccumulator::add(const Tensor<double>&, int);
template Tensor<float> OverlapAccumulator::finish() const;
template Tensor<double> OverlapAccumulator::finish() const;
template Tensor<float> merge_overlaps(const Tensor<float>&, const PatchGrid&);
template Tensor<double> merge_overlaps(const Tensor<double>&, const PatchGrid&);

}  // namespace unidiff
