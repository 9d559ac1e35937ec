#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

#include "unidiff/dataio.hpp"

namespace unidiff {

namespace {

using Field = std::vector<double>;

// Separable running-mean blur, edge clamped.
void box_blur(Field& f, int h, int w, int radius) {
    if (radius <= 0) return;
    Field tmp(f.size());
    const double norm = 1.0 / (2 * radius + 1);
    for (int r = 0; r < h; ++r) {
        const double* src = f.data() + static_cast<std::size_t>(r) * w;
        double* dst = tmp.data() + static_cast<std::size_t>(r) * w;
        for (int c = 0; c < w; ++c) {
            double s = 0.0;
            for (int k = -radius; k <= radius; ++k) s += src[std::clamp(c + k, 0, w - 1)];
            dst[c] = s * norm;
        }
    }
    for (int c = 0; c < w; ++c) {
        for (int r = 0; r < h; ++r) {
            double s = 0.0;
            for (int k = -radius; k <= radius; ++k) s += tmp[static_cast<std::size_t>(std::clamp(r + k, 0, h - 1)) * w + c];
            f[static_cast<std::size_t>(r) * w + c] = s * norm;
        }
    }
}

// Zero-mean, unit-variance smooth random field.
Field smooth_field(int h, int w, double length, std::mt19937_64& rng) {
    std::normal_distribution<double> n01;
    Field f(static_cast<std::size_t>(h) * w);
    for (auto& v : f) v = n01(rng);
    const int radius = std::max(1, static_cast<int>(std::lround(length / 2.0)));
    for (int pass = 0; pass < 3; ++pass) box_blur(f, h, w, radius);
    const double mean = std::accumulate(f.begin(), f.end(), 0.0) / static_cast<double>(f.size());
    double var = 0.0;
    for (double v : f) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(f.size()));
    for (auto& v : f) v = (v - mean) / (sd > 0 ? sd : 1.0);
    return f;
}

struct Bump {
    double centre, width, height;
};

double gaussian_sum(const std::vector<Bump>& bumps, double wl) {
    double s = 0.0;
    for (const auto& b : bumps) s += b.height * std::exp(-0.5 * std::pow((wl - b.centre) / b.width, 2));
    return s;
}

const char* const kClassNames[] = {"Forest", "Residential", "Industrial", "LowPlants", "Allotment",
                                   "Commercial", "Water", "Bare", "Wetland", "Road"};

}  // namespace

// Class layout: argmax over K smooth fields plus per-class biases, which
// gives irregular regions with unequal areas. Signatures are built so the
// modalities are complementary: classes 1 and 2 share one spectrum and are
// separated only by radar backscatter, classes 3 and 4 (when K >= 4) agree
// below 700 nm and differ only in the near infrared.
SceneBundle synth_scene(const SynthOptions& o) {
    if (o.height < 64 || o.width < 64) throw std::invalid_argument("synthetic scene must be at least 64x64");
    if (o.num_classes < 2) throw std::invalid_argument("synthetic scene needs at least 2 classes");
    if (o.bands < 3) throw std::invalid_argument("synthetic scene needs at least 3 bands");
    if (!(o.train_fraction > 0.0 && o.train_fraction < 0.01)) throw std::invalid_argument("train_fraction must lie in (0, 0.01)");
    if (o.min_train_per_class < 1) throw std::invalid_argument("min_train_per_class must be positive");

    const int h = o.height, w = o.width, k = o.num_classes;
    const std::size_t npix = static_cast<std::size_t>(h) * w;
    if (static_cast<double>(k) * o.min_train_per_class >= 0.01 * static_cast<double>(npix)) {
        throw std::invalid_argument("scene too small for the per-class training minimum under the 1% label budget");
    }
    const std::size_t min_pixels = static_cast<std::size_t>(o.min_train_per_class) * 4 + 16;

    std::vector<int> cls(npix);
    std::mt19937_64 rng;
    for (int attempt = 0;; ++attempt) {
        if (attempt == 64) throw std::runtime_error("could not draw a class layout containing every class");
        rng.seed(o.seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(attempt));
        std::vector<Field> fields;
        std::vector<double> bias(k);
        std::uniform_real_distribution<double> ub(-0.6, 0.6);
        for (int c = 0; c < k; ++c) {
            fields.push_back(smooth_field(h, w, o.smoothing, rng));
            bias[c] = ub(rng);
        }
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t p = 0; p < npix; ++p) {
            int best = 0;
            for (int c = 1; c < k; ++c) {
                if (fields[c][p] + bias[c] > fields[best][p] + bias[best]) best = c;
            }
            cls[p] = best;
            ++counts[best];
        }
        if (*std::min_element(counts.begin(), counts.end()) >= min_pixels) break;
    }

    SceneBundle scene;
    scene.hsi = RasterStack(h, w, o.bands);
    scene.hsi.wavelengths.resize(o.bands);
    for (int b = 0; b < o.bands; ++b) scene.hsi.wavelengths[b] = 400.0 + 600.0 * b / (o.bands - 1);

    // Spectral signatures.
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::vector<std::vector<double>> sig(k, std::vector<double>(o.bands));
    std::vector<std::vector<double>> alt(k, std::vector<double>(o.bands));  // within-class endmember
    for (int c = 0; c < k; ++c) {
        std::vector<Bump> bumps;
        const double base = 0.08 + 0.25 * u01(rng);
        const double slope = 0.25 * (u01(rng) - 0.3);
        for (int j = 0; j < 3; ++j) bumps.push_back({420.0 + 560.0 * u01(rng), 25.0 + 60.0 * u01(rng), 0.05 + 0.2 * u01(rng)});
        for (int b = 0; b < o.bands; ++b) {
            const double wl = scene.hsi.wavelengths[b];
            sig[c][b] = base + slope * (wl - 400.0) / 600.0 + gaussian_sum(bumps, wl);
        }
        const double tilt = 0.1 * (u01(rng) - 0.5);
        for (int b = 0; b < o.bands; ++b) alt[c][b] = sig[c][b] * (1.0 + tilt * (b - o.bands / 2.0) / o.bands);
    }
    sig[1] = sig[0];
    alt[1] = alt[0];
    if (k >= 4) {
        const double lift = 0.12 + 0.08 * u01(rng);
        for (int b = 0; b < o.bands; ++b) {
            const double wl = scene.hsi.wavelengths[b];
            sig[3][b] = sig[2][b];
            alt[3][b] = alt[2][b];
            if (wl > 700.0) {
                const double ramp = lift * std::min(1.0, (wl - 700.0) / 80.0);
                sig[3][b] += ramp;
                alt[3][b] += ramp;
            }
        }
    }

    const Field illum = smooth_field(h, w, 6.0, rng);
    const Field mixf = smooth_field(h, w, 3.0, rng);
    std::normal_distribution<double> noise(0.0, 0.006);
    for (std::size_t p = 0; p < npix; ++p) {
        const int c = cls[p];
        const double gain = 1.0 + 0.08 * illum[p];
        const double mix = 0.5 + 0.5 * std::tanh(mixf[p]);
        for (int b = 0; b < o.bands; ++b) {
            const double v = gain * ((1.0 - mix) * sig[c][b] + mix * alt[c][b]) + noise(rng);
            scene.hsi.values[static_cast<std::size_t>(b) * npix + p] = static_cast<float>(v);
        }
    }

    // Dual-pol SAR: class mean intensities (linear), gamma speckle with 4 looks,
    // stored as amplitudes (VV, VH).
    std::vector<double> vv(k), vh(k);
    for (int c = 0; c < k; ++c) {
        vv[c] = std::pow(10.0, (-14.0 + 10.0 * u01(rng)) / 10.0);
        vh[c] = vv[c] * std::pow(10.0, (-9.0 + 5.0 * u01(rng)) / 10.0);
    }
    vv[1] = vv[0] * std::pow(10.0, 0.8);
    vh[1] = vh[0] * std::pow(10.0, 0.6);
    if (k >= 4) {
        vv[3] = vv[2];
        vh[3] = vh[2];
    }
    scene.sar = RasterStack(h, w, 2);
    std::gamma_distribution<double> speckle(4.0, 0.25);
    const Field rough = smooth_field(h, w, 4.0, rng);
    for (std::size_t p = 0; p < npix; ++p) {
        const int c = cls[p];
        const double tex = std::exp(0.15 * rough[p]);
        scene.sar.values[p] = static_cast<float>(std::sqrt(vv[c] * tex * speckle(rng)));
        scene.sar.values[npix + p] = static_cast<float>(std::sqrt(vh[c] * tex * speckle(rng)));
    }

    // Sparse labels: a budget below 1% of pixels split in proportion to class
    // area (so train counts inherit the layout's imbalance), floored at the
    // per-class minimum. Everything else is test.
    std::vector<std::vector<std::size_t>> members(k);
    for (std::size_t p = 0; p < npix; ++p) members[cls[p]].push_back(p);
    const double budget = o.train_fraction * static_cast<double>(npix);
    std::vector<std::size_t> quota(k);
    for (int c = 0; c < k; ++c) {
        const double share = static_cast<double>(members[c].size()) / static_cast<double>(npix);
        quota[c] = std::max<std::size_t>(o.min_train_per_class, static_cast<std::size_t>(std::floor(budget * share)));
    }
    const std::size_t total_train = std::accumulate(quota.begin(), quota.end(), std::size_t{0});
    if (static_cast<double>(total_train) >= 0.01 * static_cast<double>(npix)) {
        throw std::runtime_error("training label budget exceeds 1% of pixels");
    }

    std::vector<char> is_train(npix, 0);
    for (int c = 0; c < k; ++c) {
        std::vector<std::size_t> pool = members[c];
        std::shuffle(pool.begin(), pool.end(), rng);
        for (std::size_t i = 0; i < quota[c]; ++i) is_train[pool[i]] = 1;
    }
    scene.train.num_classes = scene.test.num_classes = k;
    scene.train.split = "train";
    scene.test.split = "test";
    for (std::size_t p = 0; p < npix; ++p) {
        LabelEntry e{static_cast<int>(p / w), static_cast<int>(p % w), cls[p] + 1};
        (is_train[p] ? scene.train : scene.test).entries.push_back(e);
    }

    for (int c = 0; c < k; ++c) {
        std::string name = kClassNames[c % 10];
        if (c >= 10) name += "_" + std::to_string(c / 10);
        scene.class_names.push_back(name);
    }
    scene.metadata["source"] = "synthetic";
    scene.metadata["synth.seed"] = std::to_string(o.seed);
    scene.metadata["synth.size"] = std::to_string(h) + "x" + std::to_string(w);
    scene.metadata["synth.bands"] = std::to_string(o.bands);
    scene.metadata["synth.smoothing"] = std::to_string(o.smoothing);
    scene.metadata["synth.train_fraction"] = std::to_string(o.train_fraction);
    scene.metadata["sar.polarisation"] = "VV,VH";
    prepare_representations(scene);
    return scene;
}

}  // namespace unidiff
