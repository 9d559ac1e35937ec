// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "unidiff/adaptation.hpp"
#include "unidiff/analysis.hpp"
#include "unidiff/classify.hpp"
#include "unidiff/metrics.hpp"
#include "unidiff/rng.hpp"

using namespace unidiff;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), f, args...);
    return buf;
}

const NoiseSchedule& schedule() {
    static const NoiseSchedule s = make_linear_schedule();
    return s;
}

const SceneBundle& default_scene() {
    static const SceneBundle s = synth_scene(SynthOptions{});
    return s;
}

AdaptationConfig adapt_cfg(int steps, std::uint64_t seed, const std::string& policy = "joint") {
    AdaptationConfig c;
    c.steps = steps;
    c.batch_size = 8;
    c.seed = seed;
    c.policy = MixPolicy::parse(policy);
    return c;
}

ClassifierConfig head_cfg(std::uint64_t seed) {
    ClassifierConfig c;
    c.max_epochs = 100;
    c.patience = 10;
    c.seed = seed;
    return c;
}

FeatureSpec outer_spec(const Denoiser<float>& m) {
    FeatureSpec s;
    s.layer = m.tap_count() - 1;
    s.timestep = 0;
    return s;
}

std::vector<int> predict_rows(const MlpHead& head, const PixelFeatureSet& set) {
    const int k = set.num_classes;
    const auto p = head.predict_proba(set.row(0), static_cast<int>(set.size()));
    std::vector<int> out(set.size());
    for (std::size_t i = 0; i < set.size(); ++i) {
        const float* r = p.data() + i * k;
        out[i] = static_cast<int>(std::max_element(r, r + k) - r) + 1;
    }
    return out;
}

// Adapted compact model shared by criteria 7 and 10.
std::optional<Denoiser<float>> g_adapted;

// ---- 1 ----
Outcome identity_at_init() {
    Denoiser<float> m(DenoiserConfig::compact(), 11);
    m.conditioner().init_identity(5);
    const int s = m.config().image_size;
    std::mt19937_64 rng(21);
    std::uniform_int_distribution<int> t_dist(0, schedule().steps);
    std::uniform_int_distribution<int> m_dist(0, kModalityCount - 1);
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
        auto x = standard_normal<float>({1, 3, s, s}, 100 + i);
        for (auto& v : x.values()) v = std::tanh(v);
        const std::vector<int> t{t_dist(rng)};
        const std::vector<Modality> mod{static_cast<Modality>(m_dist(rng))};
        const auto a = m.predict_noise(x, t, mod);
        const auto b = m.predict_noise_unconditioned(x);
        for (std::size_t j = 0; j < a.size(); ++j) worst = std::max(worst, std::fabs(static_cast<double>(a[j]) - b[j]));
    }
    return {worst <= 1e-6, fmt("max |conditioned - FiLM-free| %.3g over 20 (x, t, m) triples", worst)};
}

// ---- 2 ----
Outcome gradient_check() {
    Denoiser<double> m = Denoiser<float>(DenoiserConfig::compact(), 3).cast<double>();
    m.conditioner().init_random(4, 0.2);
    const int s = m.config().image_size;
    auto x0 = standard_normal<double>({3, 3, s, s}, 8);
    for (auto& v : x0.values()) v = std::tanh(v);
    const auto eps = standard_normal<double>({3, 3, s, s}, 9);
    const std::vector<int> ts{37, 420, 901};
    const std::vector<Modality> mods{Modality::PRGB, Modality::PCA, Modality::SAR};
    auto loss = [&](bool record) {
        nn::Graph<double> g(record);
        const nn::Var l = denoise_loss(g, m, x0, mods, ts, eps, schedule());
        if (record) g.backward(l);
        return g.value(l)[0];
    };
    auto& params = m.conditioner().parameters();
    params.zero_grad();
    loss(true);

    std::vector<std::pair<std::size_t, std::size_t>> all;
    for (std::size_t p = 0; p < params.size(); ++p)
        for (std::size_t i = 0; i < params[p].value.size(); ++i) all.emplace_back(p, i);
    std::mt19937_64 rng(50);
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(50);

    const double h = 1e-3;
    double worst = 0.0;
    int zero = 0;
    for (const auto& [p, i] : all) {
        double& w = params[p].value[i];
        const double orig = w;
        w = orig + h;
        const double up = loss(false);
        w = orig - h;
        const double down = loss(false);
        w = orig;
        const double fd = (up - down) / (2 * h);
        const double an = params[p].grad[i];
        const double scale = std::max(std::fabs(fd), std::fabs(an));
        if (scale < 1e-12) {
            ++zero;
            continue;
        }
        worst = std::max(worst, std::fabs(fd - an) / scale);
    }
    return {worst <= 1e-4, fmt("max relative error %.3g over 50 parameters (%d with both gradients below 1e-12)", worst, zero)};
}

// ---- 3 ----
Outcome frozen_backbone() {
    Denoiser<float> m(DenoiserConfig::compact(), 0);
    const auto before = frozen_hashes(m);
    const auto cond_before = m.conditioner().parameters()[0].value;
    adapt(m, default_scene(), adapt_cfg(500, 0), schedule());
    const auto after = frozen_hashes(m);
    bool moved = false;
    const auto& cond_after = m.conditioner().parameters()[0].value;
    for (std::size_t i = 0; i < cond_after.size(); ++i) moved |= cond_after[i] != cond_before[i];
    const double ratio = partition_parameters(Denoiser<float>(DenoiserConfig::reference(), 0)).ratio();
    const bool ok = before == after && !before.empty() && moved && ratio >= 0.02 && ratio <= 0.08;
    return {ok, fmt("%zu frozen tensors %s after 500 steps, conditioner %s; reference trainable ratio %.4f", before.size(),
                    before == after ? "unchanged" : "CHANGED", moved ? "updated" : "NOT updated", ratio)};
}

// ---- 4 ----
Outcome forward_moments() {
    const int n = 10000;
    const double x0v = 0.6;
    const Tensor<double> x0({n, 1, 1, 1}, x0v);
    bool ok = true;
    std::string detail;
    for (int t : {1, 50, 250, 600, 1000}) {
        const auto eps = standard_normal<double>({n, 1, 1, 1}, 1000 + t);
        const auto xt = q_sample(x0, t, eps, schedule());
        double mean = 0.0;
        for (double v : xt.values()) mean += v;
        mean /= n;
        double var = 0.0;
        for (double v : xt.values()) var += (v - mean) * (v - mean);
        var /= n - 1;
        const double ab = schedule().alpha_bar[t];
        const double want_mean = std::sqrt(ab) * x0v, want_var = 1.0 - ab;
        const double z_mean = (mean - want_mean) / std::sqrt(want_var / n);
        const double z_var = (var - want_var) / (want_var * std::sqrt(2.0 / (n - 1)));
        ok &= std::fabs(z_mean) <= 3.0 && std::fabs(z_var) <= 3.0;
        detail += fmt("%st=%d z(mean) %.2f z(var) %.2f", detail.empty() ? "" : ", ", t, z_mean, z_var);
    }
    return {ok, detail};
}

// ---- 5 ----
Outcome data_pipeline() {
    // PCA subspace against a Jacobi eigendecomposition of the covariance.
    SynthOptions so;
    so.height = 96;
    so.width = 96;
    so.min_train_per_class = 4;
    const SceneBundle scene = synth_scene(so);
    const RasterStack& cube = scene.hsi;
    const int c = cube.channels;
    const PcaResult pca = hsi_to_pca3(cube);
    std::vector<double> evals;
    testutil::Mat vecs;
    testutil::jacobi_eigen(testutil::covariance(cube), evals, vecs);
    std::vector<int> order(c);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) { return evals[a] > evals[b]; });
    double resid = 0.0;
    for (int j = 0; j < 3; ++j) {
        std::vector<double> r(c);
        for (int b = 0; b < c; ++b) r[b] = vecs[b][order[j]];
        const std::vector<double> u = r;
        for (int k = 0; k < 3; ++k) {
            double dot = 0.0;
            for (int b = 0; b < c; ++b) dot += pca.components[k * c + b] * u[b];
            for (int b = 0; b < c; ++b) r[b] -= dot * pca.components[k * c + b];
        }
        for (double v : r) resid += v * v;
    }
    const double angle = std::asin(std::min(1.0, std::sqrt(resid)));

    // Pauli against the elementwise formula, quad-pol and dual-pol.
    RasterStack quad(19, 23, 4), dual(19, 23, 2);
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n01;
    for (auto& v : quad.values) v = static_cast<float>(n01(rng));
    for (auto& v : dual.values) v = static_cast<float>(n01(rng));
    const auto pq = pauli_channels(quad), pd = pauli_channels(dual);
    double pauli = 0.0;
    for (std::size_t i = 0; i < quad.plane_size(); ++i) {
        const double hh = quad.band(0)[i], hv = quad.band(1)[i], vh = quad.band(2)[i], vv = quad.band(3)[i];
        const double q[3] = {std::abs(hh + vv) / std::sqrt(2.0), std::abs(hh - vv) / std::sqrt(2.0), std::abs(hv + vh) / std::sqrt(2.0)};
        const double v2 = dual.band(0)[i], h2 = dual.band(1)[i];
        const double d[3] = {v2, h2, (v2 + h2) / 2.0};
        for (int k = 0; k < 3; ++k) {
            pauli = std::max(pauli, std::fabs(static_cast<float>(q[k]) - static_cast<double>(pq.band(k)[i])));
            pauli = std::max(pauli, std::fabs(static_cast<float>(d[k]) - static_cast<double>(pd.band(k)[i])));
        }
    }

    // Overlap merge against naive per-pixel accumulation.
    const int h = 110, w = 150, k = 4;
    const PatchGrid grid = make_patch_grid(h, w, 64, 24);
    const int np = static_cast<int>(grid.origins.size());
    Tensor<double> maps({np, k, 64, 64});
    std::uniform_real_distribution<double> u01;
    for (auto& v : maps.values()) v = u01(rng);
    const auto merged = merge_overlaps(maps, grid);
    std::vector<double> sum(static_cast<std::size_t>(k) * h * w, 0.0);
    std::vector<int> cover(static_cast<std::size_t>(h) * w, 0);
    for (int p = 0; p < np; ++p) {
        const auto [r0, c0] = grid.origins[p];
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x) {
                ++cover[static_cast<std::size_t>(r0 + y) * w + c0 + x];
                for (int ch = 0; ch < k; ++ch) sum[(static_cast<std::size_t>(ch) * h + r0 + y) * w + c0 + x] += maps.at(p, ch, y, x);
            }
    }
    double merge = 0.0;
    for (int ch = 0; ch < k; ++ch)
        for (std::size_t i = 0; i < cover.size(); ++i) {
            merge = std::max(merge, std::fabs(sum[ch * cover.size() + i] / cover[i] - merged[ch * cover.size() + i]));
        }

    // Percentile stretch on the 0..99 ramp: P2 = 1.98, P98 = 97.02.
    std::vector<float> ramp(100);
    std::iota(ramp.begin(), ramp.end(), 0.0f);
    const double s50 = percentile_stretch(ramp)[50];
    const double want = (50.0 - 1.98) / (97.02 - 1.98);

    const bool ok = angle < 1e-6 && pauli <= 1e-12 && merge <= 1e-12 && std::fabs(s50 - want) < 1e-6 && std::fabs(s50 - 0.5053) < 1e-4;
    return {ok, fmt("PCA subspace angle %.2g rad, Pauli %.2g, merge %.2g, stretch(50) %.6f", angle, pauli, merge, s50)};
}

// ---- 6 ----
Outcome metrics_oracle() {
    const ConfusionMatrix cm = confusion_from_counts(2, {50, 10, 5, 35});
    const Scores s = scores(cm);
    // Hand-derived: AA = (50/60 + 35/40) / 2, p_e = (60*55 + 40*45) / 100^2.
    const double aa = (50.0 / 60 + 35.0 / 40) / 2, pe = (60.0 * 55 + 40.0 * 45) / 10000.0;
    const double kappa = (0.85 - pe) / (1 - pe), f1 = 100.0 / 115.0, iou = 50.0 / 65.0;
    bool ok = std::fabs(s.oa - 0.85) < 1e-12 && std::fabs(s.aa - aa) < 1e-12 && std::fabs(s.kappa - kappa) < 1e-12 &&
              std::fabs(s.per_class[0].f1 - f1) < 1e-12 && std::fabs(s.per_class[0].iou - iou) < 1e-12;
    ok &= std::fabs(aa - 0.8542) < 5e-5 && std::fabs(kappa - 0.6939) < 5e-5 && std::fabs(f1 - 0.8696) < 5e-5 &&
          std::fabs(iou - 0.7692) < 5e-5;

    const ConfusionMatrix sw = confusion_from_counts(2, {35, 5, 10, 50});
    const Scores p = scores(sw);
    const ConfusionMatrix big = confusion_from_counts(3, {40, 3, 7, 2, 25, 1, 9, 4, 30});
    // Permutation (0 1 2) -> (2 0 1) applied to rows and columns.
    const int perm[3] = {2, 0, 1};
    std::vector<std::uint64_t> pc(9);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) pc[perm[r] * 3 + perm[c]] = big.at(r, c);
    const Scores b1 = scores(big), b2 = scores(confusion_from_counts(3, pc));
    auto same = [](const Scores& a, const Scores& b) {
        return std::fabs(a.oa - b.oa) < 1e-15 && std::fabs(a.aa - b.aa) < 1e-15 && std::fabs(a.kappa - b.kappa) < 1e-15 &&
               std::fabs(a.mf1 - b.mf1) < 1e-15 && std::fabs(a.miou - b.miou) < 1e-15;
    };
    const bool inv = same(s, p) && same(b1, b2);
    return {ok && inv, fmt("OA %.4f AA %.4f kappa %.4f F1_1 %.4f IoU_1 %.4f; permutation invariance %s", s.oa, s.aa, s.kappa,
                           s.per_class[0].f1, s.per_class[0].iou, inv ? "holds" : "BROKEN")};
}

// ---- 7 ----
Outcome training_progress() {
    Denoiser<float> m(DenoiserConfig::compact(), 0);
    const LossTrace trace = adapt(m, default_scene(), adapt_cfg(200, 0), schedule());
    bool finite = trace.size() == 200;
    for (double v : trace.loss) finite &= std::isfinite(v);
    const double lead = trace.mean(0, 50), trail = trace.mean(150, 200);
    g_adapted = m;
    return {finite && trail < lead, fmt("leading-50 mean %.5f, trailing-50 mean %.5f, %s", lead, trail, finite ? "no NaN" : "NON-FINITE")};
}

// ---- 8 ----
Outcome end_to_end() {
    bool ok = true;
    std::string detail;
    double aa_sum = 0.0;
    int k = 0;
    for (int s = 0; s < 5; ++s) {
        SynthOptions so;
        so.seed = 7 + s;
        const SceneBundle scene = synth_scene(so);
        k = scene.num_classes();
        Denoiser<float> m(DenoiserConfig::compact(), s);
        adapt(m, scene, adapt_cfg(200, s), schedule());
        const FeatureSpec spec = outer_spec(m);
        const DenseFeatures dense = compute_dense_features(scene, m, spec, schedule());
        const PixelFeatureSet train = gather_features(dense, scene.train);
        const PixelFeatureSet test = gather_features(dense, scene.test);

        const TrainedHead th = train_classifier(train, head_cfg(s));
        const DensePrediction pred = predict_dense(scene, m, th.head, spec, schedule());
        const Scores sc = scores(evaluate_split(pred.class_map, pred.width, scene.test));

        // Majority baseline: always answer the most frequent training class.
        const auto tr = scene.train.class_counts(), te = scene.test.class_counts();
        const auto maj = std::max_element(tr.begin() + 1, tr.end()) - tr.begin();
        const double base = static_cast<double>(te[maj]) / scene.test.entries.size();

        PixelFeatureSet shuffled = train;
        std::mt19937_64 rng(mix_seed(s, 99));
        std::shuffle(shuffled.labels.begin(), shuffled.labels.end(), rng);
        const TrainedHead control = train_classifier(shuffled, head_cfg(s));
        const Scores cs = scores(confusion(test.labels, predict_rows(control.head, test), k));
        aa_sum += cs.aa;

        ok &= sc.oa >= base + 0.10;
        detail += fmt("%sseed %d OA %.2f vs majority %.2f, control AA %.2f", s ? "; " : "", s, 100 * sc.oa, 100 * base, 100 * cs.aa);
    }
    const double aa = aa_sum / 5;
    ok &= std::fabs(aa - 1.0 / k) <= 0.05;
    return {ok, detail + fmt("; mean control AA %.2f vs chance %.2f", 100 * aa, 100.0 / k)};
}

// ---- 9 ----
Outcome anchoring_direction() {
    double joint = 0.0, pca = 0.0;
    std::string detail;
    for (std::uint64_t s : {1, 2, 3}) {
        const Denoiser<float> base(DenoiserConfig::compact(), s);
        const SweepTable t = anchoring_ablation(default_scene(), base, adapt_cfg(200, s), outer_spec(base), schedule(), head_cfg(s));
        std::map<std::string, double> oa;
        for (const auto& r : t.records) oa[r.key] = r.scores.oa;
        joint += oa.at("pRGB+PCA joint") / 3;
        pca += oa.at("PCA-only") / 3;
        detail += fmt("seed %d pretrained %.2f PCA-only %.2f joint %.2f; ", static_cast<int>(s), 100 * oa.at("pretrained"),
                      100 * oa.at("PCA-only"), 100 * oa.at("pRGB+PCA joint"));
    }
    return {joint >= pca, detail + fmt("mean joint %.2f vs PCA-only %.2f", 100 * joint, 100 * pca)};
}

// ---- 10 ----
Outcome sweep_shape() {
    if (!g_adapted) {
        Denoiser<float> m(DenoiserConfig::compact(), 0);
        adapt(m, default_scene(), adapt_cfg(200, 0), schedule());
        g_adapted = m;
    }
    const Denoiser<float>& adapted = *g_adapted;
    Denoiser<float> pre = adapted;
    pre.conditioner().init_identity(0);
    const FeatureSpec spec = outer_spec(adapted);

    const SweepTable abl = modality_combo_ablation(default_scene(), adapted, spec, schedule(), head_cfg(0));
    std::set<std::string> keys;
    for (const auto& r : abl.records) keys.insert(r.key);

    const std::vector<int> timesteps{0, 100, 300};
    const std::vector<SweepVariant> variants{{"adapted", &adapted, spec.modalities}, {"pretrained", &pre, spec.modalities}};
    const SweepTable sweep = timestep_sweep(default_scene(), variants, timesteps, spec, schedule(), head_cfg(0));
    const std::string svg = timestep_plot_svg(sweep);
    std::size_t lines = 0;
    for (std::size_t p = svg.find("<polyline"); p != std::string::npos; p = svg.find("<polyline", p + 1)) ++lines;

    // Recompute from the matrices as stored and after a JSON round trip.
    const auto bad = verify_records(abl).size() + verify_records(sweep).size() +
                     verify_records(sweep_from_json(sweep_to_json(abl))).size() +
                     verify_records(sweep_from_json(sweep_to_json(sweep))).size();
    const std::size_t want = timesteps.size() * variants.size();
    const bool ok = abl.records.size() == 7 && keys.size() == 7 && sweep.records.size() == want && lines == variants.size() && bad == 0;
    return {ok, fmt("modality ablation %zu rows (%zu distinct), timestep sweep %zu rows (want %zu), plot with %zu series, "
                    "%zu records disagree with their matrices",
                    abl.records.size(), keys.size(), sweep.records.size(), want, lines, static_cast<std::size_t>(bad))};
}

struct Criterion {
    int id;
    const char* name;
    double limit_s;
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> all{
        {1, "identity at init", 60, identity_at_init},
        {2, "gradient correctness", 300, gradient_check},
        {3, "frozen backbone", 600, frozen_backbone},
        {4, "forward-process moments", 60, forward_moments},
        {5, "data-pipeline oracles", 60, data_pipeline},
        {6, "metrics oracle", 1, metrics_oracle},
        {7, "training progress", 600, training_progress},
        {8, "end-to-end discrimination", 1200, end_to_end},
        {9, "anchoring direction", 1800, anchoring_direction},
        {10, "sweep harness shape", 1800, sweep_shape},
    };
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

    int failed = 0;
    for (const auto& c : all) {
        if (!wanted.empty() && !wanted.count(c.id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool in_time = secs <= c.limit_s;
        const bool pass = o.pass && in_time;
        failed += !pass;
        std::printf("%s criterion %d (%s): %s [%.1f s, limit %.0f s%s]\n", pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(),
                    secs, c.limit_s, in_time ? "" : ", EXCEEDED");
        std::fflush(stdout);
    }
    return failed ? 1 : 0;
}
