#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "tiny_model.hpp"
#include "unidiff/classify.hpp"
#include "unidiff/rng.hpp"

using namespace unidiff;

namespace {

SceneBundle small_scene() {
    SynthOptions o;
    o.height = 64;
    o.width = 72;
    o.bands = 16;
    o.num_classes = 3;
    o.min_train_per_class = 4;
    o.smoothing = 6.0;
    return synth_scene(o);
}

FeatureSpec tiny_spec() {
    FeatureSpec s;
    s.layer = 1;
    s.timestep = 0;
    s.stride = 8;
    s.batch = 5;
    return s;
}

// K isotropic Gaussian blobs in D dimensions; centres 5 sigma apart per axis.
PixelFeatureSet blobs(int k, int per_class, int d, std::uint64_t seed, std::vector<std::vector<double>>& centres) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01;
    PixelFeatureSet set;
    set.dim = d;
    set.num_classes = k;
    centres.assign(k, std::vector<double>(d, 0.0));
    for (int c = 0; c < k; ++c) centres[c][c % d] = 5.0 * (1 + c / d);
    for (int i = 0; i < per_class * k; ++i) {
        const int c = i % k;
        for (int j = 0; j < d; ++j) set.features.push_back(static_cast<float>(centres[c][j] + n01(rng)));
        set.labels.push_back(c + 1);
    }
    return set;
}

bool same_values(const Tensor<float>& a, const Tensor<float>& b) {
    return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

double accuracy(const MlpHead& head, const PixelFeatureSet& set) {
    const auto p = head.predict_proba(set.features.data(), static_cast<int>(set.size()));
    int ok = 0;
    for (std::size_t i = 0; i < set.size(); ++i) {
        const float* r = p.data() + i * head.num_classes();
        ok += (std::max_element(r, r + head.num_classes()) - r) + 1 == set.labels[i];
    }
    return static_cast<double>(ok) / static_cast<double>(set.size());
}

}  // namespace

TEST_CASE("feature spec normalisation") {
    FeatureSpec s;
    s.modalities = {Modality::SAR, Modality::PRGB};
    s.normalize();
    CHECK(s.modalities == std::vector<Modality>{Modality::PRGB, Modality::SAR});
    CHECK(s.modality_key() == "pRGB+SAR");
    s.modalities = {Modality::PCA, Modality::PCA};
    CHECK_THROWS_AS(s.normalize(), std::invalid_argument);
    s.modalities.clear();
    CHECK_THROWS_AS(s.normalize(), std::invalid_argument);
}

TEST_CASE("head separates well-spaced blobs") {
    std::vector<std::vector<double>> centres;
    const PixelFeatureSet set = blobs(4, 60, 3, 7, centres);

    // Nearest-centroid oracle confirms the data is separable as built.
    int oracle_ok = 0;
    for (std::size_t i = 0; i < set.size(); ++i) {
        int best = 0;
        double bd = 1e300;
        for (int c = 0; c < 4; ++c) {
            double dd = 0;
            for (int j = 0; j < 3; ++j) dd += std::pow(set.row(i)[j] - centres[c][j], 2);
            if (dd < bd) bd = dd, best = c;
        }
        oracle_ok += best + 1 == set.labels[i];
    }
    REQUIRE(oracle_ok >= 0.99 * set.size());

    ClassifierConfig cfg;
    cfg.max_epochs = 40;
    cfg.patience = 40;
    cfg.hidden = {32};
    cfg.learning_rate = 1e-2;
    cfg.batch_size = 32;
    cfg.seed = 3;
    const TrainedHead th = train_classifier(set, cfg);
    CHECK(accuracy(th.head, set) >= 0.99);
    CHECK(th.log.train_rows + th.log.val_rows == set.size());
    CHECK(th.log.val_rows == 4 * 6);
    CHECK(th.log.best_epoch >= 1);

    const TrainedHead again = train_classifier(set, cfg);
    CHECK(encode_checkpoint(again.head.to_checkpoint()) == encode_checkpoint(th.head.to_checkpoint()));

    const auto p = th.head.predict_proba(set.features.data(), static_cast<int>(set.size()));
    for (std::size_t i = 0; i < set.size(); ++i) {
        CHECK(std::accumulate(p.begin() + i * 4, p.begin() + (i + 1) * 4, 0.0) == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("training edge cases") {
    std::vector<std::vector<double>> centres;
    PixelFeatureSet set = blobs(3, 20, 2, 1, centres);
    ClassifierConfig cfg;
    cfg.hidden = {8};

    SUBCASE("zero epochs returns the initialised head") {
        cfg.max_epochs = 0;
        const TrainedHead th = train_classifier(set, cfg);
        CHECK(th.log.epochs.empty());
        CHECK(th.log.best_epoch == 0);
        const MlpHead fresh(2, {8}, 3, mix_seed(cfg.seed, 2));
        for (std::size_t i = 0; i < fresh.parameters().size(); ++i) {
            const auto& a = fresh.parameters()[static_cast<int>(i)].value.values();
            const auto& b = th.head.parameters()[static_cast<int>(i)].value.values();
            CHECK(std::equal(a.begin(), a.end(), b.begin()));
        }
    }
    SUBCASE("early stopping keeps the best epoch") {
        cfg.max_epochs = 60;
        cfg.patience = 2;
        cfg.learning_rate = 0.5;  // noisy enough to overshoot
        const TrainedHead th = train_classifier(set, cfg);
        REQUIRE(!th.log.epochs.empty());
        double best = 1e300;
        int best_epoch = 0;
        for (const auto& e : th.log.epochs) {
            if (e.val_loss < best) best = e.val_loss, best_epoch = e.epoch;
        }
        CHECK(th.log.best_epoch == best_epoch);
        CHECK(static_cast<int>(th.log.epochs.size()) <= std::min(cfg.max_epochs, best_epoch + cfg.patience));
        // Stored weights reproduce the best validation loss.
        const auto [tr, va] = stratified_split(set.labels, cfg.validation_fraction, mix_seed(cfg.seed, 1));
        double loss = 0;
        const auto p = th.head.predict_proba(set.features.data(), static_cast<int>(set.size()));
        for (std::size_t i : va) loss -= std::log(static_cast<double>(p[i * 3 + set.labels[i] - 1]));
        CHECK(loss / va.size() == doctest::Approx(best).epsilon(1e-5));
        const auto csv = th.log.to_csv();
        CHECK(csv.rfind("epoch,train_loss,val_loss,val_accuracy\n", 0) == 0);
    }
    SUBCASE("invalid inputs") {
        PixelFeatureSet one = set;
        std::fill(one.labels.begin(), one.labels.end(), 2);
        CHECK_THROWS_AS(train_classifier(one, cfg), std::invalid_argument);
        PixelFeatureSet bad = set;
        bad.labels[0] = 4;
        CHECK_THROWS_AS(train_classifier(bad, cfg), std::out_of_range);
        PixelFeatureSet nan = set;
        nan.features[3] = std::nanf("");
        CHECK_THROWS_AS(train_classifier(nan, cfg), std::invalid_argument);
        ClassifierConfig c2 = cfg;
        c2.validation_fraction = 1.0;
        CHECK_THROWS_AS(train_classifier(set, c2), std::invalid_argument);
    }
}

TEST_CASE("stratified split") {
    std::vector<int> labels;
    for (int i = 0; i < 50; ++i) labels.push_back(1 + (i < 40 ? 0 : (i < 48 ? 1 : 2)));
    labels.push_back(4);  // singleton stays in training
    const auto [tr, va] = stratified_split(labels, 0.1, 9);
    CHECK(tr.size() + va.size() == labels.size());
    std::array<int, 5> per{};
    for (auto i : va) ++per[labels[i]];
    CHECK(per[1] == 4);
    CHECK(per[2] == 1);
    CHECK(per[3] == 1);
    CHECK(per[4] == 0);
    const auto again = stratified_split(labels, 0.1, 9);
    CHECK(again.second == va);
}

TEST_CASE("argmax ties go to the lowest class") {
    Tensor<float> p({3, 1, 3});
    // pixel 0: all equal; pixel 1: classes 2 and 3 tie; pixel 2: class 3 wins
    const float v[9] = {0.3f, 0.2f, 0.1f, 0.3f, 0.4f, 0.2f, 0.3f, 0.4f, 0.7f};
    std::copy(v, v + 9, p.data());
    CHECK(argmax_classes(p) == std::vector<int>{1, 2, 3});
}

TEST_CASE("head checkpoint round trip") {
    MlpHead head(5, {7, 4}, 3, 11);
    head.set_normalization({1, 2, 3, 4, 5}, {1, 0, 2, 2, 0.5f});
    head.provenance()["layer"] = "2";
    const auto bytes = encode_checkpoint(head.to_checkpoint());
    const MlpHead back = MlpHead::from_checkpoint(decode_checkpoint(bytes));
    CHECK(encode_checkpoint(back.to_checkpoint()) == bytes);
    CHECK(back.hidden() == std::vector<int>{7, 4});
    CHECK(back.stddev()[1] == 1.0f);
    CHECK(back.provenance().at("layer") == "2");
    const std::vector<float> x{0.5f, -1, 2, 3, 4, 1, 1, 1, 1, 1};
    CHECK(head.predict_proba(x.data(), 2) == back.predict_proba(x.data(), 2));

    Checkpoint other = head.to_checkpoint();
    other.metadata["format"] = "unidiff-denoiser";
    CHECK_THROWS(MlpHead::from_checkpoint(other));
}

TEST_CASE("dense features and prediction on a scene") {
    const SceneBundle scene = small_scene();
    const auto sched = make_linear_schedule();
    const Denoiser<float> model(testutil::tiny_config(), 4);
    const auto hashes = frozen_hashes(model);
    const FeatureSpec spec = tiny_spec();
    const int cf = model.tap_info(spec.layer).channels;

    const DenseFeatures dense = compute_dense_features(scene, model, spec, sched);
    CHECK(dense.dim() == 3 * cf);
    CHECK(dense.maps[0].shape() == std::vector<int>{cf, 64, 72});

    const PixelFeatureSet all = gather_features(dense, scene.train);
    CHECK(all.size() == scene.train.entries.size());
    CHECK(all.dim == 3 * cf);
    const auto& e = scene.train.entries[2];
    CHECK(all.row(2)[cf + 1] == dense.maps[1][(1 * 64 + e.row) * 72 + e.col]);

    const PixelFeatureSet stored = features_from_checkpoint(decode_checkpoint(encode_checkpoint(features_to_checkpoint(all))));
    CHECK(stored.features == all.features);
    CHECK(stored.labels == all.labels);
    CHECK(stored.modalities == all.modalities);

    const PixelFeatureSet sar = select_modalities(all, {Modality::SAR});
    CHECK(sar.dim == cf);
    CHECK(sar.row(2)[0] == all.row(2)[2 * cf]);
    CHECK_THROWS_AS(select_modalities(sar, {Modality::PCA}), std::invalid_argument);

    FeatureSpec one = spec;
    one.modalities = {Modality::PCA};
    const DenseFeatures dpca = compute_dense_features(scene, model, one, sched);
    CHECK(dpca.dim() == cf);
    CHECK(same_values(dpca.maps[0], dense.maps[1]));

    // Identity-initialised conditioner: same input gives the same features
    // whatever modality tag it carries.
    SceneBundle same = scene;
    same.sar3 = scene.pca3;
    const DenseFeatures dsame = compute_dense_features(same, model, spec, sched);
    CHECK(same_values(dsame.maps[2], dsame.maps[1]));

    ClassifierConfig cfg;
    cfg.hidden = {16};
    cfg.max_epochs = 3;
    const TrainedHead th = train_classifier(all, cfg);
    const DensePrediction pred = predict_dense(scene, model, th.head, spec, sched);
    CHECK(pred.class_map.size() == 64u * 72);
    CHECK(pred.probs.shape() == std::vector<int>{3, 64, 72});
    for (std::size_t i = 0; i < 64u * 72; i += 37) {
        const double s = pred.probs[i] + pred.probs[i + 4608] + pred.probs[i + 2 * 4608];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
    for (int c : pred.class_map) CHECK((c >= 1 && c <= 3));
    const ConfusionMatrix cm = evaluate_split(pred.class_map, 72, scene.test);
    CHECK(cm.total() == scene.test.entries.size());

    // A head whose last layer is all zeros ties every class: map is all 1.
    MlpHead flat = th.head;
    auto& params = flat.parameters();
    for (std::size_t i = params.size() - 2; i < params.size(); ++i) {
        for (auto& v : params[static_cast<int>(i)].value.values()) v = 0.0f;
    }
    const DensePrediction fp = predict_dense(scene, model, flat, spec, sched);
    CHECK(std::all_of(fp.class_map.begin(), fp.class_map.end(), [](int c) { return c == 1; }));

    FeatureSpec wrong = spec;
    wrong.modalities = {Modality::PRGB};
    CHECK_THROWS_AS(predict_dense(scene, model, th.head, wrong, sched), std::invalid_argument);
    CHECK(frozen_hashes(model) == hashes);
}
