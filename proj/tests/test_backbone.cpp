#include "doctest.h"
#include "tiny_model.hpp"

#include <cmath>
#include <filesystem>
#include <set>

#include "unidiff/backbone.hpp"
#include "unidiff/checkpoint.hpp"
#include "unidiff/errors.hpp"

using namespace unidiff;
using testutil::tiny_config;

namespace {

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("unidiff_test_" + name);
}

Tensor<float> patches(int n, int s, std::uint64_t seed) {
    auto x = standard_normal<float>({n, 3, s, s}, seed);
    for (auto& v : x.values()) v = std::tanh(v);
    return x;
}

}  // namespace

TEST_CASE("config validation") {
    auto c = tiny_config();
    c.validate();
    c.image_size = 18;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny_config();
    c.attention_resolutions = {5};
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny_config();
    c.cond_width = 15;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    const auto meta = tiny_config().to_metadata();
    const auto back = DenoiserConfig::from_metadata(meta);
    CHECK(back.to_metadata() == meta);
}

TEST_CASE("forward shape and input validation") {
    Denoiser<float> m(tiny_config(), 1);
    const auto x = patches(2, 16, 2);
    const std::vector<int> ts{3, 700};
    const std::vector<Modality> ms{Modality::PCA, Modality::SAR};
    const auto y = m.predict_noise(x, ts, ms);
    CHECK(y.shape() == x.shape());
    for (float v : y.values()) CHECK(std::isfinite(v));

    CHECK_THROWS_AS(m.predict_noise(Tensor<float>({1, 4, 16, 16}), std::vector<int>{1}, std::vector<Modality>{Modality::PCA}),
                    std::invalid_argument);
    CHECK_THROWS_AS(m.predict_noise(Tensor<float>({1, 3, 8, 8}), std::vector<int>{1}, std::vector<Modality>{Modality::PCA}),
                    std::invalid_argument);
}

TEST_CASE("identity conditioner makes modality irrelevant") {
    Denoiser<float> m(tiny_config(), 4);
    const auto x = patches(3, 16, 5);
    const std::vector<int> ts{1, 250, 1000};
    const auto a = m.predict_noise(x, ts, std::vector<Modality>(3, Modality::PRGB));
    const auto b = m.predict_noise(x, ts, std::vector<Modality>(3, Modality::SAR));
    const auto plain = m.predict_noise_unconditioned(x);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i] == b[i]);
        CHECK(std::fabs(a[i] - plain[i]) <= 1e-6f);
    }
}

TEST_CASE("random conditioner changes the output") {
    Denoiser<float> m(tiny_config(), 4);
    m.conditioner().init_random(8, 0.2);
    const auto x = patches(1, 16, 5);
    const std::vector<int> ts{500};
    const auto a = m.predict_noise(x, ts, std::vector<Modality>{Modality::PRGB});
    const auto b = m.predict_noise(x, ts, std::vector<Modality>{Modality::SAR});
    double diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) diff += std::fabs(a[i] - b[i]);
    CHECK(diff > 1e-3);
}

TEST_CASE("construction is deterministic") {
    Denoiser<float> a(tiny_config(), 11), b(tiny_config(), 11), c(tiny_config(), 12);
    CHECK(frozen_hashes(a) == frozen_hashes(b));
    CHECK(frozen_hashes(a) != frozen_hashes(c));
    const auto x = patches(1, 16, 1);
    const std::vector<int> ts{42};
    const std::vector<Modality> ms{Modality::PCA};
    const auto ya = a.predict_noise(x, ts, ms), yb = b.predict_noise(x, ts, ms);
    CHECK(std::equal(ya.values().begin(), ya.values().end(), yb.values().begin()));
}

TEST_CASE("parameter partition") {
    Denoiser<float> m(tiny_config(), 1);
    const auto part = partition_parameters(m);
    CHECK_FALSE(part.trainable.empty());
    std::set<std::string> frozen(part.frozen.begin(), part.frozen.end());
    for (const auto& name : part.trainable) CHECK(frozen.count(name) == 0);
    CHECK(part.frozen.size() + part.trainable.size() == m.backbone().size() + m.conditioner().parameters().size());
    std::size_t trainable = 0, total = 0;
    for (const auto& p : m.backbone()) total += p.value.size();
    for (const auto& p : m.conditioner().parameters()) {
        trainable += p.value.size();
        total += p.value.size();
    }
    CHECK(part.ratio() == doctest::Approx(static_cast<double>(trainable) / total));
}

TEST_CASE("reference configuration trainable ratio") {
    Denoiser<float> m(DenoiserConfig::reference(), 1);
    const auto part = partition_parameters(m);
    CHECK(part.ratio() >= 0.02);
    CHECK(part.ratio() <= 0.08);
}

TEST_CASE("feature taps") {
    Denoiser<float> m(tiny_config(), 2);
    const auto sched = make_linear_schedule();
    CHECK(m.tap_count() == 4);
    CHECK(m.tap_info(0).resolution == 8);
    CHECK(m.tap_info(3).resolution == 16);
    const auto x = patches(2, 16, 3);
    for (int layer = 0; layer < m.tap_count(); ++layer) {
        const auto f = extract_features(m, x, 0, Modality::PCA, layer, sched, NoisePolicy{});
        CHECK(f.values.shape() == std::vector<int>{2, m.tap_info(layer).channels, 16, 16});
    }
    CHECK_THROWS_AS(extract_features(m, x, 0, Modality::PCA, 4, sched, NoisePolicy{}), std::out_of_range);

    // t = 0 skips noising, so the noise policy cannot matter.
    const auto a = extract_features(m, x, 0, Modality::PCA, 1, sched, NoisePolicy{NoisePolicy::Mode::Fresh, 1}, 0);
    const auto b = extract_features(m, x, 0, Modality::PCA, 1, sched, NoisePolicy{NoisePolicy::Mode::Fresh, 2}, 7);
    CHECK(std::equal(a.values.values().begin(), a.values.values().end(), b.values.values().begin()));

    // Fixed noise ignores the draw index; fresh noise does not.
    const NoisePolicy fixed{NoisePolicy::Mode::Fixed, 5}, fresh{NoisePolicy::Mode::Fresh, 5};
    const auto f1 = extract_features(m, x, 300, Modality::PCA, 1, sched, fixed, 0);
    const auto f2 = extract_features(m, x, 300, Modality::PCA, 1, sched, fixed, 9);
    const auto f3 = extract_features(m, x, 300, Modality::PCA, 1, sched, fresh, 9);
    CHECK(std::equal(f1.values.values().begin(), f1.values.values().end(), f2.values.values().begin()));
    CHECK_FALSE(std::equal(f1.values.values().begin(), f1.values.values().end(), f3.values.values().begin()));

    const auto before = frozen_hashes(m);
    CHECK(frozen_hashes(m) == before);
}

TEST_CASE("bilinear resize") {
    Tensor<double> x({1, 1, 2, 2}, std::vector<double>{0, 1, 2, 3});
    const auto y = resize_bilinear(x, 4, 4);
    // Half-pixel centres: output 0 and 3 clamp to the corners.
    CHECK(y.at(0, 0, 0, 0) == doctest::Approx(0.0));
    CHECK(y.at(0, 0, 3, 3) == doctest::Approx(3.0));
    CHECK(y.at(0, 0, 0, 1) == doctest::Approx(0.25));
    CHECK(y.at(0, 0, 1, 1) == doctest::Approx(0.75));
    const auto same = resize_bilinear(x, 2, 2);
    for (int i = 0; i < 4; ++i) CHECK(same[i] == x[i]);
}

TEST_CASE("sampling shape, range, determinism") {
    Denoiser<float> m(tiny_config(), 3);
    const auto sched = make_linear_schedule();
    const auto a = sample_patches(m, Modality::PCA, 4, sched, 7, 10);
    const auto b = sample_patches(m, Modality::PCA, 4, sched, 7, 10);
    CHECK(a.shape() == std::vector<int>{4, 3, 16, 16});
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i] >= -1.0f);
        CHECK(a[i] <= 1.0f);
        CHECK(a[i] == b[i]);
    }
    CHECK_THROWS_AS(sample_patches(m, Modality::PCA, 0, sched, 7, 10), std::invalid_argument);
}

TEST_CASE("checkpoint round trip is byte identical") {
    Denoiser<float> m(tiny_config(), 6);
    m.conditioner().init_random(2, 0.1);
    m.provenance()["seed"] = "6";
    const auto path = temp_path("rt.udck");
    save_denoiser(m, path);
    const auto loaded = load_denoiser(path);
    CHECK(loaded.provenance().at("seed") == "6");
    const auto path2 = temp_path("rt2.udck");
    save_denoiser(loaded, path2);
    CHECK(encode_checkpoint(read_checkpoint(path)) == encode_checkpoint(read_checkpoint(path2)));
    const auto x = patches(1, 16, 3);
    const std::vector<int> ts{10};
    const std::vector<Modality> ms{Modality::SAR};
    const auto ya = m.predict_noise(x, ts, ms), yb = loaded.predict_noise(x, ts, ms);
    CHECK(std::equal(ya.values().begin(), ya.values().end(), yb.values().begin()));
    std::filesystem::remove(path);
    std::filesystem::remove(path2);
}

TEST_CASE("identity survives serialization") {
    Denoiser<float> m(tiny_config(), 6);
    const auto path = temp_path("id.udck");
    save_denoiser(m, path);
    const auto loaded = load_denoiser(path);
    const auto sched = make_linear_schedule();
    for (int site = 0; site < static_cast<int>(loaded.conditioner().sites().size()); ++site) {
        const auto p = loaded.conditioner().film_params(77, Modality::PCA, site, sched);
        for (float v : p.gamma) CHECK(v == 1.0f);
        for (float v : p.beta) CHECK(v == 0.0f);
    }
    std::filesystem::remove(path);
}

TEST_CASE("corrupt checkpoints are rejected with offsets") {
    Denoiser<float> m(tiny_config(), 6);
    auto bytes = encode_checkpoint(m.to_checkpoint());
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad_magic), FormatError);
    auto truncated = bytes;
    truncated.resize(bytes.size() - 10);
    try {
        decode_checkpoint(truncated);
        FAIL("truncated checkpoint accepted");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("at byte") != std::string::npos);
    }

    auto ckpt = m.to_checkpoint();
    ckpt.tensors.pop_back();
    CHECK_THROWS(Denoiser<float>::from_checkpoint(ckpt));
    ckpt = m.to_checkpoint();
    ckpt.tensors[0].shape[0] += 1;
    ckpt.tensors[0].values.resize(ckpt.tensors[0].values.size() * 2);
    CHECK_THROWS(Denoiser<float>::from_checkpoint(ckpt));
}

TEST_CASE("float and double models agree") {
    Denoiser<float> m(tiny_config(), 9);
    m.conditioner().init_random(1, 0.1);
    const auto md = m.cast<double>();
    const auto x = patches(1, 16, 4);
    const std::vector<int> ts{600};
    const std::vector<Modality> ms{Modality::PRGB};
    const auto yf = m.predict_noise(x, ts, ms);
    const auto yd = md.predict_noise(x.cast<double>(), ts, ms);
    for (std::size_t i = 0; i < yf.size(); ++i) CHECK(std::fabs(yf[i] - yd[i]) < 1e-3);
}
