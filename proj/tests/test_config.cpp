#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "unidiff/config.hpp"
#include "unidiff/errors.hpp"

using namespace unidiff;

namespace {

std::filesystem::path write_temp(const std::string& name, const std::string& body) {
    const auto dir = std::filesystem::temp_directory_path() / "unidiff_test_config";
    std::filesystem::create_directories(dir);
    const auto p = dir / name;
    std::ofstream(p) << body;
    return p;
}

}  // namespace

TEST_CASE("defaults build valid module configs") {
    const RunConfig c;
    CHECK_NOTHROW(c.validate());
    CHECK(c.adaptation().steps == 2000);
    CHECK(c.adaptation().batch_size == 32);
    CHECK(c.adaptation().learning_rate == 0.003);
    CHECK(c.head().hidden == std::vector<int>{256, 128});
    CHECK(c.head().max_epochs == 10);
    CHECK(c.schedule().steps == 1000);
    CHECK(c.model_config().base_width == DenoiserConfig::compact().base_width);

    // The tap count used by validate() matches a real network.
    const Denoiser<float> m(c.model_config(), 0);
    CHECK(c.features(m.tap_count()).layer == m.tap_count() - 1);
    const DenoiserConfig ref = DenoiserConfig::reference();
    const Denoiser<float> big(ref, 0);
    CHECK(big.tap_count() == ref.levels() * (ref.num_res_blocks + 1));
}

TEST_CASE("INI files and overrides") {
    const auto p = write_temp("ok.ini",
                              "; comment\n[adapt]\nsteps = 200\nbatch=8\npolicy = pca-only\n\n[head]\nhidden = 64\n"
                              "balanced = yes\n[features]\nlayer = 2\n");
    RunConfig c;
    c.load_file(p);
    CHECK(c.adaptation().steps == 200);
    CHECK(c.adaptation().policy.modalities == std::vector<Modality>{Modality::PCA});
    CHECK(c.head().hidden == std::vector<int>{64});
    CHECK(c.head().balanced_sampling);
    CHECK(c.features(6).layer == 2);
    CHECK(!c.is_default("adapt.steps"));
    CHECK(c.is_default("adapt.lr"));
    // Flags come after the file and win.
    c.set("adapt.steps", "50");
    CHECK(c.adaptation().steps == 50);

    RunConfig back;
    back.load_file(write_temp("round.ini", c.to_ini()));
    CHECK(back.values() == c.values());
}

TEST_CASE("configuration errors") {
    RunConfig c;
    CHECK_THROWS_AS(c.load_file(write_temp("unknown.ini", "[adapt]\nstep = 3\n")), ConfigError);
    CHECK_THROWS_AS(c.load_file(write_temp("section.ini", "[adaptation]\nsteps = 3\n")), ConfigError);
    CHECK_THROWS_AS(c.load_file(write_temp("top.ini", "steps = 3\n")), ConfigError);
    CHECK_THROWS_AS(c.load_file(write_temp("type.ini", "[adapt]\nsteps = many\n")), ConfigError);
    CHECK_THROWS_AS(c.load_file(write_temp("syntax.ini", "[adapt\nsteps = 3\n")), ConfigError);
    CHECK_THROWS_AS(c.load_file("/nonexistent/unidiff.ini"), ConfigError);
    CHECK_THROWS_AS(c.set("adapt.lr", "0.1x"), ConfigError);
    CHECK_THROWS_AS(c.set("nope.key", "1"), ConfigError);

    RunConfig bad;
    bad.set("adapt.steps", "-1");
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    RunConfig pol;
    pol.set("adapt.policy", "lidar");
    CHECK_THROWS_AS(pol.validate(), ConfigError);
    RunConfig layer;
    layer.set("features.layer", "6");
    CHECK_THROWS_AS(layer.validate(), ConfigError);
    RunConfig t;
    t.set("features.timestep", "1001");
    CHECK_THROWS_AS(t.validate(), ConfigError);
    RunConfig preset;
    preset.set("model.preset", "huge");
    CHECK_THROWS_AS(preset.validate(), ConfigError);
    RunConfig rgb;
    rgb.set("prepare.rgb_bands", "1,2");
    CHECK_THROWS_AS(rgb.validate(), ConfigError);
    RunConfig sched;
    sched.set("schedule.beta_end", "0.00001");
    CHECK_THROWS_AS(sched.validate(), ConfigError);
}
