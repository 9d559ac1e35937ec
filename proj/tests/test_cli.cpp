// Drives the unidiff executable end to end on a small scene.
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "unidiff/dataio.hpp"

namespace fs = std::filesystem;
using namespace unidiff;

namespace {

struct Run {
    int code = -1;
    std::string out;  // stdout and stderr
};

Run run(const fs::path& root, const std::string& args) {
    const std::string cmd = "cd '" + root.string() + "' && '" UNIDIFF_CLI "' " + args + " 2>&1";
    Run r;
    FILE* p = popen(cmd.c_str(), "r");
    REQUIRE(p != nullptr);
    std::array<char, 4096> buf{};
    while (std::fgets(buf.data(), buf.size(), p)) r.out += buf.data();
    const int status = pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

// Value on the report line that starts with `name`, or -1.
double metric(const std::string& report, const std::string& name) {
    std::istringstream in(report);
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string key;
        double v = 0;
        if (ls >> key >> v && key == name) return v;
    }
    return -1;
}

std::string read_all(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

}  // namespace

TEST_CASE("pipeline: synth, adapt, train-head, evaluate") {
    const fs::path root = fresh_dir("unidiff_cli_pipeline");
    const std::string small = "--synth.height 64 --synth.width 64 --synth.train_fraction 0.009 --synth.min_train 4 --seed 3";

    Run r = run(root, "synth --out scene/ " + small);
    REQUIRE_MESSAGE(r.code == 0, r.out);
    CHECK(fs::exists(root / "scene" / "scene.json"));

    // Missing --scene: usage error, no checkpoint written.
    r = run(root, "adapt --steps 2");
    CHECK(r.code == 1);
    CHECK(r.out.find("--scene") != std::string::npos);
    CHECK(r.out.find("Usage") != std::string::npos);
    CHECK(!fs::exists(root / "ckpt"));

    r = run(root, "adapt --scene scene/ --steps 4 --batch 2 -q");
    REQUIRE_MESSAGE(r.code == 0, r.out);
    CHECK(fs::exists(root / "ckpt" / "model.udck"));
    const std::string loss = read_all(root / "reports" / "adapt_loss.csv");
    CHECK(std::count(loss.begin(), loss.end(), '\n') == 5);

    r = run(root, "train-head --scene scene/ --epochs 3 --set features.stride=16 -q");
    REQUIRE_MESSAGE(r.code == 0, r.out);
    CHECK(fs::exists(root / "ckpt" / "head.udck"));

    r = run(root, "evaluate --scene scene/ --set features.stride=16 -q");
    REQUIRE_MESSAGE(r.code == 0, r.out);
    CHECK(r.out.find("OA") != std::string::npos);
    CHECK(fs::exists(root / "reports" / "metrics.csv"));
    CHECK(fs::exists(root / "plots" / "classmap.ppm"));

    r = run(root, "describe ckpt/model.udck");
    REQUIRE(r.code == 0);
    CHECK(r.out.find("trainable ratio") != std::string::npos);
    CHECK(r.out.find("prov.adapt.steps = 4") != std::string::npos);

    const auto manifest = nlohmann::json::parse(read_all(root / "manifest.json"));
    CHECK(manifest["format"] == "unidiff-manifest");
    for (const char* c : {"synth", "adapt", "train-head", "evaluate"}) CHECK(manifest["commands"].contains(c));
    CHECK(manifest["commands"]["adapt"]["config"]["adapt.steps"] == "4");
}

TEST_CASE("evaluate scores a hand-made perfect class map at 100") {
    const fs::path root = fresh_dir("unidiff_cli_eval");
    // 3x4 map; test labels cover five pixels.
    RasterStack map(3, 4, 1, 1.0f);
    map.at(0, 0, 1) = 2;
    map.at(0, 1, 2) = 3;
    map.at(0, 2, 3) = 2;
    write_raster(map, root / "pred.urds");
    std::ofstream(root / "labels.csv") << "row,col,class_id\n0,0,1\n0,1,2\n1,2,3\n2,3,2\n2,0,1\n";

    Run r = run(root, "evaluate --pred pred.urds --labels labels.csv --classes 3 --names a,b,c");
    REQUIRE_MESSAGE(r.code == 0, r.out);
    CHECK(metric(r.out, "OA") == 100.0);
    CHECK(metric(r.out, "Kappa") == 100.0);
    CHECK(metric(r.out, "mIoU") == 100.0);

    // One pixel wrong now.
    map.at(0, 2, 0) = 3;
    write_raster(map, root / "pred.urds");
    r = run(root, "evaluate --pred pred.urds --labels labels.csv --classes 3");
    REQUIRE(r.code == 0);
    // Confusion rows [1 0 1; 0 2 0; 0 0 1]: po 0.8, pe 8/25.
    CHECK(metric(r.out, "OA") == 80.0);
    CHECK(metric(r.out, "Kappa") == doctest::Approx(100.0 * (0.8 - 0.32) / 0.68).epsilon(1e-4));

    // Labels outside the map are a usage-level data error, not a crash.
    std::ofstream(root / "far.csv") << "row,col,class_id\n9,9,1\n";
    r = run(root, "evaluate --pred pred.urds --labels far.csv --classes 3");
    CHECK(r.code != 0);
    CHECK(r.code != 139);
}

TEST_CASE("corrupt and unknown files") {
    const fs::path root = fresh_dir("unidiff_cli_describe");
    RasterStack r(2, 2, 1, 0.5f);
    write_raster(r, root / "ok.urds");
    const std::string bytes = read_all(root / "ok.urds");
    std::ofstream(root / "cut.urds", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
    std::ofstream(root / "junk.bin", std::ios::binary) << "NOPE....";

    Run ok = run(root, "describe ok.urds");
    CHECK(ok.code == 0);
    CHECK(ok.out.find("2x2x1") != std::string::npos);

    Run cut = run(root, "describe cut.urds");
    CHECK(cut.code == 2);
    CHECK(cut.out.find("at byte") != std::string::npos);

    Run junk = run(root, "describe junk.bin");
    CHECK(junk.code == 2);

    Run missing = run(root, "describe nothing.udck");
    CHECK(missing.code == 1);

    Run badcfg = run(root, "synth --set synth.nope=1");
    CHECK(badcfg.code == 1);
    CHECK(!fs::exists(root / "scene"));

    Run badsynth = run(root, "synth --synth.train_fraction 0.5");
    CHECK(badsynth.code == 1);

    Run badflag = run(root, "synth --no-such-flag");
    CHECK(badflag.code == 1);
}
