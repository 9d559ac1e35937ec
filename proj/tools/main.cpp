#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "cli_support.hpp"
#include "unidiff/analysis.hpp"
#include "unidiff/errors.hpp"

using namespace unidiff;
using namespace unidiff::cli;

namespace {

// ---- option plumbing ----

struct Common {
    std::string config_file;
    std::string root;
    std::vector<std::string> sets;
    bool quiet = false;
    std::map<std::string, std::string> dotted;                 // --section.key values
    std::vector<std::pair<std::string, std::string>> aliases;  // (flag storage key, config key)
    std::map<std::string, std::string> alias_values;
};

void add_common(CLI::App* sc, Common& c, const std::vector<std::string>& sections) {
    sc->add_option("--config", c.config_file, "INI configuration file");
    sc->add_option("--root", c.root, "output root (default $UNIDIFF_ROOT or the working directory)");
    sc->add_option("--set", c.sets, "override as section.key=value (repeatable)");
    sc->add_flag("-q,--quiet", c.quiet, "no progress output");
    for (const auto& k : RunConfig::keys()) {
        const std::string section = k.name.substr(0, k.name.find('.'));
        if (std::find(sections.begin(), sections.end(), section) == sections.end()) continue;
        sc->add_option("--" + k.name, c.dotted[k.name], k.help + " [" + k.default_value + "]")->group("Configuration");
    }
}

void add_alias(CLI::App* sc, Common& c, const std::string& flag, const std::string& key) {
    const RunConfig::Key* k = RunConfig::find_key(key);
    sc->add_option("--" + flag, c.alias_values[flag], "same as --" + key + " (" + (k ? k->help : "") + ")");
    c.aliases.emplace_back(flag, key);
}

Context make_context(const std::string& command, const Common& c, const std::vector<std::string>& argv) {
    Context ctx;
    ctx.command = command;
    ctx.argv = argv;
    ctx.quiet = c.quiet;
    ctx.root = c.root.empty() ? default_root() : fs::path(c.root);
    if (!c.config_file.empty()) {
        if (!fs::is_regular_file(c.config_file)) throw UsageError("config file not found: " + c.config_file);
        ctx.config.load_file(c.config_file);
    }
    for (const auto& [key, value] : c.dotted) {
        if (!value.empty()) ctx.config.set(key, value);
    }
    for (const auto& s : c.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw UsageError("--set expects section.key=value, got '" + s + "'");
        ctx.config.set(s.substr(0, eq), s.substr(eq + 1));
    }
    for (const auto& [flag, key] : c.aliases) {
        const auto& v = c.alias_values.at(flag);
        if (!v.empty()) ctx.config.set(key, v);
    }
    ctx.config.validate();
    return ctx;
}

// ---- shared helpers ----

SceneBundle open_scene(const Context& ctx, const std::string& dir) {
    require_dir(dir, "scene directory");
    ctx.log("loading scene " + dir);
    SceneBundle scene = load_scene(dir);
    if (!scene.prepared()) throw UsageError("scene " + dir + " has no prepared representations; run prepare first");
    return scene;
}

fs::path or_default(const std::string& given, const fs::path& fallback) { return given.empty() ? fallback : fs::path(given); }

Denoiser<float> open_model(const Context& ctx, const fs::path& path) {
    require_file(path, "model checkpoint");
    ctx.log("loading model " + path.string());
    return load_denoiser(path);
}

// Same frozen backbone with the identity conditioner: the non-adapted model.
Denoiser<float> pretrained_of(const Denoiser<float>& model) {
    Denoiser<float> base = model;
    base.conditioner().init_identity(0);
    return base;
}

std::string modality_key(const std::vector<Modality>& mods) {
    std::string s;
    for (Modality m : mods) s += (s.empty() ? "" : "+") + std::string(modality_name(m));
    return s;
}

// Extraction settings; a head's recorded layer, timestep and modalities win
// over unset config keys.
FeatureSpec resolve_spec(const Context& ctx, const Denoiser<float>& model, const MlpHead* head) {
    FeatureSpec spec = ctx.config.features(model.tap_count());
    if (!head) return spec;
    const auto& p = head->provenance();
    auto pick = [&](const char* key, const char* prov) -> const std::string* {
        if (!ctx.config.is_default(key)) return nullptr;
        auto it = p.find(prov);
        return it == p.end() ? nullptr : &it->second;
    };
    if (const auto* v = pick("features.layer", "layer")) spec.layer = std::stoi(*v);
    if (const auto* v = pick("features.timestep", "timestep")) spec.timestep = std::stoi(*v);
    if (const auto* v = pick("features.modalities", "modalities")) spec.modalities = MixPolicy::parse(*v).modalities;
    if (const auto* v = pick("features.noise", "noise")) spec.noise.mode = *v == "fixed" ? NoisePolicy::Mode::Fixed : NoisePolicy::Mode::Fresh;
    if (const auto* v = pick("features.noise_seed", "noise_seed")) spec.noise.seed = std::stoull(*v);
    spec.normalize();
    return spec;
}

ExtractProgress extract_progress(const Context& ctx) {
    return [&ctx](Modality m, int done, int total) {
        if (done == total || done % 32 == 0) {
            ctx.log("features " + std::string(modality_name(m)) + " " + std::to_string(done) + "/" + std::to_string(total));
        }
    };
}

std::string spec_text(const FeatureSpec& s) {
    return "layer " + std::to_string(s.layer) + ", t " + std::to_string(s.timestep) + ", " + modality_key(s.modalities);
}

void write_samples_ppm(const Tensor<float>& x, const fs::path& path) {
    const int n = x.dim(0), s = x.dim(2);
    const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
    const int rows = (n + cols - 1) / cols;
    const int gap = 2;
    const int W = cols * s + (cols - 1) * gap, H = rows * s + (rows - 1) * gap;
    std::vector<unsigned char> img(static_cast<std::size_t>(W) * H * 3, 255);
    for (int i = 0; i < n; ++i) {
        const int oy = (i / cols) * (s + gap), ox = (i % cols) * (s + gap);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < s; ++y)
                for (int xx = 0; xx < s; ++xx) {
                    const double v = std::clamp((x.at(i, c, y, xx) + 1.0) * 127.5, 0.0, 255.0);
                    img[(static_cast<std::size_t>(oy + y) * W + ox + xx) * 3 + c] = static_cast<unsigned char>(std::lround(v));
                }
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "P6\n" << W << ' ' << H << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
}

std::vector<std::string> split_list(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

// ---- commands ----

struct SynthArgs {
    std::string out;
};

int run_synth(Context& ctx, const SynthArgs& a) {
    const fs::path out = or_default(a.out, ctx.scene_dir());
    Outputs outputs;
    const SynthOptions opts = ctx.config.synth();
    ctx.log("generating " + std::to_string(opts.height) + "x" + std::to_string(opts.width) + " scene, seed " +
            std::to_string(opts.seed));
    SceneBundle scene;
    try {
        scene = synth_scene(opts);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());  // option values out of range
    }
    prepare_representations(scene, ctx.config.prepare());
    outputs.dir(out);
    for (const char* f : {"hsi.urds", "sar.urds", "prgb.urds", "pca3.urds", "sar3.urds", "train_labels.csv", "test_labels.csv", "scene.json"}) {
        outputs.file(out / f);
    }
    save_scene(scene, out);
    update_manifest(ctx, {}, outputs.files());
    outputs.commit();
    std::cout << "scene " << out.string() << ": " << scene.height() << "x" << scene.width() << ", " << scene.hsi.channels
              << " bands, " << scene.class_names.size() << " classes, " << scene.train.entries.size() << " train / "
              << scene.test.entries.size() << " test labels\n";
    return 0;
}

struct PrepareArgs {
    std::string scene, hsi, sar, train, test, names, out;
    int classes = 0;
};

int run_prepare(Context& ctx, const PrepareArgs& a) {
    SceneBundle scene;
    std::map<std::string, std::string> inputs;
    std::vector<fs::path> in_paths;
    if (!a.scene.empty()) {
        require_dir(a.scene, "scene directory");
        scene = load_scene(a.scene);
        inputs["scene"] = a.scene;
        in_paths.push_back(a.scene);
    } else {
        require_file(a.hsi, "--hsi raster");
        require_file(a.sar, "--sar raster");
        require_file(a.train, "--train labels");
        require_file(a.test, "--test labels");
        if (a.classes < 2) throw UsageError("--classes must be at least 2");
        scene.hsi = read_raster(a.hsi);
        scene.sar = read_raster(a.sar);
        if (scene.sar.height != scene.hsi.height || scene.sar.width != scene.hsi.width) {
            throw UsageError("HSI and SAR rasters differ in size");
        }
        scene.train = read_labels(a.train, a.classes, "train", scene.height(), scene.width());
        scene.test = read_labels(a.test, a.classes, "test", scene.height(), scene.width());
        if (!a.names.empty()) {
            scene.class_names = split_list(a.names, ',');
            if (static_cast<int>(scene.class_names.size()) != a.classes) throw UsageError("--names must list exactly --classes names");
        } else {
            for (int k = 1; k <= a.classes; ++k) scene.class_names.push_back("class " + std::to_string(k));
        }
        scene.metadata["source"] = "prepared from " + a.hsi + ", " + a.sar;
        inputs = {{"hsi", a.hsi}, {"sar", a.sar}, {"train", a.train}, {"test", a.test}};
        in_paths = {a.hsi, a.sar, a.train, a.test};
    }
    const fs::path out = or_default(a.out, ctx.scene_dir());
    check_not_input(out, in_paths);
    Outputs outputs;
    ctx.log("building pRGB, PCA and Pauli representations");
    prepare_representations(scene, ctx.config.prepare());
    outputs.dir(out);
    for (const char* f : {"hsi.urds", "sar.urds", "prgb.urds", "pca3.urds", "sar3.urds", "train_labels.csv", "test_labels.csv", "scene.json"}) {
        outputs.file(out / f);
    }
    save_scene(scene, out);
    update_manifest(ctx, inputs, outputs.files());
    outputs.commit();
    std::cout << "prepared scene " << out.string() << " (" << scene.metadata["prgb_bands"] << ")\n";
    return 0;
}

struct AdaptArgs {
    std::string scene, init, out, loss;
};

int run_adapt(Context& ctx, const AdaptArgs& a) {
    const SceneBundle scene = open_scene(ctx, a.scene);
    const NoiseSchedule sched = ctx.config.schedule();
    Denoiser<float> model = a.init.empty() ? Denoiser<float>(ctx.config.model_config(), ctx.config.get_int("model.seed"))
                                           : open_model(ctx, a.init);
    const AdaptationConfig cfg = ctx.config.adaptation();
    const fs::path out = or_default(a.out, ctx.ckpt_dir() / "model.udck");
    const fs::path loss_csv = or_default(a.loss, ctx.reports_dir() / "adapt_loss.csv");
    check_not_input(out, {a.init});
    Outputs outputs;
    outputs.file(out);
    outputs.file(loss_csv);

    const auto part = partition_parameters(model);
    ctx.log("adapting " + std::to_string(part.trainable_count) + " of " +
            std::to_string(part.trainable_count + part.frozen_count) + " parameters, policy " + cfg.policy.name() + ", " +
            std::to_string(cfg.steps) + " steps x " + std::to_string(cfg.batch_size));
    const int every = std::max(1, cfg.steps / 20);
    const LossTrace trace = adapt(model, scene, cfg, sched, [&](int step, double loss) {
        if (step % every == 0 || step == cfg.steps) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "step %d loss %.5f", step, loss);
            ctx.log(buf);
        }
    });

    auto& prov = model.provenance();
    prov["model.preset"] = ctx.config.raw("model.preset");
    if (a.init.empty()) prov["model.seed"] = ctx.config.raw("model.seed");
    else prov["init"] = a.init;
    prov["adapt.steps"] = std::to_string(cfg.steps);
    prov["adapt.batch"] = std::to_string(cfg.batch_size);
    prov["adapt.lr"] = ctx.config.raw("adapt.lr");
    prov["adapt.policy"] = cfg.policy.name();
    prov["adapt.seed"] = std::to_string(cfg.seed);
    save_denoiser(model, out);
    write_text(loss_csv, trace.to_csv());
    update_manifest(ctx, {{"scene", a.scene}, {"init", a.init}}, outputs.files());
    outputs.commit();
    if (trace.size() >= 2) {
        const std::size_t w = std::min<std::size_t>(50, trace.size() / 2);
        std::printf("loss: first %zu steps %.5f, last %zu steps %.5f\n", w, trace.mean(0, w), w,
                    trace.mean(trace.size() - w, trace.size()));
    }
    std::cout << "model written to " << out.string() << "\n";
    return 0;
}

struct ModelInputs {
    std::string scene, model;
    bool pretrained = false;
};

void add_model_inputs(CLI::App* sc, ModelInputs& m, bool scene_required) {
    auto* o = sc->add_option("--scene", m.scene, "scene directory");
    if (scene_required) o->required();
    sc->add_option("--model", m.model, "model checkpoint (default <root>/ckpt/model.udck)");
    sc->add_flag("--pretrained", m.pretrained, "use the model with its conditioner reset to identity");
}

Denoiser<float> model_for(const Context& ctx, const ModelInputs& m) {
    Denoiser<float> model = open_model(ctx, or_default(m.model, ctx.ckpt_dir() / "model.udck"));
    return m.pretrained ? pretrained_of(model) : model;
}

struct ExtractArgs {
    ModelInputs in;
    std::string out;
};

int run_extract(Context& ctx, const ExtractArgs& a) {
    const SceneBundle scene = open_scene(ctx, a.in.scene);
    const Denoiser<float> model = model_for(ctx, a.in);
    const FeatureSpec spec = ctx.config.features(model.tap_count());
    const fs::path dir = or_default(a.out, ctx.features_dir());
    Outputs outputs;
    outputs.dir(dir);
    outputs.file(dir / "train.udck");
    outputs.file(dir / "test.udck");
    ctx.log("extracting " + spec_text(spec));
    const DenseFeatures dense = compute_dense_features(scene, model, spec, ctx.config.schedule(), extract_progress(ctx));
    const PixelFeatureSet train = gather_features(dense, scene.train);
    const PixelFeatureSet test = gather_features(dense, scene.test);
    write_checkpoint(features_to_checkpoint(train), dir / "train.udck");
    write_checkpoint(features_to_checkpoint(test), dir / "test.udck");
    update_manifest(ctx, {{"scene", a.in.scene}, {"model", or_default(a.in.model, ctx.ckpt_dir() / "model.udck").string()}},
                    outputs.files());
    outputs.commit();
    std::cout << "features D=" << train.dim << ": " << train.size() << " train rows, " << test.size() << " test rows in "
              << dir.string() << "\n";
    return 0;
}

struct TrainHeadArgs {
    ModelInputs in;
    std::string features, out, log;
};

int run_train_head(Context& ctx, const TrainHeadArgs& a) {
    PixelFeatureSet train;
    std::map<std::string, std::string> inputs;
    Outputs outputs;
    const fs::path out = or_default(a.out, ctx.ckpt_dir() / "head.udck");
    FeatureSpec spec;
    if (!a.features.empty()) {
        require_file(a.features, "feature file");
        train = features_from_checkpoint(read_checkpoint(a.features));
        inputs["features"] = a.features;
        check_not_input(out, {a.features});
        spec.layer = train.layer;
        spec.timestep = train.timestep;
        spec.modalities = train.modalities;
    } else {
        if (a.in.scene.empty()) throw UsageError("train-head needs --scene (or --features)");
        const SceneBundle scene = open_scene(ctx, a.in.scene);
        const Denoiser<float> model = model_for(ctx, a.in);
        spec = ctx.config.features(model.tap_count());
        ctx.log("extracting " + spec_text(spec));
        train = build_feature_dataset(scene, model, spec, ctx.config.schedule(), scene.train);
        inputs = {{"scene", a.in.scene}, {"model", or_default(a.in.model, ctx.ckpt_dir() / "model.udck").string()}};
        const fs::path fpath = outputs.file(ctx.features_dir() / "train.udck");
        write_checkpoint(features_to_checkpoint(train), fpath);
    }
    const fs::path log_csv = or_default(a.log, ctx.reports_dir() / "head_log.csv");
    outputs.file(out);
    outputs.file(log_csv);
    const ClassifierConfig cfg = ctx.config.head();
    ctx.log("training head on " + std::to_string(train.size()) + " rows, D=" + std::to_string(train.dim));
    TrainedHead th = train_classifier(train, cfg);
    th.head.provenance()["noise"] = ctx.config.raw("features.noise");
    th.head.provenance()["noise_seed"] = ctx.config.raw("features.noise_seed");
    th.head.provenance()["head.seed"] = std::to_string(cfg.seed);
    if (a.in.pretrained) th.head.provenance()["model_variant"] = "pretrained";
    write_checkpoint(th.head.to_checkpoint(), out);
    write_text(log_csv, th.log.to_csv());
    update_manifest(ctx, inputs, outputs.files());
    outputs.commit();
    if (!th.log.epochs.empty()) {
        const auto& best = th.log.epochs[static_cast<std::size_t>(th.log.best_epoch - 1)];
        std::printf("best epoch %d of %zu: val loss %.4f, val accuracy %.2f%%\n", th.log.best_epoch, th.log.epochs.size(),
                    best.val_loss, 100.0 * best.val_accuracy);
    }
    std::cout << "head written to " << out.string() << "\n";
    return 0;
}

struct PredictArgs {
    ModelInputs in;
    std::string head, out, ppm, probs;
};

struct PredictionFiles {
    fs::path map, ppm, probs;
};

DensePrediction predict_to_files(Context& ctx, const PredictArgs& a, const SceneBundle& scene, Outputs& outputs,
                                 const PredictionFiles& files) {
    const Denoiser<float> model = model_for(ctx, a.in);
    const fs::path head_path = or_default(a.head, ctx.ckpt_dir() / "head.udck");
    require_file(head_path, "head checkpoint");
    const MlpHead head = MlpHead::from_checkpoint(read_checkpoint(head_path));
    const FeatureSpec spec = resolve_spec(ctx, model, &head);
    outputs.file(files.map);
    outputs.file(files.ppm);
    if (!files.probs.empty()) outputs.file(files.probs);
    ctx.log("dense prediction, " + spec_text(spec));
    DensePrediction pred = predict_dense(scene, model, head, spec, ctx.config.schedule(), extract_progress(ctx));
    write_raster(class_map_raster(pred), files.map);
    write_class_map_ppm(pred, files.ppm);
    if (!files.probs.empty()) {
        RasterStack p(pred.height, pred.width, pred.num_classes);
        std::copy(pred.probs.values().begin(), pred.probs.values().end(), p.values.begin());
        write_raster(p, files.probs);
    }
    return pred;
}

int run_predict(Context& ctx, const PredictArgs& a) {
    const SceneBundle scene = open_scene(ctx, a.in.scene);
    Outputs outputs;
    PredictionFiles files{or_default(a.out, ctx.reports_dir() / "classmap.urds"), or_default(a.ppm, ctx.plots_dir() / "classmap.ppm"),
                          a.probs.empty() ? fs::path() : fs::path(a.probs)};
    const DensePrediction pred = predict_to_files(ctx, a, scene, outputs, files);
    update_manifest(ctx,
                    {{"scene", a.in.scene},
                     {"model", or_default(a.in.model, ctx.ckpt_dir() / "model.udck").string()},
                     {"head", or_default(a.head, ctx.ckpt_dir() / "head.udck").string()}},
                    outputs.files());
    outputs.commit();
    std::cout << "class map " << files.map.string() << " (" << pred.height << "x" << pred.width << ", " << pred.num_classes
              << " classes)\n";
    return 0;
}

struct EvaluateArgs {
    PredictArgs predict;
    std::string pred, labels, split = "test", names, report;
    int classes = 0;
};

int run_evaluate(Context& ctx, const EvaluateArgs& a) {
    Outputs outputs;
    std::map<std::string, std::string> inputs;
    std::vector<int> class_map;
    int width = 0, height = 0;
    SparseLabelSet labels;
    std::vector<std::string> names;
    std::optional<SceneBundle> scene;
    if (!a.predict.in.scene.empty()) {
        scene = open_scene(ctx, a.predict.in.scene);
        names = scene->class_names;
        inputs["scene"] = a.predict.in.scene;
    }
    if (!a.pred.empty()) {
        require_file(a.pred, "prediction raster");
        const RasterStack r = read_raster(a.pred);
        if (r.channels != 1) throw UsageError("prediction raster must have one channel, found " + std::to_string(r.channels));
        height = r.height;
        width = r.width;
        for (float v : r.values) {
            const int c = static_cast<int>(v);
            if (static_cast<float>(c) != v) throw std::runtime_error("prediction raster holds a non-integer class id");
            class_map.push_back(c);
        }
        inputs["pred"] = a.pred;
    } else {
        if (!scene) throw UsageError("evaluate needs --pred or --scene (with a model and head)");
        PredictionFiles files{ctx.reports_dir() / "classmap.urds", ctx.plots_dir() / "classmap.ppm", {}};
        const DensePrediction pred = predict_to_files(ctx, a.predict, *scene, outputs, files);
        class_map = pred.class_map;
        width = pred.width;
        height = pred.height;
        inputs["model"] = or_default(a.predict.in.model, ctx.ckpt_dir() / "model.udck").string();
        inputs["head"] = or_default(a.predict.head, ctx.ckpt_dir() / "head.udck").string();
    }
    if (!a.labels.empty()) {
        require_file(a.labels, "label file");
        const int k = a.classes ? a.classes : (scene ? static_cast<int>(scene->class_names.size()) : 0);
        if (k < 2) throw UsageError("--classes is required when labels come without a scene");
        labels = read_labels(a.labels, k, a.split, height, width);
        inputs["labels"] = a.labels;
    } else {
        if (!scene) throw UsageError("evaluate needs --labels or --scene");
        if (a.split != "test" && a.split != "train") throw UsageError("--split must be test or train");
        labels = a.split == "test" ? scene->test : scene->train;
        if (scene->height() != height || scene->width() != width) throw UsageError("prediction and scene differ in size");
    }
    if (!a.names.empty()) names = split_list(a.names, ',');
    if (names.size() != static_cast<std::size_t>(labels.num_classes)) {
        names.clear();
        for (int k = 1; k <= labels.num_classes; ++k) names.push_back("class " + std::to_string(k));
    }
    for (int c : class_map) {
        if (c < 1 || c > labels.num_classes) throw std::runtime_error("prediction holds class id " + std::to_string(c) + " outside [1, " + std::to_string(labels.num_classes) + "]");
    }
    const ConfusionMatrix cm = evaluate_split(class_map, width, labels);
    const fs::path dir = or_default(a.report, ctx.reports_dir());
    const fs::path csv = outputs.file(dir / "metrics.csv");
    const fs::path txt = outputs.file(dir / "metrics.txt");
    const fs::path conf = outputs.file(dir / "confusion.csv");
    write_text(csv, report_csv(cm, names));
    const std::string text = report_text(cm, names, "evaluation on " + labels.split + " labels");
    write_text(txt, text);
    write_text(conf, confusion_csv(cm));
    update_manifest(ctx, inputs, outputs.files());
    outputs.commit();
    std::cout << text;
    return 0;
}

struct AblateArgs {
    ModelInputs in;
    std::string kind = "modality", init;
};

int run_ablate(Context& ctx, const AblateArgs& a) {
    const SceneBundle scene = open_scene(ctx, a.in.scene);
    const NoiseSchedule sched = ctx.config.schedule();
    const int seeds = static_cast<int>(ctx.config.get_int("sweep.seeds"));
    const ClassifierConfig head = ctx.config.head();
    Outputs outputs;
    std::map<std::string, std::string> inputs{{"scene", a.in.scene}};
    std::vector<SweepTable> tables;
    const auto progress = [&ctx](const std::string& m) { ctx.log(m); };

    if (a.kind == "modality") {
        const Denoiser<float> model = model_for(ctx, a.in);
        inputs["model"] = or_default(a.in.model, ctx.ckpt_dir() / "model.udck").string();
        const FeatureSpec spec = ctx.config.features(model.tap_count());
        for (int s = 0; s < seeds; ++s) {
            ClassifierConfig h = head;
            h.seed = head.seed + static_cast<std::uint64_t>(s);
            tables.push_back(modality_combo_ablation(scene, model, spec, sched, h, progress));
            tables.back().metadata["seed_index"] = std::to_string(s);
        }
    } else if (a.kind == "anchoring") {
        Denoiser<float> base = a.init.empty() ? Denoiser<float>() : open_model(ctx, a.init);
        if (!a.init.empty()) inputs["init"] = a.init;
        for (int s = 0; s < seeds; ++s) {
            if (a.init.empty()) base = Denoiser<float>(ctx.config.model_config(), ctx.config.get_int("model.seed") + s);
            const Denoiser<float> start = pretrained_of(base);
            AdaptationConfig ac = ctx.config.adaptation();
            ac.seed += static_cast<std::uint64_t>(s);
            ClassifierConfig h = head;
            h.seed = head.seed + static_cast<std::uint64_t>(s);
            tables.push_back(anchoring_ablation(scene, start, ac, ctx.config.features(start.tap_count()), sched, h, progress));
            tables.back().metadata["seed_index"] = std::to_string(s);
            tables.back().metadata["model_seed"] = a.init.empty() ? std::to_string(ctx.config.get_int("model.seed") + s) : a.init;
        }
    } else {
        throw UsageError("--kind must be modality or anchoring");
    }

    const std::string stem = a.kind + "_ablation";
    auto reg = [&](const std::vector<fs::path>& ps) {
        for (const auto& p : ps) outputs.file(p);
    };
    if (tables.size() == 1) {
        reg({ctx.reports_dir() / (stem + ".csv"), ctx.reports_dir() / (stem + ".json")});
        write_sweep(tables[0], ctx.reports_dir(), stem);
    } else {
        for (std::size_t s = 0; s < tables.size(); ++s) {
            const std::string st = stem + "_s" + std::to_string(s);
            reg({ctx.reports_dir() / (st + ".csv"), ctx.reports_dir() / (st + ".json")});
            write_sweep(tables[s], ctx.reports_dir(), st);
        }
        std::ostringstream sum;
        sum << "config,OA_mean,OA_min,OA_max,mF1_mean,mIoU_mean\n";
        sum.setf(std::ios::fixed);
        sum.precision(2);
        for (std::size_t r = 0; r < tables[0].records.size(); ++r) {
            std::vector<double> oa, f1, iou;
            for (const auto& t : tables) {
                oa.push_back(100 * t.records[r].scores.oa);
                f1.push_back(100 * t.records[r].scores.mf1);
                iou.push_back(100 * t.records[r].scores.miou);
            }
            const auto so = summarize(oa);
            sum << tables[0].records[r].key << ',' << so.mean << ',' << so.min << ',' << so.max << ',' << summarize(f1).mean
                << ',' << summarize(iou).mean << '\n';
        }
        const fs::path p = outputs.file(ctx.reports_dir() / (stem + "_summary.csv"));
        write_text(p, sum.str());
    }
    update_manifest(ctx, inputs, outputs.files());
    outputs.commit();
    std::cout << tables[0].to_csv();
    if (tables.size() > 1) std::cout << "(" << tables.size() << " seeds; summary in " << (ctx.reports_dir() / (stem + "_summary.csv")).string() << ")\n";
    return 0;
}

struct SweepArgs {
    ModelInputs in;
    std::string subsets = "prgb+pca+sar";
};

int run_sweep(Context& ctx, const SweepArgs& a) {
    const SceneBundle scene = open_scene(ctx, a.in.scene);
    const Denoiser<float> adapted = model_for(ctx, ModelInputs{a.in.scene, a.in.model, false});
    const Denoiser<float> pre = pretrained_of(adapted);
    std::vector<SweepVariant> variants;
    for (const auto& s : split_list(a.subsets, ';')) {
        const auto mods = MixPolicy::parse(s).modalities;
        variants.push_back({"adapted " + modality_key(mods), &adapted, mods});
        variants.push_back({"pretrained " + modality_key(mods), &pre, mods});
    }
    if (variants.empty()) throw UsageError("--subsets lists no modality subset");
    const FeatureSpec spec = ctx.config.features(adapted.tap_count());
    Outputs outputs;
    outputs.file(ctx.reports_dir() / "timestep_sweep.csv");
    outputs.file(ctx.reports_dir() / "timestep_sweep.json");
    const fs::path svg = outputs.file(ctx.plots_dir() / "timestep_sweep.svg");
    const SweepTable t = timestep_sweep(scene, variants, ctx.config.get_ints("sweep.timesteps"), spec, ctx.config.schedule(),
                                        ctx.config.head(), [&ctx](const std::string& m) { ctx.log(m); });
    write_sweep(t, ctx.reports_dir(), "timestep_sweep");
    write_text(svg, timestep_plot_svg(t));
    update_manifest(ctx, {{"scene", a.in.scene}, {"model", or_default(a.in.model, ctx.ckpt_dir() / "model.udck").string()}},
                    outputs.files());
    outputs.commit();
    std::cout << t.to_csv();
    return 0;
}

struct SampleArgs {
    std::string model, out;
    bool pretrained = false;
};

int run_sample(Context& ctx, const SampleArgs& a) {
    Denoiser<float> model = open_model(ctx, or_default(a.model, ctx.ckpt_dir() / "model.udck"));
    if (a.pretrained) model = pretrained_of(model);
    const Modality m = parse_modality(ctx.config.raw("sample.modality"));
    const int n = static_cast<int>(ctx.config.get_int("sample.count"));
    const int steps = static_cast<int>(ctx.config.get_int("sample.steps"));
    const fs::path out = or_default(a.out, ctx.plots_dir() / ("samples_" + ctx.config.raw("sample.modality") + ".ppm"));
    Outputs outputs;
    outputs.file(out);
    ctx.log("drawing " + std::to_string(n) + " " + std::string(modality_name(m)) + " patches with " +
            (steps ? std::to_string(steps) : std::string("all")) + " reverse steps");
    const Tensor<float> x = sample_patches(model, m, n, ctx.config.schedule(), ctx.config.get_int("sample.seed"), steps);
    write_samples_ppm(x, out);
    update_manifest(ctx, {{"model", or_default(a.model, ctx.ckpt_dir() / "model.udck").string()}}, outputs.files());
    outputs.commit();
    std::cout << "samples written to " << out.string() << "\n";
    return 0;
}

int run_similarity(Context& ctx, const ModelInputs& in) {
    const SceneBundle scene = open_scene(ctx, in.scene);
    const Denoiser<float> adapted = model_for(ctx, ModelInputs{in.scene, in.model, false});
    const Denoiser<float> pre = pretrained_of(adapted);
    FeatureSpec spec = ctx.config.features(adapted.tap_count());
    spec.modalities = {Modality::PRGB, Modality::PCA, Modality::SAR};
    const NoiseSchedule sched = ctx.config.schedule();
    Outputs outputs;
    const fs::path pa = outputs.file(ctx.reports_dir() / "similarity_adapted.csv");
    const fs::path pp = outputs.file(ctx.reports_dir() / "similarity_pretrained.csv");
    const fs::path ps = outputs.file(ctx.reports_dir() / "similarity_summary.txt");
    ctx.log("adapted features, " + spec_text(spec));
    const SimilarityReport ra = cross_modal_similarity(build_feature_dataset(scene, adapted, spec, sched, scene.train));
    ctx.log("pretrained features");
    const SimilarityReport rp = cross_modal_similarity(build_feature_dataset(scene, pre, spec, sched, scene.train));
    write_text(pa, ra.to_csv());
    write_text(pp, rp.to_csv());
    const VarianceComparison cmp = compare_variance(ra, rp);
    std::ostringstream s;
    s << "within-class cosine variance, adapted vs pretrained (" << spec_text(spec) << ")\n";
    for (std::size_t i = 0; i < ra.pairs.size(); ++i) {
        s << modality_name(ra.pairs[i].a) << "/" << modality_name(ra.pairs[i].b) << ":";
        for (std::size_t k = 0; k < ra.pairs[i].per_class.size(); ++k) {
            char buf[96];
            std::snprintf(buf, sizeof(buf), " c%d %.4g/%.4g", ra.pairs[i].per_class[k].class_id, ra.pairs[i].per_class[k].variance,
                          rp.pairs[i].per_class[k].variance);
            s << buf;
        }
        s << "  (skipped " << ra.pairs[i].skipped << "/" << rp.pairs[i].skipped << ")\n";
    }
    s << "adapted variance not larger in " << cmp.not_larger << " of " << cmp.compared << " class/pair cells\n";
    write_text(ps, s.str());
    update_manifest(ctx, {{"scene", in.scene}, {"model", or_default(in.model, ctx.ckpt_dir() / "model.udck").string()}},
                    outputs.files());
    outputs.commit();
    std::cout << s.str();
    return 0;
}

int run_describe(const std::string& path) {
    if (fs::is_directory(path)) {
        if (!fs::exists(fs::path(path) / "scene.json")) throw UsageError(path + " is a directory without scene.json");
        const SceneBundle s = load_scene(path);
        std::cout << "scene " << path << "\n  size " << s.height() << "x" << s.width() << "\n  hsi " << s.hsi.channels
                  << " bands" << (s.hsi.wavelengths.empty() ? "" : " with wavelengths") << "\n  sar " << s.sar.channels
                  << " channels\n  prepared " << (s.prepared() ? "yes" : "no") << "\n  classes " << s.class_names.size() << "\n";
        const auto tr = s.train.class_counts(), te = s.test.class_counts();
        std::printf("  %-4s %-16s %8s %8s\n", "id", "name", "train", "test");
        for (std::size_t k = 1; k < tr.size(); ++k) {
            std::printf("  %-4zu %-16s %8zu %8zu\n", k, s.class_names[k - 1].c_str(), tr[k], te[k]);
        }
        std::printf("  %-21s %8zu %8zu\n", "total", s.train.entries.size(), s.test.entries.size());
        for (const auto& [k, v] : s.metadata) std::cout << "  meta " << k << " = " << v << "\n";
        return 0;
    }
    require_file(path, "artifact");
    char magic[4] = {0, 0, 0, 0};
    {
        std::ifstream in(path, std::ios::binary);
        in.read(magic, 4);
        if (in.gcount() < 4) throw FormatError(path + ": file too short for a header", static_cast<std::size_t>(in.gcount()));
    }
    if (std::equal(magic, magic + 4, kCheckpointMagic)) {
        const Checkpoint ck = read_checkpoint(path);
        std::cout << "checkpoint " << path << " (UDCK v" << kCheckpointVersion << ")\n";
        for (const auto& [k, v] : ck.metadata) std::cout << "  meta " << k << " = " << v << "\n";
        std::size_t total = 0;
        for (const auto& t : ck.tensors) total += t.values.size();
        std::cout << "  tensors " << ck.tensors.size() << ", values " << total << "\n";
        const auto fmt = ck.metadata.find("format");
        if (fmt != ck.metadata.end() && fmt->second == "unidiff-denoiser") {
            const Denoiser<float> model = Denoiser<float>::from_checkpoint(ck);
            const ParamPartition p = partition_parameters(model);
            std::printf("  parameters: frozen %zu, trainable %zu, trainable ratio %.4f\n", p.frozen_count, p.trainable_count, p.ratio());
            std::printf("  taps %d, image size %d\n", model.tap_count(), model.config().image_size);
        } else {
            for (const auto& t : ck.tensors) {
                std::cout << "  " << t.name << " [";
                for (std::size_t i = 0; i < t.shape.size(); ++i) std::cout << (i ? "," : "") << t.shape[i];
                std::cout << "]\n";
            }
        }
        return 0;
    }
    if (std::equal(magic, magic + 4, kRasterMagic)) {
        const RasterStack r = read_raster(path);
        std::cout << "raster " << path << " (URDS v" << kRasterVersion << ")\n  " << r.height << "x" << r.width << "x"
                  << r.channels << (r.wavelengths.empty() ? "" : ", wavelengths " + std::to_string(r.wavelengths.front()) + "-" +
                                                                   std::to_string(r.wavelengths.back()) + " nm")
                  << "\n";
        return 0;
    }
    if (magic[0] == '{') {
        std::ifstream in(path);
        std::stringstream buf;
        buf << in.rdbuf();
        const SweepTable t = sweep_from_json(buf.str());
        std::cout << "sweep " << t.name << ", " << t.records.size() << " records\n";
        for (const auto& [k, v] : t.metadata) std::cout << "  meta " << k << " = " << v << "\n";
        const auto bad = verify_records(t);
        std::cout << "  metrics " << (bad.empty() ? "match" : "DO NOT match") << " their confusion matrices\n";
        std::cout << t.to_csv();
        return 0;
    }
    throw FormatError(path + ": unrecognised magic", 0);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multimodal diffusion feature adaptation and sparse-label classification"};
    app.require_subcommand(1);
    app.fallthrough(false);
    std::vector<std::string> args(argv, argv + argc);

    Common c_synth, c_prep, c_adapt, c_extract, c_head, c_predict, c_eval, c_ablate, c_sweep, c_sample, c_sim;

    SynthArgs synth_a;
    auto* synth = app.add_subcommand("synth", "generate a seeded synthetic multimodal scene");
    add_common(synth, c_synth, {"synth", "prepare"});
    synth->add_option("--out", synth_a.out, "scene directory (default <root>/scene)");
    add_alias(synth, c_synth, "seed", "synth.seed");

    PrepareArgs prep_a;
    auto* prep = app.add_subcommand("prepare", "build pRGB, PCA and Pauli representations for a scene");
    add_common(prep, c_prep, {"prepare"});
    prep->add_option("--scene", prep_a.scene, "existing scene directory to re-prepare");
    prep->add_option("--hsi", prep_a.hsi, "hyperspectral raster (.urds)");
    prep->add_option("--sar", prep_a.sar, "SAR raster (.urds)");
    prep->add_option("--train", prep_a.train, "training labels CSV");
    prep->add_option("--test", prep_a.test, "test labels CSV");
    prep->add_option("--classes", prep_a.classes, "number of classes");
    prep->add_option("--names", prep_a.names, "comma-separated class names");
    prep->add_option("--out", prep_a.out, "scene directory to write (default <root>/scene)");

    AdaptArgs adapt_a;
    auto* adapt_c = app.add_subcommand("adapt", "Stage A: train the conditioner by denoising");
    add_common(adapt_c, c_adapt, {"schedule", "model", "adapt"});
    adapt_c->add_option("--scene", adapt_a.scene, "scene directory")->required();
    adapt_c->add_option("--init", adapt_a.init, "start from this model checkpoint instead of a fresh network");
    adapt_c->add_option("--out", adapt_a.out, "model checkpoint to write (default <root>/ckpt/model.udck)");
    adapt_c->add_option("--loss", adapt_a.loss, "loss trace CSV (default <root>/reports/adapt_loss.csv)");
    add_alias(adapt_c, c_adapt, "steps", "adapt.steps");
    add_alias(adapt_c, c_adapt, "batch", "adapt.batch");
    add_alias(adapt_c, c_adapt, "policy", "adapt.policy");
    add_alias(adapt_c, c_adapt, "seed", "adapt.seed");

    ExtractArgs ext_a;
    auto* ext = app.add_subcommand("extract", "Stage B: per-pixel features for both label splits");
    add_common(ext, c_extract, {"schedule", "features"});
    add_model_inputs(ext, ext_a.in, true);
    ext->add_option("--out", ext_a.out, "feature directory (default <root>/features)");
    add_alias(ext, c_extract, "layer", "features.layer");
    add_alias(ext, c_extract, "timestep", "features.timestep");
    add_alias(ext, c_extract, "modalities", "features.modalities");

    TrainHeadArgs head_a;
    auto* head = app.add_subcommand("train-head", "Stage B: train the MLP head on sparse labels");
    add_common(head, c_head, {"schedule", "features", "head"});
    add_model_inputs(head, head_a.in, false);
    head->add_option("--features", head_a.features, "training feature file from extract (skips extraction)");
    head->add_option("--out", head_a.out, "head checkpoint (default <root>/ckpt/head.udck)");
    head->add_option("--log", head_a.log, "epoch log CSV (default <root>/reports/head_log.csv)");
    add_alias(head, c_head, "layer", "features.layer");
    add_alias(head, c_head, "timestep", "features.timestep");
    add_alias(head, c_head, "modalities", "features.modalities");
    add_alias(head, c_head, "epochs", "head.max_epochs");

    PredictArgs pred_a;
    auto* pred = app.add_subcommand("predict", "dense class map with overlap-averaged probabilities");
    add_common(pred, c_predict, {"schedule", "features"});
    add_model_inputs(pred, pred_a.in, true);
    pred->add_option("--head", pred_a.head, "head checkpoint (default <root>/ckpt/head.udck)");
    pred->add_option("--out", pred_a.out, "class map raster (default <root>/reports/classmap.urds)");
    pred->add_option("--ppm", pred_a.ppm, "colour class map (default <root>/plots/classmap.ppm)");
    pred->add_option("--probs", pred_a.probs, "optional K-channel probability raster");

    EvaluateArgs eval_a;
    auto* eval = app.add_subcommand("evaluate", "confusion-matrix metrics for a class map");
    add_common(eval, c_eval, {"schedule", "features"});
    add_model_inputs(eval, eval_a.predict.in, false);
    eval->add_option("--head", eval_a.predict.head, "head checkpoint used when --pred is absent");
    eval->add_option("--pred", eval_a.pred, "class map raster to score");
    eval->add_option("--labels", eval_a.labels, "label CSV (default: the scene's split)");
    eval->add_option("--split", eval_a.split, "scene split to score: test or train");
    eval->add_option("--classes", eval_a.classes, "number of classes when no scene is given");
    eval->add_option("--names", eval_a.names, "comma-separated class names");
    eval->add_option("--report", eval_a.report, "report directory (default <root>/reports)");

    AblateArgs abl_a;
    auto* abl = app.add_subcommand("ablate", "modality-combination or pRGB-anchoring ablation");
    add_common(abl, c_ablate, {"schedule", "model", "adapt", "features", "head", "sweep"});
    add_model_inputs(abl, abl_a.in, true);
    abl->add_option("--kind", abl_a.kind, "modality or anchoring");
    abl->add_option("--init", abl_a.init, "anchoring: base model checkpoint (default: fresh network per seed)");
    add_alias(abl, c_ablate, "seeds", "sweep.seeds");

    SweepArgs sw_a;
    auto* sw = app.add_subcommand("sweep", "timestep sweep, adapted vs pretrained");
    add_common(sw, c_sweep, {"schedule", "features", "head", "sweep"});
    sw->add_option("--scene", sw_a.in.scene, "scene directory")->required();
    sw->add_option("--model", sw_a.in.model, "adapted model checkpoint (default <root>/ckpt/model.udck)");
    sw->add_option("--subsets", sw_a.subsets, "';'-separated modality subsets, e.g. \"pca;prgb+pca+sar\"");
    add_alias(sw, c_sweep, "timesteps", "sweep.timesteps");

    SampleArgs smp_a;
    auto* smp = app.add_subcommand("sample", "draw patches by ancestral sampling");
    add_common(smp, c_sample, {"schedule", "sample"});
    smp->add_option("--model", smp_a.model, "model checkpoint (default <root>/ckpt/model.udck)");
    smp->add_option("--out", smp_a.out, "PPM grid (default <root>/plots/samples_<modality>.ppm)");
    smp->add_flag("--pretrained", smp_a.pretrained, "sample with the conditioner reset to identity");
    add_alias(smp, c_sample, "modality", "sample.modality");
    add_alias(smp, c_sample, "count", "sample.count");
    add_alias(smp, c_sample, "seed", "sample.seed");

    ModelInputs sim_in;
    auto* sim = app.add_subcommand("similarity", "cross-modal cosine statistics, adapted vs pretrained");
    add_common(sim, c_sim, {"schedule", "features"});
    sim->add_option("--scene", sim_in.scene, "scene directory")->required();
    sim->add_option("--model", sim_in.model, "adapted model checkpoint (default <root>/ckpt/model.udck)");

    std::string describe_path;
    auto* desc = app.add_subcommand("describe", "print what an artifact holds");
    desc->add_option("path", describe_path, "scene directory, checkpoint, raster or sweep JSON")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << "\n" << app.help();
        return 1;
    }

    CLI::App* sc = app.get_subcommands().front();
    const std::string name = sc->get_name();
    try {
        if (name == "describe") return run_describe(describe_path);
        auto ctx_for = [&](const Common& c) { return make_context(name, c, args); };
        if (name == "synth") { auto ctx = ctx_for(c_synth); return run_synth(ctx, synth_a); }
        if (name == "prepare") { auto ctx = ctx_for(c_prep); return run_prepare(ctx, prep_a); }
        if (name == "adapt") { auto ctx = ctx_for(c_adapt); return run_adapt(ctx, adapt_a); }
        if (name == "extract") { auto ctx = ctx_for(c_extract); return run_extract(ctx, ext_a); }
        if (name == "train-head") { auto ctx = ctx_for(c_head); return run_train_head(ctx, head_a); }
        if (name == "predict") { auto ctx = ctx_for(c_predict); return run_predict(ctx, pred_a); }
        if (name == "evaluate") { auto ctx = ctx_for(c_eval); return run_evaluate(ctx, eval_a); }
        if (name == "ablate") { auto ctx = ctx_for(c_ablate); return run_ablate(ctx, abl_a); }
        if (name == "sweep") { auto ctx = ctx_for(c_sweep); return run_sweep(ctx, sw_a); }
        if (name == "sample") { auto ctx = ctx_for(c_sample); return run_sample(ctx, smp_a); }
        if (name == "similarity") { auto ctx = ctx_for(c_sim); return run_similarity(ctx, sim_in); }
        throw UsageError("unknown command " + name);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << sc->help();
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const FormatError& e) {
        std::cerr << "corrupt file: " << e.what() << "\n";
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
