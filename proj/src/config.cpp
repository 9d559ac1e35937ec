#include "unidiff/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cstdlib>
#include <sstream>

#include "unidiff/errors.hpp"

namespace unidiff {

namespace {

using K = RunConfig::Kind;

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

bool parse_int(const std::string& s, long long& out) {
    const std::string t = trim(s);
    if (t.empty()) return false;
    const char* first = t.data();
    if (*first == '+') ++first;
    auto [p, ec] = std::from_chars(first, t.data() + t.size(), out);
    return ec == std::errc() && p == t.data() + t.size();
}

bool parse_real(const std::string& s, double& out) {
    const std::string t = trim(s);
    if (t.empty()) return false;
    char* end = nullptr;
    out = std::strtod(t.c_str(), &end);
    return end == t.c_str() + t.size();
}

bool parse_bool(const std::string& s, bool& out) {
    const std::string t = trim(s);
    if (t == "true" || t == "1" || t == "yes" || t == "on") return out = true, true;
    if (t == "false" || t == "0" || t == "no" || t == "off") return out = false, true;
    return false;
}

bool parse_ints(const std::string& s, std::vector<int>& out) {
    out.clear();
    const std::string t = trim(s);
    if (t.empty()) return true;
    std::stringstream ss(t);
    std::string item;
    while (std::getline(ss, item, ',')) {
        long long v;
        if (!parse_int(item, v) || v < INT32_MIN || v > INT32_MAX) return false;
        out.push_back(static_cast<int>(v));
    }
    return true;
}

void check_value(const RunConfig::Key& k, const std::string& value) {
    long long i;
    double d;
    bool b;
    std::vector<int> v;
    bool ok = true;
    switch (k.kind) {
        case K::Int: ok = parse_int(value, i); break;
        case K::Real: ok = parse_real(value, d); break;
        case K::Bool: ok = parse_bool(value, b); break;
        case K::IntList: ok = parse_ints(value, v); break;
        case K::Text: break;
    }
    if (!ok) throw ConfigError("invalid value '" + value + "' for " + k.name);
}

std::vector<Modality> parse_modality_list(const std::string& text) {
    return MixPolicy::parse(text).modalities;
}

}  // namespace

const std::vector<RunConfig::Key>& RunConfig::keys() {
    static const std::vector<Key> table{
        {"schedule.steps", K::Int, "1000", "diffusion steps T"},
        {"schedule.beta_start", K::Real, "0.0001", "first beta"},
        {"schedule.beta_end", K::Real, "0.02", "last beta"},

        {"model.preset", K::Text, "compact", "network size: compact or reference"},
        {"model.seed", K::Int, "0", "seed for the random backbone and conditioner"},

        {"adapt.steps", K::Int, "2000", "Stage A optimisation steps"},
        {"adapt.batch", K::Int, "32", "patches per step"},
        {"adapt.lr", K::Real, "0.003", "Adam learning rate"},
        {"adapt.beta1", K::Real, "0.9", "Adam beta1"},
        {"adapt.beta2", K::Real, "0.999", "Adam beta2"},
        {"adapt.policy", K::Text, "joint", "modalities trained: joint, pca-only, prgb+pca, ..."},
        {"adapt.assignment", K::Text, "stratified", "stratified (mixed batches) or per-batch"},
        {"adapt.seed", K::Int, "0", "batch and noise seed"},

        {"features.layer", K::Int, "-1", "decoder tap, 0 nearest the bottleneck; -1 = outermost"},
        {"features.timestep", K::Int, "0", "extraction timestep"},
        {"features.modalities", K::Text, "prgb+pca+sar", "representations concatenated per pixel"},
        {"features.noise", K::Text, "fresh", "extraction noise: fresh (per patch batch) or fixed"},
        {"features.noise_seed", K::Int, "0", "extraction noise seed"},
        {"features.stride", K::Int, "32", "patch stride in pixels"},
        {"features.batch", K::Int, "8", "patches per forward pass"},

        {"head.lr", K::Real, "0.001", "classifier learning rate"},
        {"head.weight_decay", K::Real, "0.0005", "L2 weight decay"},
        {"head.batch", K::Int, "64", "classifier batch size"},
        {"head.max_epochs", K::Int, "10", "epoch limit"},
        {"head.patience", K::Int, "3", "epochs without validation improvement before stopping"},
        {"head.hidden", K::IntList, "256,128", "hidden layer widths"},
        {"head.validation_fraction", K::Real, "0.1", "stratified validation share"},
        {"head.balanced", K::Bool, "false", "oversample rare classes"},
        {"head.seed", K::Int, "0", "classifier seed"},

        {"synth.seed", K::Int, "7", "scene seed"},
        {"synth.height", K::Int, "192", "rows"},
        {"synth.width", K::Int, "192", "columns"},
        {"synth.classes", K::Int, "6", "number of classes"},
        {"synth.bands", K::Int, "48", "hyperspectral bands"},
        {"synth.train_fraction", K::Real, "0.008", "labelled training share of all pixels"},
        {"synth.min_train", K::Int, "12", "minimum training labels per class"},
        {"synth.smoothing", K::Real, "10", "spatial correlation length of class regions"},

        {"prepare.rgb_bands", K::IntList, "", "explicit pseudo-RGB band indices (empty = nearest 640/550/450 nm)"},
        {"prepare.stretch_lo", K::Real, "2", "lower stretch percentile"},
        {"prepare.stretch_hi", K::Real, "98", "upper stretch percentile"},

        {"sweep.timesteps", K::IntList, "0,100,300", "timesteps visited by the sweep"},
        {"sweep.seeds", K::Int, "3", "seeds for multi-seed protocols"},

        {"sample.count", K::Int, "8", "patches to draw"},
        {"sample.steps", K::Int, "50", "respaced reverse steps (0 = all T)"},
        {"sample.modality", K::Text, "prgb", "modality to condition on"},
        {"sample.seed", K::Int, "0", "sampling seed"},
    };
    return table;
}

const RunConfig::Key* RunConfig::find_key(const std::string& name) {
    for (const auto& k : keys()) {
        if (k.name == name) return &k;
    }
    return nullptr;
}

RunConfig::RunConfig() {
    for (const auto& k : keys()) values_[k.name] = k.default_value;
}

void RunConfig::set(const std::string& name, const std::string& value) {
    const Key* k = find_key(name);
    if (!k) throw ConfigError("unknown configuration key '" + name + "'");
    check_value(*k, value);
    values_[name] = trim(value);
    touched_.insert(name);
}

void RunConfig::load_file(const std::filesystem::path& path) {
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::read_ini(path.string(), tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(e.what());
    }
    for (const auto& [section, body] : tree) {
        if (body.empty()) throw ConfigError(path.string() + ": key '" + section + "' outside a section");
        for (const auto& [key, node] : body) {
            const std::string name = section + "." + key;
            if (!find_key(name)) throw ConfigError(path.string() + ": unknown key '" + key + "' in [" + section + "]");
            try {
                set(name, node.data());
            } catch (const ConfigError& e) {
                throw ConfigError(path.string() + ": " + e.what());
            }
        }
    }
}

const std::string& RunConfig::raw(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw ConfigError("unknown configuration key '" + name + "'");
    return it->second;
}

bool RunConfig::is_default(const std::string& name) const { return !touched_.count(name); }

long long RunConfig::get_int(const std::string& name) const {
    long long v = 0;
    parse_int(raw(name), v);
    return v;
}

double RunConfig::get_real(const std::string& name) const {
    double v = 0;
    parse_real(raw(name), v);
    return v;
}

bool RunConfig::get_bool(const std::string& name) const {
    bool v = false;
    parse_bool(raw(name), v);
    return v;
}

std::vector<int> RunConfig::get_ints(const std::string& name) const {
    std::vector<int> v;
    parse_ints(raw(name), v);
    return v;
}

std::string RunConfig::to_ini() const {
    std::ostringstream out;
    std::string section;
    for (const auto& k : keys()) {
        const auto dot = k.name.find('.');
        const std::string s = k.name.substr(0, dot);
        if (s != section) {
            out << (section.empty() ? "" : "\n") << '[' << s << "]\n";
            section = s;
        }
        out << k.name.substr(dot + 1) << " = " << values_.at(k.name) << '\n';
    }
    return out.str();
}

NoiseSchedule RunConfig::schedule() const {
    return make_linear_schedule(static_cast<int>(get_int("schedule.steps")), get_real("schedule.beta_start"),
                                get_real("schedule.beta_end"));
}

DenoiserConfig RunConfig::model_config() const {
    const std::string& p = raw("model.preset");
    if (p == "compact") return DenoiserConfig::compact();
    if (p == "reference") return DenoiserConfig::reference();
    throw ConfigError("model.preset must be compact or reference, got '" + p + "'");
}

AdaptationConfig RunConfig::adaptation() const {
    AdaptationConfig c;
    c.steps = static_cast<int>(get_int("adapt.steps"));
    c.batch_size = static_cast<int>(get_int("adapt.batch"));
    c.learning_rate = get_real("adapt.lr");
    c.beta1 = get_real("adapt.beta1");
    c.beta2 = get_real("adapt.beta2");
    try {
        c.policy = MixPolicy::parse(raw("adapt.policy"));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("adapt.policy: ") + e.what());
    }
    const std::string& a = raw("adapt.assignment");
    if (a == "stratified") c.policy.assignment = MixPolicy::Assignment::Stratified;
    else if (a == "per-batch") c.policy.assignment = MixPolicy::Assignment::PerBatch;
    else throw ConfigError("adapt.assignment must be stratified or per-batch, got '" + a + "'");
    c.seed = static_cast<std::uint64_t>(get_int("adapt.seed"));
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return c;
}

FeatureSpec RunConfig::features(int tap_count) const {
    FeatureSpec s;
    const int layer = static_cast<int>(get_int("features.layer"));
    s.layer = layer < 0 ? tap_count + layer : layer;
    if (s.layer < 0 || s.layer >= tap_count) {
        throw ConfigError("features.layer " + std::to_string(layer) + " outside the " + std::to_string(tap_count) + " available taps");
    }
    s.timestep = static_cast<int>(get_int("features.timestep"));
    const int T = static_cast<int>(get_int("schedule.steps"));
    if (s.timestep < 0 || s.timestep > T) throw ConfigError("features.timestep must lie in [0, " + std::to_string(T) + "]");
    try {
        s.modalities = parse_modality_list(raw("features.modalities"));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("features.modalities: ") + e.what());
    }
    const std::string& n = raw("features.noise");
    if (n == "fresh") s.noise.mode = NoisePolicy::Mode::Fresh;
    else if (n == "fixed") s.noise.mode = NoisePolicy::Mode::Fixed;
    else throw ConfigError("features.noise must be fresh or fixed, got '" + n + "'");
    s.noise.seed = static_cast<std::uint64_t>(get_int("features.noise_seed"));
    s.stride = static_cast<int>(get_int("features.stride"));
    s.batch = static_cast<int>(get_int("features.batch"));
    try {
        s.normalize();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return s;
}

ClassifierConfig RunConfig::head() const {
    ClassifierConfig c;
    c.learning_rate = get_real("head.lr");
    c.weight_decay = get_real("head.weight_decay");
    c.batch_size = static_cast<int>(get_int("head.batch"));
    c.max_epochs = static_cast<int>(get_int("head.max_epochs"));
    c.patience = static_cast<int>(get_int("head.patience"));
    c.hidden = get_ints("head.hidden");
    c.validation_fraction = get_real("head.validation_fraction");
    c.balanced_sampling = get_bool("head.balanced");
    c.seed = static_cast<std::uint64_t>(get_int("head.seed"));
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return c;
}

SynthOptions RunConfig::synth() const {
    SynthOptions o;
    o.seed = static_cast<std::uint64_t>(get_int("synth.seed"));
    o.height = static_cast<int>(get_int("synth.height"));
    o.width = static_cast<int>(get_int("synth.width"));
    o.num_classes = static_cast<int>(get_int("synth.classes"));
    o.bands = static_cast<int>(get_int("synth.bands"));
    o.train_fraction = get_real("synth.train_fraction");
    o.min_train_per_class = static_cast<int>(get_int("synth.min_train"));
    o.smoothing = get_real("synth.smoothing");
    return o;
}

PrepareOptions RunConfig::prepare() const {
    PrepareOptions o;
    const auto bands = get_ints("prepare.rgb_bands");
    if (!bands.empty()) {
        if (bands.size() != 3) throw ConfigError("prepare.rgb_bands needs exactly three indices");
        o.rgb_bands = std::array<int, 3>{bands[0], bands[1], bands[2]};
    }
    o.stretch.p_lo = get_real("prepare.stretch_lo");
    o.stretch.p_hi = get_real("prepare.stretch_hi");
    if (!(o.stretch.p_lo >= 0 && o.stretch.p_lo < o.stretch.p_hi && o.stretch.p_hi <= 100)) {
        throw ConfigError("stretch percentiles must satisfy 0 <= lo < hi <= 100");
    }
    return o;
}

void RunConfig::validate() const {
    try {
        schedule();
        const DenoiserConfig mc = model_config();
        mc.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    adaptation();
    head();
    prepare();
    // Tap count depends on the network; checked against the preset here.
    const int levels = model_config().levels();
    features(levels * (model_config().num_res_blocks + 1));
    if (get_int("sweep.seeds") < 1) throw ConfigError("sweep.seeds must be positive");
    for (int t : get_ints("sweep.timesteps")) {
        if (t < 0 || t > get_int("schedule.steps")) throw ConfigError("sweep.timesteps entries must lie in [0, T]");
    }
    if (get_int("sample.count") < 1) throw ConfigError("sample.count must be positive");
    if (get_int("sample.steps") < 0) throw ConfigError("sample.steps must be non-negative");
    try {
        parse_modality(raw("sample.modality"));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("sample.modality: ") + e.what());
    }
}

}  // namespace unidiff
