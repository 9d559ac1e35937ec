#include "unidiff/classify.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "unidiff/optim.hpp"
#include "unidiff/rng.hpp"

namespace unidiff {

void FeatureSpec::normalize() {
    if (modalities.empty()) throw std::invalid_argument("feature set needs at least one modality");
    std::sort(modalities.begin(), modalities.end());
    if (std::adjacent_find(modalities.begin(), modalities.end()) != modalities.end()) {
        throw std::invalid_argument("modality repeated in feature set");
    }
    if (stride < 1) throw std::invalid_argument("patch stride must be positive");
    if (batch < 1) throw std::invalid_argument("extraction batch must be positive");
}

std::string FeatureSpec::modality_key() const {
    std::string out;
    for (Modality m : modalities) {
        if (!out.empty()) out += "+";
        out += modality_name(m);
    }
    return out;
}

int DenseFeatures::dim() const {
    int d = 0;
    for (const auto& m : maps) d += m.dim(0);
    return d;
}

namespace {

// Runs the tap extraction over a patch grid in batches and hands each
// batch's upsampled maps to `sink(maps, first_patch)`.
template <typename Sink>
void for_each_feature_batch(const RasterStack& img, const PatchGrid& grid, const Denoiser<float>& model,
                            const FeatureSpec& spec, Modality m, const NoiseSchedule& sched, const ExtractProgress& progress,
                            Sink&& sink) {
    const int n = static_cast<int>(grid.origins.size());
    const int s = grid.size;
    for (int first = 0; first < n; first += spec.batch) {
        const int count = std::min(spec.batch, n - first);
        Tensor<float> x({count, 3, s, s});
        for (int i = 0; i < count; ++i) {
            const auto [r, c] = grid.origins[static_cast<std::size_t>(first + i)];
            copy_patch(img, r, c, x, i);
        }
        const auto fm = extract_features(model, x, spec.timestep, m, spec.layer, sched, spec.noise, static_cast<std::uint64_t>(first));
        sink(fm.values, first);
        if (progress) progress(m, first + count, n);
    }
}

void check_scene_for(const SceneBundle& scene, const Denoiser<float>& model) {
    if (!scene.prepared()) throw std::invalid_argument("scene has no prepared representations");
    const int s = model.config().image_size;
    if (scene.height() < s || scene.width() < s) {
        throw std::invalid_argument("scene smaller than the model patch size " + std::to_string(s));
    }
}

}  // namespace

DenseFeatures compute_dense_features(const SceneBundle& scene, const Denoiser<float>& model, FeatureSpec spec,
                                     const NoiseSchedule& sched, const ExtractProgress& progress) {
    spec.normalize();
    check_scene_for(scene, model);
    const PatchGrid grid = make_patch_grid(scene.height(), scene.width(), model.config().image_size, spec.stride);
    const int channels = model.tap_info(spec.layer).channels;
    DenseFeatures out;
    out.height = scene.height();
    out.width = scene.width();
    out.layer = spec.layer;
    out.timestep = spec.timestep;
    out.modalities = spec.modalities;
    for (Modality m : spec.modalities) {
        OverlapAccumulator acc(grid, channels);
        for_each_feature_batch(representation(scene, m), grid, model, spec, m, sched, progress,
                               [&](const Tensor<float>& maps, int first) { acc.add(maps, first); });
        out.maps.push_back(acc.finish<float>());
    }
    return out;
}

PixelFeatureSet gather_features(const DenseFeatures& dense, const SparseLabelSet& labels) {
    PixelFeatureSet set;
    set.dim = dense.dim();
    set.num_classes = labels.num_classes;
    set.layer = dense.layer;
    set.timestep = dense.timestep;
    set.modalities = dense.modalities;
    set.features.reserve(labels.entries.size() * static_cast<std::size_t>(set.dim));
    const std::size_t plane = static_cast<std::size_t>(dense.height) * dense.width;
    for (const auto& e : labels.entries) {
        if (e.row < 0 || e.row >= dense.height || e.col < 0 || e.col >= dense.width) {
            throw std::out_of_range("labelled pixel (" + std::to_string(e.row) + "," + std::to_string(e.col) + ") outside the raster");
        }
        const std::size_t pix = static_cast<std::size_t>(e.row) * dense.width + e.col;
        for (const auto& map : dense.maps) {
            for (int c = 0; c < map.dim(0); ++c) set.features.push_back(map[c * plane + pix]);
        }
        set.labels.push_back(e.class_id);
    }
    return set;
}

PixelFeatureSet build_feature_dataset(const SceneBundle& scene, const Denoiser<float>& model, const FeatureSpec& spec,
                                      const NoiseSchedule& sched, const SparseLabelSet& labels) {
    return gather_features(compute_dense_features(scene, model, spec, sched), labels);
}

PixelFeatureSet select_modalities(const PixelFeatureSet& set, const std::vector<Modality>& subset) {
    if (subset.empty()) throw std::invalid_argument("empty modality subset");
    const int per = set.dim / static_cast<int>(set.modalities.size());
    std::vector<Modality> sorted = subset;
    std::sort(sorted.begin(), sorted.end());
    std::vector<int> offsets;
    for (Modality m : sorted) {
        auto it = std::find(set.modalities.begin(), set.modalities.end(), m);
        if (it == set.modalities.end()) throw std::invalid_argument("feature set lacks modality " + std::string(modality_name(m)));
        offsets.push_back(static_cast<int>(it - set.modalities.begin()) * per);
    }
    PixelFeatureSet out;
    out.dim = per * static_cast<int>(sorted.size());
    out.num_classes = set.num_classes;
    out.labels = set.labels;
    out.layer = set.layer;
    out.timestep = set.timestep;
    out.modalities = sorted;
    out.features.reserve(set.size() * static_cast<std::size_t>(out.dim));
    for (std::size_t i = 0; i < set.size(); ++i) {
        const float* r = set.row(i);
        for (int off : offsets) out.features.insert(out.features.end(), r + off, r + off + per);
    }
    return out;
}

Checkpoint features_to_checkpoint(const PixelFeatureSet& set) {
    Checkpoint ckpt;
    ckpt.metadata["format"] = "unidiff-features";
    ckpt.metadata["features.dim"] = std::to_string(set.dim);
    ckpt.metadata["features.num_classes"] = std::to_string(set.num_classes);
    ckpt.metadata["features.layer"] = std::to_string(set.layer);
    ckpt.metadata["features.timestep"] = std::to_string(set.timestep);
    std::string mods;
    for (Modality m : set.modalities) mods += (mods.empty() ? "" : "+") + std::string(modality_name(m));
    ckpt.metadata["features.modalities"] = mods;
    const int n = static_cast<int>(set.size());
    ckpt.tensors.push_back({"features", {n, set.dim}, set.features});
    ckpt.tensors.push_back({"labels", {n}, std::vector<float>(set.labels.begin(), set.labels.end())});
    return ckpt;
}

PixelFeatureSet features_from_checkpoint(const Checkpoint& ckpt) {
    auto fmt = ckpt.metadata.find("format");
    if (fmt == ckpt.metadata.end() || fmt->second != "unidiff-features") throw std::runtime_error("checkpoint does not hold a feature set");
    PixelFeatureSet set;
    set.dim = std::stoi(ckpt.meta("features.dim"));
    set.num_classes = std::stoi(ckpt.meta("features.num_classes"));
    set.layer = std::stoi(ckpt.meta("features.layer"));
    set.timestep = std::stoi(ckpt.meta("features.timestep"));
    set.modalities = MixPolicy::parse(ckpt.meta("features.modalities")).modalities;
    const CheckpointTensor* f = ckpt.find("features");
    const CheckpointTensor* l = ckpt.find("labels");
    if (!f || !l || f->shape.size() != 2 || l->shape.size() != 1 || f->shape[1] != set.dim || f->shape[0] != l->shape[0]) {
        throw std::runtime_error("feature set tensors missing or misshapen");
    }
    set.features = f->values;
    for (float v : l->values) {
        const int y = static_cast<int>(v);
        if (static_cast<float>(y) != v || y < 1 || y > set.num_classes) throw std::runtime_error("feature set holds an invalid label");
        set.labels.push_back(y);
    }
    return set;
}

void ClassifierConfig::validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("classifier learning rate must be positive");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight decay must be non-negative");
    if (batch_size < 1) throw std::invalid_argument("classifier batch size must be positive");
    if (max_epochs < 0) throw std::invalid_argument("max_epochs must be non-negative");
    if (patience < 1) throw std::invalid_argument("patience must be positive");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) throw std::invalid_argument("validation fraction must lie in [0, 1)");
    for (int h : hidden) {
        if (h < 1) throw std::invalid_argument("hidden widths must be positive");
    }
}

MlpHead::MlpHead(int input_dim, std::vector<int> hidden, int num_classes, std::uint64_t seed)
    : input_dim_(input_dim), num_classes_(num_classes), hidden_(std::move(hidden)) {
    if (input_dim < 1) throw std::invalid_argument("head input width must be positive");
    if (num_classes < 2) throw std::invalid_argument("head needs at least 2 classes");
    std::mt19937_64 rng(seed);
    int in = input_dim;
    std::vector<int> widths = hidden_;
    widths.push_back(num_classes);
    for (std::size_t l = 0; l < widths.size(); ++l) {
        const int out = widths[l];
        const int w = params_.add("fc" + std::to_string(l) + ".weight", {out, in}, true);
        const int b = params_.add("fc" + std::to_string(l) + ".bias", {out}, true);
        init_fan_in_uniform(params_[w].value, in, rng);
        init_fan_in_uniform(params_[b].value, in, rng);
        weights_.push_back(w);
        biases_.push_back(b);
        in = out;
    }
    mean_.assign(input_dim, 0.0f);
    std_.assign(input_dim, 1.0f);
}

void MlpHead::set_normalization(std::vector<float> mean, std::vector<float> stddev) {
    if (static_cast<int>(mean.size()) != input_dim_ || static_cast<int>(stddev.size()) != input_dim_) {
        throw std::invalid_argument("normalisation vectors do not match the head input width");
    }
    for (auto& s : stddev) {
        if (!(s > 1e-8f)) s = 1.0f;
    }
    mean_ = std::move(mean);
    std_ = std::move(stddev);
}

template <typename Store>
nn::Var MlpHead::logits_impl(Store& store, nn::Graph<float>& g, const float* rows, int n) const {
    Tensor<float> x({n, input_dim_});
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < input_dim_; ++j) {
            const std::size_t k = static_cast<std::size_t>(i) * input_dim_ + j;
            x[k] = (rows[k] - mean_[j]) / std_[j];
        }
    }
    nn::Var h = g.input(std::move(x));
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        h = nn::linear(g, h, store.bind(g, weights_[l]), store.bind(g, biases_[l]));
        if (l + 1 < weights_.size()) h = nn::relu(g, h);
    }
    return h;
}

nn::Var MlpHead::logits(nn::Graph<float>& g, const float* rows, int n) { return logits_impl(params_, g, rows, n); }

nn::Var MlpHead::logits(nn::Graph<float>& g, const float* rows, int n) const {
    return logits_impl(params_, g, rows, n);
}

std::vector<float> MlpHead::predict_proba(const float* rows, int n) const {
    nn::Graph<float> g(false);
    const nn::Var z = logits(g, rows, n);
    const auto& v = g.value(z).values();
    std::vector<float> p(v.begin(), v.end());
    nn::softmax_rows<float>(p, n, num_classes_);
    return p;
}

Checkpoint MlpHead::to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.metadata["format"] = "unidiff-head";
    ckpt.metadata["head.input_dim"] = std::to_string(input_dim_);
    ckpt.metadata["head.num_classes"] = std::to_string(num_classes_);
    std::string hs;
    for (std::size_t i = 0; i < hidden_.size(); ++i) hs += (i ? "," : "") + std::to_string(hidden_[i]);
    ckpt.metadata["head.hidden"] = hs;
    for (const auto& [k, v] : provenance_) ckpt.metadata["prov." + k] = v;
    for (const auto& p : params_) {
        ckpt.tensors.push_back({p.name, p.value.shape(), std::vector<float>(p.value.data(), p.value.data() + p.value.size())});
    }
    ckpt.tensors.push_back({"norm.mean", {input_dim_}, mean_});
    ckpt.tensors.push_back({"norm.std", {input_dim_}, std_});
    return ckpt;
}

MlpHead MlpHead::from_checkpoint(const Checkpoint& ckpt) {
    auto fmt = ckpt.metadata.find("format");
    if (fmt == ckpt.metadata.end() || fmt->second != "unidiff-head") throw std::runtime_error("checkpoint does not hold a classifier head");
    std::vector<int> hidden;
    std::stringstream ss(ckpt.meta("head.hidden"));
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) hidden.push_back(std::stoi(item));
    }
    MlpHead head(std::stoi(ckpt.meta("head.input_dim")), hidden, std::stoi(ckpt.meta("head.num_classes")), 0);
    for (auto& p : head.params_) {
        const CheckpointTensor* t = ckpt.find(p.name);
        if (!t || t->shape != p.value.shape()) throw std::runtime_error("head checkpoint tensor '" + p.name + "' missing or misshapen");
        std::copy(t->values.begin(), t->values.end(), p.value.data());
    }
    const CheckpointTensor* mean = ckpt.find("norm.mean");
    const CheckpointTensor* sd = ckpt.find("norm.std");
    if (!mean || !sd) throw std::runtime_error("head checkpoint lacks normalisation tensors");
    head.set_normalization(mean->values, sd->values);
    if (ckpt.tensors.size() != head.params_.size() + 2) throw std::runtime_error("head checkpoint holds undeclared tensors");
    for (const auto& [k, v] : ckpt.metadata) {
        if (k.rfind("prov.", 0) == 0) head.provenance_[k.substr(5)] = v;
    }
    return head;
}

std::string TrainLog::to_csv() const {
    std::ostringstream out;
    out.precision(9);
    out << "epoch,train_loss,val_loss,val_accuracy\n";
    for (const auto& e : epochs) out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.val_accuracy << '\n';
    return out.str();
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(const std::vector<int>& labels,
                                                                               double fraction, std::uint64_t seed) {
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> train, val;
    for (auto& [cls, idx] : by_class) {
        std::shuffle(idx.begin(), idx.end(), rng);
        std::size_t nval = 0;
        if (fraction > 0.0 && idx.size() >= 2) {
            nval = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(fraction * static_cast<double>(idx.size()))));
            nval = std::min(nval, idx.size() - 1);
        }
        val.insert(val.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(nval));
        train.insert(train.end(), idx.begin() + static_cast<std::ptrdiff_t>(nval), idx.end());
    }
    std::sort(train.begin(), train.end());
    std::sort(val.begin(), val.end());
    return {train, val};
}

namespace {

struct Rows {
    std::vector<float> x;
    std::vector<int> y;  // 0-based
};

Rows take_rows(const PixelFeatureSet& data, const std::vector<std::size_t>& idx) {
    Rows r;
    r.x.reserve(idx.size() * static_cast<std::size_t>(data.dim));
    for (std::size_t i : idx) {
        r.x.insert(r.x.end(), data.row(i), data.row(i) + data.dim);
        r.y.push_back(data.labels[i] - 1);
    }
    return r;
}

// Mean loss and accuracy without recording a graph.
std::pair<double, double> evaluate_rows(const MlpHead& head, const Rows& rows, int dim) {
    const int n = static_cast<int>(rows.y.size());
    if (n == 0) return {0.0, 0.0};
    double loss = 0.0;
    int correct = 0;
    constexpr int kChunk = 1024;
    for (int start = 0; start < n; start += kChunk) {
        const int cnt = std::min(kChunk, n - start);
        const auto p = head.predict_proba(rows.x.data() + static_cast<std::size_t>(start) * dim, cnt);
        const int k = head.num_classes();
        for (int i = 0; i < cnt; ++i) {
            const float* pr = p.data() + static_cast<std::size_t>(i) * k;
            loss -= std::log(std::max(static_cast<double>(pr[rows.y[start + i]]), 1e-300));
            if (std::max_element(pr, pr + k) - pr == rows.y[start + i]) ++correct;
        }
    }
    return {loss / n, static_cast<double>(correct) / n};
}

}  // namespace

TrainedHead train_classifier(const PixelFeatureSet& data, const ClassifierConfig& cfg) {
    cfg.validate();
    const int k = data.num_classes;
    if (k < 2) throw std::invalid_argument("classifier needs at least 2 classes");
    if (data.size() < static_cast<std::size_t>(k)) throw std::invalid_argument("fewer labelled rows than classes");
    std::vector<int> seen(k + 1, 0);
    for (int y : data.labels) {
        if (y < 1 || y > k) throw std::out_of_range("class id " + std::to_string(y) + " outside [1, " + std::to_string(k) + "]");
        seen[y] = 1;
    }
    if (std::accumulate(seen.begin(), seen.end(), 0) < 2) throw std::invalid_argument("training data holds a single class");
    for (float v : data.features) {
        if (!std::isfinite(v)) throw std::invalid_argument("non-finite feature value");
    }

    const auto [train_idx, val_idx] = stratified_split(data.labels, cfg.validation_fraction, mix_seed(cfg.seed, 1));
    const Rows train = take_rows(data, train_idx);
    const Rows val = take_rows(data, val_idx);
    const int d = data.dim;

    TrainedHead out;
    out.head = MlpHead(d, cfg.hidden, k, mix_seed(cfg.seed, 2));
    std::vector<double> mean(d, 0.0), var(d, 0.0);
    const std::size_t nt = train.y.size();
    for (std::size_t i = 0; i < nt; ++i)
        for (int j = 0; j < d; ++j) mean[j] += train.x[i * d + j];
    for (auto& m : mean) m /= static_cast<double>(nt);
    for (std::size_t i = 0; i < nt; ++i)
        for (int j = 0; j < d; ++j) var[j] += std::pow(train.x[i * d + j] - mean[j], 2);
    std::vector<float> fm(d), fs(d);
    for (int j = 0; j < d; ++j) {
        fm[j] = static_cast<float>(mean[j]);
        fs[j] = static_cast<float>(std::sqrt(var[j] / static_cast<double>(nt)));
    }
    out.head.set_normalization(fm, fs);
    out.head.provenance()["layer"] = std::to_string(data.layer);
    out.head.provenance()["timestep"] = std::to_string(data.timestep);
    std::string mods;
    for (Modality m : data.modalities) mods += (mods.empty() ? "" : "+") + std::string(modality_name(m));
    out.head.provenance()["modalities"] = mods;
    out.log.train_rows = nt;
    out.log.val_rows = val.y.size();
    if (cfg.max_epochs == 0) return out;

    auto& params = out.head.parameters();
    Adam<float> opt(params, AdamOptions{cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay});
    std::mt19937_64 rng(mix_seed(cfg.seed, 3));

    // Per-class pools for balanced sampling.
    std::vector<std::vector<std::size_t>> pools(k);
    for (std::size_t i = 0; i < nt; ++i) pools[train.y[i]].push_back(i);

    ParameterStore<float> best = params;
    double best_val = std::numeric_limits<double>::infinity();
    int since_best = 0;
    std::vector<float> xb;
    std::vector<int> yb;
    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::vector<std::size_t> order;
        if (cfg.balanced_sampling) {
            std::uniform_int_distribution<int> pick_class(0, k - 1);
            while (order.size() < nt) {
                const auto& pool = pools[pick_class(rng)];
                if (pool.empty()) continue;
                order.push_back(pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)]);
            }
        } else {
            order.resize(nt);
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::shuffle(order.begin(), order.end(), rng);
        }
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < nt; start += cfg.batch_size) {
            const std::size_t cnt = std::min<std::size_t>(cfg.batch_size, nt - start);
            xb.clear();
            yb.clear();
            for (std::size_t i = 0; i < cnt; ++i) {
                const std::size_t r = order[start + i];
                xb.insert(xb.end(), train.x.begin() + r * d, train.x.begin() + (r + 1) * d);
                yb.push_back(train.y[r]);
            }
            nn::Graph<float> g(true);
            params.zero_grad();
            const nn::Var loss = nn::softmax_cross_entropy(g, out.head.logits(g, xb.data(), static_cast<int>(cnt)), yb);
            epoch_loss += static_cast<double>(g.value(loss)[0]) * static_cast<double>(cnt);
            g.backward(loss);
            opt.step(params);
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = epoch_loss / static_cast<double>(nt);
        if (!val.y.empty()) {
            std::tie(rec.val_loss, rec.val_accuracy) = evaluate_rows(out.head, val, d);
        } else {
            std::tie(rec.val_loss, rec.val_accuracy) = evaluate_rows(out.head, train, d);
        }
        out.log.epochs.push_back(rec);
        if (rec.val_loss < best_val) {
            best_val = rec.val_loss;
            best = params;
            out.log.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    params = best;
    return out;
}

std::vector<int> argmax_classes(const Tensor<float>& probs) {
    const int k = probs.dim(0);
    const std::size_t plane = static_cast<std::size_t>(probs.dim(1)) * probs.dim(2);
    std::vector<int> out(plane, 1);
    for (std::size_t i = 0; i < plane; ++i) {
        float best = probs[i];
        for (int c = 1; c < k; ++c) {
            const float v = probs[c * plane + i];
            if (v > best) {
                best = v;
                out[i] = c + 1;
            }
        }
    }
    return out;
}

DensePrediction predict_dense(const SceneBundle& scene, const Denoiser<float>& model, const MlpHead& head, FeatureSpec spec,
                              const NoiseSchedule& sched, const ExtractProgress& progress) {
    spec.normalize();
    check_scene_for(scene, model);
    const int per = model.tap_info(spec.layer).channels;
    const int d = per * static_cast<int>(spec.modalities.size());
    if (d != head.input_dim()) {
        throw std::invalid_argument("head expects " + std::to_string(head.input_dim()) + " features, extraction gives " + std::to_string(d));
    }
    const int s = model.config().image_size;
    const PatchGrid grid = make_patch_grid(scene.height(), scene.width(), s, spec.stride);
    const int n = static_cast<int>(grid.origins.size());
    const int k = head.num_classes();
    OverlapAccumulator acc(grid, k);
    const std::size_t pix = static_cast<std::size_t>(s) * s;
    for (int first = 0; first < n; first += spec.batch) {
        const int count = std::min(spec.batch, n - first);
        Tensor<float> x({count, 3, s, s});
        std::vector<float> rows(static_cast<std::size_t>(count) * pix * d);
        for (std::size_t mi = 0; mi < spec.modalities.size(); ++mi) {
            const Modality m = spec.modalities[mi];
            const RasterStack& img = representation(scene, m);
            for (int i = 0; i < count; ++i) {
                const auto [r, c] = grid.origins[static_cast<std::size_t>(first + i)];
                copy_patch(img, r, c, x, i);
            }
            const auto fm = extract_features(model, x, spec.timestep, m, spec.layer, sched, spec.noise, static_cast<std::uint64_t>(first));
            for (int i = 0; i < count; ++i)
                for (int ch = 0; ch < per; ++ch) {
                    const float* src = &fm.values.at(i, ch, 0, 0);
                    for (std::size_t p = 0; p < pix; ++p) rows[(i * pix + p) * d + mi * per + ch] = src[p];
                }
            if (progress) progress(m, first + count, n);
        }
        const auto prob = head.predict_proba(rows.data(), static_cast<int>(count * pix));
        Tensor<float> maps({count, k, s, s});
        for (int i = 0; i < count; ++i)
            for (int c = 0; c < k; ++c) {
                float* dst = &maps.at(i, c, 0, 0);
                for (std::size_t p = 0; p < pix; ++p) dst[p] = prob[(i * pix + p) * k + c];
            }
        acc.add(maps, first);
    }
    DensePrediction out;
    out.height = scene.height();
    out.width = scene.width();
    out.num_classes = k;
    out.probs = acc.finish<float>();
    out.class_map = argmax_classes(out.probs);
    return out;
}

ConfusionMatrix evaluate_split(const std::vector<int>& class_map, int width, const SparseLabelSet& labels) {
    std::vector<int> truth, pred;
    truth.reserve(labels.entries.size());
    pred.reserve(labels.entries.size());
    for (const auto& e : labels.entries) {
        const std::size_t i = static_cast<std::size_t>(e.row) * width + e.col;
        if (e.col >= width || i >= class_map.size()) throw std::out_of_range("label coordinate outside the class map");
        truth.push_back(e.class_id);
        pred.push_back(class_map[i]);
    }
    return confusion(truth, pred, labels.num_classes);
}

RasterStack class_map_raster(const DensePrediction& pred) {
    RasterStack r(pred.height, pred.width, 1);
    for (std::size_t i = 0; i < pred.class_map.size(); ++i) r.values[i] = static_cast<float>(pred.class_map[i]);
    return r;
}

void write_class_map_ppm(const DensePrediction& pred, const std::filesystem::path& path) {
    static const unsigned char palette[][3] = {{34, 139, 34},  {220, 20, 60},  {128, 128, 128}, {154, 205, 50},
                                               {255, 165, 0},  {138, 43, 226}, {30, 144, 255},  {210, 180, 140},
                                               {0, 206, 209},  {255, 215, 0}};
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "P6\n" << pred.width << ' ' << pred.height << "\n255\n";
    for (int c : pred.class_map) out.write(reinterpret_cast<const char*>(palette[(c - 1) % 10]), 3);
}

}  // namespace unidiff
