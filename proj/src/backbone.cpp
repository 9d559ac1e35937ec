#include "unidiff/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

#include "unidiff/hash.hpp"
#include "unidiff/rng.hpp"

namespace unidiff {

namespace {

std::string join_ints(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(v[i]);
    }
    return s;
}

std::vector<int> split_ints(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stoi(item));
    }
    return out;
}

}  // namespace

DenoiserConfig DenoiserConfig::reference() { return DenoiserConfig{}; }

DenoiserConfig DenoiserConfig::compact() {
    DenoiserConfig c;
    c.base_width = 16;
    c.channel_mult = {1, 2, 4};
    c.num_res_blocks = 1;
    c.attention_resolutions = {16};
    c.head_channels = 32;
    c.cond_width = 64;
    c.film_hidden = 16;
    return c;
}

void DenoiserConfig::validate() const {
    if (in_channels != 3) throw std::invalid_argument("denoiser input must have 3 channels");
    if (channel_mult.empty()) throw std::invalid_argument("channel multipliers must not be empty");
    for (int m : channel_mult) {
        if (m <= 0) throw std::invalid_argument("channel multipliers must be positive");
    }
    if (base_width <= 0 || num_res_blocks < 1 || head_channels < 1 || film_hidden < 1) {
        throw std::invalid_argument("denoiser widths and depths must be positive");
    }
    if (cond_width < 2 || cond_width % 2 != 0) throw std::invalid_argument("conditioning width must be even");
    const int factor = 1 << (levels() - 1);
    if (image_size <= 0 || image_size % factor != 0) {
        throw std::invalid_argument("image size " + std::to_string(image_size) + " not divisible by " + std::to_string(factor));
    }
    for (int r : attention_resolutions) {
        bool found = false;
        for (int l = 0; l < levels(); ++l) found = found || (image_size >> l) == r;
        if (!found) throw std::invalid_argument("attention resolution " + std::to_string(r) + " matches no level");
    }
}

std::map<std::string, std::string> DenoiserConfig::to_metadata() const {
    return {
        {"config.in_channels", std::to_string(in_channels)},
        {"config.image_size", std::to_string(image_size)},
        {"config.base_width", std::to_string(base_width)},
        {"config.channel_mult", join_ints(channel_mult)},
        {"config.num_res_blocks", std::to_string(num_res_blocks)},
        {"config.attention_resolutions", join_ints(attention_resolutions)},
        {"config.head_channels", std::to_string(head_channels)},
        {"config.cond_width", std::to_string(cond_width)},
        {"config.film_hidden", std::to_string(film_hidden)},
    };
}

DenoiserConfig DenoiserConfig::from_metadata(const std::map<std::string, std::string>& meta) {
    auto get = [&](const std::string& k) -> const std::string& {
        auto it = meta.find(k);
        if (it == meta.end()) throw std::runtime_error("missing denoiser config key '" + k + "'");
        return it->second;
    };
    DenoiserConfig c;
    c.in_channels = std::stoi(get("config.in_channels"));
    c.image_size = std::stoi(get("config.image_size"));
    c.base_width = std::stoi(get("config.base_width"));
    c.channel_mult = split_ints(get("config.channel_mult"));
    c.num_res_blocks = std::stoi(get("config.num_res_blocks"));
    c.attention_resolutions = split_ints(get("config.attention_resolutions"));
    c.head_channels = std::stoi(get("config.head_channels"));
    c.cond_width = std::stoi(get("config.cond_width"));
    c.film_hidden = std::stoi(get("config.film_hidden"));
    c.validate();
    return c;
}

template <typename T>
Denoiser<T>::Denoiser(DenoiserConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    std::vector<int> site_channels;

    auto conv = [&](const std::string& name, int ci, int co, int k, int& w, int& b) {
        w = backbone_.add(name + ".weight", {co, ci, k, k}, false);
        b = backbone_.add(name + ".bias", {co}, false);
        init_fan_in_uniform(backbone_[w].value, ci * k * k, rng);
        init_fan_in_uniform(backbone_[b].value, ci * k * k, rng);
    };
    auto norm = [&](const std::string& name, int c, int& w, int& b) {
        w = backbone_.add(name + ".weight", {c}, false);
        b = backbone_.add(name + ".bias", {c}, false);
        backbone_[w].value.fill(T{1});
    };
    auto make_res = [&](const std::string& name, int ci, int co) {
        ResBlock rb{};
        rb.in_ch = ci;
        rb.out_ch = co;
        rb.site = static_cast<int>(site_channels.size());
        site_channels.push_back(co);
        norm(name + ".norm1", ci, rb.gn1_w, rb.gn1_b);
        conv(name + ".conv1", ci, co, 3, rb.conv1_w, rb.conv1_b);
        conv(name + ".conv2", co, co, 3, rb.conv2_w, rb.conv2_b);
        if (ci != co) conv(name + ".skip", ci, co, 1, rb.skip_w, rb.skip_b);
        res_.push_back(rb);
        return static_cast<int>(res_.size()) - 1;
    };
    auto make_attn = [&](const std::string& name, int c) {
        AttnBlock ab{};
        ab.ch = c;
        ab.heads = (c % cfg_.head_channels == 0) ? std::max(1, c / cfg_.head_channels) : 1;
        norm(name + ".norm", c, ab.gn_w, ab.gn_b);
        conv(name + ".qkv", c, 3 * c, 1, ab.qkv_w, ab.qkv_b);
        conv(name + ".proj", c, c, 1, ab.proj_w, ab.proj_b);
        attn_.push_back(ab);
        return static_cast<int>(attn_.size()) - 1;
    };
    auto wants_attn = [&](int res) {
        return std::find(cfg_.attention_resolutions.begin(), cfg_.attention_resolutions.end(), res) !=
               cfg_.attention_resolutions.end();
    };

    const int base = cfg_.base_width;
    conv("input.conv", cfg_.in_channels, base, 3, in_w_, in_b_);
    std::vector<int> skip_ch{base};
    int ch = base;
    int res = cfg_.image_size;
    for (int l = 0; l < cfg_.levels(); ++l) {
        for (int r = 0; r < cfg_.num_res_blocks; ++r) {
            const std::string name = "enc." + std::to_string(encoder_.size());
            EncoderStep step;
            step.res = make_res(name + ".res", ch, base * cfg_.channel_mult[l]);
            ch = base * cfg_.channel_mult[l];
            if (wants_attn(res)) step.attn = make_attn(name + ".attn", ch);
            encoder_.push_back(step);
            skip_ch.push_back(ch);
        }
        if (l + 1 < cfg_.levels()) {
            EncoderStep step;
            conv("enc." + std::to_string(encoder_.size()) + ".down", ch, ch, 3, step.down_w, step.down_b);
            encoder_.push_back(step);
            skip_ch.push_back(ch);
            res /= 2;
        }
    }
    mid_res1_ = make_res("mid.res1", ch, ch);
    mid_attn_ = make_attn("mid.attn", ch);
    mid_res2_ = make_res("mid.res2", ch, ch);
    for (int l = cfg_.levels() - 1; l >= 0; --l) {
        for (int r = 0; r <= cfg_.num_res_blocks; ++r) {
            const std::string name = "dec." + std::to_string(decoder_.size());
            const int sc = skip_ch.back();
            skip_ch.pop_back();
            DecoderStep step;
            step.resolution = res;
            step.res = make_res(name + ".res", ch + sc, base * cfg_.channel_mult[l]);
            ch = base * cfg_.channel_mult[l];
            if (wants_attn(res)) step.attn = make_attn(name + ".attn", ch);
            if (l > 0 && r == cfg_.num_res_blocks) {
                conv(name + ".up", ch, ch, 3, step.up_w, step.up_b);
                res *= 2;
            }
            decoder_.push_back(step);
        }
    }
    norm("out.norm", ch, out_gn_w_, out_gn_b_);
    conv("out.conv", ch, cfg_.in_channels, 3, out_w_, out_b_);

    cond_ = Conditioner<T>(ConditionerConfig{cfg_.cond_width, cfg_.film_hidden}, site_channels);
    cond_.init_identity(mix_seed(seed, 0xc0d1));
}

template <typename T>
template <typename Store>
nn::Var Denoiser<T>::res_forward(Store& store, nn::Graph<T>& g, const ResBlock& rb, nn::Var h,
                                 const std::vector<SiteModulation>* mods) const {
    nn::Var a = nn::group_norm(g, h, default_groups(rb.in_ch));
    a = nn::silu(g, nn::scale_shift(g, a, store.bind(g, rb.gn1_w), store.bind(g, rb.gn1_b)));
    a = nn::conv2d(g, a, store.bind(g, rb.conv1_w), store.bind(g, rb.conv1_b));
    nn::Var n = nn::group_norm(g, a, default_groups(rb.out_ch));
    if (mods) n = nn::scale_shift(g, n, (*mods)[rb.site].gamma, (*mods)[rb.site].beta);
    a = nn::conv2d(g, nn::silu(g, n), store.bind(g, rb.conv2_w), store.bind(g, rb.conv2_b));
    const nn::Var skip = rb.skip_w >= 0 ? nn::conv2d(g, h, store.bind(g, rb.skip_w), store.bind(g, rb.skip_b)) : h;
    return nn::add(g, skip, a);
}

template <typename T>
template <typename Store>
nn::Var Denoiser<T>::attn_forward(Store& store, nn::Graph<T>& g, const AttnBlock& ab, nn::Var h) const {
    const auto& shape = g.value(h).shape();
    const int n = shape[0], c = shape[1], hh = shape[2], ww = shape[3];
    nn::Var a = nn::group_norm(g, h, default_groups(c));
    a = nn::scale_shift(g, a, store.bind(g, ab.gn_w), store.bind(g, ab.gn_b));
    nn::Var qkv = nn::conv2d(g, a, store.bind(g, ab.qkv_w), store.bind(g, ab.qkv_b));
    qkv = nn::reshape(g, qkv, {n, 3 * c, hh * ww});
    nn::Var o = nn::attention(g, qkv, ab.heads);
    o = nn::reshape(g, o, {n, c, hh, ww});
    o = nn::conv2d(g, o, store.bind(g, ab.proj_w), store.bind(g, ab.proj_b));
    return nn::add(g, h, o);
}

template <typename T>
void Denoiser<T>::check_input(const Tensor<T>& x) const {
    if (x.rank() != 4) throw std::invalid_argument("denoiser input must be [N, 3, S, S], got " + shape_string(x.shape()));
    if (x.dim(1) != cfg_.in_channels) {
        throw std::invalid_argument("denoiser expects " + std::to_string(cfg_.in_channels) + " channels, got " +
                                    std::to_string(x.dim(1)));
    }
    if (x.dim(2) != cfg_.image_size || x.dim(3) != cfg_.image_size) {
        throw std::invalid_argument("denoiser expects " + std::to_string(cfg_.image_size) + "x" +
                                    std::to_string(cfg_.image_size) + " patches, got " + shape_string(x.shape()));
    }
}

template <typename T>
template <typename Store, typename Cond>
typename Denoiser<T>::ForwardResult Denoiser<T>::forward_impl(Store& store, Cond& cond, nn::Graph<T>& g, nn::Var x,
                                                              std::span<const int> timesteps,
                                                              std::span<const Modality> modalities,
                                                              const ForwardOptions& opts) const {
    check_input(g.value(x));
    const auto n = static_cast<std::size_t>(g.value(x).dim(0));
    if (opts.use_film && (timesteps.size() != n || modalities.size() != n)) {
        throw std::invalid_argument("one timestep and modality per batch item required");
    }
    if (opts.tap_layer >= tap_count()) throw std::out_of_range("feature tap layer " + std::to_string(opts.tap_layer) + " out of range");

    std::vector<SiteModulation> mods;
    if (opts.use_film) mods = cond.build(g, timesteps, modalities);
    const std::vector<SiteModulation>* mp = opts.use_film ? &mods : nullptr;

    ForwardResult result;
    nn::Var h = nn::conv2d(g, x, store.bind(g, in_w_), store.bind(g, in_b_));
    std::vector<nn::Var> skips{h};
    for (const auto& step : encoder_) {
        if (step.down_w >= 0) {
            h = nn::conv2d(g, h, store.bind(g, step.down_w), store.bind(g, step.down_b), 2);
        } else {
            h = res_forward(store, g, res_[step.res], h, mp);
            if (step.attn >= 0) h = attn_forward(store, g, attn_[step.attn], h);
        }
        skips.push_back(h);
    }
    h = res_forward(store, g, res_[mid_res1_], h, mp);
    h = attn_forward(store, g, attn_[mid_attn_], h);
    h = res_forward(store, g, res_[mid_res2_], h, mp);
    for (std::size_t i = 0; i < decoder_.size(); ++i) {
        const auto& step = decoder_[i];
        h = nn::concat_channels(g, h, skips.back());
        skips.pop_back();
        h = res_forward(store, g, res_[step.res], h, mp);
        if (step.attn >= 0) h = attn_forward(store, g, attn_[step.attn], h);
        if (static_cast<int>(i) == opts.tap_layer) {
            result.tap = h;
            if (opts.stop_at_tap) return result;
        }
        if (step.up_w >= 0) {
            h = nn::conv2d(g, nn::upsample_nearest2x(g, h), store.bind(g, step.up_w), store.bind(g, step.up_b));
        }
    }
    h = nn::group_norm(g, h, default_groups(g.value(h).dim(1)));
    h = nn::silu(g, nn::scale_shift(g, h, store.bind(g, out_gn_w_), store.bind(g, out_gn_b_)));
    result.output = nn::conv2d(g, h, store.bind(g, out_w_), store.bind(g, out_b_));
    return result;
}

template <typename T>
typename Denoiser<T>::ForwardResult Denoiser<T>::forward(nn::Graph<T>& g, nn::Var x, std::span<const int> timesteps,
                                                         std::span<const Modality> modalities,
                                                         const ForwardOptions& opts) {
    return forward_impl(backbone_, cond_, g, x, timesteps, modalities, opts);
}

template <typename T>
typename Denoiser<T>::ForwardResult Denoiser<T>::forward(nn::Graph<T>& g, nn::Var x, std::span<const int> timesteps,
                                                         std::span<const Modality> modalities,
                                                         const ForwardOptions& opts) const {
    return forward_impl(backbone_, cond_, g, x, timesteps, modalities, opts);
}

template <typename T>
Tensor<T> Denoiser<T>::predict_noise(const Tensor<T>& x_t, std::span<const int> timesteps,
                                     std::span<const Modality> modalities) const {
    nn::Graph<T> g(false);
    const auto r = forward(g, g.input(x_t), timesteps, modalities, ForwardOptions{});
    return g.value(r.output);
}

template <typename T>
Tensor<T> Denoiser<T>::predict_noise_unconditioned(const Tensor<T>& x_t) const {
    nn::Graph<T> g(false);
    ForwardOptions opts;
    opts.use_film = false;
    const auto r = forward(g, g.input(x_t), {}, {}, opts);
    return g.value(r.output);
}

template <typename T>
TapInfo Denoiser<T>::tap_info(int layer) const {
    if (layer < 0 || layer >= tap_count()) throw std::out_of_range("feature tap layer " + std::to_string(layer) + " out of range");
    return {layer, res_[decoder_[layer].res].out_ch, decoder_[layer].resolution};
}

template <typename T>
template <typename U>
Denoiser<U> Denoiser<T>::cast() const {
    Denoiser<U> out;
    out.cfg_ = cfg_;
    out.backbone_ = backbone_.template cast<U>();
    out.cond_ = cond_.template cast<U>();
    for (const auto& r : res_) {
        out.res_.push_back({r.in_ch, r.out_ch, r.site, r.gn1_w, r.gn1_b, r.conv1_w, r.conv1_b, r.conv2_w, r.conv2_b,
                            r.skip_w, r.skip_b});
    }
    for (const auto& a : attn_) {
        out.attn_.push_back({a.ch, a.heads, a.gn_w, a.gn_b, a.qkv_w, a.qkv_b, a.proj_w, a.proj_b});
    }
    out.in_w_ = in_w_;
    out.in_b_ = in_b_;
    for (const auto& e : encoder_) out.encoder_.push_back({e.res, e.attn, e.down_w, e.down_b});
    out.mid_res1_ = mid_res1_;
    out.mid_attn_ = mid_attn_;
    out.mid_res2_ = mid_res2_;
    for (const auto& d : decoder_) out.decoder_.push_back({d.res, d.attn, d.up_w, d.up_b, d.resolution});
    out.out_gn_w_ = out_gn_w_;
    out.out_gn_b_ = out_gn_b_;
    out.out_w_ = out_w_;
    out.out_b_ = out_b_;
    out.provenance_ = provenance_;
    return out;
}

template <typename T>
Checkpoint Denoiser<T>::to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.metadata = cfg_.to_metadata();
    ckpt.metadata["format"] = "unidiff-denoiser";
    for (const auto& [k, v] : provenance_) ckpt.metadata["prov." + k] = v;
    auto push = [&](const Parameter<T>& p) {
        CheckpointTensor t;
        t.name = p.name;
        t.shape = p.value.shape();
        t.values.assign(p.value.data(), p.value.data() + p.value.size());
        ckpt.tensors.push_back(std::move(t));
    };
    for (const auto& p : backbone_) push(p);
    for (const auto& p : cond_.parameters()) push(p);
    return ckpt;
}

template <typename T>
Denoiser<T> Denoiser<T>::from_checkpoint(const Checkpoint& ckpt) {
    auto fmt = ckpt.metadata.find("format");
    if (fmt == ckpt.metadata.end() || fmt->second != "unidiff-denoiser") {
        throw std::runtime_error("checkpoint does not hold a denoiser");
    }
    Denoiser<T> model(DenoiserConfig::from_metadata(ckpt.metadata), 0);
    std::size_t matched = 0;
    auto fill = [&](Parameter<T>& p) {
        const CheckpointTensor* t = ckpt.find(p.name);
        if (!t) throw std::runtime_error("checkpoint lacks tensor '" + p.name + "'");
        if (t->shape != p.value.shape()) {
            throw std::runtime_error("tensor '" + p.name + "' has shape " + shape_string(t->shape) + ", expected " +
                                     shape_string(p.value.shape()));
        }
        std::transform(t->values.begin(), t->values.end(), p.value.data(), [](float v) { return static_cast<T>(v); });
        ++matched;
    };
    for (auto& p : model.backbone_) fill(p);
    for (auto& p : model.cond_.parameters()) fill(p);
    if (matched != ckpt.tensors.size()) throw std::runtime_error("checkpoint holds tensors the denoiser does not declare");
    for (const auto& [k, v] : ckpt.metadata) {
        if (k.rfind("prov.", 0) == 0) model.provenance_[k.substr(5)] = v;
    }
    return model;
}

template <typename T>
Tensor<T> standard_normal(std::vector<int> shape, std::uint64_t seed) {
    Tensor<T> out(std::move(shape));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : out.values()) v = static_cast<T>(dist(rng));
    return out;
}

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w) {
    if (x.rank() != 4) throw std::invalid_argument("resize expects NCHW");
    const int planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<T> out({x.dim(0), x.dim(1), out_h, out_w});
    auto axis = [](int out_len, int in_len) {
        std::vector<std::pair<int, double>> m(out_len);
        const double scale = static_cast<double>(in_len) / out_len;
        for (int i = 0; i < out_len; ++i) {
            double src = (i + 0.5) * scale - 0.5;
            src = std::clamp(src, 0.0, static_cast<double>(in_len - 1));
            const int i0 = std::min(static_cast<int>(std::floor(src)), in_len - 1);
            m[i] = {i0, src - i0};
        }
        return m;
    };
    const auto ym = axis(out_h, h), xm = axis(out_w, w);
    for (int p = 0; p < planes; ++p) {
        const T* src = x.data() + static_cast<std::size_t>(p) * h * w;
        T* dst = out.data() + static_cast<std::size_t>(p) * out_h * out_w;
        for (int i = 0; i < out_h; ++i) {
            const int y0 = ym[i].first, y1 = std::min(y0 + 1, h - 1);
            const double fy = ym[i].second;
            for (int j = 0; j < out_w; ++j) {
                const int x0 = xm[j].first, x1 = std::min(x0 + 1, w - 1);
                const double fx = xm[j].second;
                const double top = src[y0 * w + x0] * (1 - fx) + src[y0 * w + x1] * fx;
                const double bot = src[y1 * w + x0] * (1 - fx) + src[y1 * w + x1] * fx;
                dst[i * out_w + j] = static_cast<T>(top * (1 - fy) + bot * fy);
            }
        }
    }
    return out;
}

template <typename T>
FeatureMap<T> extract_features(const Denoiser<T>& model, const Tensor<T>& patches, int t, Modality m, int layer,
                               const NoiseSchedule& sched, const NoisePolicy& noise, std::uint64_t draw) {
    sched.check_timestep(t);
    if (layer < 0 || layer >= model.tap_count()) {
        throw std::out_of_range("feature tap layer " + std::to_string(layer) + " out of range [0, " +
                                std::to_string(model.tap_count()) + ")");
    }
    Tensor<T> x = patches.rank() == 3 ? patches.reshaped({1, patches.dim(0), patches.dim(1), patches.dim(2)}) : patches;
    const int n = x.dim(0);
    if (t > 0) {
        const std::uint64_t s = noise.mode == NoisePolicy::Mode::Fixed ? noise.seed : mix_seed(noise.seed, draw);
        x = q_sample(x, t, standard_normal<T>(x.shape(), s), sched);
    }
    nn::Graph<T> g(false);
    typename Denoiser<T>::ForwardOptions opts;
    opts.tap_layer = layer;
    opts.stop_at_tap = true;
    const std::vector<int> ts(n, t);
    const std::vector<Modality> ms(n, m);
    const auto r = model.forward(g, g.input(std::move(x)), ts, ms, opts);
    FeatureMap<T> fm;
    fm.values = resize_bilinear(g.value(r.tap), patches.dim(patches.rank() - 2), patches.dim(patches.rank() - 1));
    fm.layer = layer;
    fm.timestep = t;
    fm.modality = m;
    return fm;
}

template <typename T>
ParamPartition partition_parameters(const Denoiser<T>& model) {
    ParamPartition part;
    for (const auto& p : model.backbone()) {
        if (p.trainable) throw std::logic_error("backbone parameter marked trainable: " + p.name);
        part.frozen.push_back(p.name);
        part.frozen_count += p.value.size();
    }
    for (const auto& p : model.conditioner().parameters()) {
        part.trainable.push_back(p.name);
        part.trainable_count += p.value.size();
    }
    return part;
}

template <typename T>
std::map<std::string, std::string> frozen_hashes(const Denoiser<T>& model) {
    std::map<std::string, std::string> out;
    for (const auto& p : model.backbone()) out[p.name] = sha256_hex_of(p.value.values());
    return out;
}

template <typename T>
Tensor<T> sample_patches(const Denoiser<T>& model, Modality m, int n, const NoiseSchedule& sched, std::uint64_t seed,
                         int sample_steps) {
    if (n < 1) throw std::invalid_argument("sample count must be positive");
    std::vector<int> ts;
    if (sample_steps <= 0 || sample_steps >= sched.steps) {
        for (int t = 1; t <= sched.steps; ++t) ts.push_back(t);
    } else {
        for (int k = 0; k < sample_steps; ++k) {
            const double pos = sample_steps == 1 ? sched.steps : 1.0 + (sched.steps - 1.0) * k / (sample_steps - 1.0);
            const int t = static_cast<int>(std::lround(pos));
            if (ts.empty() || ts.back() != t) ts.push_back(t);
        }
    }
    const int s = model.config().image_size;
    Tensor<T> x = standard_normal<T>({n, 3, s, s}, seed);
    std::mt19937_64 rng(mix_seed(seed, 1));
    std::normal_distribution<double> dist(0.0, 1.0);
    const std::vector<Modality> ms(n, m);
    for (int k = static_cast<int>(ts.size()) - 1; k >= 0; --k) {
        const int t = ts[k];
        const double abar = sched.alpha_bar[t];
        const double abar_prev = k > 0 ? sched.alpha_bar[ts[k - 1]] : 1.0;
        const double beta = 1.0 - abar / abar_prev;
        const std::vector<int> tv(n, t);
        const Tensor<T> eps = model.predict_noise(x, tv, ms);
        const double coef = beta / std::sqrt(1.0 - abar);
        const double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - beta);
        const double sigma = k > 0 ? std::sqrt(beta * (1.0 - abar_prev) / (1.0 - abar)) : 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            double v = (x[i] - coef * eps[i]) * inv_sqrt_alpha;
            if (k > 0) v += sigma * dist(rng);
            x[i] = static_cast<T>(v);
        }
    }
    for (auto& v : x.values()) v = std::clamp(v, T{-1}, T{1});
    return x;
}

void save_denoiser(const Denoiser<float>& model, const std::filesystem::path& path) {
    write_checkpoint(model.to_checkpoint(), path);
}

Denoiser<float> load_denoiser(const std::filesystem::path& path) {
    return Denoiser<float>::from_checkpoint(read_checkpoint(path));
}

template class Denoiser<float>;
template class Denoiser<double>;
template Denoiser<double> Denoiser<float>::cast<double>() const;
template Denoiser<float> Denoiser<double>::cast<float>() const;

#define UNIDIFF_INSTANTIATE(T)                                                                                      \
    template FeatureMap<T> extract_features(const Denoiser<T>&, const Tensor<T>&, int, Modality, int,             \
                                            const NoiseSchedule&, const NoisePolicy&, std::uint64_t);              \
    template Tensor<T> resize_bilinear(const Tensor<T>&, int, int);                                               \
    template ParamPartition partition_parameters(const Denoiser<T>&);                                             \
    template std::map<std::string, std::string> frozen_hashes(const Denoiser<T>&);                                \
    template Tensor<T> sample_patches(const Denoiser<T>&, Modality, int, const NoiseSchedule&, std::uint64_t, int); \
    template Tensor<T> standard_normal<T>(std::vector<int>, std::uint64_t);

UNIDIFF_INSTANTIATE(float)
UNIDIFF_INSTANTIATE(double)

#undef UNIDIFF_INSTANTIATE

}  // namespace unidiff
