#include "unidiff/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace unidiff::nn {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstRowMap = Eigen::Map<const RowMat<T>>;

void require(bool cond, const char* what) {
    if (!cond) throw std::invalid_argument(what);
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
    T* d = dst.data();
    const T* s = src.data();
    for (std::size_t i = 0; i < src.size(); ++i) d[i] += s[i];
}

struct ConvGeom {
    int n, ci, h, w, co, k, stride, pad, ho, wo;
};

template <typename T>
void im2col(const T* x, const ConvGeom& gm, T* cols) {
    const int hw_out = gm.ho * gm.wo;
    for (int c = 0; c < gm.ci; ++c) {
        const T* xc = x + static_cast<std::size_t>(c) * gm.h * gm.w;
        for (int ky = 0; ky < gm.k; ++ky) {
            for (int kx = 0; kx < gm.k; ++kx) {
                T* row = cols + static_cast<std::size_t>((c * gm.k + ky) * gm.k + kx) * hw_out;
                for (int oy = 0; oy < gm.ho; ++oy) {
                    const int iy = oy * gm.stride - gm.pad + ky;
                    T* dst = row + oy * gm.wo;
                    if (iy < 0 || iy >= gm.h) {
                        std::fill(dst, dst + gm.wo, T{0});
                        continue;
                    }
                    const T* src = xc + static_cast<std::size_t>(iy) * gm.w;
                    const int lo = std::clamp((gm.pad - kx + gm.stride - 1) / gm.stride, 0, gm.wo);
                    const int hi = std::clamp((gm.w - 1 + gm.pad - kx) / gm.stride + 1, lo, gm.wo);
                    std::fill(dst, dst + lo, T{0});
                    if (gm.stride == 1) {
                        std::copy(src + lo - gm.pad + kx, src + hi - gm.pad + kx, dst + lo);
                    } else {
                        for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * gm.stride - gm.pad + kx];
                    }
                    std::fill(dst + hi, dst + gm.wo, T{0});
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* cols, const ConvGeom& gm, T* dx) {
    const int hw_out = gm.ho * gm.wo;
    for (int c = 0; c < gm.ci; ++c) {
        T* xc = dx + static_cast<std::size_t>(c) * gm.h * gm.w;
        for (int ky = 0; ky < gm.k; ++ky) {
            for (int kx = 0; kx < gm.k; ++kx) {
                const T* row = cols + static_cast<std::size_t>((c * gm.k + ky) * gm.k + kx) * hw_out;
                for (int oy = 0; oy < gm.ho; ++oy) {
                    const int iy = oy * gm.stride - gm.pad + ky;
                    if (iy < 0 || iy >= gm.h) continue;
                    const T* src = row + oy * gm.wo;
                    T* dst = xc + static_cast<std::size_t>(iy) * gm.w;
                    const int lo = std::clamp((gm.pad - kx + gm.stride - 1) / gm.stride, 0, gm.wo);
                    const int hi = std::clamp((gm.w - 1 + gm.pad - kx) / gm.stride + 1, lo, gm.wo);
                    for (int ox = lo; ox < hi; ++ox) dst[ox * gm.stride - gm.pad + kx] += src[ox];
                }
            }
        }
    }
}

// Stride-1 convolution as k*k shifted GEMMs over a zero-padded copy of the
// input. Outputs are computed on an h x (w + 2*pad) grid whose extra columns
// are discarded, so every shifted operand is a contiguous window.
template <typename T>
struct ShiftedConv {
    int wp, plane, ext;
    explicit ShiftedConv(const ConvGeom& gm)
        : wp(gm.w + 2 * gm.pad), plane((gm.h + 2 * gm.pad) * (gm.w + 2 * gm.pad) + 2 * gm.pad), ext(gm.h * wp) {}

    int offset(const ConvGeom& gm, int tap) const { return (tap / gm.k) * wp + tap % gm.k; }

    void pad(const ConvGeom& gm, const T* x, T* xp) const {
        std::fill(xp, xp + static_cast<std::size_t>(gm.ci) * plane, T{0});
        for (int c = 0; c < gm.ci; ++c) {
            for (int y = 0; y < gm.h; ++y) {
                const T* src = x + (static_cast<std::size_t>(c) * gm.h + y) * gm.w;
                std::copy(src, src + gm.w, xp + static_cast<std::size_t>(c) * plane + (y + gm.pad) * wp + gm.pad);
            }
        }
    }

    // [co, ci, k, k] -> [k*k, co, ci]
    static AlignedVector<T> split_taps(const ConvGeom& gm, const T* w) {
        const int kk = gm.k * gm.k;
        AlignedVector<T> out(static_cast<std::size_t>(kk) * gm.co * gm.ci);
        for (int o = 0; o < gm.co; ++o)
            for (int c = 0; c < gm.ci; ++c)
                for (int t = 0; t < kk; ++t)
                    out[(static_cast<std::size_t>(t) * gm.co + o) * gm.ci + c] = w[(static_cast<std::size_t>(o) * gm.ci + c) * kk + t];
        return out;
    }
};

template <typename T>
using StridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using MutStridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

}  // namespace

template <typename T>
Var Graph<T>::input(Tensor<T> value) {
    Node node;
    node.owned = std::move(value);
    nodes_.push_back(std::move(node));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var Graph<T>::param(const Tensor<T>& value, Tensor<T>* grad_sink) {
    Node node;
    node.external = &value;
    node.grad_sink = record_ ? grad_sink : nullptr;
    node.requires_grad = record_ && grad_sink != nullptr;
    if (grad_sink && !grad_sink->same_shape(value)) {
        throw std::invalid_argument("gradient buffer shape mismatch");
    }
    nodes_.push_back(std::move(node));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
const Tensor<T>& Graph<T>::value(Var v) const {
    const Node& node = nodes_.at(v.id);
    return node.external ? *node.external : node.owned;
}

template <typename T>
Var Graph<T>::push(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn) {
    Node node;
    node.owned = std::move(value);
    if (record_) {
        for (Var in : inputs) {
            if (in.valid() && nodes_.at(in.id).requires_grad) node.requires_grad = true;
        }
        if (node.requires_grad) node.backward = std::move(fn);
    }
    nodes_.push_back(std::move(node));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Tensor<T>& Graph<T>::grad(Var v) {
    Node& node = nodes_.at(v.id);
    node.has_grad = true;
    if (node.grad_sink) return *node.grad_sink;
    if (node.grad.empty() && !value(v).empty()) node.grad = Tensor<T>(value(v).shape());
    return node.grad;
}

template <typename T>
void Graph<T>::backward(Var loss) {
    if (!record_) throw std::logic_error("backward on a non-recording graph");
    if (value(loss).size() != 1) throw std::invalid_argument("backward needs a scalar loss");
    if (!requires_grad(loss)) return;
    grad(loss)[0] = T{1};
    for (int id = loss.id; id >= 0; --id) {
        Node& node = nodes_[id];
        if (!node.requires_grad || !node.has_grad || !node.backward) continue;
        Tensor<T> g = std::move(node.grad);
        node.backward(*this, Var{id}, g);
        node.backward = nullptr;
    }
}

template <typename T>
Var conv2d(Graph<T>& g, Var x, Var weight, Var bias, int stride) {
    const Tensor<T>& xv = g.value(x);
    const Tensor<T>& wv = g.value(weight);
    require(xv.rank() == 4 && wv.rank() == 4, "conv2d expects NCHW input and OIKK weight");
    require(xv.dim(1) == wv.dim(1), "conv2d channel mismatch");
    require(wv.dim(2) == wv.dim(3), "conv2d expects square kernels");
    ConvGeom gm{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(0), wv.dim(2), stride, wv.dim(2) / 2, 0, 0};
    gm.ho = (gm.h + 2 * gm.pad - gm.k) / stride + 1;
    gm.wo = (gm.w + 2 * gm.pad - gm.k) / stride + 1;
    const int kdim = gm.ci * gm.k * gm.k;
    const int hw_out = gm.ho * gm.wo;
    const bool direct = gm.k == 1 && stride == 1;

    Tensor<T> out({gm.n, gm.co, gm.ho, gm.wo});
    const T* bptr = bias.valid() ? g.value(bias).data() : nullptr;
    if (stride == 1 && gm.k > 1) {
        const ShiftedConv<T> sc(gm);
        const AlignedVector<T> taps = ShiftedConv<T>::split_taps(gm, wv.data());
        AlignedVector<T> xp(static_cast<std::size_t>(gm.ci) * sc.plane);
        RowMat<T> acc(gm.co, sc.ext);
        for (int n = 0; n < gm.n; ++n) {
            sc.pad(gm, xv.data() + static_cast<std::size_t>(n) * gm.ci * gm.h * gm.w, xp.data());
            acc.setZero();
            for (int t = 0; t < gm.k * gm.k; ++t) {
                ConstRowMap<T> wt(taps.data() + static_cast<std::size_t>(t) * gm.co * gm.ci, gm.co, gm.ci);
                acc.noalias() += wt * StridedMap<T>(xp.data() + sc.offset(gm, t), gm.ci, sc.ext, Eigen::OuterStride<>(sc.plane));
            }
            T* on = out.data() + static_cast<std::size_t>(n) * gm.co * hw_out;
            for (int o = 0; o < gm.co; ++o) {
                const T b = bptr ? bptr[o] : T{0};
                for (int y = 0; y < gm.ho; ++y) {
                    const T* src = acc.data() + static_cast<std::size_t>(o) * sc.ext + y * sc.wp;
                    T* dst = on + static_cast<std::size_t>(o) * hw_out + y * gm.wo;
                    for (int x0 = 0; x0 < gm.wo; ++x0) dst[x0] = src[x0] + b;
                }
            }
        }
        return g.push(std::move(out), {x, weight, bias}, [x, weight, bias, gm, hw_out](Graph<T>& g, Var, const Tensor<T>& dy) {
            const ShiftedConv<T> sc(gm);
            const bool need_x = g.requires_grad(x);
            const bool need_w = g.requires_grad(weight);
            const bool need_b = bias.valid() && g.requires_grad(bias);
            const int kk = gm.k * gm.k;
            const AlignedVector<T> taps = ShiftedConv<T>::split_taps(gm, g.value(weight).data());
            AlignedVector<T> dtaps(need_w ? static_cast<std::size_t>(kk) * gm.co * gm.ci : 0, T{0});
            AlignedVector<T> xp(need_w ? static_cast<std::size_t>(gm.ci) * sc.plane : 0);
            AlignedVector<T> dxp(need_x ? static_cast<std::size_t>(gm.ci) * sc.plane : 0);
            RowMat<T> dext = RowMat<T>::Zero(gm.co, sc.ext);
            for (int n = 0; n < gm.n; ++n) {
                const T* dyn = dy.data() + static_cast<std::size_t>(n) * gm.co * hw_out;
                for (int o = 0; o < gm.co; ++o)
                    for (int y = 0; y < gm.ho; ++y)
                        std::copy(dyn + static_cast<std::size_t>(o) * hw_out + y * gm.wo, dyn + static_cast<std::size_t>(o) * hw_out + (y + 1) * gm.wo,
                                  dext.data() + static_cast<std::size_t>(o) * sc.ext + y * sc.wp);
                if (need_x) {
                    std::fill(dxp.begin(), dxp.end(), T{0});
                    for (int t = 0; t < kk; ++t) {
                        ConstRowMap<T> wt(taps.data() + static_cast<std::size_t>(t) * gm.co * gm.ci, gm.co, gm.ci);
                        MutStridedMap<T>(dxp.data() + sc.offset(gm, t), gm.ci, sc.ext, Eigen::OuterStride<>(sc.plane)).noalias() +=
                            wt.transpose() * dext;
                    }
                    T* dxn = g.grad(x).data() + static_cast<std::size_t>(n) * gm.ci * gm.h * gm.w;
                    for (int c = 0; c < gm.ci; ++c)
                        for (int y = 0; y < gm.h; ++y) {
                            const T* src = dxp.data() + static_cast<std::size_t>(c) * sc.plane + (y + gm.pad) * sc.wp + gm.pad;
                            T* dst = dxn + (static_cast<std::size_t>(c) * gm.h + y) * gm.w;
                            for (int x0 = 0; x0 < gm.w; ++x0) dst[x0] += src[x0];
                        }
                }
                if (need_w) {
                    sc.pad(gm, g.value(x).data() + static_cast<std::size_t>(n) * gm.ci * gm.h * gm.w, xp.data());
                    for (int t = 0; t < kk; ++t) {
                        RowMap<T>(dtaps.data() + static_cast<std::size_t>(t) * gm.co * gm.ci, gm.co, gm.ci).noalias() +=
                            dext * StridedMap<T>(xp.data() + sc.offset(gm, t), gm.ci, sc.ext, Eigen::OuterStride<>(sc.plane)).transpose();
                    }
                }
                if (need_b) {
                    T* db = g.grad(bias).data();
                    for (int o = 0; o < gm.co; ++o) db[o] += dext.row(o).sum();
                }
            }
            if (need_w) {
                T* dw = g.grad(weight).data();
                for (int o = 0; o < gm.co; ++o)
                    for (int c = 0; c < gm.ci; ++c)
                        for (int t = 0; t < kk; ++t)
                            dw[(static_cast<std::size_t>(o) * gm.ci + c) * kk + t] += dtaps[(static_cast<std::size_t>(t) * gm.co + o) * gm.ci + c];
            }
        });
    }

    AlignedVector<T> cols(direct ? 0 : static_cast<std::size_t>(kdim) * hw_out);
    ConstRowMap<T> wm(wv.data(), gm.co, kdim);
    for (int n = 0; n < gm.n; ++n) {
        const T* xn = xv.data() + static_cast<std::size_t>(n) * gm.ci * gm.h * gm.w;
        const T* cptr = xn;
        if (!direct) {
            im2col(xn, gm, cols.data());
            cptr = cols.data();
        }
        RowMap<T> om(out.data() + static_cast<std::size_t>(n) * gm.co * hw_out, gm.co, hw_out);
        om.noalias() = wm * ConstRowMap<T>(cptr, kdim, hw_out);
        if (bptr) {
            for (int c = 0; c < gm.co; ++c) om.row(c).array() += bptr[c];
        }
    }

    return g.push(std::move(out), {x, weight, bias}, [x, weight, bias, gm, kdim, hw_out, direct](Graph<T>& g, Var, const Tensor<T>& dy) {
        const Tensor<T>& xv = g.value(x);
        const Tensor<T>& wv = g.value(weight);
        ConstRowMap<T> wm(wv.data(), gm.co, kdim);
        const bool need_x = g.requires_grad(x);
        const bool need_w = g.requires_grad(weight);
        const bool need_b = bias.valid() && g.requires_grad(bias);
        AlignedVector<T> cols(direct ? 0 : static_cast<std::size_t>(kdim) * hw_out);
        AlignedVector<T> dcols(direct ? 0 : static_cast<std::size_t>(kdim) * hw_out);
        for (int n = 0; n < gm.n; ++n) {
            ConstRowMap<T> dym(dy.data() + static_cast<std::size_t>(n) * gm.co * hw_out, gm.co, hw_out);
            if (need_x) {
                T* dxn = g.grad(x).data() + static_cast<std::size_t>(n) * gm.ci * gm.h * gm.w;
                if (direct) {
                    RowMap<T>(dxn, kdim, hw_out).noalias() += wm.transpose() * dym;
                } else {
                    RowMap<T>(dcols.data(), kdim, hw_out).noalias() = wm.transpose() * dym;
                    col2im(dcols.data(), gm, dxn);
                }
            }
            if (need_w) {
                const T* xn = xv.data() + static_cast<std::size_t>(n) * gm.ci * gm.h * gm.w;
                const T* cptr = xn;
                if (!direct) {
                    im2col(xn, gm, cols.data());
                    cptr = cols.data();
                }
                RowMap<T>(g.grad(weight).data(), gm.co, kdim).noalias() += dym * ConstRowMap<T>(cptr, kdim, hw_out).transpose();
            }
            if (need_b) {
                T* db = g.grad(bias).data();
                for (int c = 0; c < gm.co; ++c) db[c] += dym.row(c).sum();
            }
        }
    });
}

template <typename T>
Var group_norm(Graph<T>& g, Var x, int groups, double eps) {
    const Tensor<T>& xv = g.value(x);
    require(xv.rank() == 4, "group_norm expects NCHW");
    const int n = xv.dim(0), c = xv.dim(1);
    const std::size_t hw = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
    require(groups > 0 && c % groups == 0, "group_norm: channels not divisible by groups");
    const std::size_t span = static_cast<std::size_t>(c / groups) * hw;
    auto rstd = std::make_shared<AlignedVector<T>>(static_cast<std::size_t>(n) * groups);
    Tensor<T> out(xv.shape());
    for (int i = 0; i < n * groups; ++i) {
        const T* src = xv.data() + i * span;
        double sum = 0.0;
        for (std::size_t j = 0; j < span; ++j) sum += src[j];
        // Any NaN or infinity in the group propagates into the sum.
        if (!std::isfinite(sum)) throw std::domain_error("group_norm: non-finite input");
        const double mean = sum / static_cast<double>(span);
        double sq = 0.0;
        for (std::size_t j = 0; j < span; ++j) {
            const double d = src[j] - mean;
            sq += d * d;
        }
        const double r = 1.0 / std::sqrt(sq / static_cast<double>(span) + eps);
        (*rstd)[i] = static_cast<T>(r);
        T* dst = out.data() + i * span;
        for (std::size_t j = 0; j < span; ++j) dst[j] = static_cast<T>((src[j] - mean) * r);
    }
    return g.push(std::move(out), {x}, [x, rstd, span](Graph<T>& g, Var self, const Tensor<T>& dy) {
        const Tensor<T>& xhat = g.value(self);
        T* dx = g.grad(x).data();
        const std::size_t count = rstd->size();
        for (std::size_t i = 0; i < count; ++i) {
            const T* gy = dy.data() + i * span;
            const T* xh = xhat.data() + i * span;
            double mean_dy = 0.0, mean_dy_xh = 0.0;
            for (std::size_t j = 0; j < span; ++j) {
                mean_dy += gy[j];
                mean_dy_xh += static_cast<double>(gy[j]) * xh[j];
            }
            mean_dy /= static_cast<double>(span);
            mean_dy_xh /= static_cast<double>(span);
            const double r = (*rstd)[i];
            T* d = dx + i * span;
            for (std::size_t j = 0; j < span; ++j) {
                d[j] += static_cast<T>(r * (gy[j] - mean_dy - xh[j] * mean_dy_xh));
            }
        }
    });
}

template <typename T>
Var scale_shift(Graph<T>& g, Var x, Var scale, Var shift) {
    const Tensor<T>& xv = g.value(x);
    const Tensor<T>& sv = g.value(scale);
    const Tensor<T>& bv = g.value(shift);
    require(xv.rank() == 4, "scale_shift expects NCHW");
    const int n = xv.dim(0), c = xv.dim(1);
    const std::size_t hw = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
    const bool per_sample = sv.rank() == 2;
    require(sv.same_shape(bv), "scale_shift: scale/shift shape mismatch");
    require(per_sample ? (sv.dim(0) == n && sv.dim(1) == c) : (sv.rank() == 1 && sv.dim(0) == c),
            "scale_shift: parameter shape does not match channels");
    Tensor<T> out(xv.shape());
    for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t pidx = per_sample ? static_cast<std::size_t>(i) * c + ch : ch;
            const T s = sv[pidx], b = bv[pidx];
            const T* src = xv.data() + (static_cast<std::size_t>(i) * c + ch) * hw;
            T* dst = out.data() + (static_cast<std::size_t>(i) * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j) dst[j] = src[j] * s + b;
        }
    }
    return g.push(std::move(out), {x, scale, shift}, [x, scale, shift, n, c, hw, per_sample](Graph<T>& g, Var, const Tensor<T>& dy) {
        const Tensor<T>& xv = g.value(x);
        const Tensor<T>& sv = g.value(scale);
        const bool need_x = g.requires_grad(x), need_s = g.requires_grad(scale), need_b = g.requires_grad(shift);
        for (int i = 0; i < n; ++i) {
            for (int ch = 0; ch < c; ++ch) {
                const std::size_t pidx = per_sample ? static_cast<std::size_t>(i) * c + ch : ch;
                const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * hw;
                const T* gy = dy.data() + off;
                if (need_x) {
                    T* dx = g.grad(x).data() + off;
                    const T s = sv[pidx];
                    for (std::size_t j = 0; j < hw; ++j) dx[j] += gy[j] * s;
                }
                if (need_s) {
                    const T* src = xv.data() + off;
                    T acc{0};
                    for (std::size_t j = 0; j < hw; ++j) acc += gy[j] * src[j];
                    g.grad(scale)[pidx] += acc;
                }
                if (need_b) {
                    T acc{0};
                    for (std::size_t j = 0; j < hw; ++j) acc += gy[j];
                    g.grad(shift)[pidx] += acc;
                }
            }
        }
    });
}

template <typename T>
Var silu(Graph<T>& g, Var x) {
    const Tensor<T>& xv = g.value(x);
    Tensor<T> out(xv.shape());
    const auto n = static_cast<Eigen::Index>(xv.size());
    const auto xa = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(xv.data(), n);
    Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>(out.data(), n) = xa / (T{1} + (-xa).exp());
    return g.push(std::move(out), {x}, [x](Graph<T>& g, Var, const Tensor<T>& dy) {
        const Tensor<T>& xv = g.value(x);
        const auto n = static_cast<Eigen::Index>(xv.size());
        const auto xa = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(xv.data(), n);
        const auto ga = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(dy.data(), n);
        const Eigen::Array<T, Eigen::Dynamic, 1> s = T{1} / (T{1} + (-xa).exp());
        Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>(g.grad(x).data(), n) += ga * s * (T{1} + xa * (T{1} - s));
    });
}

template <typename T>
Var relu(Graph<T>& g, Var x) {
    const Tensor<T>& xv = g.value(x);
    Tensor<T> out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > T{0} ? xv[i] : T{0};
    return g.push(std::move(out), {x}, [x](Graph<T>& g, Var, const Tensor<T>& dy) {
        const Tensor<T>& xv = g.value(x);
        Tensor<T>& dx = g.grad(x);
        for (std::size_t i = 0; i < xv.size(); ++i) {
            if (xv[i] > T{0}) dx[i] += dy[i];
        }
    });
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
    const Tensor<T>& av = g.value(a);
    const Tensor<T>& bv = g.value(b);
    require(av.same_shape(bv), "add: shape mismatch");
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
    return g.push(std::move(out), {a, b}, [a, b](Graph<T>& g, Var, const Tensor<T>& dy) {
        if (g.requires_grad(a)) accumulate(g.grad(a), dy);
        if (g.requires_grad(b)) accumulate(g.grad(b), dy);
    });
}

template <typename T>
Var add_scalar(Graph<T>& g, Var a, T s) {
    const Tensor<T>& av = g.value(a);
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + s;
    return g.push(std::move(out), {a}, [a](Graph<T>& g, Var, const Tensor<T>& dy) { accumulate(g.grad(a), dy); });
}

template <typename T>
Var concat_channels(Graph<T>& g, Var a, Var b) {
    const Tensor<T>& av = g.value(a);
    const Tensor<T>& bv = g.value(b);
    require(av.rank() == 4 && bv.rank() == 4 && av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(2) && av.dim(3) == bv.dim(3),
            "concat_channels: incompatible shapes");
    const int n = av.dim(0), ca = av.dim(1), cb = bv.dim(1);
    const std::size_t hw = static_cast<std::size_t>(av.dim(2)) * av.dim(3);
    Tensor<T> out({n, ca + cb, av.dim(2), av.dim(3)});
    for (int i = 0; i < n; ++i) {
        std::copy_n(av.data() + i * ca * hw, ca * hw, out.data() + i * (ca + cb) * hw);
        std::copy_n(bv.data() + i * cb * hw, cb * hw, out.data() + (i * (ca + cb) + ca) * hw);
    }
    return g.push(std::move(out), {a, b}, [a, b, n, ca, cb, hw](Graph<T>& g, Var, const Tensor<T>& dy) {
        for (int i = 0; i < n; ++i) {
            if (g.requires_grad(a)) {
                T* d = g.grad(a).data() + i * ca * hw;
                const T* s = dy.data() + i * (ca + cb) * hw;
                for (std::size_t j = 0; j < ca * hw; ++j) d[j] += s[j];
            }
            if (g.requires_grad(b)) {
                T* d = g.grad(b).data() + i * cb * hw;
                const T* s = dy.data() + (i * (ca + cb) + ca) * hw;
                for (std::size_t j = 0; j < cb * hw; ++j) d[j] += s[j];
            }
        }
    });
}

template <typename T>
Var upsample_nearest2x(Graph<T>& g, Var x) {
    const Tensor<T>& xv = g.value(x);
    require(xv.rank() == 4, "upsample expects NCHW");
    const int planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    Tensor<T> out({xv.dim(0), xv.dim(1), 2 * h, 2 * w});
    for (int p = 0; p < planes; ++p) {
        const T* src = xv.data() + static_cast<std::size_t>(p) * h * w;
        T* dst = out.data() + static_cast<std::size_t>(p) * 4 * h * w;
        for (int y = 0; y < 2 * h; ++y) {
            for (int xx = 0; xx < 2 * w; ++xx) dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
        }
    }
    return g.push(std::move(out), {x}, [x, planes, h, w](Graph<T>& g, Var, const Tensor<T>& dy) {
        T* dx = g.grad(x).data();
        for (int p = 0; p < planes; ++p) {
            const T* src = dy.data() + static_cast<std::size_t>(p) * 4 * h * w;
            T* dst = dx + static_cast<std::size_t>(p) * h * w;
            for (int y = 0; y < 2 * h; ++y) {
                for (int xx = 0; xx < 2 * w; ++xx) dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
            }
        }
    });
}

template <typename T>
void softmax_rows(std::span<T> values, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        T* row = values.data() + static_cast<std::size_t>(r) * cols;
        const T mx = *std::max_element(row, row + cols);
        T sum{0};
        for (int c = 0; c < cols; ++c) {
            // Terms below e^-40 are dropped to keep subnormals out of later products.
            const T d = row[c] - mx;
            row[c] = d < T{-40} ? T{0} : std::exp(d);
            sum += row[c];
        }
        for (int c = 0; c < cols; ++c) row[c] /= sum;
    }
}

template <typename T>
Var attention(Graph<T>& g, Var qkv, int heads) {
    const Tensor<T>& qv = g.value(qkv);
    require(qv.rank() == 3 && heads > 0 && qv.dim(1) % (3 * heads) == 0, "attention: bad qkv shape");
    const int n = qv.dim(0), len = qv.dim(2);
    const int ch = qv.dim(1) / (3 * heads);
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(ch)));
    // Attention weights are kept for the backward pass: [n*heads, len, len].
    auto probs = std::make_shared<AlignedVector<T>>(static_cast<std::size_t>(n) * heads * len * len);
    Tensor<T> out({n, heads * ch, len});
    for (int b = 0; b < n * heads; ++b) {
        const T* base = qv.data() + static_cast<std::size_t>(b) * 3 * ch * len;
        ConstRowMap<T> q(base, ch, len), k(base + ch * len, ch, len), v(base + 2 * ch * len, ch, len);
        RowMap<T> p(probs->data() + static_cast<std::size_t>(b) * len * len, len, len);
        p.noalias() = q.transpose() * k;
        p *= scale;
        softmax_rows(std::span<T>(p.data(), static_cast<std::size_t>(len) * len), len, len);
        RowMap<T>(out.data() + static_cast<std::size_t>(b) * ch * len, ch, len).noalias() = v * p.transpose();
    }
    return g.push(std::move(out), {qkv}, [qkv, probs, n, heads, ch, len, scale](Graph<T>& g, Var, const Tensor<T>& dy) {
        const Tensor<T>& qv = g.value(qkv);
        Tensor<T>& dqkv = g.grad(qkv);
        RowMat<T> dp(len, len), ds(len, len);
        for (int b = 0; b < n * heads; ++b) {
            const T* base = qv.data() + static_cast<std::size_t>(b) * 3 * ch * len;
            T* dbase = dqkv.data() + static_cast<std::size_t>(b) * 3 * ch * len;
            ConstRowMap<T> q(base, ch, len), k(base + ch * len, ch, len), v(base + 2 * ch * len, ch, len);
            ConstRowMap<T> p(probs->data() + static_cast<std::size_t>(b) * len * len, len, len);
            ConstRowMap<T> dout(dy.data() + static_cast<std::size_t>(b) * ch * len, ch, len);
            RowMap<T>(dbase + 2 * ch * len, ch, len).noalias() += dout * p;
            dp.noalias() = dout.transpose() * v;
            for (int t = 0; t < len; ++t) {
                const T dot = dp.row(t).dot(p.row(t));
                ds.row(t) = p.row(t).cwiseProduct((dp.row(t).array() - dot).matrix());
            }
            ds *= scale;
            RowMap<T>(dbase, ch, len).noalias() += k * ds.transpose();
            RowMap<T>(dbase + ch * len, ch, len).noalias() += q * ds;
        }
    });
}

template <typename T>
Var reshape(Graph<T>& g, Var x, std::vector<int> shape) {
    Tensor<T> out = g.value(x).reshaped(std::move(shape));
    return g.push(std::move(out), {x}, [x](Graph<T>& g, Var, const Tensor<T>& dy) { accumulate(g.grad(x), dy); });
}

template <typename T>
Var linear(Graph<T>& g, Var x, Var weight, Var bias) {
    const Tensor<T>& xv = g.value(x);
    const Tensor<T>& wv = g.value(weight);
    require(xv.rank() == 2 && wv.rank() == 2 && xv.dim(1) == wv.dim(1), "linear: shape mismatch");
    const int n = xv.dim(0), in = xv.dim(1), out_dim = wv.dim(0);
    Tensor<T> out({n, out_dim});
    RowMap<T> om(out.data(), n, out_dim);
    om.noalias() = ConstRowMap<T>(xv.data(), n, in) * ConstRowMap<T>(wv.data(), out_dim, in).transpose();
    if (bias.valid()) {
        const Tensor<T>& bv = g.value(bias);
        require(bv.size() == static_cast<std::size_t>(out_dim), "linear: bias size mismatch");
        for (int i = 0; i < n; ++i) {
            for (int o = 0; o < out_dim; ++o) om(i, o) += bv[o];
        }
    }
    return g.push(std::move(out), {x, weight, bias}, [x, weight, bias, n, in, out_dim](Graph<T>& g, Var, const Tensor<T>& dy) {
        ConstRowMap<T> dym(dy.data(), n, out_dim);
        if (g.requires_grad(x)) {
            RowMap<T>(g.grad(x).data(), n, in).noalias() += dym * ConstRowMap<T>(g.value(weight).data(), out_dim, in);
        }
        if (g.requires_grad(weight)) {
            RowMap<T>(g.grad(weight).data(), out_dim, in).noalias() += dym.transpose() * ConstRowMap<T>(g.value(x).data(), n, in);
        }
        if (bias.valid() && g.requires_grad(bias)) {
            T* db = g.grad(bias).data();
            for (int o = 0; o < out_dim; ++o) db[o] += dym.col(o).sum();
        }
    });
}

template <typename T>
Var embedding(Graph<T>& g, Var table, std::span<const int> ids) {
    const Tensor<T>& tv = g.value(table);
    require(tv.rank() == 2, "embedding: table must be [K, E]");
    const int k = tv.dim(0), e = tv.dim(1), n = static_cast<int>(ids.size());
    Tensor<T> out({n, e});
    for (int i = 0; i < n; ++i) {
        require(ids[i] >= 0 && ids[i] < k, "embedding: id out of range");
        std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * e, e, out.data() + static_cast<std::size_t>(i) * e);
    }
    std::vector<int> idv(ids.begin(), ids.end());
    return g.push(std::move(out), {table}, [table, idv, e](Graph<T>& g, Var, const Tensor<T>& dy) {
        T* dt = g.grad(table).data();
        for (std::size_t i = 0; i < idv.size(); ++i) {
            for (int j = 0; j < e; ++j) dt[static_cast<std::size_t>(idv[i]) * e + j] += dy[i * e + j];
        }
    });
}

template <typename T>
Var mse(Graph<T>& g, Var pred, const Tensor<T>& target) {
    const Tensor<T>& pv = g.value(pred);
    require(pv.same_shape(target), "mse: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const double d = static_cast<double>(pv[i]) - static_cast<double>(target[i]);
        acc += d * d;
    }
    const double count = static_cast<double>(pv.size());
    Tensor<T> out({1}, static_cast<T>(acc / count));
    auto tgt = std::make_shared<Tensor<T>>(target);
    return g.push(std::move(out), {pred}, [pred, tgt, count](Graph<T>& g, Var, const Tensor<T>& dy) {
        const Tensor<T>& pv = g.value(pred);
        Tensor<T>& dp = g.grad(pred);
        const T s = static_cast<T>(2.0 / count) * dy[0];
        for (std::size_t i = 0; i < pv.size(); ++i) dp[i] += s * (pv[i] - (*tgt)[i]);
    });
}

template <typename T>
Var softmax_cross_entropy(Graph<T>& g, Var logits, std::span<const int> labels) {
    const Tensor<T>& lv = g.value(logits);
    require(lv.rank() == 2 && lv.dim(0) == static_cast<int>(labels.size()), "cross-entropy: shape mismatch");
    const int n = lv.dim(0), k = lv.dim(1);
    auto probs = std::make_shared<Tensor<T>>(lv);
    softmax_rows(probs->values(), n, k);
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        require(labels[i] >= 0 && labels[i] < k, "cross-entropy: label out of range");
        loss -= std::log(std::max(static_cast<double>((*probs)[static_cast<std::size_t>(i) * k + labels[i]]), 1e-300));
    }
    std::vector<int> lab(labels.begin(), labels.end());
    Tensor<T> out({1}, static_cast<T>(loss / n));
    return g.push(std::move(out), {logits}, [logits, probs, lab, n, k](Graph<T>& g, Var, const Tensor<T>& dy) {
        Tensor<T>& dl = g.grad(logits);
        const T s = dy[0] / static_cast<T>(n);
        for (int i = 0; i < n; ++i) {
            for (int c = 0; c < k; ++c) {
                const std::size_t idx = static_cast<std::size_t>(i) * k + c;
                dl[idx] += s * ((*probs)[idx] - (c == lab[i] ? T{1} : T{0}));
            }
        }
    });
}

#define UNIDIFF_INSTANTIATE(T)                                                        \
    template class Graph<T>;                                                          \
    template Var conv2d<T>(Graph<T>&, Var, Var, Var, int);                            \
    template Var group_norm<T>(Graph<T>&, Var, int, double);                          \
    template Var scale_shift<T>(Graph<T>&, Var, Var, Var);                            \
    template Var silu<T>(Graph<T>&, Var);                                             \
    template Var relu<T>(Graph<T>&, Var);                                             \
    template Var add<T>(Graph<T>&, Var, Var);                                         \
    template Var add_scalar<T>(Graph<T>&, Var, T);                                    \
    template Var concat_channels<T>(Graph<T>&, Var, Var);                             \
    template Var upsample_nearest2x<T>(Graph<T>&, Var);                               \
    template Var attention<T>(Graph<T>&, Var, int);                                   \
    template Var reshape<T>(Graph<T>&, Var, std::vector<int>);                        \
    template Var linear<T>(Graph<T>&, Var, Var, Var);                                 \
    template Var embedding<T>(Graph<T>&, Var, std::span<const int>);                  \
    template Var mse<T>(Graph<T>&, Var, const Tensor<T>&);                            \
    template Var softmax_cross_entropy<T>(Graph<T>&, Var, std::span<const int>);      \
    template void softmax_rows<T>(std::span<T>, int, int);

UNIDIFF_INSTANTIATE(float)
UNIDIFF_INSTANTIATE(double)

#undef UNIDIFF_INSTANTIATE

}  // namespace unidiff::nn
