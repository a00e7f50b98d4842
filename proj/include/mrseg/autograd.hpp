#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mrseg/tensor.hpp"

namespace mrseg::ag {

// Reverse-mode tape over shared_ptr graph nodes. A graph is built per
// forward pass; backward() walks it once. Leaves created with param()
// accumulate gradients across a single backward call and are reusable
// between passes after zero_grad().
template <typename T>
struct Node {
    Array<T> value;
    Array<T> grad;  // allocated on first accumulation, same shape as value
    bool requires_grad = false;
    bool backward_ran = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void()> backward_fn;

    void ensure_grad() {
        if (grad.data.empty()) grad = Array<T>::zeros(value.shape);
    }
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
NodePtr<T> constant(Array<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    return n;
}

template <typename T>
NodePtr<T> param(Array<T> v) {
    auto n = constant(std::move(v));
    n->requires_grad = true;
    return n;
}

template <typename T>
void zero_grad(const NodePtr<T>& n) {
    n->grad = Array<T>::zeros(n->value.shape);
    n->backward_ran = false;
}

namespace detail {

template <typename T>
NodePtr<T> make_op(Array<T> value, std::vector<NodePtr<T>> inputs) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->inputs = std::move(inputs);
    for (const auto& i : n->inputs)
        if (i->requires_grad) {
            n->requires_grad = true;
            break;
        }
    return n;
}

inline int64_t ceil_div(int64_t a, int64_t b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); }
inline int64_t floor_div(int64_t a, int64_t b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

struct Dims5 {
    int64_t n, c, d, h, w;
};

inline Dims5 as5(const std::vector<int64_t>& s, const char* what) {
    if (s.size() != 5) throw ConfigError(std::string(what) + ": expected 5-d [N,C,D,H,W], got " + shape_str(s));
    return {s[0], s[1], s[2], s[3], s[4]};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution family
// ---------------------------------------------------------------------------

// Cross-correlation, cubic kernel. Output spatial dim = floor((D+2p-k)/s)+1.
template <typename T>
NodePtr<T> conv3d(const NodePtr<T>& x, const NodePtr<T>& w, const NodePtr<T>& b,
                  int64_t stride = 1, int64_t padding = 0) {
    using detail::ceil_div;
    using detail::floor_div;
    const auto xd = detail::as5(x->value.shape, "conv3d input");
    const auto& ws = w->value.shape;
    if (ws.size() != 5 || ws[2] != ws[3] || ws[3] != ws[4])
        throw ConfigError("conv3d weight must be [Cout,Cin,k,k,k], got " + shape_str(ws));
    if (ws[1] != xd.c)
        throw ConfigError("conv3d weight Cin " + std::to_string(ws[1]) + " does not match input channels " +
                          std::to_string(xd.c));
    const int64_t Co = ws[0], Ci = xd.c, k = ws[2];
    require_shape(b->value, {Co}, "conv3d bias");
    if (stride < 1 || padding < 0) throw ConfigError("conv3d needs stride >= 1 and padding >= 0");

    const int64_t N = xd.n, D = xd.d, H = xd.h, W = xd.w;
    const int64_t Do = floor_div(D + 2 * padding - k, stride) + 1;
    const int64_t Ho = floor_div(H + 2 * padding - k, stride) + 1;
    const int64_t Wo = floor_div(W + 2 * padding - k, stride) + 1;
    if (D + 2 * padding < k || H + 2 * padding < k || W + 2 * padding < k)
        throw ConfigError("conv3d input too small for kernel " + std::to_string(k));

    Array<T> out = Array<T>::zeros({N, Co, Do, Ho, Wo});
    const T* xp = x->value.data.data();
    const T* wp = w->value.data.data();
    const T* bp = b->value.data.data();
    T* op = out.data.data();
    const int64_t s = stride, p = padding;

#pragma omp parallel for schedule(static)
    for (int64_t nco = 0; nco < N * Co; ++nco) {
        const int64_t n = nco / Co, co = nco % Co;
        T* oslab = op + nco * Do * Ho * Wo;
        std::fill(oslab, oslab + Do * Ho * Wo, bp[co]);
        for (int64_t ci = 0; ci < Ci; ++ci) {
            const T* xslab = xp + (n * Ci + ci) * D * H * W;
            const T* wk = wp + (co * Ci + ci) * k * k * k;
            for (int64_t kd = 0; kd < k; ++kd) {
                const int64_t zlo = std::max<int64_t>(0, ceil_div(p - kd, s));
                const int64_t zhi = std::min(Do - 1, floor_div(D - 1 + p - kd, s));
                for (int64_t kh = 0; kh < k; ++kh) {
                    const int64_t ylo = std::max<int64_t>(0, ceil_div(p - kh, s));
                    const int64_t yhi = std::min(Ho - 1, floor_div(H - 1 + p - kh, s));
                    for (int64_t kw = 0; kw < k; ++kw) {
                        const int64_t xlo = std::max<int64_t>(0, ceil_div(p - kw, s));
                        const int64_t xhi = std::min(Wo - 1, floor_div(W - 1 + p - kw, s));
                        if (xlo > xhi) continue;
                        const T wv = wk[(kd * k + kh) * k + kw];
                        for (int64_t zo = zlo; zo <= zhi; ++zo) {
                            const int64_t zi = zo * s + kd - p;
                            for (int64_t yo = ylo; yo <= yhi; ++yo) {
                                const int64_t yi = yo * s + kh - p;
                                const T* xrow = xslab + (zi * H + yi) * W + (kw - p);
                                T* orow = oslab + (zo * Ho + yo) * Wo;
                                if (s == 1) {
                                    for (int64_t xo = xlo; xo <= xhi; ++xo) orow[xo] += wv * xrow[xo];
                                } else {
                                    for (int64_t xo = xlo; xo <= xhi; ++xo) orow[xo] += wv * xrow[xo * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    auto node = detail::make_op(std::move(out), {x, w, b});
    if (!node->requires_grad) return node;
    Node<T>* o = node.get();
    Node<T>* xn = x.get();
    Node<T>* wn = w.get();
    Node<T>* bn = b.get();
    node->backward_fn = [=]() {
        const T* go = o->grad.data.data();
        if (bn->requires_grad) {
            bn->ensure_grad();
            T* db = bn->grad.data.data();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t co = 0; co < Co; ++co) {
                    const T* grow = go + (n * Co + co) * Do * Ho * Wo;
                    T acc = 0;
                    for (int64_t i = 0; i < Do * Ho * Wo; ++i) acc += grow[i];
                    db[co] += acc;
                }
        }
        if (wn->requires_grad) {
            wn->ensure_grad();
            T* dw = wn->grad.data.data();
            const T* xv = xn->value.data.data();
#pragma omp parallel for schedule(static)
            for (int64_t co = 0; co < Co; ++co) {
                for (int64_t ci = 0; ci < Ci; ++ci) {
                    T* dwk = dw + (co * Ci + ci) * k * k * k;
                    for (int64_t kd = 0; kd < k; ++kd) {
                        const int64_t zlo = std::max<int64_t>(0, ceil_div(p - kd, s));
                        const int64_t zhi = std::min(Do - 1, floor_div(D - 1 + p - kd, s));
                        for (int64_t kh = 0; kh < k; ++kh) {
                            const int64_t ylo = std::max<int64_t>(0, ceil_div(p - kh, s));
                            const int64_t yhi = std::min(Ho - 1, floor_div(H - 1 + p - kh, s));
                            for (int64_t kw = 0; kw < k; ++kw) {
                                const int64_t xlo = std::max<int64_t>(0, ceil_div(p - kw, s));
                                const int64_t xhi = std::min(Wo - 1, floor_div(W - 1 + p - kw, s));
                                if (xlo > xhi) continue;
                                T acc = 0;
                                for (int64_t n = 0; n < N; ++n) {
                                    const T* xslab = xv + (n * Ci + ci) * D * H * W;
                                    const T* gslab = go + (n * Co + co) * Do * Ho * Wo;
                                    for (int64_t zo = zlo; zo <= zhi; ++zo) {
                                        const int64_t zi = zo * s + kd - p;
                                        for (int64_t yo = ylo; yo <= yhi; ++yo) {
                                            const int64_t yi = yo * s + kh - p;
                                            const T* xrow = xslab + (zi * H + yi) * W + (kw - p);
                                            const T* grow = gslab + (zo * Ho + yo) * Wo;
                                            if (s == 1) {
                                                for (int64_t xo = xlo; xo <= xhi; ++xo)
                                                    acc += xrow[xo] * grow[xo];
                                            } else {
                                                for (int64_t xo = xlo; xo <= xhi; ++xo)
                                                    acc += xrow[xo * s] * grow[xo];
                                            }
                                        }
                                    }
                                }
                                dwk[(kd * k + kh) * k + kw] += acc;
                            }
                        }
                    }
                }
            }
        }
        if (xn->requires_grad) {
            xn->ensure_grad();
            T* dx = xn->grad.data.data();
            const T* wv = wn->value.data.data();
#pragma omp parallel for schedule(static)
            for (int64_t nci = 0; nci < N * Ci; ++nci) {
                const int64_t n = nci / Ci, ci = nci % Ci;
                T* dxslab = dx + nci * D * H * W;
                for (int64_t co = 0; co < Co; ++co) {
                    const T* gslab = go + (n * Co + co) * Do * Ho * Wo;
                    const T* wk = wv + (co * Ci + ci) * k * k * k;
                    for (int64_t kd = 0; kd < k; ++kd) {
                        const int64_t zlo = std::max<int64_t>(0, ceil_div(p - kd, s));
                        const int64_t zhi = std::min(Do - 1, floor_div(D - 1 + p - kd, s));
                        for (int64_t kh = 0; kh < k; ++kh) {
                            const int64_t ylo = std::max<int64_t>(0, ceil_div(p - kh, s));
                            const int64_t yhi = std::min(Ho - 1, floor_div(H - 1 + p - kh, s));
                            for (int64_t kw = 0; kw < k; ++kw) {
                                const int64_t xlo = std::max<int64_t>(0, ceil_div(p - kw, s));
                                const int64_t xhi = std::min(Wo - 1, floor_div(W - 1 + p - kw, s));
                                if (xlo > xhi) continue;
                                const T wval = wk[(kd * k + kh) * k + kw];
                                for (int64_t zo = zlo; zo <= zhi; ++zo) {
                                    const int64_t zi = zo * s + kd - p;
                                    for (int64_t yo = ylo; yo <= yhi; ++yo) {
                                        const int64_t yi = yo * s + kh - p;
                                        T* dxrow = dxslab + (zi * H + yi) * W + (kw - p);
                                        const T* grow = gslab + (zo * Ho + yo) * Wo;
                                        if (s == 1) {
                                            for (int64_t xo = xlo; xo <= xhi; ++xo)
                                                dxrow[xo] += wval * grow[xo];
                                        } else {
                                            for (int64_t xo = xlo; xo <= xhi; ++xo)
                                                dxrow[xo * s] += wval * grow[xo];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    return node;
}

// Stride-2 transposed convolution with a 2^3 kernel laid out [Cin,Cout,2,2,2].
// Output spatial dims are exactly twice the input's; adjoint of a stride-2 conv.
template <typename T>
NodePtr<T> conv_transpose3d(const NodePtr<T>& x, const NodePtr<T>& w, int64_t stride = 2) {
    if (stride != 2) throw ConfigError("conv_transpose3d supports stride 2 only");
    const auto xd = detail::as5(x->value.shape, "conv_transpose3d input");
    const auto& ws = w->value.shape;
    if (ws.size() != 5 || ws[0] != xd.c || ws[2] != 2 || ws[3] != 2 || ws[4] != 2)
        throw ConfigError("conv_transpose3d weight must be [Cin,Cout,2,2,2] with Cin matching input, got " +
                          shape_str(ws));
    const int64_t N = xd.n, Ci = xd.c, Co = ws[1];
    const int64_t D = xd.d, H = xd.h, W = xd.w;
    const int64_t Do = 2 * D, Ho = 2 * H, Wo = 2 * W;

    Array<T> out = Array<T>::zeros({N, Co, Do, Ho, Wo});
    const T* xp = x->value.data.data();
    const T* wp = w->value.data.data();
    T* op = out.data.data();

#pragma omp parallel for schedule(static)
    for (int64_t nco = 0; nco < N * Co; ++nco) {
        const int64_t n = nco / Co, co = nco % Co;
        T* oslab = op + nco * Do * Ho * Wo;
        for (int64_t zo = 0; zo < Do; ++zo)
            for (int64_t yo = 0; yo < Ho; ++yo)
                for (int64_t xo = 0; xo < Wo; ++xo) {
                    const int64_t widx = ((zo & 1) * 2 + (yo & 1)) * 2 + (xo & 1);
                    const int64_t xoff = ((zo / 2) * H + yo / 2) * W + xo / 2;
                    T acc = 0;
                    for (int64_t ci = 0; ci < Ci; ++ci)
                        acc += xp[(n * Ci + ci) * D * H * W + xoff] * wp[(ci * Co + co) * 8 + widx];
                    oslab[(zo * Ho + yo) * Wo + xo] = acc;
                }
    }

    auto node = detail::make_op(std::move(out), {x, w});
    if (!node->requires_grad) return node;
    Node<T>* o = node.get();
    Node<T>* xn = x.get();
    Node<T>* wn = w.get();
    node->backward_fn = [=]() {
        const T* go = o->grad.data.data();
        if (xn->requires_grad) {
            xn->ensure_grad();
            T* dx = xn->grad.data.data();
            const T* wv = wn->value.data.data();
#pragma omp parallel for schedule(static)
            for (int64_t nci = 0; nci < N * Ci; ++nci) {
                const int64_t n = nci / Ci, ci = nci % Ci;
                T* dxslab = dx + nci * D * H * W;
                for (int64_t z = 0; z < D; ++z)
                    for (int64_t y = 0; y < H; ++y)
                        for (int64_t x2 = 0; x2 < W; ++x2) {
                            T acc = 0;
                            for (int64_t co = 0; co < Co; ++co) {
                                const T* gslab = go + (n * Co + co) * Do * Ho * Wo;
                                const T* wk = wv + (ci * Co + co) * 8;
                                for (int64_t kd = 0; kd < 2; ++kd)
                                    for (int64_t kh = 0; kh < 2; ++kh)
                                        for (int64_t kw = 0; kw < 2; ++kw)
                                            acc += wk[(kd * 2 + kh) * 2 + kw] *
                                                   gslab[((2 * z + kd) * Ho + 2 * y + kh) * Wo + 2 * x2 + kw];
                            }
                            dxslab[(z * H + y) * W + x2] += acc;
                        }
            }
        }
        if (wn->requires_grad) {
            wn->ensure_grad();
            T* dw = wn->grad.data.data();
            const T* xv = xn->value.data.data();
#pragma omp parallel for schedule(static)
            for (int64_t ci = 0; ci < Ci; ++ci) {
                for (int64_t co = 0; co < Co; ++co) {
                    T* dwk = dw + (ci * Co + co) * 8;
                    for (int64_t kd = 0; kd < 2; ++kd)
                        for (int64_t kh = 0; kh < 2; ++kh)
                            for (int64_t kw = 0; kw < 2; ++kw) {
                                T acc = 0;
                                for (int64_t n = 0; n < N; ++n) {
                                    const T* xslab = xv + (n * Ci + ci) * D * H * W;
                                    const T* gslab = go + (n * Co + co) * Do * Ho * Wo;
                                    for (int64_t z = 0; z < D; ++z)
                                        for (int64_t y = 0; y < H; ++y)
                                            for (int64_t x2 = 0; x2 < W; ++x2)
                                                acc += xslab[(z * H + y) * W + x2] *
                                                       gslab[((2 * z + kd) * Ho + 2 * y + kh) * Wo + 2 * x2 + kw];
                                }
                                dwk[(kd * 2 + kh) * 2 + kw] += acc;
                            }
                }
            }
        }
    };
    return node;
}

// ---------------------------------------------------------------------------
// Pooling and resampling
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> avg_pool3d(const NodePtr<T>& x, int64_t k, int64_t stride) {
    const auto xd = detail::as5(x->value.shape, "avg_pool3d input");
    if (k < 1 || stride < 1) throw ConfigError("avg_pool3d needs k >= 1 and stride >= 1");
    if (xd.d < k || xd.h < k || xd.w < k) throw ConfigError("avg_pool3d input smaller than window");
    const int64_t N = xd.n, C = xd.c, D = xd.d, H = xd.h, W = xd.w;
    const int64_t Do = (D - k) / stride + 1, Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
    const T inv = T(1) / static_cast<T>(k * k * k);

    Array<T> out = Array<T>::zeros({N, C, Do, Ho, Wo});
    const T* xp = x->value.data.data();
    T* op = out.data.data();
#pragma omp parallel for schedule(static)
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* xslab = xp + nc * D * H * W;
        T* oslab = op + nc * Do * Ho * Wo;
        for (int64_t zo = 0; zo < Do; ++zo)
            for (int64_t yo = 0; yo < Ho; ++yo)
                for (int64_t xo = 0; xo < Wo; ++xo) {
                    T acc = 0;
                    for (int64_t kd = 0; kd < k; ++kd)
                        for (int64_t kh = 0; kh < k; ++kh)
                            for (int64_t kw = 0; kw < k; ++kw)
                                acc += xslab[((zo * stride + kd) * H + yo * stride + kh) * W + xo * stride + kw];
                    oslab[(zo * Ho + yo) * Wo + xo] = acc * inv;
                }
    }

    auto node = detail::make_op(std::move(out), {x});
    if (!node->requires_grad) return node;
    Node<T>* o = node.get();
    Node<T>* xn = x.get();
    const int64_t kk = k, ss = stride;
    node->backward_fn = [=]() {
        xn->ensure_grad();
        const T* go = o->grad.data.data();
        T* dx = xn->grad.data.data();
#pragma omp parallel for schedule(static)
        for (int64_t nc = 0; nc < N * C; ++nc) {
            T* dxslab = dx + nc * D * H * W;
            const T* gslab = go + nc * Do * Ho * Wo;
            for (int64_t zo = 0; zo < Do; ++zo)
                for (int64_t yo = 0; yo < Ho; ++yo)
                    for (int64_t xo = 0; xo < Wo; ++xo) {
                        const T g = gslab[(zo * Ho + yo) * Wo + xo] * inv;
                        for (int64_t kd = 0; kd < kk; ++kd)
                            for (int64_t kh = 0; kh < kk; ++kh)
                                for (int64_t kw = 0; kw < kk; ++kw)
                                    dxslab[((zo * ss + kd) * H + yo * ss + kh) * W + xo * ss + kw] += g;
                    }
        }
    };
    return node;
}

// 2^3 window, stride 2. Gradient routes to the first-in-scan-order maximum.
template <typename T>
NodePtr<T> max_pool3d(const NodePtr<T>& x) {
    const auto xd = detail::as5(x->value.shape, "max_pool3d input");
    if (xd.d % 2 || xd.h % 2 || xd.w % 2) throw ConfigError("max_pool3d needs even spatial dims");
    const int64_t N = xd.n, C = xd.c, D = xd.d, H = xd.h, W = xd.w;
    const int64_t Do = D / 2, Ho = H / 2, Wo = W / 2;

    Array<T> out = Array<T>::zeros({N, C, Do, Ho, Wo});
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out.numel()));
    const T* xp = x->value.data.data();
    T* op = out.data.data();
    int64_t* am = argmax->data();
#pragma omp parallel for schedule(static)
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* xslab = xp + nc * D * H * W;
        for (int64_t zo = 0; zo < Do; ++zo)
            for (int64_t yo = 0; yo < Ho; ++yo)
                for (int64_t xo = 0; xo < Wo; ++xo) {
                    T best = xslab[(2 * zo * H + 2 * yo) * W + 2 * xo];
                    int64_t bidx = (2 * zo * H + 2 * yo) * W + 2 * xo;
                    for (int64_t kd = 0; kd < 2; ++kd)
                        for (int64_t kh = 0; kh < 2; ++kh)
                            for (int64_t kw = 0; kw < 2; ++kw) {
                                const int64_t idx = ((2 * zo + kd) * H + 2 * yo + kh) * W + 2 * xo + kw;
                                if (xslab[idx] > best) {
                                    best = xslab[idx];
                                    bidx = idx;
                                }
                            }
                    const int64_t oidx = nc * Do * Ho * Wo + (zo * Ho + yo) * Wo + xo;
                    op[oidx] = best;
                    am[oidx] = nc * D * H * W + bidx;
                }
    }

    auto node = detail::make_op(std::move(out), {x});
    if (!node->requires_grad) return node;
    Node<T>* o = node.get();
    Node<T>* xn = x.get();
    node->backward_fn = [=]() {
        xn->ensure_grad();
        const T* go = o->grad.data.data();
        T* dx = xn->grad.data.data();
        const int64_t total = N * C * Do * Ho * Wo;
        for (int64_t i = 0; i < total; ++i) dx[(*argmax)[static_cast<size_t>(i)]] += go[i];
    };
    return node;
}

// Nearest-neighbour doubling of every spatial dim.
template <typename T>
NodePtr<T> upsample_nearest2(const NodePtr<T>& x) {
    const auto xd = detail::as5(x->value.shape, "upsample_nearest2 input");
    const int64_t N = xd.n, C = xd.c, D = xd.d, H = xd.h, W = xd.w;
    const int64_t Do = 2 * D, Ho = 2 * H, Wo = 2 * W;
    Array<T> out = Array<T>::zeros({N, C, Do, Ho, Wo});
    const T* xp = x->value.data.data();
    T* op = out.data.data();
#pragma omp parallel for schedule(static)
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* xslab = xp + nc * D * H * W;
        T* oslab = op + nc * Do * Ho * Wo;
        for (int64_t zo = 0; zo < Do; ++zo)
            for (int64_t yo = 0; yo < Ho; ++yo) {
                const T* xrow = xslab + ((zo / 2) * H + yo / 2) * W;
                T* orow = oslab + (zo * Ho + yo) * Wo;
                for (int64_t xo = 0; xo < Wo; ++xo) orow[xo] = xrow[xo / 2];
            }
    }
    auto node = detail::make_op(std::move(out), {x});
    if (!node->requires_grad) return node;
    Node<T>* o = node.get();
    Node<T>* xn = x.get();
    node->backward_fn = [=]() {
        xn->ensure_grad();
        const T* go = o->grad.data.data();
        T* dx = xn->grad.data.data();
#pragma omp parallel for schedule(static)
        for (int64_t nc = 0; nc < N * C; ++nc) {
            T* dxslab = dx + nc * D * H * W;
            const T* gslab = go + nc * Do * Ho * Wo;
            for (int64_t z = 0; z < D; ++z)
                for (int64_t y = 0; y < H; ++y)
                    for (int64_t x2 = 0; x2 < W; ++x2) {
                        T acc = 0;
                        for (int64_t kd = 0; kd < 2; ++kd)
                            for (int64_t kh = 0; kh < 2; ++kh)
                                for (int64_t kw = 0; kw < 2; ++kw)
                                    acc += gslab[((2 * z + kd) * Ho + 2 * y + kh) * Wo + 2 * x2 + kw];
                        dxslab[(z * H + y) * W + x2] += acc;
                    }
        }
    };
    return node;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> relu(const NodePtr<T>& x) {
    Array<T> out = x->value;
    for (auto& v : out.data) v = v > T(0) ? v : T(0);
    auto node = detail::make_op(std::move(out), {x});
    if (!node->requires_grad) return node;
    Node<T>* o = node.get();
    Node<T>* xn = x.get();
    node->backward_fn = [=]() {
        xn->ensure_grad();
        const T* go = o->grad.data.data();
        const T* xv = xn->value.data.data();
        T* dx = xn->grad.data.data();
        const int64_t n = o->value.numel();
        for (int64_t i = 0; i < n; ++i)
            if (xv[i] > T(0)) dx[i] += go[i];
    };
    return node;
}

template <typename T>
NodePtr<T> concat_channels(const std::vector<NodePtr<T>>& xs) {
    if (xs.empty()) throw ConfigError("concat_channels needs at least one input");
    const auto d0 = detail::as5(xs[0]->value.shape, "concat_channels input");
    int64_t Ctot = 0;
    for (const auto& x : xs) {
        const auto d = detail::as5(x->value.shape, "concat_channels input");
        if (d.n != d0.n || d.d != d0.d || d.h != d0.h || d.w != d0.w)
            throw ConfigError("concat_channels inputs disagree on batch or spatial dims");
        Ctot += d.c;
    }
    const int64_t N = d0.n, D = d0.d, H = d0.h, W = d0.w, V = D * H * W;
    Array<T> out = Array<T>::zeros({N, Ctot, D, H, W});
    T* op = out.data.data();
    for (int64_t n = 0; n < N; ++n) {
        int64_t coff = 0;
        for (const auto& x : xs) {
            const int64_t c = x->value.shape[1];
            const T* src = x->value.data.data() + n * c * V;
            std::copy(src, src + c * V, op + (n * Ctot + coff) * V);
            coff += c;
        }
    }
    auto node = detail::make_op(std::move(out), std::vector<NodePtr<T>>(xs));
    if (!node->requires_grad) return node;
    Node<T>* o = node.get();
    node->backward_fn = [o, N, Ctot, V]() {
        const T* go = o->grad.data.data();
        for (int64_t n = 0; n < N; ++n) {
            int64_t coff = 0;
            for (const auto& x : o->inputs) {
                const int64_t c = x->value.shape[1];
                if (x->requires_grad) {
                    x->ensure_grad();
                    T* dst = x->grad.data.data() + n * c * V;
                    const T* src = go + (n * Ctot + coff) * V;
                    for (int64_t i = 0; i < c * V; ++i) dst[i] += src[i];
                }
                coff += c;
            }
        }
    };
    return node;
}

// Keeps the central cube of half the spatial size; output voxel (i,j,l)
// equals input voxel (i + D/4, j + H/4, l + W/4).
template <typename T>
NodePtr<T> center_crop_half(const NodePtr<T>& x) {
    const auto xd = detail::as5(x->value.shape, "center_crop_half input");
    if (xd.d % 2 || xd.h % 2 || xd.w % 2) throw ConfigError("center_crop_half needs even spatial dims");
    const int64_t N = xd.n, C = xd.c, D = xd.d, H = xd.h, W = xd.w;
    const int64_t Do = D / 2, Ho = H / 2, Wo = W / 2;
    const int64_t oz = D / 4, oy = H / 4, ox = W / 4;
    Array<T> out = Array<T>::zeros({N, C, Do, Ho, Wo});
    const T* xp = x->value.data.data();
    T* op = out.data.data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* xslab = xp + nc * D * H * W;
        T* oslab = op + nc * Do * Ho * Wo;
        for (int64_t z = 0; z < Do; ++z)
            for (int64_t y = 0; y < Ho; ++y) {
                const T* xrow = xslab + ((z + oz) * H + y + oy) * W + ox;
                T* orow = oslab + (z * Ho + y) * Wo;
                std::copy(xrow, xrow + Wo, orow);
            }
    }
    auto node = detail::make_op(std::move(out), {x});
    if (!node->requires_grad) return node;
    Node<T>* o = node.get();
    Node<T>* xn = x.get();
    node->backward_fn = [=]() {
        xn->ensure_grad();
        const T* go = o->grad.data.data();
        T* dx = xn->grad.data.data();
        for (int64_t nc = 0; nc < N * C; ++nc) {
            T* dxslab = dx + nc * D * H * W;
            const T* gslab = go + nc * Do * Ho * Wo;
            for (int64_t z = 0; z < Do; ++z)
                for (int64_t y = 0; y < Ho; ++y) {
                    T* dxrow = dxslab + ((z + oz) * H + y + oy) * W + ox;
                    const T* grow = gslab + (z * Ho + y) * Wo;
                    for (int64_t x2 = 0; x2 < Wo; ++x2) dxrow[x2] += grow[x2];
                }
        }
    };
    return node;
}

// ---------------------------------------------------------------------------
// Normalization and softmax
// ---------------------------------------------------------------------------

// Per-sample, per-channel standardization over spatial voxels; no affine.
template <typename T>
NodePtr<T> instance_norm(const NodePtr<T>& x, T eps = T(1e-5)) {
    const auto xd = detail::as5(x->value.shape, "instance_norm input");
    const int64_t NC = xd.n * xd.c, V = xd.d * xd.h * xd.w;
    Array<T> out = Array<T>::zeros(x->value.shape);
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(NC));
    const T* xp = x->value.data.data();
    T* op = out.data.data();
#pragma omp parallel for schedule(static)
    for (int64_t nc = 0; nc < NC; ++nc) {
        const T* xs = xp + nc * V;
        T* os = op + nc * V;
        T mean = 0;
        for (int64_t i = 0; i < V; ++i) mean += xs[i];
        mean /= static_cast<T>(V);
        T var = 0;
        for (int64_t i = 0; i < V; ++i) var += (xs[i] - mean) * (xs[i] - mean);
        var /= static_cast<T>(V);
        const T inv = T(1) / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(nc)] = inv;
        for (int64_t i = 0; i < V; ++i) os[i] = (xs[i] - mean) * inv;
    }
    auto node = detail::make_op(std::move(out), {x});
    if (!node->requires_grad) return node;
    Node<T>* o = node.get();
    Node<T>* xn = x.get();
    node->backward_fn = [=]() {
        xn->ensure_grad();
        const T* go = o->grad.data.data();
        const T* yv = o->value.data.data();
        T* dx = xn->grad.data.data();
#pragma omp parallel for schedule(static)
        for (int64_t nc = 0; nc < NC; ++nc) {
            const T* g = go + nc * V;
            const T* y = yv + nc * V;
            T* d = dx + nc * V;
            T m1 = 0, m2 = 0;
            for (int64_t i = 0; i < V; ++i) {
                m1 += g[i];
                m2 += g[i] * y[i];
            }
            m1 /= static_cast<T>(V);
            m2 /= static_cast<T>(V);
            const T inv = (*inv_std)[static_cast<size_t>(nc)];
            for (int64_t i = 0; i < V; ++i) d[i] += inv * (g[i] - m1 - y[i] * m2);
        }
    };
    return node;
}

// Stable softmax across the channel axis, independently per voxel.
template <typename T>
NodePtr<T> softmax_channels(const NodePtr<T>& x) {
    const auto xd = detail::as5(x->value.shape, "softmax_channels input");
    const int64_t N = xd.n, C = xd.c, V = xd.d * xd.h * xd.w;
    Array<T> out = Array<T>::zeros(x->value.shape);
    const T* xp = x->value.data.data();
    T* op = out.data.data();
#pragma omp parallel for schedule(static)
    for (int64_t n = 0; n < N; ++n) {
        const T* xslab = xp + n * C * V;
        T* oslab = op + n * C * V;
        for (int64_t i = 0; i < V; ++i) {
            T mx = xslab[i];
            for (int64_t c = 1; c < C; ++c) mx = std::max(mx, xslab[c * V + i]);
            T sum = 0;
            for (int64_t c = 0; c < C; ++c) {
                const T e = std::exp(xslab[c * V + i] - mx);
                oslab[c * V + i] = e;
                sum += e;
            }
            const T inv = T(1) / sum;
            for (int64_t c = 0; c < C; ++c) oslab[c * V + i] *= inv;
        }
    }
    auto node = detail::make_op(std::move(out), {x});
    if (!node->requires_grad) return node;
    Node<T>* o = node.get();
    Node<T>* xn = x.get();
    node->backward_fn = [=]() {
        xn->ensure_grad();
        const T* go = o->grad.data.data();
        const T* yv = o->value.data.data();
        T* dx = xn->grad.data.data();
#pragma omp parallel for schedule(static)
        for (int64_t n = 0; n < N; ++n) {
            const T* g = go + n * C * V;
            const T* y = yv + n * C * V;
            T* d = dx + n * C * V;
            for (int64_t i = 0; i < V; ++i) {
                T dot = 0;
                for (int64_t c = 0; c < C; ++c) dot += g[c * V + i] * y[c * V + i];
                for (int64_t c = 0; c < C; ++c) d[c * V + i] += y[c * V + i] * (g[c * V + i] - dot);
            }
        }
    };
    return node;
}

// ---------------------------------------------------------------------------
// Elementwise and reductions (loss plumbing)
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> add(const NodePtr<T>& a, const NodePtr<T>& b) {
    if (a->value.shape != b->value.shape) throw ConfigError("add: shape mismatch");
    Array<T> out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += b->value.data[i];
    auto node = detail::make_op(std::move(out), {a, b});
    if (!node->requires_grad) return node;
    Node<T>* o = node.get();
    Node<T>* an = a.get();
    Node<T>* bn = b.get();
    node->backward_fn = [=]() {
        const T* go = o->grad.data.data();
        const int64_t n = o->value.numel();
        if (an->requires_grad) {
            an->ensure_grad();
            for (int64_t i = 0; i < n; ++i) an->grad.data[i] += go[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t i = 0; i < n; ++i) bn->grad.data[i] += go[i];
        }
    };
    return node;
}

template <typename T>
NodePtr<T> mul(const NodePtr<T>& a, const NodePtr<T>& b) {
    if (a->value.shape != b->value.shape) throw ConfigError("mul: shape mismatch");
    Array<T> out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] *= b->value.data[i];
    auto node = detail::make_op(std::move(out), {a, b});
    if (!node->requires_grad) return node;
    Node<T>* o = node.get();
    Node<T>* an = a.get();
    Node<T>* bn = b.get();
    node->backward_fn = [=]() {
        const T* go = o->grad.data.data();
        const int64_t n = o->value.numel();
        if (an->requires_grad) {
            an->ensure_grad();
            for (int64_t i = 0; i < n; ++i) an->grad.data[i] += go[i] * bn->value.data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t i = 0; i < n; ++i) bn->grad.data[i] += go[i] * an->value.data[i];
        }
    };
    return node;
}

template <typename T>
NodePtr<T> div_elem(const NodePtr<T>& a, const NodePtr<T>& b) {
    if (a->value.shape != b->value.shape) throw ConfigError("div_elem: shape mismatch");
    Array<T> out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] /= b->value.data[i];
    auto node = detail::make_op(std::move(out), {a, b});
    if (!node->requires_grad) return node;
    Node<T>* o = node.get();
    Node<T>* an = a.get();
    Node<T>* bn = b.get();
    node->backward_fn = [=]() {
        const T* go = o->grad.data.data();
        const T* yv = o->value.data.data();
        const int64_t n = o->value.numel();
        if (an->requires_grad) {
            an->ensure_grad();
            for (int64_t i = 0; i < n; ++i) an->grad.data[i] += go[i] / bn->value.data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t i = 0; i < n; ++i) bn->grad.data[i] -= go[i] * yv[i] / bn->value.data[i];
        }
    };
    return node;
}

template <typename T>
NodePtr<T> add_scalar(const NodePtr<T>& a, T s) {
    Array<T> out = a->value;
    for (auto& v : out.data) v += s;
    auto node = detail::make_op(std::move(out), {a});
    if (!node->requires_grad) return node;
    Node<T>* o = node.get();
    Node<T>* an = a.get();
    node->backward_fn = [=]() {
        an->ensure_grad();
        for (int64_t i = 0; i < o->value.numel(); ++i) an->grad.data[i] += o->grad.data[i];
    };
    return node;
}

template <typename T>
NodePtr<T> scale(const NodePtr<T>& a, T s) {
    Array<T> out = a->value;
    for (auto& v : out.data) v *= s;
    auto node = detail::make_op(std::move(out), {a});
    if (!node->requires_grad) return node;
    Node<T>* o = node.get();
    Node<T>* an = a.get();
    node->backward_fn = [=]() {
        an->ensure_grad();
        for (int64_t i = 0; i < o->value.numel(); ++i) an->grad.data[i] += s * o->grad.data[i];
    };
    return node;
}

template <typename T>
NodePtr<T> sum_all(const NodePtr<T>& a) {
    T acc = 0;
    for (T v : a->value.data) acc += v;
    auto node = detail::make_op(Array<T>::scalar(acc), {a});
    if (!node->requires_grad) return node;
    Node<T>* o = node.get();
    Node<T>* an = a.get();
    node->backward_fn = [=]() {
        an->ensure_grad();
        const T g = o->grad.data[0];
        for (auto& v : an->grad.data) v += g;
    };
    return node;
}

// Sums over batch and spatial axes, leaving one value per channel.
template <typename T>
NodePtr<T> sum_per_channel(const NodePtr<T>& a) {
    const auto d = detail::as5(a->value.shape, "sum_per_channel input");
    const int64_t N = d.n, C = d.c, V = d.d * d.h * d.w;
    Array<T> out = Array<T>::zeros({C});
    const T* ap = a->value.data.data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const T* s = ap + (n * C + c) * V;
            T acc = 0;
            for (int64_t i = 0; i < V; ++i) acc += s[i];
            out.data[c] += acc;
        }
    auto node = detail::make_op(std::move(out), {a});
    if (!node->requires_grad) return node;
    Node<T>* o = node.get();
    Node<T>* an = a.get();
    node->backward_fn = [=]() {
        an->ensure_grad();
        T* da = an->grad.data.data();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                const T g = o->grad.data[c];
                T* s = da + (n * C + c) * V;
                for (int64_t i = 0; i < V; ++i) s[i] += g;
            }
    };
    return node;
}

// Mean cross-entropy between channel logits and integer voxel labels,
// computed via log-sum-exp. labels.size() must equal N*D*H*W.
template <typename T>
NodePtr<T> cross_entropy_mean(const NodePtr<T>& logits, std::vector<int64_t> labels) {
    const auto d = detail::as5(logits->value.shape, "cross_entropy_mean logits");
    const int64_t N = d.n, C = d.c, V = d.d * d.h * d.w;
    if (static_cast<int64_t>(labels.size()) != N * V)
        throw ConfigError("cross_entropy_mean: label count does not match logit voxels");
    for (int64_t l : labels)
        if (l < 0 || l >= C) throw ConfigError("cross_entropy_mean: label out of range");

    auto probs = std::make_shared<Array<T>>(Array<T>::zeros(logits->value.shape));
    auto lab = std::make_shared<std::vector<int64_t>>(std::move(labels));
    const T* xp = logits->value.data.data();
    T* pp = probs->data.data();
    T loss = 0;
    for (int64_t n = 0; n < N; ++n) {
        const T* xslab = xp + n * C * V;
        T* pslab = pp + n * C * V;
        for (int64_t i = 0; i < V; ++i) {
            T mx = xslab[i];
            for (int64_t c = 1; c < C; ++c) mx = std::max(mx, xslab[c * V + i]);
            T sum = 0;
            for (int64_t c = 0; c < C; ++c) {
                const T e = std::exp(xslab[c * V + i] - mx);
                pslab[c * V + i] = e;
                sum += e;
            }
            const T inv = T(1) / sum;
            for (int64_t c = 0; c < C; ++c) pslab[c * V + i] *= inv;
            const int64_t t = (*lab)[static_cast<size_t>(n * V + i)];
            loss += mx + std::log(sum) - xslab[t * V + i];
        }
    }
    loss /= static_cast<T>(N * V);

    auto node = detail::make_op(Array<T>::scalar(loss), {logits});
    if (!node->requires_grad) return node;
    Node<T>* o = node.get();
    Node<T>* xn = logits.get();
    node->backward_fn = [=]() {
        xn->ensure_grad();
        const T g = o->grad.data[0] / static_cast<T>(N * V);
        const T* pv = probs->data.data();
        T* dx = xn->grad.data.data();
        for (int64_t n = 0; n < N; ++n) {
            const T* pslab = pv + n * C * V;
            T* dslab = dx + n * C * V;
            for (int64_t i = 0; i < V; ++i) {
                const int64_t t = (*lab)[static_cast<size_t>(n * V + i)];
                for (int64_t c = 0; c < C; ++c) {
                    const T onehot = (c == t) ? T(1) : T(0);
                    dslab[c * V + i] += g * (pslab[c * V + i] - onehot);
                }
            }
        }
    };
    return node;
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
std::vector<Node<T>*> topo_order(Node<T>* root) {
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& top = stack.back();
        if (top.second < top.first->inputs.size()) {
            Node<T>* child = top.first->inputs[top.second++].get();
            if (visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(top.first);
            stack.pop_back();
        }
    }
    return order;  // every node appears after all of its inputs
}

}  // namespace detail

template <typename T>
void backward(const NodePtr<T>& root) {
    if (root->value.numel() != 1) throw ConfigError("backward requires a scalar root");
    auto order = detail::topo_order(root.get());
    for (Node<T>* n : order)
        if (n->backward_fn && n->backward_ran)
            throw RuntimeFailure("backward already ran through this graph; rebuild it before differentiating again");
    root->ensure_grad();
    root->grad.data[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (!n->requires_grad || !n->backward_fn) continue;
        n->ensure_grad();
        n->backward_fn();
        n->backward_ran = true;
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

template <typename T>
struct AdamState {
    Array<T> m, v;
    int64_t t = 0;
};

template <typename T>
void adam_step(Array<T>& p, const Array<T>& g, AdamState<T>& st, T lr, T beta1 = T(0.9),
               T beta2 = T(0.999), T eps = T(1e-8)) {
    if (g.shape != p.shape) throw ConfigError("adam_step: gradient shape mismatch");
    if (st.t == 0) {
        st.m = Array<T>::zeros(p.shape);
        st.v = Array<T>::zeros(p.shape);
    }
    ++st.t;
    const T c1 = T(1) - std::pow(beta1, static_cast<T>(st.t));
    const T c2 = T(1) - std::pow(beta2, static_cast<T>(st.t));
    const int64_t n = p.numel();
    for (int64_t i = 0; i < n; ++i) {
        st.m.data[i] = beta1 * st.m.data[i] + (T(1) - beta1) * g.data[i];
        st.v.data[i] = beta2 * st.v.data[i] + (T(1) - beta2) * g.data[i] * g.data[i];
        const T mhat = st.m.data[i] / c1;
        const T vhat = st.v.data[i] / c2;
        p.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

}  // namespace mrseg::ag
