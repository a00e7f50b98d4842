#pragma once

// Reference implementations kept deliberately dumb: straight loops over the
// mathematical definitions, sharing no code with the implementations under
// test.

#include <cmath>
#include <cstdint>
#include <vector>

#include "mrseg/autograd.hpp"
#include "mrseg/rng.hpp"
#include "mrseg/tensor.hpp"

namespace oracle {

using mrseg::Array;

template <typename T>
Array<T> random_array(std::vector<int64_t> shape, mrseg::Rng& rng, double lo = -1.0,
                      double hi = 1.0) {
    Array<T> a = Array<T>::zeros(std::move(shape));
    for (auto& v : a.data) v = static_cast<T>(rng.uniform(lo, hi));
    return a;
}

// For kinked ops (relu, max_pool): keep every element clear of ties and of
// zero so central differences stay on one side of the kink.
template <typename T>
Array<T> random_array_off_kinks(std::vector<int64_t> shape, mrseg::Rng& rng, double margin = 1e-2) {
    Array<T> a = Array<T>::zeros(std::move(shape));
    for (auto& v : a.data) {
        double x = rng.uniform(-1.0, 1.0);
        if (std::abs(x) < margin) x = x < 0 ? x - margin : x + margin;
        v = static_cast<T>(x);
    }
    return a;
}

template <typename T>
Array<T> naive_conv3d(const Array<T>& x, const Array<T>& w, const Array<T>& b, int64_t s,
                      int64_t p) {
    const int64_t N = x.shape[0], Ci = x.shape[1], D = x.shape[2], H = x.shape[3], W = x.shape[4];
    const int64_t Co = w.shape[0], k = w.shape[2];
    const int64_t Do = (D + 2 * p - k) / s + 1;
    const int64_t Ho = (H + 2 * p - k) / s + 1;
    const int64_t Wo = (W + 2 * p - k) / s + 1;
    Array<T> out = Array<T>::zeros({N, Co, Do, Ho, Wo});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < Co; ++co)
            for (int64_t zo = 0; zo < Do; ++zo)
                for (int64_t yo = 0; yo < Ho; ++yo)
                    for (int64_t xo = 0; xo < Wo; ++xo) {
                        T acc = b.data[static_cast<size_t>(co)];
                        for (int64_t ci = 0; ci < Ci; ++ci)
                            for (int64_t kd = 0; kd < k; ++kd)
                                for (int64_t kh = 0; kh < k; ++kh)
                                    for (int64_t kw = 0; kw < k; ++kw) {
                                        const int64_t zi = zo * s + kd - p;
                                        const int64_t yi = yo * s + kh - p;
                                        const int64_t xi = xo * s + kw - p;
                                        if (zi < 0 || zi >= D || yi < 0 || yi >= H || xi < 0 ||
                                            xi >= W)
                                            continue;
                                        acc += w.data[static_cast<size_t>(
                                                   (((co * Ci + ci) * k + kd) * k + kh) * k + kw)] *
                                               x.data[static_cast<size_t>(
                                                   (((n * Ci + ci) * D + zi) * H + yi) * W + xi)];
                                    }
                        out.data[static_cast<size_t>((((n * Co + co) * Do + zo) * Ho + yo) * Wo +
                                                     xo)] = acc;
                    }
    return out;
}

// Scatter form straight from the definition; weight layout [Cin,Cout,2,2,2].
template <typename T>
Array<T> naive_conv_transpose3d(const Array<T>& x, const Array<T>& w) {
    const int64_t N = x.shape[0], Ci = x.shape[1], D = x.shape[2], H = x.shape[3], W = x.shape[4];
    const int64_t Co = w.shape[1];
    Array<T> out = Array<T>::zeros({N, Co, 2 * D, 2 * H, 2 * W});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t ci = 0; ci < Ci; ++ci)
            for (int64_t z = 0; z < D; ++z)
                for (int64_t y = 0; y < H; ++y)
                    for (int64_t xx = 0; xx < W; ++xx) {
                        const T v = x.data[static_cast<size_t>((((n * Ci + ci) * D + z) * H + y) * W + xx)];
                        for (int64_t co = 0; co < Co; ++co)
                            for (int64_t kd = 0; kd < 2; ++kd)
                                for (int64_t kh = 0; kh < 2; ++kh)
                                    for (int64_t kw = 0; kw < 2; ++kw)
                                        out.data[static_cast<size_t>(
                                            (((n * Co + co) * 2 * D + 2 * z + kd) * 2 * H + 2 * y +
                                             kh) *
                                                2 * W +
                                            2 * xx + kw)] +=
                                            v * w.data[static_cast<size_t>(
                                                    ((ci * Co + co) * 2 + kd) * 4 + kh * 2 + kw)];
                    }
    return out;
}

template <typename T>
Array<T> naive_avg_pool3d(const Array<T>& x, int64_t k, int64_t s) {
    const int64_t N = x.shape[0], C = x.shape[1], D = x.shape[2], H = x.shape[3], W = x.shape[4];
    const int64_t Do = (D - k) / s + 1, Ho = (H - k) / s + 1, Wo = (W - k) / s + 1;
    Array<T> out = Array<T>::zeros({N, C, Do, Ho, Wo});
    for (int64_t nc = 0; nc < N * C; ++nc)
        for (int64_t zo = 0; zo < Do; ++zo)
            for (int64_t yo = 0; yo < Ho; ++yo)
                for (int64_t xo = 0; xo < Wo; ++xo) {
                    T acc = 0;
                    for (int64_t kd = 0; kd < k; ++kd)
                        for (int64_t kh = 0; kh < k; ++kh)
                            for (int64_t kw = 0; kw < k; ++kw)
                                acc += x.data[static_cast<size_t>(
                                    (nc * D + zo * s + kd) * H * W + (yo * s + kh) * W + xo * s +
                                    kw)];
                    out.data[static_cast<size_t>((nc * Do + zo) * Ho * Wo + yo * Wo + xo)] =
                        acc / static_cast<T>(k * k * k);
                }
    return out;
}

template <typename T>
Array<T> naive_max_pool3d(const Array<T>& x) {
    const int64_t N = x.shape[0], C = x.shape[1], D = x.shape[2], H = x.shape[3], W = x.shape[4];
    const int64_t Do = D / 2, Ho = H / 2, Wo = W / 2;
    Array<T> out = Array<T>::zeros({N, C, Do, Ho, Wo});
    for (int64_t nc = 0; nc < N * C; ++nc)
        for (int64_t zo = 0; zo < Do; ++zo)
            for (int64_t yo = 0; yo < Ho; ++yo)
                for (int64_t xo = 0; xo < Wo; ++xo) {
                    T best = x.data[static_cast<size_t>((nc * D + 2 * zo) * H * W + 2 * yo * W +
                                                        2 * xo)];
                    for (int64_t kd = 0; kd < 2; ++kd)
                        for (int64_t kh = 0; kh < 2; ++kh)
                            for (int64_t kw = 0; kw < 2; ++kw)
                                best = std::max(
                                    best, x.data[static_cast<size_t>(
                                              (nc * D + 2 * zo + kd) * H * W + (2 * yo + kh) * W +
                                              2 * xo + kw)]);
                    out.data[static_cast<size_t>((nc * Do + zo) * Ho * Wo + yo * Wo + xo)] = best;
                }
    return out;
}

// Central finite differences against one analytic backward pass. `build`
// must be a pure function from leaf nodes to a scalar root; it is re-invoked
// for every probe.
template <typename Build>
double max_rel_grad_error(const std::vector<Array<double>>& inputs, Build build) {
    using mrseg::ag::NodePtr;
    std::vector<NodePtr<double>> leaves;
    for (const auto& a : inputs) leaves.push_back(mrseg::ag::param(a));
    auto root = build(leaves);
    mrseg::ag::backward(root);
    std::vector<Array<double>> grads;
    for (auto& l : leaves) {
        l->ensure_grad();
        grads.push_back(l->grad);
    }

    auto eval = [&](const std::vector<Array<double>>& vals) {
        std::vector<NodePtr<double>> ls;
        for (const auto& a : vals) ls.push_back(mrseg::ag::constant(a));
        return build(ls)->value.data[0];
    };

    double worst = 0;
    for (size_t ii = 0; ii < inputs.size(); ++ii) {
        for (int64_t j = 0; j < inputs[ii].numel(); ++j) {
            const double x0 = inputs[ii].data[static_cast<size_t>(j)];
            const double h = 1e-5 * (1.0 + std::abs(x0));
            auto vp = inputs;
            vp[ii].data[static_cast<size_t>(j)] = x0 + h;
            auto vm = inputs;
            vm[ii].data[static_cast<size_t>(j)] = x0 - h;
            const double fd = (eval(vp) - eval(vm)) / (2 * h);
            const double a = grads[ii].data[static_cast<size_t>(j)];
            const double rel = std::abs(a - fd) / std::max(std::abs(a) + std::abs(fd), 1e-6);
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

// Fixed random linear functional turning a tensor-valued op into a scalar so
// every output coordinate affects the loss.
inline mrseg::ag::NodePtr<double> dot_loss(const mrseg::ag::NodePtr<double>& y,
                                           const Array<double>& weights) {
    return mrseg::ag::sum_all(mrseg::ag::mul(y, mrseg::ag::constant(weights)));
}

// Scalar-loop soft dice: softmax per voxel, then the per-class fraction with
// eps in numerator and denominator, averaged over classes.
template <typename T>
double scalar_soft_dice(const Array<T>& logits, const std::vector<int64_t>& labels,
                        double eps = 1e-5) {
    const int64_t N = logits.shape[0], C = logits.shape[1];
    const int64_t V = logits.shape[2] * logits.shape[3] * logits.shape[4];
    std::vector<double> num(static_cast<size_t>(C), 0), psq(static_cast<size_t>(C), 0),
        gsq(static_cast<size_t>(C), 0);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < V; ++i) {
            double mx = logits.data[static_cast<size_t>(n * C * V + i)];
            for (int64_t c = 1; c < C; ++c)
                mx = std::max(mx, double(logits.data[static_cast<size_t>((n * C + c) * V + i)]));
            double sum = 0;
            std::vector<double> e(static_cast<size_t>(C));
            for (int64_t c = 0; c < C; ++c) {
                e[static_cast<size_t>(c)] =
                    std::exp(double(logits.data[static_cast<size_t>((n * C + c) * V + i)]) - mx);
                sum += e[static_cast<size_t>(c)];
            }
            const int64_t t = labels[static_cast<size_t>(n * V + i)];
            for (int64_t c = 0; c < C; ++c) {
                const double p = e[static_cast<size_t>(c)] / sum;
                num[static_cast<size_t>(c)] += p * (c == t ? 1.0 : 0.0);
                psq[static_cast<size_t>(c)] += p * p;
                gsq[static_cast<size_t>(c)] += (c == t ? 1.0 : 0.0);
            }
        }
    double loss = 0;
    for (int64_t c = 0; c < C; ++c)
        loss += 1.0 - (2.0 * num[static_cast<size_t>(c)] + eps) /
                          (psq[static_cast<size_t>(c)] + gsq[static_cast<size_t>(c)] + eps);
    return loss / static_cast<double>(C);
}

template <typename T>
double scalar_xent(const Array<T>& logits, const std::vector<int64_t>& labels) {
    const int64_t N = logits.shape[0], C = logits.shape[1];
    const int64_t V = logits.shape[2] * logits.shape[3] * logits.shape[4];
    double loss = 0;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < V; ++i) {
            double mx = logits.data[static_cast<size_t>(n * C * V + i)];
            for (int64_t c = 1; c < C; ++c)
                mx = std::max(mx, double(logits.data[static_cast<size_t>((n * C + c) * V + i)]));
            double sum = 0;
            for (int64_t c = 0; c < C; ++c)
                sum += std::exp(double(logits.data[static_cast<size_t>((n * C + c) * V + i)]) - mx);
            const int64_t t = labels[static_cast<size_t>(n * V + i)];
            loss += mx + std::log(sum) -
                    double(logits.data[static_cast<size_t>((n * C + t) * V + i)]);
        }
    return loss / static_cast<double>(N * V);
}

struct ScalarMetrics {
    std::vector<double> dsc;
    std::vector<bool> defined;
    double median = 0, q16 = 0, q84 = 0, nonzero = 0;
    std::vector<std::vector<int64_t>> confusion;
};

inline double scalar_quantile(std::vector<double> v, double q) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    for (size_t i = 0; i + 1 < v.size(); ++i)  // selection sort, on purpose
        for (size_t j = i + 1; j < v.size(); ++j)
            if (v[j] < v[i]) std::swap(v[i], v[j]);
    const double pos = static_cast<double>(v.size() - 1) * q;
    const auto lo = static_cast<size_t>(pos);
    if (lo + 1 >= v.size()) return v.back();
    return v[lo] + (pos - static_cast<double>(lo)) * (v[lo + 1] - v[lo]);
}

// One pass per class per count, straight off the definitions.
inline ScalarMetrics scalar_evaluate(const std::vector<uint16_t>& pred,
                                     const std::vector<uint16_t>& truth, int64_t C) {
    ScalarMetrics m;
    m.dsc.assign(static_cast<size_t>(C), 0.0);
    m.defined.assign(static_cast<size_t>(C), false);
    m.confusion.assign(static_cast<size_t>(C), std::vector<int64_t>(static_cast<size_t>(C), 0));
    for (int64_t t = 0; t < C; ++t)
        for (int64_t p = 0; p < C; ++p) {
            int64_t count = 0;
            for (size_t i = 0; i < truth.size(); ++i)
                if (truth[i] == t && pred[i] == p) ++count;
            m.confusion[static_cast<size_t>(t)][static_cast<size_t>(p)] = count;
        }
    std::vector<double> included;
    int64_t defined = 0, nonzero = 0;
    for (int64_t c = 0; c < C; ++c) {
        int64_t tp = 0, fp = 0, fn = 0;
        for (size_t i = 0; i < truth.size(); ++i) {
            if (truth[i] == c && pred[i] == c) ++tp;
            if (truth[i] != c && pred[i] == c) ++fp;
            if (truth[i] == c && pred[i] != c) ++fn;
        }
        if (tp + fp + fn == 0) continue;
        m.defined[static_cast<size_t>(c)] = true;
        ++defined;
        m.dsc[static_cast<size_t>(c)] =
            2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
        if (m.dsc[static_cast<size_t>(c)] > 0.0) {
            ++nonzero;
            included.push_back(m.dsc[static_cast<size_t>(c)]);
        }
    }
    m.median = scalar_quantile(included, 0.5);
    m.q16 = scalar_quantile(included, 0.16);
    m.q84 = scalar_quantile(included, 0.84);
    m.nonzero = defined == 0
                    ? 0.0
                    : 100.0 * static_cast<double>(nonzero) / static_cast<double>(defined);
    return m;
}

}  // namespace oracle
