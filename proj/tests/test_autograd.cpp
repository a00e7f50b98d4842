#include "doctest.h"

#include <cmath>
#include <cstring>

#include "mrseg/autograd.hpp"
#include "mrseg/rng.hpp"
#include "oracles.hpp"

using namespace mrseg;
using namespace mrseg::ag;
using oracle::random_array;
using oracle::random_array_off_kinks;

namespace {

template <typename T>
bool close_all(const Array<T>& a, const Array<T>& b, double tol) {
    if (a.shape != b.shape) return false;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double x = a.data[i], y = b.data[i];
        if (std::abs(x - y) > tol * std::max({1.0, std::abs(x), std::abs(y)})) return false;
    }
    return true;
}

double dot(const Array<float>& a, const Array<float>& b) {
    double acc = 0;
    for (int64_t i = 0; i < a.numel(); ++i) acc += double(a.data[i]) * double(b.data[i]);
    return acc;
}

}  // namespace

TEST_CASE("conv3d with a 1x1x1 identity kernel reproduces its input") {
    Rng rng(1);
    auto x = constant(random_array<float>({1, 1, 3, 3, 3}, rng));
    auto w = constant(Array<float>({1, 1, 1, 1, 1}, {1.0f}));
    auto b = constant(Array<float>::zeros({1}));
    auto y = conv3d(x, w, b);
    CHECK(y->value.shape == x->value.shape);
    CHECK(std::memcmp(y->value.data.data(), x->value.data.data(), 27 * 4) == 0);
}

TEST_CASE("conv3d all-ones 3x3x3 kernel on constant input sums the window") {
    auto x = constant(Array<float>::full({1, 1, 4, 4, 4}, 1.0f));
    auto w = constant(Array<float>::full({1, 1, 3, 3, 3}, 1.0f));
    auto b = constant(Array<float>::zeros({1}));
    auto y = conv3d(x, w, b, 1, 1);
    REQUIRE(y->value.shape == std::vector<int64_t>{1, 1, 4, 4, 4});
    // Interior voxels see the full 27-window; a corner sees only 2x2x2 of it.
    CHECK(y->value.data[(1 * 4 + 1) * 4 + 1] == doctest::Approx(27.0f));
    CHECK(y->value.data[(2 * 4 + 2) * 4 + 1] == doctest::Approx(27.0f));
    CHECK(y->value.data[0] == doctest::Approx(8.0f));
}

TEST_CASE("conv3d output dims follow floor((D+2p-k)/s)+1") {
    Rng rng(2);
    auto x = constant(random_array<float>({1, 1, 5, 5, 5}, rng));
    auto w = constant(random_array<float>({2, 1, 3, 3, 3}, rng));
    auto b = constant(random_array<float>({2}, rng));
    CHECK(conv3d(x, w, b, 2, 0)->value.shape == std::vector<int64_t>{1, 2, 2, 2, 2});
    CHECK(conv3d(x, w, b, 2, 1)->value.shape == std::vector<int64_t>{1, 2, 3, 3, 3});
    CHECK(conv3d(x, w, b, 1, 0)->value.shape == std::vector<int64_t>{1, 2, 3, 3, 3});
}

TEST_CASE("conv3d rejects mismatched shapes") {
    Rng rng(3);
    auto x = constant(random_array<float>({1, 2, 4, 4, 4}, rng));
    auto w = constant(random_array<float>({3, 1, 3, 3, 3}, rng));  // Cin 1 != 2
    auto b = constant(Array<float>::zeros({3}));
    CHECK_THROWS_AS(conv3d(x, w, b), ConfigError);
    auto w2 = constant(random_array<float>({3, 2, 3, 3, 3}, rng));
    auto bad_b = constant(Array<float>::zeros({4}));
    CHECK_THROWS_AS(conv3d(x, w2, bad_b), ConfigError);
}

TEST_CASE("conv3d matches the naive 7-loop oracle over strides and paddings") {
    Rng rng(4);
    struct Case {
        std::vector<int64_t> xs, ws;
        int64_t s, p;
    };
    const Case cases[] = {
        {{1, 2, 4, 4, 4}, {3, 2, 3, 3, 3}, 1, 1},
        {{2, 1, 5, 4, 6}, {2, 1, 3, 3, 3}, 1, 0},
        {{1, 3, 6, 6, 6}, {2, 3, 2, 2, 2}, 2, 0},
        {{1, 2, 5, 5, 5}, {4, 2, 3, 3, 3}, 2, 1},
        {{1, 1, 4, 4, 4}, {1, 1, 1, 1, 1}, 1, 0},
    };
    for (const auto& c : cases) {
        auto xv = random_array<float>(c.xs, rng);
        auto wv = random_array<float>(c.ws, rng);
        auto bv = random_array<float>({c.ws[0]}, rng);
        auto y = conv3d(constant(xv), constant(wv), constant(bv), c.s, c.p);
        auto ref = oracle::naive_conv3d(xv, wv, bv, c.s, c.p);
        REQUIRE(y->value.shape == ref.shape);
        CHECK(close_all(y->value, ref, 1e-5));
    }
}

TEST_CASE("conv_transpose3d spreads a single voxel over its 2x2x2 image") {
    auto x = constant(Array<float>::full({1, 1, 1, 1, 1}, 2.5f));
    auto w = constant(Array<float>::full({1, 1, 2, 2, 2}, 1.0f));
    auto y = conv_transpose3d(x, w);
    REQUIRE(y->value.shape == std::vector<int64_t>{1, 1, 2, 2, 2});
    for (float v : y->value.data) CHECK(v == doctest::Approx(2.5f));

    auto zero = conv_transpose3d(constant(Array<float>::zeros({1, 3, 2, 2, 2})),
                                 constant(Array<float>::full({3, 2, 2, 2, 2}, 0.7f)));
    for (float v : zero->value.data) CHECK(v == 0.0f);
}

TEST_CASE("conv_transpose3d matches the naive scatter oracle and doubles dims") {
    Rng rng(5);
    auto xv = random_array<float>({2, 3, 3, 2, 4}, rng);
    auto wv = random_array<float>({3, 2, 2, 2, 2}, rng);
    auto y = conv_transpose3d(constant(xv), constant(wv));
    auto ref = oracle::naive_conv_transpose3d(xv, wv);
    REQUIRE(y->value.shape == std::vector<int64_t>{2, 2, 6, 4, 8});
    CHECK(close_all(y->value, ref, 1e-5));
}

TEST_CASE("conv_transpose3d is the adjoint of stride-2 conv3d") {
    Rng rng(6);
    for (int trial = 0; trial < 3; ++trial) {
        auto xv = random_array<float>({1, 2, 4, 4, 4}, rng);
        auto wv = random_array<float>({3, 2, 2, 2, 2}, rng);  // conv layout [Co,Ci,2,2,2]
        auto yv = random_array<float>({1, 3, 2, 2, 2}, rng);
        auto fwd = conv3d(constant(xv), constant(wv), constant(Array<float>::zeros({3})), 2, 0);
        // Same weight buffer reinterpreted as [Cin(=Co),Cout(=Ci),2,2,2].
        Array<float> wt(std::vector<int64_t>{3, 2, 2, 2, 2}, wv.data);
        auto adj = conv_transpose3d(constant(yv), constant(wt));
        CHECK(dot(fwd->value, yv) == doctest::Approx(dot(xv, adj->value)).epsilon(1e-4));
    }
}

TEST_CASE("avg_pool3d averages non-overlapping blocks") {
    Array<float> xv = Array<float>::zeros({1, 1, 2, 2, 2});
    for (int i = 0; i < 8; ++i) xv.data[i] = float(i);
    auto y = avg_pool3d(constant(xv), 2, 2);
    REQUIRE(y->value.shape == std::vector<int64_t>{1, 1, 1, 1, 1});
    CHECK(y->value.data[0] == doctest::Approx(3.5f));

    auto c = avg_pool3d(constant(Array<float>::full({1, 2, 4, 4, 4}, 0.25f)), 2, 2);
    for (float v : c->value.data) CHECK(v == doctest::Approx(0.25f));

    Rng rng(7);
    auto r = random_array<float>({2, 2, 4, 6, 8}, rng);
    auto got = avg_pool3d(constant(r), 2, 2);
    CHECK(close_all(got->value, oracle::naive_avg_pool3d(r, 2, 2), 1e-6));
}

TEST_CASE("max_pool3d takes block maxima and keeps constants") {
    Array<float> xv = Array<float>::zeros({1, 1, 2, 2, 2});
    for (int i = 0; i < 8; ++i) xv.data[i] = float(i);
    auto y = max_pool3d(constant(xv));
    CHECK(y->value.data[0] == 7.0f);

    auto c = max_pool3d(constant(Array<float>::full({1, 2, 4, 4, 4}, 1.5f)));
    for (float v : c->value.data) CHECK(v == 1.5f);

    Rng rng(8);
    auto r = random_array<float>({2, 3, 4, 4, 6}, rng);
    auto got = max_pool3d(constant(r));
    CHECK(close_all(got->value, oracle::naive_max_pool3d(r), 0.0));
}

TEST_CASE("max_pool3d gradient reaches only the argmax voxel") {
    Array<double> xv = Array<double>::zeros({1, 1, 2, 2, 2});
    for (int i = 0; i < 8; ++i) xv.data[i] = double(i);
    auto x = param(xv);
    auto loss = sum_all(max_pool3d(x));
    backward(loss);
    for (int i = 0; i < 8; ++i) CHECK(x->grad.data[i] == (i == 7 ? 1.0 : 0.0));
}

TEST_CASE("center_crop_half keeps the central block at quarter offsets") {
    Array<float> xv = Array<float>::zeros({1, 1, 4, 4, 4});
    for (int64_t z = 0; z < 4; ++z)
        for (int64_t y = 0; y < 4; ++y)
            for (int64_t x = 0; x < 4; ++x) xv.data[(z * 4 + y) * 4 + x] = float(z * 100 + y * 10 + x);
    auto y = center_crop_half(constant(xv));
    REQUIRE(y->value.shape == std::vector<int64_t>{1, 1, 2, 2, 2});
    for (int64_t z = 0; z < 2; ++z)
        for (int64_t yy = 0; yy < 2; ++yy)
            for (int64_t x = 0; x < 2; ++x)
                CHECK(y->value.data[(z * 2 + yy) * 2 + x] ==
                      doctest::Approx(float((z + 1) * 100 + (yy + 1) * 10 + x + 1)));
}

TEST_CASE("center_crop_half of a 64-cube is the 32-cube at offset 16") {
    Array<float> xv = Array<float>::zeros({1, 1, 64, 64, 64});
    for (int64_t i = 0; i < 64 * 64 * 64; ++i) xv.data[i] = float(i);
    auto y = center_crop_half(constant(xv));
    REQUIRE(y->value.shape == std::vector<int64_t>{1, 1, 32, 32, 32});
    auto idx = [](int64_t z, int64_t yy, int64_t x) { return (z * 64 + yy) * 64 + x; };
    CHECK(y->value.data[0] == float(idx(16, 16, 16)));
    CHECK(y->value.data[(31 * 32 + 31) * 32 + 31] == float(idx(47, 47, 47)));
    CHECK(y->value.data[(5 * 32 + 9) * 32 + 2] == float(idx(21, 25, 18)));
}

TEST_CASE("center_crop_half backward scatters into the central region only") {
    Rng rng(9);
    auto x = param(random_array<double>({1, 1, 4, 4, 4}, rng));
    backward(sum_all(center_crop_half(x)));
    for (int64_t z = 0; z < 4; ++z)
        for (int64_t y = 0; y < 4; ++y)
            for (int64_t xx = 0; xx < 4; ++xx) {
                const bool central = z >= 1 && z <= 2 && y >= 1 && y <= 2 && xx >= 1 && xx <= 2;
                CHECK(x->grad.data[(z * 4 + y) * 4 + xx] == (central ? 1.0 : 0.0));
            }
}

TEST_CASE("instance_norm standardizes each channel of each sample") {
    Rng rng(10);
    auto x = constant(random_array<float>({2, 3, 4, 4, 4}, rng, -5.0, 9.0));
    auto y = instance_norm(x);
    const int64_t V = 64;
    for (int64_t nc = 0; nc < 6; ++nc) {
        double mean = 0, var = 0;
        for (int64_t i = 0; i < V; ++i) mean += y->value.data[nc * V + i];
        mean /= V;
        for (int64_t i = 0; i < V; ++i) {
            const double d = y->value.data[nc * V + i] - mean;
            var += d * d;
        }
        var /= V;
        CHECK(std::abs(mean) < 1e-5);
        CHECK(std::abs(var - 1.0) < 1e-4);
    }

    auto flat = instance_norm(constant(Array<float>::full({1, 1, 2, 2, 2}, 3.0f)));
    for (float v : flat->value.data) CHECK(v == doctest::Approx(0.0f));
}

TEST_CASE("softmax_channels sums to one per voxel and is uniform on equal logits") {
    Rng rng(11);
    auto y = softmax_channels(constant(random_array<float>({1, 5, 2, 2, 2}, rng, -4, 4)));
    const int64_t V = 8;
    for (int64_t i = 0; i < V; ++i) {
        double s = 0;
        for (int64_t c = 0; c < 5; ++c) s += y->value.data[c * V + i];
        CHECK(std::abs(s - 1.0) < 1e-6);
    }
    auto u = softmax_channels(constant(Array<float>::full({1, 4, 2, 2, 2}, 0.3f)));
    for (float v : u->value.data) CHECK(v == doctest::Approx(0.25f));
}

TEST_CASE("cross_entropy_mean of uniform logits is log C") {
    auto logits = constant(Array<float>::full({1, 4, 2, 2, 2}, 1.7f));
    std::vector<int64_t> labels(8, 2);
    auto l = cross_entropy_mean(logits, labels);
    CHECK(l->value.data[0] == doctest::Approx(std::log(4.0f)).epsilon(1e-6));
}

TEST_CASE("concat_channels stacks along the channel axis and splits gradients") {
    Rng rng(12);
    auto av = random_array<double>({1, 2, 2, 2, 2}, rng);
    auto bv = random_array<double>({1, 3, 2, 2, 2}, rng);
    auto a = param(av);
    auto b = param(bv);
    auto y = concat_channels<double>({a, b});
    REQUIRE(y->value.shape == std::vector<int64_t>{1, 5, 2, 2, 2});
    CHECK(std::memcmp(y->value.data.data(), av.data.data(), 16 * 8) == 0);
    CHECK(std::memcmp(y->value.data.data() + 16, bv.data.data(), 24 * 8) == 0);

    Array<double> wv = random_array<double>({1, 5, 2, 2, 2}, rng);
    backward(sum_all(mul(y, constant(wv))));
    for (int64_t i = 0; i < 16; ++i) CHECK(a->grad.data[i] == doctest::Approx(wv.data[i]));
    for (int64_t i = 0; i < 24; ++i) CHECK(b->grad.data[i] == doctest::Approx(wv.data[16 + i]));
}

TEST_CASE("upsample_nearest2 copies each voxel into a 2x2x2 block") {
    Array<float> xv = Array<float>::zeros({1, 1, 1, 2, 2});
    xv.data = {1, 2, 3, 4};
    auto y = upsample_nearest2(constant(xv));
    REQUIRE(y->value.shape == std::vector<int64_t>{1, 1, 2, 4, 4});
    CHECK(y->value.data[0] == 1.0f);
    CHECK(y->value.data[1] == 1.0f);
    CHECK(y->value.data[2] == 2.0f);
    CHECK(y->value.data[4] == 1.0f);
    CHECK(y->value.data[(1 * 4 + 3) * 4 + 3] == 4.0f);
}

TEST_CASE("forward passes are bit-identical across repeated evaluation") {
    Rng rng(13);
    auto xv = random_array<float>({1, 2, 6, 6, 6}, rng);
    auto wv = random_array<float>({4, 2, 3, 3, 3}, rng);
    auto bv = random_array<float>({4}, rng);
    auto run = [&]() {
        auto y = relu(instance_norm(conv3d(constant(xv), constant(wv), constant(bv), 1, 1)));
        return max_pool3d(y)->value;
    };
    auto a = run(), b = run();
    CHECK(std::memcmp(a.data.data(), b.data.data(), a.data.size() * 4) == 0);
}

TEST_CASE("backward may run once per graph and demands a scalar root") {
    Rng rng(14);
    auto x = param(random_array<double>({1, 1, 2, 2, 2}, rng));
    auto y = relu(x);
    CHECK_THROWS_AS(backward(y), ConfigError);
    auto loss = sum_all(y);
    backward(loss);
    CHECK_THROWS_AS(backward(loss), RuntimeFailure);

    // Fresh graph over the same leaf works after zeroing.
    zero_grad(x);
    auto loss2 = sum_all(relu(x));
    backward(loss2);
}

TEST_CASE("gradients match central finite differences across all ops") {
    // 5 seeds, tensors at most 4 voxels per spatial axis, float64, < 1e-4.
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        CAPTURE(seed);

        {
            auto x = random_array<double>({1, 2, 4, 4, 4}, rng);
            auto w = random_array<double>({2, 2, 3, 3, 3}, rng);
            auto b = random_array<double>({2}, rng);
            auto lw = random_array<double>({1, 2, 4, 4, 4}, rng);
            double e = oracle::max_rel_grad_error({x, w, b}, [&](const auto& ls) {
                return oracle::dot_loss(conv3d(ls[0], ls[1], ls[2], 1, 1), lw);
            });
            CHECK(e < 1e-4);
        }
        {
            auto x = random_array<double>({1, 2, 4, 4, 4}, rng);
            auto w = random_array<double>({2, 2, 3, 3, 3}, rng);
            auto b = random_array<double>({2}, rng);
            auto lw = random_array<double>({1, 2, 2, 2, 2}, rng);
            double e = oracle::max_rel_grad_error({x, w, b}, [&](const auto& ls) {
                return oracle::dot_loss(conv3d(ls[0], ls[1], ls[2], 2, 1), lw);
            });
            CHECK(e < 1e-4);
        }
        {
            auto x = random_array<double>({1, 2, 2, 2, 2}, rng);
            auto w = random_array<double>({2, 3, 2, 2, 2}, rng);
            auto lw = random_array<double>({1, 3, 4, 4, 4}, rng);
            double e = oracle::max_rel_grad_error({x, w}, [&](const auto& ls) {
                return oracle::dot_loss(conv_transpose3d(ls[0], ls[1]), lw);
            });
            CHECK(e < 1e-4);
        }
        {
            auto x = random_array<double>({1, 2, 4, 4, 4}, rng);
            auto lw = random_array<double>({1, 2, 2, 2, 2}, rng);
            double e = oracle::max_rel_grad_error({x}, [&](const auto& ls) {
                return oracle::dot_loss(avg_pool3d(ls[0], 2, 2), lw);
            });
            CHECK(e < 1e-4);
        }
        {
            auto x = random_array_off_kinks<double>({1, 2, 4, 4, 4}, rng);
            auto lw = random_array<double>({1, 2, 2, 2, 2}, rng);
            double e = oracle::max_rel_grad_error({x}, [&](const auto& ls) {
                return oracle::dot_loss(max_pool3d(ls[0]), lw);
            });
            CHECK(e < 1e-4);
        }
        {
            auto x = random_array_off_kinks<double>({1, 3, 4, 4, 4}, rng);
            auto lw = random_array<double>({1, 3, 4, 4, 4}, rng);
            double e = oracle::max_rel_grad_error({x}, [&](const auto& ls) {
                return oracle::dot_loss(relu(ls[0]), lw);
            });
            CHECK(e < 1e-4);
        }
        {
            auto x = random_array<double>({1, 2, 4, 4, 4}, rng);
            auto lw = random_array<double>({1, 2, 2, 2, 2}, rng);
            double e = oracle::max_rel_grad_error({x}, [&](const auto& ls) {
                return oracle::dot_loss(center_crop_half(ls[0]), lw);
            });
            CHECK(e < 1e-4);
        }
        {
            auto a = random_array<double>({1, 2, 3, 3, 3}, rng);
            auto b = random_array<double>({1, 1, 3, 3, 3}, rng);
            auto lw = random_array<double>({1, 3, 3, 3, 3}, rng);
            double e = oracle::max_rel_grad_error({a, b}, [&](const auto& ls) {
                return oracle::dot_loss(concat_channels<double>({ls[0], ls[1]}), lw);
            });
            CHECK(e < 1e-4);
        }
        {
            auto x = random_array<double>({2, 2, 3, 3, 3}, rng, -2.0, 2.0);
            auto lw = random_array<double>({2, 2, 3, 3, 3}, rng);
            double e = oracle::max_rel_grad_error({x}, [&](const auto& ls) {
                return oracle::dot_loss(instance_norm(ls[0]), lw);
            });
            CHECK(e < 1e-4);
        }
        {
            auto x = random_array<double>({1, 4, 3, 3, 3}, rng, -3.0, 3.0);
            auto lw = random_array<double>({1, 4, 3, 3, 3}, rng);
            double e = oracle::max_rel_grad_error({x}, [&](const auto& ls) {
                return oracle::dot_loss(softmax_channels(ls[0]), lw);
            });
            CHECK(e < 1e-4);
        }
        {
            auto x = random_array<double>({1, 2, 2, 2, 2}, rng);
            auto lw = random_array<double>({1, 2, 4, 4, 4}, rng);
            double e = oracle::max_rel_grad_error({x}, [&](const auto& ls) {
                return oracle::dot_loss(upsample_nearest2(ls[0]), lw);
            });
            CHECK(e < 1e-4);
        }
        {
            auto x = random_array<double>({1, 4, 3, 3, 3}, rng, -3.0, 3.0);
            std::vector<int64_t> labels;
            for (int i = 0; i < 27; ++i) labels.push_back(rng.uniform_int(0, 3));
            double e = oracle::max_rel_grad_error({x}, [&](const auto& ls) {
                return cross_entropy_mean(ls[0], labels);
            });
            CHECK(e < 1e-4);
        }
    }
}

TEST_CASE("adam takes the hand-computed first step and ignores zero gradients") {
    Array<double> p = Array<double>::scalar(1.0);
    Array<double> g = Array<double>::scalar(1.0);
    AdamState<double> st;
    adam_step(p, g, st, 0.001);
    // mhat = vhat = 1 after bias correction, so the step is lr/(1 + eps).
    CHECK(p.data[0] == doctest::Approx(1.0 - 0.001 / (1.0 + 1e-8)).epsilon(1e-12));
    CHECK(st.t == 1);

    // Zero gradient with no accumulated momentum leaves the parameter alone.
    Array<double> q = Array<double>::scalar(2.0);
    Array<double> z = Array<double>::scalar(0.0);
    AdamState<double> fresh;
    adam_step(q, z, fresh, 0.001);
    CHECK(q.data[0] == 2.0);
    CHECK(fresh.m.data[0] == 0.0);
    CHECK(fresh.v.data[0] == 0.0);

    // With momentum in flight, m and v decay by their betas on a zero gradient.
    const double m_before = st.m.data[0], v_before = st.v.data[0];
    adam_step(p, z, st, 0.001);
    CHECK(st.m.data[0] == doctest::Approx(0.9 * m_before));
    CHECK(st.v.data[0] == doctest::Approx(0.999 * v_before));
}

TEST_CASE("adam walks down a quadratic bowl") {
    Array<double> p = Array<double>::scalar(1.0);
    AdamState<double> st;
    double prev = 1.0;
    for (int i = 0; i < 200; ++i) {
        Array<double> g = Array<double>::scalar(2.0 * p.data[0]);
        adam_step(p, g, st, 0.001);
        if (i >= 5) CHECK(std::abs(p.data[0]) <= std::abs(prev) + 1e-12);
        prev = p.data[0];
    }
    CHECK(std::abs(p.data[0]) < 0.9);
}

TEST_CASE("gradients accumulate across shared subexpressions") {
    // loss = sum(x * x) has gradient 2x through the two mul arguments.
    Rng rng(15);
    auto xv = random_array<double>({1, 1, 2, 2, 2}, rng);
    auto x = param(xv);
    backward(sum_all(mul(x, x)));
    for (int64_t i = 0; i < 8; ++i)
        CHECK(x->grad.data[i] == doctest::Approx(2.0 * xv.data[i]));
}
