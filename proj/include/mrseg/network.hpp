#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mrseg/autograd.hpp"
#include "mrseg/patch.hpp"
#include "mrseg/rng.hpp"
#include "mrseg/tensor.hpp"
#include "mrseg/volume.hpp"

namespace mrseg {

enum class SkipPolicy { None, BottleneckOnly, AllLevels };

const char* skip_policy_name(SkipPolicy p);

// Declarative description of one target U-Net plus K context branches.
// The label fixes the wiring:
//   A: no context branches at all
//   B: single crop-skip into the target bottleneck; context heads exist
//   C: crop-skips at every level; contexts are encoder-only (no heads)
//   D: crop-skips at every level; context heads exist
struct NetworkConfig {
    char config_label = 'A';
    int64_t levels = 5;
    int64_t base_channels = 24;
    int64_t class_count = 2;
    IVec3 target_size{32, 32, 32};
    std::vector<int64_t> kappas;
    SkipPolicy skip_policy = SkipPolicy::None;
    bool context_decoder_and_loss = false;

    // Cross-checks the label against policy/flag/kappas and the size rule
    // (every target_size component a positive multiple of 2^(levels-1)).
    void validate() const;

    int64_t context_count() const { return static_cast<int64_t>(kappas.size()); }
    PatchSpec patch_spec() const { return PatchSpec{target_size, kappas}; }

    // base_channels at level 0, doubling per level, capped at 16x base.
    int64_t channels_at(int64_t level) const {
        const int64_t wide = base_channels << level;
        const int64_t cap = 16 * base_channels;
        return wide < cap ? wide : cap;
    }
};

// Builds a config whose skip_policy / context_decoder_and_loss match `label`.
NetworkConfig make_network_config(char label, int64_t levels, int64_t base_channels,
                                  int64_t class_count, IVec3 target_size,
                                  std::vector<int64_t> kappas);

// JSON form: {config, levels, base_channels, classes, target_size, kappas};
// target_size may be one integer (cubic) or a 3-array. levels, base_channels
// and kappas are optional with the struct defaults.
NetworkConfig parse_network_config(const std::string& json_text);
NetworkConfig load_network_config(const std::string& path);
std::string network_config_json(const NetworkConfig& cfg);

// Total input voxels across the target patch and all context patches.
inline int64_t count_inputs(const NetworkConfig& cfg) {
    return (1 + cfg.context_count()) * cfg.target_size[0] * cfg.target_size[1] *
           cfg.target_size[2];
}

// Named leaf tensors in registration order; the order and the names are the
// checkpoint layout, so both must stay stable across builds of one config.
template <typename T>
struct ParamStore {
    std::vector<std::string> names;
    std::vector<ag::NodePtr<T>> nodes;

    ag::NodePtr<T> add(const std::string& name, Array<T> v) {
        for (const auto& n : names)
            if (n == name) throw ConfigError("duplicate parameter name: " + name);
        names.push_back(name);
        nodes.push_back(ag::param(std::move(v)));
        return nodes.back();
    }

    ag::NodePtr<T> find(const std::string& name) const {
        for (size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return nodes[i];
        return nullptr;
    }

    ag::NodePtr<T> at(const std::string& name) const {
        auto n = find(name);
        if (!n) throw ConfigError("unknown parameter name: " + name);
        return n;
    }

    int64_t total_count() const {
        int64_t s = 0;
        for (const auto& n : nodes) s += n->value.numel();
        return s;
    }

    void zero_grads() const {
        for (const auto& n : nodes) ag::zero_grad(n);
    }
};

// A built network: the parameter registry plus typed handles into it.
//
// Level bookkeeping, fixed by the label:
//   - target encoder levels 0..M-2, then a two-conv bottleneck at level M-1
//   - target decoder levels j = M-2..0, each upconv + concat + two convs
//   - context branches have encoder levels 0..M-2 only; when heads are
//     configured, a light decoder (nearest upsample + 1x1x1 conv per stage)
//     carries them back to full resolution
//   - a crop-skip from context level m lands at target decoder level m+1;
//     the deepest one (m = M-2) lands in the bottleneck
template <typename T>
struct NetworkInstance {
    struct Block {
        ag::NodePtr<T> w1, b1, w2, b2;
    };
    struct PointConv {
        ag::NodePtr<T> w, b;
    };
    struct Target {
        std::vector<Block> enc;
        Block bottleneck;
        std::vector<ag::NodePtr<T>> up_w;  // indexed by decoder level j
        std::vector<Block> dec;            // indexed by decoder level j
        PointConv head;
    };
    struct Context {
        std::vector<Block> enc;
        std::vector<PointConv> dec;  // indexed by stage j in [0, M-3]; empty without head
        PointConv head;
        bool has_head = false;
    };

    NetworkConfig config;
    ParamStore<T> params;
    Target target;
    std::vector<Context> contexts;
};

template <typename T>
struct ForwardResult {
    ag::NodePtr<T> target_logits;                  // [N, C, Sz, Sy, Sx]
    std::vector<ag::NodePtr<T>> context_logits;    // one per context when heads exist
};

namespace detail {

template <typename T>
Array<T> he_uniform(std::vector<int64_t> shape, int64_t fan_in, uint64_t seed) {
    Array<T> a;
    a.shape = std::move(shape);
    a.data.reserve(static_cast<size_t>(a.numel()));
    Rng rng(seed);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (int64_t i = 0; i < a.numel(); ++i)
        a.data.push_back(static_cast<T>(rng.uniform(-bound, bound)));
    return a;
}

inline IVec3 halved(IVec3 d) { return {d[0] / 2, d[1] / 2, d[2] / 2}; }

}  // namespace detail

// Every weight is drawn from a stream derived from (seed, parameter name), so
// two builds of one config at one seed are bit-identical and configs sharing
// a parameter name initialize it identically when its shape agrees.
template <typename T>
NetworkInstance<T> build_network(const NetworkConfig& cfg, uint64_t seed) {
    cfg.validate();
    const int64_t M = cfg.levels;
    const int64_t C = cfg.class_count;
    const int64_t K = cfg.context_count();

    // Crop-skip shape soundness: each source level must sit at an even size
    // whose half equals the destination level's size.
    IVec3 dims = cfg.target_size;
    for (int64_t m = 0; m + 1 < M; ++m) {
        for (int axis = 0; axis < 3; ++axis) {
            if (dims[axis] % 2 != 0)
                throw RuntimeFailure("level " + std::to_string(m) + " size " +
                                     std::to_string(dims[axis]) + " is not even; cannot pool or crop");
        }
        const IVec3 below = detail::halved(dims);
        for (int axis = 0; axis < 3; ++axis)
            if (below[axis] < 1)
                throw RuntimeFailure("level " + std::to_string(m + 1) + " collapses to zero size");
        dims = below;
    }

    NetworkInstance<T> net;
    net.config = cfg;

    auto add_w = [&](const std::string& name, std::vector<int64_t> shape, int64_t fan_in) {
        return net.params.add(name, detail::he_uniform<T>(std::move(shape), fan_in,
                                                          derive_seed(seed, name)));
    };
    auto add_b = [&](const std::string& name, int64_t n) {
        return net.params.add(name, Array<T>::zeros({n}));
    };
    auto add_block = [&](const std::string& prefix, int64_t cin, int64_t cout) {
        typename NetworkInstance<T>::Block b;
        b.w1 = add_w(prefix + ".conv1.w", {cout, cin, 3, 3, 3}, cin * 27);
        b.b1 = add_b(prefix + ".conv1.b", cout);
        b.w2 = add_w(prefix + ".conv2.w", {cout, cout, 3, 3, 3}, cout * 27);
        b.b2 = add_b(prefix + ".conv2.b", cout);
        return b;
    };
    auto add_point = [&](const std::string& prefix, int64_t cin, int64_t cout) {
        typename NetworkInstance<T>::PointConv p;
        p.w = add_w(prefix + ".w", {cout, cin, 1, 1, 1}, cin);
        p.b = add_b(prefix + ".b", cout);
        return p;
    };
    auto ch = [&](int64_t m) { return cfg.channels_at(m); };

    for (int64_t m = 0; m + 1 < M; ++m)
        net.target.enc.push_back(add_block("target.enc" + std::to_string(m),
                                           m == 0 ? 1 : ch(m - 1), ch(m)));

    const int64_t ctx_into_bottleneck = cfg.skip_policy == SkipPolicy::None ? 0 : K;
    net.target.bottleneck = add_block("target.bottleneck",
                                      ch(M - 2) * (1 + ctx_into_bottleneck), ch(M - 1));

    net.target.up_w.resize(static_cast<size_t>(M - 1));
    net.target.dec.resize(static_cast<size_t>(M - 1));
    for (int64_t j = M - 2; j >= 0; --j) {
        const std::string prefix = "target.dec" + std::to_string(j);
        // conv_transpose3d weights are laid out [Cin, Cout, 2, 2, 2]; each
        // output voxel of a stride-2 k=2 upconv sums one tap per in-channel.
        net.target.up_w[static_cast<size_t>(j)] =
            add_w(prefix + ".up.w", {ch(j + 1), ch(j), 2, 2, 2}, ch(j + 1));
        // Crops arriving here come from context level j-1 and keep that
        // level's channel width; only their spatial dims are halved.
        const int64_t ctx_ch =
            cfg.skip_policy == SkipPolicy::AllLevels && j >= 1 ? K * ch(j - 1) : 0;
        net.target.dec[static_cast<size_t>(j)] = add_block(prefix, ch(j) * 2 + ctx_ch, ch(j));
    }
    net.target.head = add_point("target.head", ch(0), C);

    for (int64_t k = 1; k <= K; ++k) {
        typename NetworkInstance<T>::Context ctx;
        const std::string base = "ctx" + std::to_string(k);
        for (int64_t m = 0; m + 1 < M; ++m)
            ctx.enc.push_back(add_block(base + ".enc" + std::to_string(m),
                                        m == 0 ? 1 : ch(m - 1), ch(m)));
        if (cfg.context_decoder_and_loss) {
            ctx.has_head = true;
            ctx.dec.resize(static_cast<size_t>(M > 2 ? M - 2 : 0));
            for (int64_t j = M - 3; j >= 0; --j)
                ctx.dec[static_cast<size_t>(j)] =
                    add_point(base + ".dec" + std::to_string(j), ch(j + 1), ch(j));
            ctx.head = add_point(base + ".head", ch(0), C);
        }
        net.contexts.push_back(std::move(ctx));
    }
    return net;
}

template <typename T>
int64_t count_params(const NetworkInstance<T>& net) {
    return net.params.total_count();
}

namespace detail {

template <typename T>
ag::NodePtr<T> conv_block(const typename NetworkInstance<T>::Block& blk, ag::NodePtr<T> x) {
    x = ag::relu(ag::instance_norm(ag::conv3d(x, blk.w1, blk.b1, 1, 1)));
    x = ag::relu(ag::instance_norm(ag::conv3d(x, blk.w2, blk.b2, 1, 1)));
    return x;
}

template <typename T>
void check_net_input(const NetworkConfig& cfg, const Array<T>& a, int64_t want_n,
                     const char* what) {
    const std::vector<int64_t> want{want_n, 1, cfg.target_size[2], cfg.target_size[1],
                                    cfg.target_size[0]};
    require_shape(a, want, what);
}

}  // namespace detail

// Inputs are [N, 1, Sz, Sy, Sx]; context_in holds one tensor per configured
// kappa. Returns logit nodes wired back to the parameter leaves.
template <typename T>
ForwardResult<T> forward_batch(const NetworkInstance<T>& net, const Array<T>& target_in,
                               const std::vector<Array<T>>& context_in) {
    const NetworkConfig& cfg = net.config;
    const int64_t M = cfg.levels;
    const int64_t K = cfg.context_count();

    if (target_in.shape.size() != 5)
        throw ConfigError("target input must be a 5-d tensor [N,1,Sz,Sy,Sx], got shape " +
                          shape_str(target_in.shape));
    const int64_t N = target_in.shape[0];
    detail::check_net_input(cfg, target_in, N, "target input");
    if (static_cast<int64_t>(context_in.size()) != K)
        throw ConfigError("expected " + std::to_string(K) + " context inputs, got " +
                          std::to_string(context_in.size()));
    for (int64_t k = 0; k < K; ++k)
        detail::check_net_input(cfg, context_in[static_cast<size_t>(k)], N, "context input");

    // Context encoders run first; their per-level features feed the crops.
    std::vector<std::vector<ag::NodePtr<T>>> cfeat(static_cast<size_t>(K));
    for (int64_t k = 0; k < K; ++k) {
        auto cur = ag::constant(context_in[static_cast<size_t>(k)]);
        for (int64_t m = 0; m + 1 < M; ++m) {
            if (m > 0) cur = ag::max_pool3d(cur);
            cur = detail::conv_block<T>(net.contexts[static_cast<size_t>(k)].enc[static_cast<size_t>(m)], cur);
            cfeat[static_cast<size_t>(k)].push_back(cur);
        }
    }

    auto cur = ag::constant(target_in);
    std::vector<ag::NodePtr<T>> skip;
    for (int64_t m = 0; m + 1 < M; ++m) {
        if (m > 0) cur = ag::max_pool3d(cur);
        cur = detail::conv_block<T>(net.target.enc[static_cast<size_t>(m)], cur);
        skip.push_back(cur);
    }
    cur = ag::max_pool3d(cur);

    if (cfg.skip_policy != SkipPolicy::None) {
        std::vector<ag::NodePtr<T>> parts{cur};
        for (int64_t k = 0; k < K; ++k)
            parts.push_back(ag::center_crop_half(cfeat[static_cast<size_t>(k)][static_cast<size_t>(M - 2)]));
        cur = ag::concat_channels(parts);
    }
    cur = detail::conv_block<T>(net.target.bottleneck, cur);

    for (int64_t j = M - 2; j >= 0; --j) {
        auto up = ag::conv_transpose3d(cur, net.target.up_w[static_cast<size_t>(j)], 2);
        std::vector<ag::NodePtr<T>> parts{up, skip[static_cast<size_t>(j)]};
        if (cfg.skip_policy == SkipPolicy::AllLevels && j >= 1)
            for (int64_t k = 0; k < K; ++k)
                parts.push_back(ag::center_crop_half(cfeat[static_cast<size_t>(k)][static_cast<size_t>(j - 1)]));
        cur = detail::conv_block<T>(net.target.dec[static_cast<size_t>(j)],
                                    ag::concat_channels(parts));
    }

    ForwardResult<T> out;
    out.target_logits = ag::conv3d(cur, net.target.head.w, net.target.head.b, 1, 0);

    if (cfg.context_decoder_and_loss) {
        for (int64_t k = 0; k < K; ++k) {
            const auto& ctx = net.contexts[static_cast<size_t>(k)];
            auto ccur = cfeat[static_cast<size_t>(k)][static_cast<size_t>(M - 2)];
            for (int64_t j = M - 3; j >= 0; --j) {
                const auto& pc = ctx.dec[static_cast<size_t>(j)];
                ccur = ag::relu(ag::instance_norm(
                    ag::conv3d(ag::upsample_nearest2(ccur), pc.w, pc.b, 1, 0)));
            }
            out.context_logits.push_back(ag::conv3d(ccur, ctx.head.w, ctx.head.b, 1, 0));
        }
    }
    return out;
}

// Lifts a sampled {Sx,Sy,Sz} patch into the tensor layout; both store x
// fastest, so the flat order is unchanged.
template <typename T>
Array<T> patch_to_tensor(const Array<float>& p, IVec3 size) {
    require_shape(p, {size[0], size[1], size[2]}, "patch");
    Array<T> t;
    t.shape = {1, 1, size[2], size[1], size[0]};
    t.data.reserve(p.data.size());
    for (float v : p.data) t.data.push_back(static_cast<T>(v));
    return t;
}

template <typename T>
ForwardResult<T> forward(const NetworkInstance<T>& net, const PatchSet& ps) {
    const NetworkConfig& cfg = net.config;
    if (static_cast<int64_t>(ps.contexts.size()) != cfg.context_count())
        throw ConfigError("patchset has " + std::to_string(ps.contexts.size()) +
                          " context patches, network expects " +
                          std::to_string(cfg.context_count()));
    Array<T> target = patch_to_tensor<T>(ps.target, cfg.target_size);
    std::vector<Array<T>> contexts;
    for (const auto& c : ps.contexts)
        contexts.push_back(patch_to_tensor<T>(c, cfg.target_size));
    return forward_batch(net, target, contexts);
}

}  // namespace mrseg
