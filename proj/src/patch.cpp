#include "mrseg/patch.hpp"

#include <string>

namespace mrseg {

void PatchSpec::validate(int64_t levels) const {
    if (levels < 2) throw ConfigError("network depth must be at least 2 levels");
    const int64_t unit = int64_t(1) << (levels - 1);
    for (int a = 0; a < 3; ++a) {
        if (target_size[a] < 1)
            throw ConfigError("target size components must be positive");
        if (target_size[a] % unit != 0)
            throw ConfigError("target size " + std::to_string(target_size[a]) +
                              " must be a positive multiple of 2^(levels-1) = " +
                              std::to_string(unit));
    }
    int64_t prev = 0;
    for (int64_t k : kappas) {
        if (k < 1) throw ConfigError("context scales must be >= 1");
        if (k <= prev) throw ConfigError("context scales must be strictly increasing");
        prev = k;
    }
}

Array<float> downsample_avg(const Array<float>& v, int64_t kappa) {
    if (v.shape.size() != 3) throw ConfigError("downsample_avg expects a 3-d array");
    if (kappa < 1) throw ConfigError("downsample_avg needs kappa >= 1");
    const int64_t f = int64_t(1) << kappa;
    for (int64_t d : v.shape)
        if (d % f != 0)
            throw ConfigError("downsample_avg: dim " + std::to_string(d) +
                              " not divisible by 2^kappa = " + std::to_string(f));
    const int64_t X = v.shape[0], Y = v.shape[1], Z = v.shape[2];
    const int64_t Xo = X / f, Yo = Y / f, Zo = Z / f;
    Array<float> out = Array<float>::zeros({Xo, Yo, Zo});
    const double inv = 1.0 / static_cast<double>(f * f * f);
    for (int64_t zo = 0; zo < Zo; ++zo)
        for (int64_t yo = 0; yo < Yo; ++yo)
            for (int64_t xo = 0; xo < Xo; ++xo) {
                double acc = 0;
                for (int64_t kz = 0; kz < f; ++kz)
                    for (int64_t ky = 0; ky < f; ++ky)
                        for (int64_t kx = 0; kx < f; ++kx)
                            acc += v.data[static_cast<size_t>(
                                (xo * f + kx) + X * ((yo * f + ky) + Y * (zo * f + kz)))];
                out.data[static_cast<size_t>(xo + Xo * (yo + Yo * zo))] =
                    static_cast<float>(acc * inv);
            }
    return out;
}

namespace {

void check_window(const Volume& v, IVec3 lo, IVec3 size) {
    for (int a = 0; a < 3; ++a)
        if (lo[a] < 0 || lo[a] + size[a] > v.dims[a])
            throw RuntimeFailure(
                "sampling window [" + std::to_string(lo[a]) + ", " +
                std::to_string(lo[a] + size[a]) + ") exceeds padded axis-" + std::to_string(a) +
                " extent " + std::to_string(v.dims[a]) + "; volume padding is insufficient");
}

Array<float> crop_f32(const Volume& v, IVec3 lo, IVec3 size) {
    check_window(v, lo, size);
    Array<float> out = Array<float>::zeros({size[0], size[1], size[2]});
    size_t i = 0;
    for (int64_t z = 0; z < size[2]; ++z)
        for (int64_t y = 0; y < size[1]; ++y)
            for (int64_t x = 0; x < size[0]; ++x)
                out.data[i++] = v.at(lo[0] + x, lo[1] + y, lo[2] + z);
    return out;
}

Array<uint16_t> crop_labels(const Volume& v, IVec3 lo, IVec3 size) {
    check_window(v, lo, size);
    Array<uint16_t> out = Array<uint16_t>::zeros({size[0], size[1], size[2]});
    size_t i = 0;
    for (int64_t z = 0; z < size[2]; ++z)
        for (int64_t y = 0; y < size[1]; ++y)
            for (int64_t x = 0; x < size[0]; ++x)
                out.data[i++] = v.lat(lo[0] + x, lo[1] + y, lo[2] + z);
    return out;
}

IVec3 window_lo(IVec3 center, IVec3 size) {
    return {center[0] - size[0] / 2, center[1] - size[1] / 2, center[2] - size[2] / 2};
}

}  // namespace

PatchSet sample_patchset(const Volume& padded, IVec3 center, const PatchSpec& spec) {
    if (padded.dtype != VolumeDtype::F32)
        throw ConfigError("sample_patchset expects an intensity volume");
    PatchSet set;
    set.center = center;
    const IVec3 S = spec.target_size;
    set.target = crop_f32(padded, window_lo(center, S), S);
    for (int64_t kappa : spec.kappas) {
        const IVec3 w{S[0] << kappa, S[1] << kappa, S[2] << kappa};
        set.contexts.push_back(downsample_avg(crop_f32(padded, window_lo(center, w), w), kappa));
    }
    return set;
}

LabelPatchSet sample_label_patchset(const Volume& padded_labels, IVec3 center,
                                    const PatchSpec& spec, ContextLabelMode mode) {
    if (padded_labels.dtype != VolumeDtype::U16Label)
        throw ConfigError("sample_label_patchset expects a label volume");
    (void)mode;  // BlockCenter is the only mode
    LabelPatchSet set;
    set.center = center;
    const IVec3 S = spec.target_size;
    set.target = crop_labels(padded_labels, window_lo(center, S), S);
    for (int64_t kappa : spec.kappas) {
        const int64_t f = int64_t(1) << kappa;
        const int64_t off = f / 2;  // block-center representative
        const IVec3 w{S[0] << kappa, S[1] << kappa, S[2] << kappa};
        Array<uint16_t> win = crop_labels(padded_labels, window_lo(center, w), w);
        Array<uint16_t> out = Array<uint16_t>::zeros({S[0], S[1], S[2]});
        size_t i = 0;
        for (int64_t z = 0; z < S[2]; ++z)
            for (int64_t y = 0; y < S[1]; ++y)
                for (int64_t x = 0; x < S[0]; ++x)
                    out.data[i++] = win.data[static_cast<size_t>(
                        (x * f + off) + w[0] * ((y * f + off) + w[1] * (z * f + off)))];
        set.contexts.push_back(std::move(out));
    }
    return set;
}

std::vector<IVec3> tile_centers(IVec3 image_dims, const PatchSpec& spec) {
    const IVec3 S = spec.target_size;
    std::array<std::vector<int64_t>, 3> axis;
    for (int a = 0; a < 3; ++a) {
        const int64_t n = image_dims[a];
        if (n < 1) throw ConfigError("image dims must be positive");
        if (n < S[a])
            throw ConfigError("volume axis " + std::to_string(a) + " extent " + std::to_string(n) +
                              " is smaller than the target patch " + std::to_string(S[a]));
        for (int64_t c = S[a] / 2; c + S[a] / 2 <= n; c += S[a]) axis[a].push_back(c);
        if (axis[a].back() + S[a] / 2 < n) axis[a].push_back(n - S[a] / 2);
    }
    std::vector<IVec3> centers;
    centers.reserve(axis[0].size() * axis[1].size() * axis[2].size());
    for (int64_t cz : axis[2])
        for (int64_t cy : axis[1])
            for (int64_t cx : axis[0]) centers.push_back({cx, cy, cz});
    return centers;
}

}  // namespace mrseg
