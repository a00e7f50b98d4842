#pragma once

#include <cstdint>
#include <vector>

#include "mrseg/tensor.hpp"
#include "mrseg/volume.hpp"

namespace mrseg {

// Geometry of one multi-resolution sample: a full-resolution target patch of
// target_size plus one context patch per kappa, each covering a field of view
// 2^kappa times larger and average-pooled back down to target_size.
struct PatchSpec {
    IVec3 target_size{0, 0, 0};
    std::vector<int64_t> kappas;  // strictly increasing, all >= 1

    // `levels` is the network depth M; sizes must divide into 2^(M-1).
    void validate(int64_t levels) const;

    int64_t context_count() const { return static_cast<int64_t>(kappas.size()); }
    int64_t max_kappa() const { return kappas.empty() ? 0 : kappas.back(); }

    // Edge length of the widest window along an axis: 2^max_kappa * S.
    int64_t max_fov(int axis) const { return target_size[axis] << max_kappa(); }

    // Per-side padding that makes every center in [S/2, n-S/2] sampleable.
    IVec3 required_padding() const {
        return {(max_fov(0) - target_size[0]) / 2, (max_fov(1) - target_size[1]) / 2,
                (max_fov(2) - target_size[2]) / 2};
    }
};

// Arrays are shaped {Sx,Sy,Sz}; center is a voxel coordinate in the padded
// volume the set was sampled from.
struct PatchSet {
    Array<float> target;
    std::vector<Array<float>> contexts;
    IVec3 center{0, 0, 0};
};

struct LabelPatchSet {
    Array<uint16_t> target;
    std::vector<Array<uint16_t>> contexts;
    IVec3 center{0, 0, 0};
};

enum class ContextLabelMode { BlockCenter };

// Mean over non-overlapping 2^kappa blocks; every dim must divide evenly.
Array<float> downsample_avg(const Array<float>& v, int64_t kappa);

// Extracts the target crop plus each context window (downsampled by its
// kappa) centered at `center`, all from an already padded intensity volume.
// Windows that leave the padded bounds raise RuntimeFailure.
PatchSet sample_patchset(const Volume& padded, IVec3 center, const PatchSpec& spec);

// Label counterpart; context labels are subsampled at block centers so that
// values stay integral class ids.
LabelPatchSet sample_label_patchset(const Volume& padded_labels, IVec3 center,
                                    const PatchSpec& spec,
                                    ContextLabelMode mode = ContextLabelMode::BlockCenter);

// Centers whose target patches cover [0, dims) exactly: a stride-S grid from
// S/2 with a final center flush against dims - S/2 when S does not divide
// dims. Coordinates are in the unpadded frame.
std::vector<IVec3> tile_centers(IVec3 image_dims, const PatchSpec& spec);

}  // namespace mrseg
