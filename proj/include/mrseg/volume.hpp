#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mrseg/errors.hpp"

namespace mrseg {

using IVec3 = std::array<int64_t, 3>;

enum class VolumeDtype { F32, U16Label };

// Dense 3D grid with spacing metadata. Data is stored x-fastest:
// index = x + nx*(y + ny*z). Immutable by convention once filled.
struct Volume {
    IVec3 dims{0, 0, 0};                  // (nx, ny, nz)
    std::array<double, 3> spacing{1, 1, 1};  // mm per voxel
    VolumeDtype dtype = VolumeDtype::F32;
    int64_t classes = 0;                  // label volumes only: values lie in [0, classes)
    std::vector<float> fdata;             // used when dtype == F32
    std::vector<uint16_t> ldata;          // used when dtype == U16Label

    int64_t nx() const { return dims[0]; }
    int64_t ny() const { return dims[1]; }
    int64_t nz() const { return dims[2]; }
    int64_t voxels() const { return dims[0] * dims[1] * dims[2]; }

    int64_t index(int64_t x, int64_t y, int64_t z) const {
        return x + dims[0] * (y + dims[1] * z);
    }
    float& at(int64_t x, int64_t y, int64_t z) { return fdata[index(x, y, z)]; }
    float at(int64_t x, int64_t y, int64_t z) const { return fdata[index(x, y, z)]; }
    uint16_t& lat(int64_t x, int64_t y, int64_t z) { return ldata[index(x, y, z)]; }
    uint16_t lat(int64_t x, int64_t y, int64_t z) const { return ldata[index(x, y, z)]; }

    static Volume make_f32(IVec3 dims, float fill = 0.0f);
    static Volume make_labels(IVec3 dims, int64_t classes, uint16_t fill = 0);

    // Throws ConfigError if any structural invariant is violated.
    void validate() const;
};

struct ClassMap {
    int64_t count = 0;
    std::vector<std::string> names;  // names[0] must be "background"

    void validate() const;
    static ClassMap background_plus(const std::vector<std::string>& fg_names);
};

// Header+raw pair I/O. `path` may name either file of the pair or the common
// stem; "<stem>.json" and "<stem>.raw" are read/written. Values are
// little-endian and bit-exact.
Volume read_volume(const std::string& path);
void write_volume(const Volume& v, const std::string& path);

// Per-side padding that replicates the nearest edge voxel. pad components
// must be >= 0; zero padding returns a copy.
Volume pad_edge(const Volume& v, const IVec3& pad);

// Per-axis padding required so that, for every center whose target patch lies
// inside the original extent, a context window of `fov` voxels fits:
// (fov - target) / 2.
int64_t context_padding(int64_t fov, int64_t target);

}  // namespace mrseg
