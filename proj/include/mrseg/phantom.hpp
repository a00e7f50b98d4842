#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mrseg/dataset.hpp"
#include "mrseg/volume.hpp"

namespace mrseg {

// Axis-aligned solid; class id is its index in PhantomSpec::structures + 1.
struct PhantomStructure {
    enum class Shape { Bar, Ellipsoid };

    Shape shape = Shape::Bar;
    std::string name;
    IVec3 center{0, 0, 0};
    IVec3 half_size{1, 1, 1};  // bar: half edge lengths; ellipsoid: semi-axes
    double fg_mean = 300.0;
};

// Synthetic scene whose structures are locally look-alike but sit at
// globally distinguishable positions. With mirrored_pairs set, structures
// (0,1), (2,3), ... must be exact reflections of each other about the
// x midplane, in both geometry and intensity parameters.
struct PhantomSpec {
    IVec3 dims{96, 96, 96};
    std::vector<PhantomStructure> structures;
    bool mirrored_pairs = true;
    double bg_mean = 100.0;
    double noise_sigma = 10.0;  // 5% of the default 200 fg/bg contrast

    void validate() const;

    // Two mirrored thin bars ("humeri") above two mirrored thick bars
    // ("femora"), 5 classes with background.
    static PhantomSpec default_spec();
};

ClassMap phantom_class_map(const PhantomSpec& spec);

// JSON form: {dims, bg_mean, noise_sigma, mirrored_pairs, structures:
// [{name, shape: "bar"|"ellipsoid", center, half_size, fg_mean}]}; dims,
// center and half_size are 3-arrays. Unknown keys are rejected.
PhantomSpec parse_phantom_spec(const std::string& json_text);
PhantomSpec load_phantom_spec(const std::string& path);
std::string phantom_spec_json(const PhantomSpec& spec);

// Paints labels, fills intensities (bg_mean / per-structure fg_mean) and
// adds i.i.d. Gaussian noise drawn deterministically from the seed.
std::pair<Volume, Volume> generate_phantom(const PhantomSpec& spec, uint64_t seed);

struct PhantomScan {
    Volume image;
    Volume labels;
    PhantomSpec jittered;  // the exact spec this scan was generated from
};

// n_scans independent draws: per scan, each structure pair gets a mirrored
// position offset within +/-4 voxels and a shared intensity factor within
// +/-5%; then generate_phantom runs on the jittered spec.
std::vector<PhantomScan> make_dataset(int64_t n_scans, const PhantomSpec& spec, uint64_t seed);

// Writes scan_%02d_{image,labels} pairs plus manifest.json with round-robin
// fold assignment (scan i -> fold i % fold_count). Returns the manifest path.
std::string save_dataset(const std::string& dir, const std::vector<PhantomScan>& scans,
                         const ClassMap& classes, int64_t fold_count);

}  // namespace mrseg
