#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <set>

#include "doctest.h"
#include "mrseg/phantom.hpp"

using namespace mrseg;

namespace {

int64_t mirror_x(const Volume& v, int64_t x) { return v.dims[0] - 1 - x; }

std::map<uint16_t, int64_t> class_counts(const Volume& labels) {
    std::map<uint16_t, int64_t> counts;
    for (uint16_t c : labels.ldata) ++counts[c];
    return counts;
}

}  // namespace

TEST_CASE("default spec validates and names five classes") {
    auto spec = PhantomSpec::default_spec();
    CHECK_NOTHROW(spec.validate());
    auto cm = phantom_class_map(spec);
    CHECK(cm.count == 5);
    CHECK(cm.names[0] == "background");
    CHECK(cm.names[1] == "humerus-left");
    CHECK(cm.names[2] == "humerus-right");
    CHECK(cm.names[3] == "femur-left");
    CHECK(cm.names[4] == "femur-right");
    CHECK_NOTHROW(cm.validate());
}

TEST_CASE("validation rejects broken geometry") {
    auto spec = PhantomSpec::default_spec();

    auto overflow = spec;
    overflow.structures[0].center[2] = 90;  // 90+28 > 91
    CHECK_THROWS_AS(overflow.validate(), ConfigError);

    auto thin_margin = spec;
    thin_margin.structures[0].center[0] = 7;  // 7-4 = 3 < required 4
    CHECK_THROWS_AS(thin_margin.validate(), ConfigError);

    auto asymmetric = spec;
    asymmetric.structures[1].center[0] += 1;
    CHECK_THROWS_AS(asymmetric.validate(), ConfigError);

    auto uneven_gain = spec;
    uneven_gain.structures[3].fg_mean = 310.0;
    CHECK_THROWS_AS(uneven_gain.validate(), ConfigError);

    auto odd_count = spec;
    odd_count.structures.pop_back();
    CHECK_THROWS_AS(odd_count.validate(), ConfigError);
    odd_count.mirrored_pairs = false;
    CHECK_NOTHROW(odd_count.validate());
}

TEST_CASE("noise-free phantom is an exact mirror with swapped pair labels") {
    auto spec = PhantomSpec::default_spec();
    spec.noise_sigma = 0.0;
    auto [image, labels] = generate_phantom(spec, 1);

    for (int64_t z = 0; z < labels.dims[2]; ++z)
        for (int64_t y = 0; y < labels.dims[1]; ++y)
            for (int64_t x = 0; x < labels.dims[0]; ++x) {
                const int64_t mx = mirror_x(labels, x);
                REQUIRE(image.at(x, y, z) == image.at(mx, y, z));
                const uint16_t c = labels.lat(x, y, z);
                const uint16_t m = labels.lat(mx, y, z);
                // pairs (1,2) and (3,4) swap under reflection
                const uint16_t want = c == 0 ? 0 : (c % 2 == 1 ? c + 1 : c - 1);
                REQUIRE(m == want);
            }
}

TEST_CASE("bar voxel counts are exact and intensities are the configured means") {
    auto spec = PhantomSpec::default_spec();
    spec.noise_sigma = 0.0;
    auto [image, labels] = generate_phantom(spec, 9);

    auto counts = class_counts(labels);
    const int64_t humerus = 9 * 9 * 57;
    const int64_t femur = 15 * 15 * 57;
    CHECK(counts[1] == humerus);
    CHECK(counts[2] == humerus);
    CHECK(counts[3] == femur);
    CHECK(counts[4] == femur);
    CHECK(counts[0] == 96 * 96 * 96 - 2 * humerus - 2 * femur);

    for (size_t i = 0; i < image.fdata.size(); ++i) {
        const float want = labels.ldata[i] == 0 ? 100.0f : 300.0f;
        REQUIRE(image.fdata[i] == want);
    }
}

TEST_CASE("ellipsoid voxel count matches the analytic volume") {
    PhantomSpec spec;
    spec.dims = {32, 32, 32};
    spec.mirrored_pairs = false;
    spec.noise_sigma = 0.0;
    PhantomStructure e;
    e.shape = PhantomStructure::Shape::Ellipsoid;
    e.name = "blob";
    e.center = {15, 15, 15};
    e.half_size = {6, 5, 4};
    spec.structures.push_back(e);

    auto [image, labels] = generate_phantom(spec, 3);
    const int64_t count = class_counts(labels)[1];
    CHECK(count == 491);  // lattice points of (x/6)^2+(y/5)^2+(z/4)^2 <= 1
    const double analytic = 4.0 / 3.0 * 3.14159265358979323846 * 6 * 5 * 4;
    CHECK(std::abs(double(count) / analytic - 1.0) < 0.1);
}

TEST_CASE("generation is deterministic per seed and noise obeys its moments") {
    auto spec = PhantomSpec::default_spec();
    auto [i1, l1] = generate_phantom(spec, 42);
    auto [i2, l2] = generate_phantom(spec, 42);
    CHECK(std::memcmp(i1.fdata.data(), i2.fdata.data(), i1.fdata.size() * sizeof(float)) == 0);
    CHECK(l1.ldata == l2.ldata);

    auto [i3, l3] = generate_phantom(spec, 43);
    CHECK(std::memcmp(i1.fdata.data(), i3.fdata.data(), i1.fdata.size() * sizeof(float)) != 0);
    CHECK(l1.ldata == l3.ldata);  // geometry is seed-independent

    auto clean_spec = spec;
    clean_spec.noise_sigma = 0.0;
    auto [clean, lc] = generate_phantom(clean_spec, 42);
    double sum = 0, sumsq = 0;
    double max_abs = 0;
    for (size_t i = 0; i < i1.fdata.size(); ++i) {
        const double n = double(i1.fdata[i]) - double(clean.fdata[i]);
        sum += n;
        sumsq += n * n;
        max_abs = std::max(max_abs, std::abs(n));
    }
    const double nvox = double(i1.fdata.size());
    const double mean = sum / nvox;
    const double sd = std::sqrt(sumsq / nvox - mean * mean);
    CHECK(std::abs(mean) < 0.05);     // se(mean) ~ 10/sqrt(884736) ~ 0.011
    CHECK(std::abs(sd - 10.0) < 0.1);
    CHECK(max_abs < 60.0);
}

TEST_CASE("patches inside mirrored bars are identical after reflection") {
    auto spec = PhantomSpec::default_spec();
    spec.noise_sigma = 0.0;
    auto [image, labels] = generate_phantom(spec, 5);

    const IVec3 lc = spec.structures[0].center;  // humerus-left
    const int64_t S = 16, h = S / 2;
    for (int64_t z = 0; z < S; ++z)
        for (int64_t y = 0; y < S; ++y)
            for (int64_t x = 0; x < S; ++x) {
                const float left = image.at(lc[0] - h + x, lc[1] - h + y, lc[2] - h + z);
                const float right =
                    image.at(mirror_x(image, lc[0] - h + x), lc[1] - h + y, lc[2] - h + z);
                REQUIRE(left == right);
            }
}

TEST_CASE("pair centroids split by more than half the volume width") {
    auto spec = PhantomSpec::default_spec();
    spec.noise_sigma = 0.0;
    auto [image, labels] = generate_phantom(spec, 2);
    double cx[5] = {0, 0, 0, 0, 0};
    int64_t n[5] = {0, 0, 0, 0, 0};
    for (int64_t z = 0; z < labels.dims[2]; ++z)
        for (int64_t y = 0; y < labels.dims[1]; ++y)
            for (int64_t x = 0; x < labels.dims[0]; ++x) {
                const uint16_t c = labels.lat(x, y, z);
                cx[c] += double(x);
                ++n[c];
            }
    for (int c = 1; c <= 4; ++c) cx[c] /= double(n[c]);
    CHECK(std::abs(cx[2] - cx[1]) > double(labels.dims[0]) / 2);
    CHECK(std::abs(cx[4] - cx[3]) > double(labels.dims[0]) / 2);
}

TEST_CASE("dataset jitter stays inside its bounds and keeps the mirror") {
    auto spec = PhantomSpec::default_spec();
    auto scans = make_dataset(16, spec, 7);
    REQUIRE(scans.size() == 16);

    bool any_offset = false, any_gain = false;
    for (const auto& scan : scans) {
        REQUIRE(scan.jittered.structures.size() == 4);
        CHECK_NOTHROW(scan.jittered.validate());
        CHECK(scan.labels.classes == 5);

        auto counts = class_counts(scan.labels);
        for (uint16_t c = 1; c <= 4; ++c) CHECK(counts[c] > 0);

        for (size_t si = 0; si < 4; ++si) {
            const auto& base = spec.structures[si];
            const auto& jit = scan.jittered.structures[si];
            for (int axis = 0; axis < 3; ++axis) {
                CHECK(std::abs(jit.center[axis] - base.center[axis]) <= 4);
                any_offset = any_offset || jit.center[axis] != base.center[axis];
            }
            CHECK(jit.fg_mean >= base.fg_mean * 0.95);
            CHECK(jit.fg_mean <= base.fg_mean * 1.05);
            any_gain = any_gain || jit.fg_mean != base.fg_mean;
        }
        for (size_t si = 0; si < 4; si += 2) {
            const auto& l = scan.jittered.structures[si];
            const auto& r = scan.jittered.structures[si + 1];
            CHECK(r.center[0] == spec.dims[0] - 1 - l.center[0]);
            CHECK(r.center[1] == l.center[1]);
            CHECK(r.center[2] == l.center[2]);
            CHECK(r.fg_mean == l.fg_mean);
        }
    }
    CHECK(any_offset);
    CHECK(any_gain);

    auto again = make_dataset(16, spec, 7);
    for (size_t i = 0; i < scans.size(); ++i) {
        CHECK(std::memcmp(scans[i].image.fdata.data(), again[i].image.fdata.data(),
                          scans[i].image.fdata.size() * sizeof(float)) == 0);
        CHECK(scans[i].labels.ldata == again[i].labels.ldata);
    }

    bool scans_differ = false;
    for (size_t i = 1; i < scans.size(); ++i)
        scans_differ = scans_differ || scans[i].labels.ldata != scans[0].labels.ldata;
    CHECK(scans_differ);
}

TEST_CASE("saved dataset round trips through its manifest") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "mrseg_phantom_ds";
    fs::remove_all(dir);

    auto spec = PhantomSpec::default_spec();
    auto scans = make_dataset(6, spec, 11);
    const std::string manifest_path =
        save_dataset(dir.string(), scans, phantom_class_map(spec), 5);

    auto m = load_dataset_manifest(manifest_path);
    CHECK(m.classes.count == 5);
    CHECK(m.fold_count == 5);
    REQUIRE(m.scans.size() == 6);
    for (size_t i = 0; i < m.scans.size(); ++i)
        CHECK(m.scans[i].fold == static_cast<int64_t>(i) % 5);

    auto img = read_volume(resolve_scan_path(manifest_path, m.scans[3].image));
    auto lab = read_volume(resolve_scan_path(manifest_path, m.scans[3].labels));
    CHECK(std::memcmp(img.fdata.data(), scans[3].image.fdata.data(),
                      img.fdata.size() * sizeof(float)) == 0);
    CHECK(lab.ldata == scans[3].labels.ldata);
    CHECK(lab.classes == 5);

    CHECK_THROWS_AS(load_dataset_manifest((dir / "nope.json").string()), IoError);
    fs::remove_all(dir);
}
