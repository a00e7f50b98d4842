#include "mrseg/phantom.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "mrseg/errors.hpp"
#include "mrseg/rng.hpp"

namespace mrseg {

namespace {

constexpr int64_t kMargin = 4;

bool inside(const PhantomStructure& s, int64_t x, int64_t y, int64_t z) {
    const double dx = static_cast<double>(x - s.center[0]);
    const double dy = static_cast<double>(y - s.center[1]);
    const double dz = static_cast<double>(z - s.center[2]);
    if (s.shape == PhantomStructure::Shape::Bar)
        return std::abs(dx) <= s.half_size[0] && std::abs(dy) <= s.half_size[1] &&
               std::abs(dz) <= s.half_size[2];
    const double a = dx / static_cast<double>(s.half_size[0]);
    const double b = dy / static_cast<double>(s.half_size[1]);
    const double c = dz / static_cast<double>(s.half_size[2]);
    return a * a + b * b + c * c <= 1.0;
}

}  // namespace

void PhantomSpec::validate() const {
    if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1)
        throw ConfigError("phantom dims must be positive");
    if (structures.empty()) throw ConfigError("phantom needs at least one structure");
    if (noise_sigma < 0) throw ConfigError("noise_sigma must not be negative");
    for (const auto& s : structures) {
        if (s.name.empty()) throw ConfigError("every phantom structure needs a name");
        for (int axis = 0; axis < 3; ++axis) {
            if (s.half_size[axis] < 1)
                throw ConfigError("structure " + s.name + ": half_size must be at least 1");
            const int64_t lo = s.center[axis] - s.half_size[axis];
            const int64_t hi = s.center[axis] + s.half_size[axis];
            if (lo < kMargin || hi > dims[axis] - 1 - kMargin)
                throw ConfigError("structure " + s.name + " spans [" + std::to_string(lo) +
                                  ", " + std::to_string(hi) + "] on axis " +
                                  std::to_string(axis) + "; it must fit inside the volume with a " +
                                  std::to_string(kMargin) + " voxel margin");
        }
    }
    if (mirrored_pairs) {
        if (structures.size() % 2 != 0)
            throw ConfigError("mirrored_pairs needs an even number of structures");
        for (size_t i = 0; i + 1 < structures.size(); i += 2) {
            const auto& l = structures[i];
            const auto& r = structures[i + 1];
            const bool mirror_geometry =
                r.center[0] == dims[0] - 1 - l.center[0] && r.center[1] == l.center[1] &&
                r.center[2] == l.center[2] && r.half_size == l.half_size &&
                r.shape == l.shape;
            if (!mirror_geometry || r.fg_mean != l.fg_mean)
                throw ConfigError("structures " + l.name + " and " + r.name +
                                  " must be exact reflections about the x midplane");
        }
    }
}

PhantomSpec PhantomSpec::default_spec() {
    PhantomSpec spec;
    auto pair = [&](const std::string& base, IVec3 left_center, IVec3 half) {
        PhantomStructure l;
        l.name = base + "-left";
        l.center = left_center;
        l.half_size = half;
        PhantomStructure r = l;
        r.name = base + "-right";
        r.center[0] = spec.dims[0] - 1 - left_center[0];
        spec.structures.push_back(l);
        spec.structures.push_back(r);
    };
    pair("humerus", {16, 58, 48}, {4, 4, 28});
    pair("femur", {16, 34, 48}, {7, 7, 28});
    return spec;
}

ClassMap phantom_class_map(const PhantomSpec& spec) {
    std::vector<std::string> fg;
    for (const auto& s : spec.structures) fg.push_back(s.name);
    return ClassMap::background_plus(fg);
}

namespace {

using nlohmann::json;

IVec3 require_ivec3(const json& j, const char* key) {
    const json& v = j.at(key);
    if (!v.is_array() || v.size() != 3 || !v[0].is_number_integer() ||
        !v[1].is_number_integer() || !v[2].is_number_integer())
        throw ConfigError(std::string("phantom spec: '") + key + "' must be a 3-array of integers");
    return {v[0].get<int64_t>(), v[1].get<int64_t>(), v[2].get<int64_t>()};
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const char* where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok)
            throw ConfigError(std::string("phantom spec: unknown key '") + it.key() + "' in " +
                              where);
    }
}

}  // namespace

PhantomSpec parse_phantom_spec(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("phantom spec: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("phantom spec: top level must be an object");
    reject_unknown(j, {"dims", "bg_mean", "noise_sigma", "mirrored_pairs", "structures"},
                   "the top level");
    if (!j.contains("structures") || !j.at("structures").is_array())
        throw ConfigError("phantom spec: 'structures' array is required");

    PhantomSpec spec;
    if (j.contains("dims")) spec.dims = require_ivec3(j, "dims");
    if (j.contains("bg_mean")) spec.bg_mean = j.at("bg_mean").get<double>();
    if (j.contains("noise_sigma")) spec.noise_sigma = j.at("noise_sigma").get<double>();
    if (j.contains("mirrored_pairs")) {
        if (!j.at("mirrored_pairs").is_boolean())
            throw ConfigError("phantom spec: 'mirrored_pairs' must be a boolean");
        spec.mirrored_pairs = j.at("mirrored_pairs").get<bool>();
    }
    for (const json& sj : j.at("structures")) {
        if (!sj.is_object()) throw ConfigError("phantom spec: each structure must be an object");
        reject_unknown(sj, {"name", "shape", "center", "half_size", "fg_mean"}, "a structure");
        for (const char* k : {"name", "center", "half_size"})
            if (!sj.contains(k))
                throw ConfigError(std::string("phantom spec: structure missing key '") + k + "'");
        PhantomStructure s;
        if (!sj.at("name").is_string())
            throw ConfigError("phantom spec: structure 'name' must be a string");
        s.name = sj.at("name").get<std::string>();
        if (sj.contains("shape")) {
            const std::string shape = sj.at("shape").get<std::string>();
            if (shape == "bar")
                s.shape = PhantomStructure::Shape::Bar;
            else if (shape == "ellipsoid")
                s.shape = PhantomStructure::Shape::Ellipsoid;
            else
                throw ConfigError("phantom spec: shape '" + shape +
                                  "' must be \"bar\" or \"ellipsoid\"");
        }
        s.center = require_ivec3(sj, "center");
        s.half_size = require_ivec3(sj, "half_size");
        if (sj.contains("fg_mean")) s.fg_mean = sj.at("fg_mean").get<double>();
        spec.structures.push_back(std::move(s));
    }
    spec.validate();
    return spec;
}

PhantomSpec load_phantom_spec(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(IoErrc::FileNotFound, "phantom spec not found: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_phantom_spec(ss.str());
}

std::string phantom_spec_json(const PhantomSpec& spec) {
    json j;
    j["dims"] = {spec.dims[0], spec.dims[1], spec.dims[2]};
    j["bg_mean"] = spec.bg_mean;
    j["noise_sigma"] = spec.noise_sigma;
    j["mirrored_pairs"] = spec.mirrored_pairs;
    j["structures"] = json::array();
    for (const auto& s : spec.structures) {
        json sj;
        sj["name"] = s.name;
        sj["shape"] = s.shape == PhantomStructure::Shape::Bar ? "bar" : "ellipsoid";
        sj["center"] = {s.center[0], s.center[1], s.center[2]};
        sj["half_size"] = {s.half_size[0], s.half_size[1], s.half_size[2]};
        sj["fg_mean"] = s.fg_mean;
        j["structures"].push_back(sj);
    }
    return j.dump(2) + "\n";
}

std::pair<Volume, Volume> generate_phantom(const PhantomSpec& spec, uint64_t seed) {
    spec.validate();
    const IVec3 d = spec.dims;
    Volume labels = Volume::make_labels(d, static_cast<int64_t>(spec.structures.size()) + 1);
    Volume image = Volume::make_f32(d);

    for (size_t si = 0; si < spec.structures.size(); ++si) {
        const auto& s = spec.structures[si];
        const uint16_t cls = static_cast<uint16_t>(si + 1);
        for (int64_t z = s.center[2] - s.half_size[2]; z <= s.center[2] + s.half_size[2]; ++z)
            for (int64_t y = s.center[1] - s.half_size[1]; y <= s.center[1] + s.half_size[1]; ++y)
                for (int64_t x = s.center[0] - s.half_size[0]; x <= s.center[0] + s.half_size[0]; ++x)
                    if (inside(s, x, y, z)) labels.lat(x, y, z) = cls;
    }

    for (size_t i = 0; i < image.fdata.size(); ++i) {
        const uint16_t c = labels.ldata[i];
        image.fdata[i] = static_cast<float>(c == 0 ? spec.bg_mean
                                                   : spec.structures[c - 1].fg_mean);
    }
    if (spec.noise_sigma > 0) {
        Rng noise(derive_seed(seed, "phantom.noise"));
        for (auto& v : image.fdata)
            v += static_cast<float>(noise.normal(0.0, spec.noise_sigma));
    }
    return {std::move(image), std::move(labels)};
}

std::vector<PhantomScan> make_dataset(int64_t n_scans, const PhantomSpec& spec, uint64_t seed) {
    spec.validate();
    if (n_scans < 1) throw ConfigError("make_dataset needs at least one scan");

    std::vector<PhantomScan> out;
    for (int64_t i = 0; i < n_scans; ++i) {
        const std::string tag = "phantom.scan." + std::to_string(i);
        Rng jit(derive_seed(seed, tag));
        PhantomSpec js = spec;
        const size_t step = js.mirrored_pairs ? 2 : 1;
        for (size_t si = 0; si < js.structures.size(); si += step) {
            const IVec3 off{jit.uniform_int(-4, 4), jit.uniform_int(-4, 4),
                            jit.uniform_int(-4, 4)};
            const double gain = 1.0 + jit.uniform(-0.05, 0.05);
            auto& l = js.structures[si];
            l.center = {l.center[0] + off[0], l.center[1] + off[1], l.center[2] + off[2]};
            l.fg_mean *= gain;
            if (js.mirrored_pairs) {
                auto& r = js.structures[si + 1];
                // The pair stays an exact reflection: the x offset flips sign.
                r.center = {r.center[0] - off[0], r.center[1] + off[1], r.center[2] + off[2]};
                r.fg_mean *= gain;
            }
        }
        auto pair = generate_phantom(js, derive_seed(seed, tag));
        out.push_back(PhantomScan{std::move(pair.first), std::move(pair.second), std::move(js)});
    }
    return out;
}

std::string save_dataset(const std::string& dir, const std::vector<PhantomScan>& scans,
                         const ClassMap& classes, int64_t fold_count) {
    if (scans.empty()) throw ConfigError("save_dataset: no scans");
    std::filesystem::create_directories(dir);

    DatasetManifest m;
    m.classes = classes;
    m.fold_count = fold_count;
    for (size_t i = 0; i < scans.size(); ++i) {
        char img[32], lab[32];
        std::snprintf(img, sizeof img, "scan_%02zu_image", i);
        std::snprintf(lab, sizeof lab, "scan_%02zu_labels", i);
        write_volume(scans[i].image, (std::filesystem::path(dir) / img).string());
        write_volume(scans[i].labels, (std::filesystem::path(dir) / lab).string());
        m.scans.push_back(ScanEntry{img, lab, static_cast<int64_t>(i) % fold_count});
    }
    const std::string path = (std::filesystem::path(dir) / "manifest.json").string();
    save_dataset_manifest(path, m);
    return path;
}

}  // namespace mrseg
