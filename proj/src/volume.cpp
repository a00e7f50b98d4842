#include "mrseg/volume.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mrseg {

static_assert(std::endian::native == std::endian::little,
              "raw volume I/O assumes a little-endian host");

Volume Volume::make_f32(IVec3 dims, float fill) {
    Volume v;
    v.dims = dims;
    v.dtype = VolumeDtype::F32;
    v.fdata.assign(static_cast<size_t>(dims[0] * dims[1] * dims[2]), fill);
    return v;
}

Volume Volume::make_labels(IVec3 dims, int64_t classes, uint16_t fill) {
    Volume v;
    v.dims = dims;
    v.dtype = VolumeDtype::U16Label;
    v.classes = classes;
    v.ldata.assign(static_cast<size_t>(dims[0] * dims[1] * dims[2]), fill);
    return v;
}

void Volume::validate() const {
    for (int a = 0; a < 3; ++a) {
        if (dims[a] < 1) throw ConfigError("volume dims must all be >= 1");
        if (!(spacing[a] > 0)) throw ConfigError("volume spacing must be > 0");
    }
    const size_t n = static_cast<size_t>(voxels());
    if (dtype == VolumeDtype::F32) {
        if (fdata.size() != n) throw ConfigError("volume data length does not match dims");
    } else {
        if (ldata.size() != n) throw ConfigError("volume data length does not match dims");
        if (classes < 1) throw ConfigError("label volume must declare classes >= 1");
        for (uint16_t v : ldata) {
            if (v >= classes) throw ConfigError("label value out of range [0, classes)");
        }
    }
}

void ClassMap::validate() const {
    if (count < 1) throw ConfigError("class count must be >= 1");
    if (static_cast<int64_t>(names.size()) != count)
        throw ConfigError("class map needs exactly one name per class");
    if (names[0] != "background") throw ConfigError("class 0 must be named \"background\"");
}

ClassMap ClassMap::background_plus(const std::vector<std::string>& fg_names) {
    ClassMap m;
    m.names.push_back("background");
    m.names.insert(m.names.end(), fg_names.begin(), fg_names.end());
    m.count = static_cast<int64_t>(m.names.size());
    return m;
}

// Accepts "<stem>", "<stem>.json" or "<stem>.raw".
static std::pair<fs::path, fs::path> header_raw_paths(const std::string& path) {
    fs::path p(path);
    if (p.extension() == ".json" || p.extension() == ".raw") p.replace_extension();
    fs::path header = p;
    header += ".json";
    fs::path raw = p;
    raw += ".raw";
    return {header, raw};
}

Volume read_volume(const std::string& path) {
    auto [header_path, raw_path] = header_raw_paths(path);
    std::ifstream hf(header_path);
    if (!hf) throw IoError(IoErrc::FileNotFound, "cannot open header " + header_path.string());

    json h;
    try {
        h = json::parse(hf);
    } catch (const json::exception& e) {
        throw IoError(IoErrc::MalformedHeader,
                      "malformed header " + header_path.string() + ": " + e.what());
    }

    Volume v;
    try {
        auto dims = h.at("dims");
        auto spacing = h.at("spacing");
        if (dims.size() != 3 || spacing.size() != 3)
            throw IoError(IoErrc::MalformedHeader, "dims/spacing must have 3 entries");
        for (int a = 0; a < 3; ++a) {
            v.dims[a] = dims[a].get<int64_t>();
            v.spacing[a] = spacing[a].get<double>();
        }
        if (h.at("order").get<std::string>() != "row-major-x-fastest")
            throw IoError(IoErrc::MalformedHeader, "unsupported voxel order");
        const std::string dtype = h.at("dtype").get<std::string>();
        if (dtype == "f32") {
            v.dtype = VolumeDtype::F32;
        } else if (dtype == "u16") {
            v.dtype = VolumeDtype::U16Label;
            v.classes = h.at("classes").get<int64_t>();
        } else {
            throw IoError(IoErrc::UnknownDtype, "unknown dtype \"" + dtype + "\"");
        }
    } catch (const json::exception& e) {
        throw IoError(IoErrc::MalformedHeader,
                      "malformed header " + header_path.string() + ": " + e.what());
    }

    std::ifstream rf(raw_path, std::ios::binary);
    if (!rf) throw IoError(IoErrc::FileNotFound, "cannot open raw " + raw_path.string());
    rf.seekg(0, std::ios::end);
    const int64_t bytes = rf.tellg();
    rf.seekg(0);

    const int64_t n = v.dims[0] * v.dims[1] * v.dims[2];
    const int64_t elem = v.dtype == VolumeDtype::F32 ? 4 : 2;
    if (bytes != n * elem)
        throw IoError(IoErrc::DataLengthMismatch,
                      "raw file holds " + std::to_string(bytes) + " bytes, header implies " +
                          std::to_string(n * elem));

    if (v.dtype == VolumeDtype::F32) {
        v.fdata.resize(static_cast<size_t>(n));
        rf.read(reinterpret_cast<char*>(v.fdata.data()), bytes);
    } else {
        v.ldata.resize(static_cast<size_t>(n));
        rf.read(reinterpret_cast<char*>(v.ldata.data()), bytes);
    }
    if (!rf) throw IoError(IoErrc::DataLengthMismatch, "short read from " + raw_path.string());

    // Bit-exactness matters; range checking of labels does not alter data.
    if (v.dtype == VolumeDtype::U16Label) {
        for (uint16_t lv : v.ldata)
            if (lv >= v.classes)
                throw IoError(IoErrc::MalformedHeader, "label value exceeds declared classes");
    }
    for (int a = 0; a < 3; ++a)
        if (v.dims[a] < 1 || !(v.spacing[a] > 0))
            throw IoError(IoErrc::MalformedHeader, "non-positive dims or spacing");
    return v;
}

void write_volume(const Volume& v, const std::string& path) {
    v.validate();
    auto [header_path, raw_path] = header_raw_paths(path);

    json h;
    h["dims"] = {v.dims[0], v.dims[1], v.dims[2]};
    h["spacing"] = {v.spacing[0], v.spacing[1], v.spacing[2]};
    h["order"] = "row-major-x-fastest";
    if (v.dtype == VolumeDtype::F32) {
        h["dtype"] = "f32";
    } else {
        h["dtype"] = "u16";
        h["classes"] = v.classes;
    }

    std::ofstream hf(header_path);
    if (!hf) throw IoError(IoErrc::WriteFailed, "cannot write " + header_path.string());
    hf << h.dump(2) << "\n";
    if (!hf) throw IoError(IoErrc::WriteFailed, "cannot write " + header_path.string());

    std::ofstream rf(raw_path, std::ios::binary);
    if (!rf) throw IoError(IoErrc::WriteFailed, "cannot write " + raw_path.string());
    if (v.dtype == VolumeDtype::F32) {
        rf.write(reinterpret_cast<const char*>(v.fdata.data()),
                 static_cast<std::streamsize>(v.fdata.size() * 4));
    } else {
        rf.write(reinterpret_cast<const char*>(v.ldata.data()),
                 static_cast<std::streamsize>(v.ldata.size() * 2));
    }
    if (!rf) throw IoError(IoErrc::WriteFailed, "cannot write " + raw_path.string());
}

static int64_t clampi(int64_t v, int64_t lo, int64_t hi) {
    return std::min(std::max(v, lo), hi);
}

Volume pad_edge(const Volume& v, const IVec3& pad) {
    for (int a = 0; a < 3; ++a)
        if (pad[a] < 0) throw ConfigError("pad components must be >= 0");

    IVec3 nd{v.dims[0] + 2 * pad[0], v.dims[1] + 2 * pad[1], v.dims[2] + 2 * pad[2]};
    Volume out;
    if (v.dtype == VolumeDtype::F32) {
        out = Volume::make_f32(nd);
    } else {
        out = Volume::make_labels(nd, v.classes);
    }
    out.spacing = v.spacing;

    for (int64_t z = 0; z < nd[2]; ++z) {
        const int64_t sz = clampi(z - pad[2], 0, v.dims[2] - 1);
        for (int64_t y = 0; y < nd[1]; ++y) {
            const int64_t sy = clampi(y - pad[1], 0, v.dims[1] - 1);
            for (int64_t x = 0; x < nd[0]; ++x) {
                const int64_t sx = clampi(x - pad[0], 0, v.dims[0] - 1);
                if (v.dtype == VolumeDtype::F32)
                    out.at(x, y, z) = v.at(sx, sy, sz);
                else
                    out.lat(x, y, z) = v.lat(sx, sy, sz);
            }
        }
    }
    return out;
}

int64_t context_padding(int64_t fov, int64_t target) {
    return (fov - target) / 2;
}

}  // namespace mrseg
