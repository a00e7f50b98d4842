#include "mrseg/dataset.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "mrseg/errors.hpp"

namespace mrseg {

using nlohmann::json;

void DatasetManifest::validate() const {
    classes.validate();
    if (fold_count < 1) throw ConfigError("dataset manifest: fold_count must be positive");
    for (const auto& s : scans) {
        if (s.image.empty() || s.labels.empty())
            throw ConfigError("dataset manifest: scan entries need image and labels stems");
        if (s.fold < 0 || s.fold >= fold_count)
            throw ConfigError("dataset manifest: scan fold " + std::to_string(s.fold) +
                              " outside [0, " + std::to_string(fold_count) + ")");
    }
}

void save_dataset_manifest(const std::string& path, const DatasetManifest& m) {
    m.validate();
    json j;
    j["classes"] = m.classes.names;
    j["fold_count"] = m.fold_count;
    j["scans"] = json::array();
    for (const auto& s : m.scans)
        j["scans"].push_back({{"image", s.image}, {"labels", s.labels}, {"fold", s.fold}});
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(IoErrc::WriteFailed, "cannot write " + path);
    out << j.dump(2) << "\n";
    if (!out.flush()) throw IoError(IoErrc::WriteFailed, "short write to " + path);
}

DatasetManifest load_dataset_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(IoErrc::FileNotFound, "dataset manifest not found: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    json j;
    try {
        j = json::parse(ss.str());
    } catch (const json::exception& e) {
        throw IoError(IoErrc::MalformedHeader,
                      "dataset manifest " + path + ": " + e.what());
    }

    DatasetManifest m;
    try {
        m.classes.names = j.at("classes").get<std::vector<std::string>>();
        m.classes.count = static_cast<int64_t>(m.classes.names.size());
        m.fold_count = j.at("fold_count").get<int64_t>();
        for (const auto& s : j.at("scans")) {
            ScanEntry e;
            e.image = s.at("image").get<std::string>();
            e.labels = s.at("labels").get<std::string>();
            e.fold = s.at("fold").get<int64_t>();
            m.scans.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw IoError(IoErrc::MalformedHeader,
                      "dataset manifest " + path + ": " + e.what());
    }
    m.validate();
    return m;
}

std::string resolve_scan_path(const std::string& manifest_path, const std::string& stem) {
    const std::filesystem::path dir = std::filesystem::path(manifest_path).parent_path();
    return (dir / stem).string();
}

}  // namespace mrseg
