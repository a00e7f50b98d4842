#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mrseg/volume.hpp"

namespace mrseg {

// One image/label volume pair; stems are relative to the manifest directory.
struct ScanEntry {
    std::string image;
    std::string labels;
    int64_t fold = 0;
};

struct DatasetManifest {
    ClassMap classes;
    int64_t fold_count = 0;
    std::vector<ScanEntry> scans;

    void validate() const;
};

// manifest.json next to the referenced volumes.
void save_dataset_manifest(const std::string& path, const DatasetManifest& m);
DatasetManifest load_dataset_manifest(const std::string& path);

// Resolves a scan stem against the directory containing the manifest.
std::string resolve_scan_path(const std::string& manifest_path, const std::string& stem);

}  // namespace mrseg
