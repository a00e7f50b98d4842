#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mrseg/network.hpp"

namespace mrseg {

// Single-file format, little-endian throughout:
//   8 bytes  magic "MRSEGCK1"
//   u64      manifest length in bytes
//   ...      manifest JSON: config, iteration, normalization, ordered
//            parameter names and shapes
//   ...      one f32 blob per parameter, in manifest order
//   u64      fnv1a64 over every preceding byte
struct CheckpointMeta {
    int64_t iteration = 0;
    std::string normalization = "zscore";
};

void save_checkpoint(const std::string& path, const NetworkInstance<float>& net,
                     const CheckpointMeta& meta);

struct LoadedCheckpoint {
    NetworkConfig config;
    CheckpointMeta meta;
    std::vector<std::pair<std::string, Array<float>>> params;
};

// Verifies magic, manifest shape bookkeeping and the trailing checksum.
LoadedCheckpoint read_checkpoint(const std::string& path);

// Strict restore: the checkpoint's parameter list must match the net's
// registry name-for-name, shape-for-shape, in order.
void load_checkpoint(const std::string& path, NetworkInstance<float>& net);

// The stored footer checksum (the file is verified on the way).
uint64_t checkpoint_checksum(const std::string& path);

}  // namespace mrseg
