#include "mrseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "mrseg/errors.hpp"
#include "mrseg/rng.hpp"

namespace mrseg {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'M', 'R', 'S', 'E', 'G', 'C', 'K', '1'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written as native little-endian f32");

void append_u64(std::string& buf, uint64_t v) {
    char b[8];
    std::memcpy(b, &v, 8);
    buf.append(b, 8);
}

uint64_t take_u64(const std::string& buf, size_t off) {
    uint64_t v;
    std::memcpy(&v, buf.data() + off, 8);
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const NetworkInstance<float>& net,
                     const CheckpointMeta& meta) {
    json manifest;
    manifest["format"] = 1;
    manifest["config"] = json::parse(network_config_json(net.config));
    manifest["iteration"] = meta.iteration;
    manifest["normalization"] = meta.normalization;
    manifest["params"] = json::array();
    for (size_t i = 0; i < net.params.names.size(); ++i)
        manifest["params"].push_back({{"name", net.params.names[i]},
                                      {"shape", net.params.nodes[i]->value.shape}});
    const std::string mtext = manifest.dump();

    std::string buf;
    buf.append(kMagic, 8);
    append_u64(buf, mtext.size());
    buf += mtext;
    for (const auto& n : net.params.nodes)
        buf.append(reinterpret_cast<const char*>(n->value.data.data()),
                   n->value.data.size() * sizeof(float));
    append_u64(buf, fnv1a64(buf.data(), buf.size()));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(IoErrc::WriteFailed, "cannot write checkpoint " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out.flush()) throw IoError(IoErrc::WriteFailed, "short write to checkpoint " + path);
}

LoadedCheckpoint read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(IoErrc::FileNotFound, "checkpoint not found: " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (buf.size() < 24 || std::memcmp(buf.data(), kMagic, 8) != 0)
        throw IoError(IoErrc::MalformedHeader, "not a checkpoint file: " + path);
    const uint64_t stored = take_u64(buf, buf.size() - 8);
    const uint64_t actual = fnv1a64(buf.data(), buf.size() - 8);
    if (stored != actual)
        throw IoError(IoErrc::DataLengthMismatch,
                      "checkpoint checksum mismatch in " + path);

    const uint64_t mlen = take_u64(buf, 8);
    if (16 + mlen + 8 > buf.size())
        throw IoError(IoErrc::MalformedHeader, "truncated checkpoint manifest in " + path);
    json manifest;
    try {
        manifest = json::parse(buf.substr(16, mlen));
    } catch (const json::exception& e) {
        throw IoError(IoErrc::MalformedHeader,
                      "bad checkpoint manifest in " + path + ": " + e.what());
    }

    LoadedCheckpoint ck;
    try {
        ck.config = parse_network_config(manifest.at("config").dump());
        ck.meta.iteration = manifest.at("iteration").get<int64_t>();
        ck.meta.normalization = manifest.at("normalization").get<std::string>();
        size_t off = 16 + mlen;
        for (const auto& p : manifest.at("params")) {
            Array<float> a;
            a.shape = p.at("shape").get<std::vector<int64_t>>();
            const size_t bytes = static_cast<size_t>(a.numel()) * sizeof(float);
            if (off + bytes + 8 > buf.size())
                throw IoError(IoErrc::DataLengthMismatch,
                              "checkpoint blob section too short in " + path);
            a.data.resize(static_cast<size_t>(a.numel()));
            std::memcpy(a.data.data(), buf.data() + off, bytes);
            off += bytes;
            ck.params.emplace_back(p.at("name").get<std::string>(), std::move(a));
        }
        if (off + 8 != buf.size())
            throw IoError(IoErrc::DataLengthMismatch,
                          "checkpoint has trailing bytes beyond its manifest in " + path);
    } catch (const json::exception& e) {
        throw IoError(IoErrc::MalformedHeader,
                      "bad checkpoint manifest in " + path + ": " + e.what());
    }
    return ck;
}

void load_checkpoint(const std::string& path, NetworkInstance<float>& net) {
    LoadedCheckpoint ck = read_checkpoint(path);
    if (ck.params.size() != net.params.names.size())
        throw ConfigError("checkpoint holds " + std::to_string(ck.params.size()) +
                          " parameters, network has " + std::to_string(net.params.names.size()));
    for (size_t i = 0; i < ck.params.size(); ++i) {
        if (ck.params[i].first != net.params.names[i])
            throw ConfigError("checkpoint parameter " + std::to_string(i) + " is '" +
                              ck.params[i].first + "', network expects '" +
                              net.params.names[i] + "'");
        auto& dst = net.params.nodes[i]->value;
        if (ck.params[i].second.shape != dst.shape)
            throw ConfigError("checkpoint parameter '" + ck.params[i].first +
                              "' shape " + shape_str(ck.params[i].second.shape) +
                              " does not match network shape " + shape_str(dst.shape));
        dst.data = std::move(ck.params[i].second.data);
    }
}

uint64_t checkpoint_checksum(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(IoErrc::FileNotFound, "checkpoint not found: " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 24 || std::memcmp(buf.data(), kMagic, 8) != 0)
        throw IoError(IoErrc::MalformedHeader, "not a checkpoint file: " + path);
    const uint64_t stored = take_u64(buf, buf.size() - 8);
    if (stored != fnv1a64(buf.data(), buf.size() - 8))
        throw IoError(IoErrc::DataLengthMismatch, "checkpoint checksum mismatch in " + path);
    return stored;
}

}  // namespace mrseg
