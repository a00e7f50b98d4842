#include "mrseg/network.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace mrseg {

using nlohmann::json;

const char* skip_policy_name(SkipPolicy p) {
    switch (p) {
        case SkipPolicy::None: return "none";
        case SkipPolicy::BottleneckOnly: return "bottleneck-only";
        case SkipPolicy::AllLevels: return "all-levels";
    }
    return "?";
}

namespace {

struct LabelTraits {
    SkipPolicy policy;
    bool heads;
};

LabelTraits traits_for_label(char label) {
    switch (label) {
        case 'A': return {SkipPolicy::None, false};
        case 'B': return {SkipPolicy::BottleneckOnly, true};
        case 'C': return {SkipPolicy::AllLevels, false};
        case 'D': return {SkipPolicy::AllLevels, true};
        default:
            throw ConfigError(std::string("unknown config label '") + label +
                              "'; expected A, B, C or D");
    }
}

}  // namespace

void NetworkConfig::validate() const {
    const LabelTraits want = traits_for_label(config_label);
    if (skip_policy != want.policy)
        throw ConfigError(std::string("config ") + config_label + " requires skip_policy " +
                          skip_policy_name(want.policy) + ", got " +
                          skip_policy_name(skip_policy));
    if (context_decoder_and_loss != want.heads)
        throw ConfigError(std::string("config ") + config_label + " requires context_decoder_and_loss=" +
                          (want.heads ? "true" : "false"));
    if (config_label == 'A' && !kappas.empty())
        throw ConfigError("config A admits no context networks; kappas must be empty");
    if (config_label != 'A' && kappas.empty())
        throw ConfigError(std::string("config ") + config_label +
                          " needs at least one context network; kappas is empty");
    if (levels < 2) throw ConfigError("levels must be at least 2");
    if (base_channels < 1) throw ConfigError("base_channels must be positive");
    if (class_count < 2) throw ConfigError("class_count must be at least 2");
    patch_spec().validate(levels);
}

NetworkConfig make_network_config(char label, int64_t levels, int64_t base_channels,
                                  int64_t class_count, IVec3 target_size,
                                  std::vector<int64_t> kappas) {
    const LabelTraits t = traits_for_label(label);
    NetworkConfig cfg;
    cfg.config_label = label;
    cfg.levels = levels;
    cfg.base_channels = base_channels;
    cfg.class_count = class_count;
    cfg.target_size = target_size;
    cfg.kappas = std::move(kappas);
    cfg.skip_policy = t.policy;
    cfg.context_decoder_and_loss = t.heads;
    return cfg;
}

namespace {

int64_t require_int(const json& j, const char* key) {
    if (!j.at(key).is_number_integer())
        throw ConfigError(std::string("network config: '") + key + "' must be an integer");
    return j.at(key).get<int64_t>();
}

}  // namespace

NetworkConfig parse_network_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("network config: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("network config: top level must be an object");

    static const char* known[] = {"config", "levels", "base_channels",
                                  "classes", "target_size", "kappas"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok) throw ConfigError("network config: unknown key '" + it.key() + "'");
    }
    for (const char* k : {"config", "classes", "target_size"})
        if (!j.contains(k))
            throw ConfigError(std::string("network config: missing key '") + k + "'");

    if (!j["config"].is_string() || j["config"].get<std::string>().size() != 1)
        throw ConfigError("network config: 'config' must be one of \"A\",\"B\",\"C\",\"D\"");
    const char label = j["config"].get<std::string>()[0];

    const int64_t levels = j.contains("levels") ? require_int(j, "levels") : 5;
    const int64_t base = j.contains("base_channels") ? require_int(j, "base_channels") : 24;
    const int64_t classes = require_int(j, "classes");

    IVec3 size{};
    const json& ts = j["target_size"];
    if (ts.is_number_integer()) {
        size = {ts.get<int64_t>(), ts.get<int64_t>(), ts.get<int64_t>()};
    } else if (ts.is_array() && ts.size() == 3 && ts[0].is_number_integer() &&
               ts[1].is_number_integer() && ts[2].is_number_integer()) {
        size = {ts[0].get<int64_t>(), ts[1].get<int64_t>(), ts[2].get<int64_t>()};
    } else {
        throw ConfigError("network config: 'target_size' must be an integer or a 3-array");
    }

    std::vector<int64_t> kappas;
    if (j.contains("kappas")) {
        if (!j["kappas"].is_array())
            throw ConfigError("network config: 'kappas' must be an array");
        for (const auto& k : j["kappas"]) {
            if (!k.is_number_integer())
                throw ConfigError("network config: 'kappas' entries must be integers");
            kappas.push_back(k.get<int64_t>());
        }
    }

    NetworkConfig cfg = make_network_config(label, levels, base, classes, size, std::move(kappas));
    cfg.validate();
    return cfg;
}

NetworkConfig load_network_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(IoErrc::FileNotFound, "network config not found: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_network_config(ss.str());
}

std::string network_config_json(const NetworkConfig& cfg) {
    json j;
    j["config"] = std::string(1, cfg.config_label);
    j["levels"] = cfg.levels;
    j["base_channels"] = cfg.base_channels;
    j["classes"] = cfg.class_count;
    j["target_size"] = {cfg.target_size[0], cfg.target_size[1], cfg.target_size[2]};
    j["kappas"] = cfg.kappas;
    return j.dump(2) + "\n";
}

}  // namespace mrseg
