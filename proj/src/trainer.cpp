#include "mrseg/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mrseg/checkpoint.hpp"
#include "mrseg/errors.hpp"
#include "mrseg/rng.hpp"

namespace mrseg {

using nlohmann::json;

const char* normalization_name(NormalizationMode m) {
    switch (m) {
        case NormalizationMode::ZScore: return "zscore";
        case NormalizationMode::None: return "none";
    }
    throw ConfigError("unknown normalization mode");
}

NormalizationMode parse_normalization(const std::string& name) {
    if (name == "zscore") return NormalizationMode::ZScore;
    if (name == "none") return NormalizationMode::None;
    throw ConfigError("unknown normalization '" + name + "', expected zscore or none");
}

void TrainConfig::validate() const {
    if (iterations < 1) throw ConfigError("iterations must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be finite and >= 0");
    if (checkpoint_interval < 0) throw ConfigError("checkpoint_interval must be >= 0");
    if (val_interval < 0) throw ConfigError("val_interval must be >= 0");
    if (!(fg_bias >= 0.0 && fg_bias <= 1.0)) throw ConfigError("fg_bias must lie in [0, 1]");
}

TrainConfig parse_train_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("train config: top level must be an object");

    static const char* known[] = {"iterations",          "lr",           "batch_size",
                                  "seed",                "checkpoint_interval",
                                  "val_interval",        "normalization", "fg_bias"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok) throw ConfigError("train config: unknown key '" + it.key() + "'");
    }
    auto take_int = [&](const char* key, int64_t& dst) {
        if (!j.contains(key)) return;
        if (!j.at(key).is_number_integer())
            throw ConfigError(std::string("train config: '") + key + "' must be an integer");
        dst = j.at(key).get<int64_t>();
    };
    auto take_double = [&](const char* key, double& dst) {
        if (!j.contains(key)) return;
        if (!j.at(key).is_number())
            throw ConfigError(std::string("train config: '") + key + "' must be a number");
        dst = j.at(key).get<double>();
    };

    TrainConfig cfg;
    take_int("iterations", cfg.iterations);
    take_double("lr", cfg.lr);
    take_int("batch_size", cfg.batch_size);
    if (j.contains("seed")) {
        if (!j.at("seed").is_number_unsigned() && !j.at("seed").is_number_integer())
            throw ConfigError("train config: 'seed' must be an integer");
        cfg.seed = j.at("seed").get<uint64_t>();
    }
    take_int("checkpoint_interval", cfg.checkpoint_interval);
    take_int("val_interval", cfg.val_interval);
    if (j.contains("normalization")) {
        if (!j.at("normalization").is_string())
            throw ConfigError("train config: 'normalization' must be a string");
        cfg.normalization = parse_normalization(j.at("normalization").get<std::string>());
    }
    take_double("fg_bias", cfg.fg_bias);
    cfg.validate();
    return cfg;
}

TrainConfig load_train_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(IoErrc::FileNotFound, "train config not found: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_train_config(ss.str());
}

std::string train_config_json(const TrainConfig& cfg) {
    json j;
    j["iterations"] = cfg.iterations;
    j["lr"] = cfg.lr;
    j["batch_size"] = cfg.batch_size;
    j["seed"] = cfg.seed;
    j["checkpoint_interval"] = cfg.checkpoint_interval;
    j["val_interval"] = cfg.val_interval;
    j["normalization"] = normalization_name(cfg.normalization);
    j["fg_bias"] = cfg.fg_bias;
    return j.dump(2) + "\n";
}

namespace {

Volume normalize_image(const Volume& image, NormalizationMode mode) {
    Volume out = image;
    if (mode == NormalizationMode::None) return out;
    // Statistics over the unpadded voxels only; padding replicates edges and
    // would otherwise tilt the mean toward the border intensity.
    const int64_t n = out.voxels();
    double mean = 0;
    for (int64_t i = 0; i < n; ++i) mean += out.fdata[i];
    mean /= static_cast<double>(n);
    double var = 0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = out.fdata[i] - mean;
        var += d * d;
    }
    var /= static_cast<double>(n);
    const double sd = std::sqrt(var);
    const double scale = sd > 1e-12 ? 1.0 / sd : 1.0;
    for (int64_t i = 0; i < n; ++i)
        out.fdata[i] = static_cast<float>((out.fdata[i] - mean) * scale);
    return out;
}

}  // namespace

PreparedScan prepare_scan(int64_t id, const Volume& image, const Volume& labels,
                          const PatchSpec& spec, NormalizationMode mode) {
    image.validate();
    labels.validate();
    if (image.dtype != VolumeDtype::F32)
        throw ConfigError("prepare_scan: image must be an intensity volume");
    if (labels.dtype != VolumeDtype::U16Label)
        throw ConfigError("prepare_scan: labels must be a label volume");
    if (image.dims != labels.dims)
        throw ConfigError("prepare_scan: image and label dims differ");
    for (int a = 0; a < 3; ++a)
        if (image.dims[a] < spec.target_size[a])
            throw ConfigError("prepare_scan: scan extent smaller than the target patch");

    PreparedScan out;
    out.id = id;
    out.dims = image.dims;
    out.pad = spec.required_padding();
    out.image = pad_edge(normalize_image(image, mode), out.pad);
    out.labels = pad_edge(labels, out.pad);
    out.orig_labels = labels;
    const int64_t n = labels.voxels();
    for (int64_t i = 0; i < n; ++i)
        if (labels.ldata[i] != 0) out.fg_flat.push_back(i);
    return out;
}

FoldPlan FoldPlan::round_robin(int64_t scan_count, int64_t fold_count) {
    if (fold_count < 1) throw ConfigError("fold_count must be >= 1");
    if (scan_count < fold_count)
        throw ConfigError("round_robin needs at least one scan per fold");
    FoldPlan plan;
    plan.scan_count = scan_count;
    plan.fold_count = fold_count;
    plan.folds.resize(fold_count);
    std::vector<std::vector<int64_t>> test_sets(fold_count);
    for (int64_t i = 0; i < scan_count; ++i) test_sets[i % fold_count].push_back(i);
    for (int64_t f = 0; f < fold_count; ++f) {
        Fold& fold = plan.folds[f];
        fold.test = test_sets[f];
        if (fold_count > 1) {
            const std::vector<int64_t>& next = test_sets[(f + 1) % fold_count];
            const int64_t take = std::min<int64_t>(2, static_cast<int64_t>(next.size()));
            fold.val.assign(next.begin(), next.begin() + take);
        }
        std::set<int64_t> used(fold.test.begin(), fold.test.end());
        used.insert(fold.val.begin(), fold.val.end());
        for (int64_t i = 0; i < scan_count; ++i)
            if (!used.count(i)) fold.train.push_back(i);
    }
    plan.validate();
    return plan;
}

void FoldPlan::validate() const {
    if (fold_count < 1 || static_cast<int64_t>(folds.size()) != fold_count)
        throw ConfigError("fold plan: fold list does not match fold_count");
    std::vector<int64_t> test_seen(scan_count, 0);
    for (const Fold& fold : folds) {
        std::set<int64_t> within;
        auto check = [&](const std::vector<int64_t>& ids, const char* role) {
            for (int64_t id : ids) {
                if (id < 0 || id >= scan_count)
                    throw ConfigError(std::string("fold plan: ") + role + " scan id out of range");
                if (!within.insert(id).second)
                    throw ConfigError("fold plan: scan appears in two roles of one fold");
            }
        };
        check(fold.train, "train");
        check(fold.val, "val");
        check(fold.test, "test");
        if (fold.train.empty()) throw ConfigError("fold plan: fold has no training scans");
        for (int64_t id : fold.test) ++test_seen[id];
    }
    for (int64_t i = 0; i < scan_count; ++i)
        if (test_seen[i] != 1)
            throw ConfigError("fold plan: test sets must partition the scans");
}

namespace {

struct Batch {
    Array<float> target;
    std::vector<Array<float>> contexts;
    Array<int64_t> target_labels;
    std::vector<Array<int64_t>> context_labels;
};

void check_scan_matches(const NetworkConfig& cfg, const PatchSpec& spec,
                        const PreparedScan& scan) {
    if (scan.pad != spec.required_padding())
        throw ConfigError("scan " + std::to_string(scan.id) +
                          " was prepared with different padding than this network needs");
    for (int a = 0; a < 3; ++a)
        if (scan.dims[a] < spec.target_size[a])
            throw ConfigError("scan " + std::to_string(scan.id) +
                              " is smaller than the target patch");
    if (scan.orig_labels.voxels() > 0 && scan.orig_labels.classes != cfg.class_count)
        throw ConfigError("scan " + std::to_string(scan.id) + " has " +
                          std::to_string(scan.orig_labels.classes) +
                          " label classes but the network predicts " +
                          std::to_string(cfg.class_count));
}

IVec3 sample_center(const PreparedScan& scan, const PatchSpec& spec, double fg_bias, Rng& rng) {
    const IVec3 S = spec.target_size;
    const bool fg = rng.uniform() < fg_bias && !scan.fg_flat.empty();
    IVec3 c;
    if (fg) {
        const int64_t pick = rng.uniform_int(0, static_cast<int64_t>(scan.fg_flat.size()) - 1);
        const int64_t flat = scan.fg_flat[static_cast<size_t>(pick)];
        c[0] = flat % scan.dims[0];
        c[1] = (flat / scan.dims[0]) % scan.dims[1];
        c[2] = flat / (scan.dims[0] * scan.dims[1]);
        for (int a = 0; a < 3; ++a)
            c[a] = std::clamp(c[a], S[a] / 2, scan.dims[a] - S[a] / 2);
    } else {
        for (int a = 0; a < 3; ++a) c[a] = rng.uniform_int(S[a] / 2, scan.dims[a] - S[a] / 2);
    }
    return c;
}

Batch sample_batch(const std::vector<PreparedScan>& scans, const PatchSpec& spec,
                   const TrainConfig& cfg, bool want_context_labels, Rng& rng) {
    const IVec3 S = spec.target_size;
    const int64_t B = cfg.batch_size;
    const int64_t K = spec.context_count();
    const int64_t patch_voxels = S[0] * S[1] * S[2];

    Batch batch;
    batch.target = Array<float>::zeros({B, 1, S[2], S[1], S[0]});
    batch.target_labels = Array<int64_t>::zeros({B, S[2], S[1], S[0]});
    for (int64_t k = 0; k < K; ++k)
        batch.contexts.push_back(Array<float>::zeros({B, 1, S[2], S[1], S[0]}));
    if (want_context_labels)
        for (int64_t k = 0; k < K; ++k)
            batch.context_labels.push_back(Array<int64_t>::zeros({B, S[2], S[1], S[0]}));

    for (int64_t b = 0; b < B; ++b) {
        const int64_t si = rng.uniform_int(0, static_cast<int64_t>(scans.size()) - 1);
        const PreparedScan& scan = scans[static_cast<size_t>(si)];
        IVec3 c = sample_center(scan, spec, cfg.fg_bias, rng);
        for (int a = 0; a < 3; ++a) c[a] += scan.pad[a];
        const PatchSet ps = sample_patchset(scan.image, c, spec);
        const LabelPatchSet lps = sample_label_patchset(scan.labels, c, spec);
        // Patch arrays are {Sx,Sy,Sz} x-fastest, identical flat order to the
        // [.,.,Sz,Sy,Sx] tensor slab.
        std::copy(ps.target.data.begin(), ps.target.data.end(),
                  batch.target.data.begin() + b * patch_voxels);
        for (int64_t i = 0; i < patch_voxels; ++i)
            batch.target_labels.data[b * patch_voxels + i] =
                static_cast<int64_t>(lps.target.data[static_cast<size_t>(i)]);
        for (int64_t k = 0; k < K; ++k) {
            std::copy(ps.contexts[k].data.begin(), ps.contexts[k].data.end(),
                      batch.contexts[k].data.begin() + b * patch_voxels);
            if (want_context_labels)
                for (int64_t i = 0; i < patch_voxels; ++i)
                    batch.context_labels[k].data[b * patch_voxels + i] =
                        static_cast<int64_t>(lps.contexts[k].data[static_cast<size_t>(i)]);
        }
    }
    return batch;
}

void check_finite(const LossReport& report, int64_t iteration) {
    auto fail = [&](const std::string& head, const char* part) {
        throw RuntimeFailure("training diverged at iteration " + std::to_string(iteration) +
                             ": " + head + " " + part + " loss is not finite");
    };
    if (!std::isfinite(report.target_loss)) fail("target", "head");
    for (size_t k = 0; k < report.context_losses.size(); ++k)
        if (!std::isfinite(report.context_losses[k]))
            fail("context " + std::to_string(k + 1), "head");
    if (!std::isfinite(report.total)) fail("combined", "total");
}

std::vector<Array<float>> snapshot_params(const NetworkInstance<float>& net) {
    std::vector<Array<float>> out;
    for (const auto& node : net.params.nodes) out.push_back(node->value);
    return out;
}

void restore_params(NetworkInstance<float>& net, const std::vector<Array<float>>& snap) {
    for (size_t i = 0; i < snap.size(); ++i) net.params.nodes[i]->value = snap[i];
}

double validation_median(const NetworkInstance<float>& net,
                         const std::vector<PreparedScan>& val_scans) {
    std::vector<std::string> fg(static_cast<size_t>(net.config.class_count) - 1);
    for (size_t i = 0; i < fg.size(); ++i) fg[i] = "class-" + std::to_string(i + 1);
    const ClassMap cm = ClassMap::background_plus(fg);
    std::vector<double> pool;
    for (const PreparedScan& scan : val_scans) {
        const Volume pred = predict_prepared(net, scan);
        const MetricsReport rep = evaluate(pred, scan.orig_labels, cm);
        for (int64_t c = 0; c < rep.class_count; ++c)
            if (rep.dsc_defined[static_cast<size_t>(c)] &&
                rep.per_class_dsc[static_cast<size_t>(c)] > 0)
                pool.push_back(rep.per_class_dsc[static_cast<size_t>(c)]);
    }
    if (pool.empty()) return 0.0;
    return quantile_linear(pool, 0.5);
}

}  // namespace

TrainResult train(NetworkInstance<float>& net, const std::vector<PreparedScan>& train_scans,
                  const std::vector<PreparedScan>& val_scans, const TrainConfig& cfg) {
    cfg.validate();
    if (train_scans.empty()) throw ConfigError("train: no training scans");
    const PatchSpec spec = net.config.patch_spec();
    for (const PreparedScan& s : train_scans) check_scan_matches(net.config, spec, s);
    for (const PreparedScan& s : val_scans) check_scan_matches(net.config, spec, s);

    const bool use_context_loss = net.config.context_decoder_and_loss;
    const bool validate_runs = cfg.val_interval > 0 && !val_scans.empty();
    if (!cfg.out_dir.empty()) std::filesystem::create_directories(cfg.out_dir);

    Rng rng(derive_seed(cfg.seed, "train.sample"));
    std::vector<ag::AdamState<float>> opt(net.params.nodes.size());

    TrainResult result;
    std::vector<Array<float>> best_snap;
    const auto t0 = std::chrono::steady_clock::now();

    for (int64_t iter = 1; iter <= cfg.iterations; ++iter) {
        net.params.zero_grads();
        Batch batch = sample_batch(train_scans, spec, cfg, use_context_loss, rng);
        auto fwd = forward_batch(net, batch.target, batch.contexts);
        auto loss =
            use_context_loss
                ? combined_loss<float>(fwd.target_logits, batch.target_labels, fwd.context_logits,
                                       batch.context_labels)
                : combined_loss<float>(fwd.target_logits, batch.target_labels, {}, {});
        check_finite(loss.report, iter);
        result.history.push_back(loss.report);
        ag::backward(loss.total);
        for (size_t i = 0; i < net.params.nodes.size(); ++i)
            ag::adam_step(net.params.nodes[i]->value, net.params.nodes[i]->grad, opt[i],
                          static_cast<float>(cfg.lr));

        if (iter % 100 == 0 || iter == cfg.iterations) {
            const double elapsed =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::fprintf(stderr, "iter %6lld/%lld  loss %.5f  %.3f s/iter\n",
                         static_cast<long long>(iter), static_cast<long long>(cfg.iterations),
                         loss.report.total, elapsed / static_cast<double>(iter));
        }

        if (!cfg.out_dir.empty() && cfg.checkpoint_interval > 0 &&
            iter % cfg.checkpoint_interval == 0) {
            char name[32];
            std::snprintf(name, sizeof(name), "ckpt_%06lld.ckpt", static_cast<long long>(iter));
            CheckpointMeta meta;
            meta.iteration = iter;
            meta.normalization = normalization_name(cfg.normalization);
            save_checkpoint(cfg.out_dir + "/" + name, net, meta);
        }

        if (validate_runs && iter % cfg.val_interval == 0) {
            const double score = validation_median(net, val_scans);
            if (result.best_iteration < 0 || score > result.best_val_median) {
                result.best_iteration = iter;
                result.best_val_median = score;
                best_snap = snapshot_params(net);
            }
        }
    }

    const auto t1 = std::chrono::steady_clock::now();
    result.sec_per_iter = std::chrono::duration<double>(t1 - t0).count() /
                          static_cast<double>(cfg.iterations);

    CheckpointMeta meta;
    meta.normalization = normalization_name(cfg.normalization);
    if (!cfg.out_dir.empty()) {
        meta.iteration = cfg.iterations;
        save_checkpoint(cfg.out_dir + "/final.ckpt", net, meta);
    }
    if (result.best_iteration >= 0) restore_params(net, best_snap);
    if (!cfg.out_dir.empty()) {
        // best.ckpt always exists; without validation it equals final.ckpt.
        meta.iteration = result.best_iteration >= 0 ? result.best_iteration : cfg.iterations;
        save_checkpoint(cfg.out_dir + "/best.ckpt", net, meta);
    }
    return result;
}

Volume predict_prepared(const NetworkInstance<float>& net, const PreparedScan& scan) {
    const PatchSpec spec = net.config.patch_spec();
    if (scan.pad != spec.required_padding())
        throw ConfigError("predict: scan was prepared with different padding than this network");
    const IVec3 S = spec.target_size;
    const IVec3 dims = scan.dims;
    const int64_t C = net.config.class_count;

    Volume out = Volume::make_labels(dims, C);
    out.spacing = scan.image.spacing;
    std::vector<int64_t> best_d2(static_cast<size_t>(out.voxels()),
                                 std::numeric_limits<int64_t>::max());

    for (const IVec3& center : tile_centers(dims, spec)) {
        IVec3 padded_center = center;
        for (int a = 0; a < 3; ++a) padded_center[a] += scan.pad[a];
        const PatchSet ps = sample_patchset(scan.image, padded_center, spec);
        const auto fwd = forward(net, ps);
        const Array<float>& logits = fwd.target_logits->value;  // [1, C, Sz, Sy, Sx]
        const int64_t plane = S[0] * S[1] * S[2];
        const IVec3 lo{center[0] - S[0] / 2, center[1] - S[1] / 2, center[2] - S[2] / 2};
        for (int64_t z = 0; z < S[2]; ++z)
            for (int64_t y = 0; y < S[1]; ++y)
                for (int64_t x = 0; x < S[0]; ++x) {
                    const int64_t gx = lo[0] + x, gy = lo[1] + y, gz = lo[2] + z;
                    const int64_t flat = out.index(gx, gy, gz);
                    const int64_t d2 = (gx - center[0]) * (gx - center[0]) +
                                       (gy - center[1]) * (gy - center[1]) +
                                       (gz - center[2]) * (gz - center[2]);
                    if (d2 >= best_d2[static_cast<size_t>(flat)]) continue;
                    best_d2[static_cast<size_t>(flat)] = d2;
                    const int64_t voxel = x + S[0] * (y + S[1] * z);
                    int64_t arg = 0;
                    float best = logits.data[voxel];
                    for (int64_t c = 1; c < C; ++c) {
                        const float v = logits.data[c * plane + voxel];
                        if (v > best) {
                            best = v;
                            arg = c;
                        }
                    }
                    out.ldata[static_cast<size_t>(flat)] = static_cast<uint16_t>(arg);
                }
    }
    return out;
}

Volume predict(const NetworkInstance<float>& net, const Volume& image, NormalizationMode mode) {
    const PatchSpec spec = net.config.patch_spec();
    image.validate();
    if (image.dtype != VolumeDtype::F32)
        throw ConfigError("predict: image must be an intensity volume");
    for (int a = 0; a < 3; ++a)
        if (image.dims[a] < spec.target_size[a])
            throw ConfigError("predict: image extent smaller than the target patch");
    PreparedScan scan;
    scan.id = -1;
    scan.dims = image.dims;
    scan.pad = spec.required_padding();
    scan.image = pad_edge(normalize_image(image, mode), scan.pad);
    return predict_prepared(net, scan);
}

void write_loss_history_csv(const std::string& path, const std::vector<LossReport>& history) {
    std::ofstream f(path);
    if (!f) throw IoError(IoErrc::WriteFailed, "cannot open " + path + " for writing");
    const size_t contexts = history.empty() ? 0 : history.front().context_losses.size();
    f << "iter,total,target";
    for (size_t k = 1; k <= contexts; ++k) f << ",context_" << k;
    f << "\n";
    char buf[64];
    for (size_t i = 0; i < history.size(); ++i) {
        const LossReport& r = history[i];
        f << (i + 1);
        std::snprintf(buf, sizeof(buf), ",%.17g", r.total);
        f << buf;
        std::snprintf(buf, sizeof(buf), ",%.17g", r.target_loss);
        f << buf;
        for (size_t k = 0; k < contexts; ++k) {
            std::snprintf(buf, sizeof(buf), ",%.17g", r.context_losses[k]);
            f << buf;
        }
        f << "\n";
    }
}

CrossValResult run_cross_validation(const std::vector<NetworkConfig>& configs,
                                    const std::vector<std::pair<Volume, Volume>>& dataset,
                                    const FoldPlan& folds, const TrainConfig& base,
                                    const std::vector<int64_t>& fold_subset) {
    base.validate();
    folds.validate();
    if (configs.empty()) throw ConfigError("cross-validation: no configs given");
    if (static_cast<int64_t>(dataset.size()) != folds.scan_count)
        throw ConfigError("cross-validation: dataset size does not match the fold plan");

    std::vector<int64_t> selected = fold_subset;
    if (selected.empty())
        for (int64_t f = 0; f < folds.fold_count; ++f) selected.push_back(f);
    for (int64_t f : selected)
        if (f < 0 || f >= folds.fold_count)
            throw ConfigError("cross-validation: fold index out of range");

    CrossValResult result;
    for (const NetworkConfig& config : configs) {
        config.validate();
        const PatchSpec spec = config.patch_spec();

        std::vector<PreparedScan> prepared;
        prepared.reserve(dataset.size());
        for (size_t i = 0; i < dataset.size(); ++i)
            prepared.push_back(prepare_scan(static_cast<int64_t>(i), dataset[i].first,
                                            dataset[i].second, spec, base.normalization));

        ConfigOutcome outcome;
        std::vector<int64_t> tp, fp, fn;
        std::vector<std::vector<int64_t>> confusion;
        std::vector<double> dsc_pool;
        int64_t defined_total = 0, nonzero_total = 0;
        double sec_sum = 0;
        int64_t params_total = 0;

        std::vector<std::string> fg(static_cast<size_t>(config.class_count) - 1);
        for (size_t i = 0; i < fg.size(); ++i) fg[i] = "class-" + std::to_string(i + 1);
        const ClassMap cm = ClassMap::background_plus(fg);

        for (int64_t f : selected) {
            const FoldPlan::Fold& fold = folds.folds[static_cast<size_t>(f)];
            const std::string tag =
                std::string("cv.") + config.config_label + ".fold" + std::to_string(f);
            auto net = build_network<float>(config, derive_seed(base.seed, tag + ".init"));
            params_total = count_params(net);

            std::vector<PreparedScan> train_set, val_set;
            for (int64_t id : fold.train) train_set.push_back(prepared[static_cast<size_t>(id)]);
            for (int64_t id : fold.val) val_set.push_back(prepared[static_cast<size_t>(id)]);

            TrainConfig cfg = base;
            cfg.seed = derive_seed(base.seed, tag + ".train");
            if (!base.out_dir.empty())
                cfg.out_dir = base.out_dir + "/" + config.config_label + "/fold" +
                              std::to_string(f);
            const TrainResult tr = train(net, train_set, val_set, cfg);
            sec_sum += tr.sec_per_iter;
            if (!cfg.out_dir.empty())
                write_loss_history_csv(cfg.out_dir + "/loss_history.csv", tr.history);

            for (int64_t id : fold.test) {
                const PreparedScan& scan = prepared[static_cast<size_t>(id)];
                const Volume pred = predict_prepared(net, scan);
                MetricsReport rep = evaluate(pred, scan.orig_labels, cm);
                if (tp.empty()) {
                    tp.assign(static_cast<size_t>(rep.class_count), 0);
                    fp = tp;
                    fn = tp;
                    confusion.assign(static_cast<size_t>(rep.class_count),
                                     std::vector<int64_t>(static_cast<size_t>(rep.class_count), 0));
                }
                for (int64_t c = 0; c < rep.class_count; ++c) {
                    const size_t ci = static_cast<size_t>(c);
                    tp[ci] += rep.tp[ci];
                    fp[ci] += rep.fp[ci];
                    fn[ci] += rep.fn[ci];
                    for (int64_t d = 0; d < rep.class_count; ++d)
                        confusion[ci][static_cast<size_t>(d)] +=
                            rep.confusion[ci][static_cast<size_t>(d)];
                    if (rep.dsc_defined[ci]) {
                        ++defined_total;
                        if (rep.per_class_dsc[ci] > 0) {
                            ++nonzero_total;
                            dsc_pool.push_back(rep.per_class_dsc[ci]);
                        }
                    }
                }
                outcome.per_scan.push_back(std::move(rep));
            }
        }

        outcome.pooled = finalize_metrics(tp, fp, fn, confusion);

        AblationRow& row = outcome.row;
        row.config = config.config_label;
        row.target_fov = config.target_size[0];
        for (size_t i = 0; i < config.kappas.size(); ++i) {
            if (i) row.context_fovs += ";";
            row.context_fovs += std::to_string(config.target_size[0] << config.kappas[i]);
        }
        row.median_dsc = dsc_pool.empty() ? 0.0 : quantile_linear(dsc_pool, 0.5);
        if (!dsc_pool.empty()) {
            row.q84_minus = quantile_linear(dsc_pool, 0.84) - row.median_dsc;
            row.q16_minus = row.median_dsc - quantile_linear(dsc_pool, 0.16);
        }
        row.nonzero_pct =
            defined_total > 0 ? 100.0 * static_cast<double>(nonzero_total) /
                                    static_cast<double>(defined_total)
                              : 0.0;
        row.params = params_total;
        row.input_voxels = count_inputs(config);
        row.sec_per_iter = sec_sum / static_cast<double>(selected.size());
        result.outcomes.push_back(std::move(outcome));
    }
    return result;
}

void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
    std::ofstream f(path);
    if (!f) throw IoError(IoErrc::WriteFailed, "cannot open " + path + " for writing");
    f << "config,target_fov,context_fovs,median_dsc,q84_minus,q16_minus,nonzero_pct,params,"
         "input_voxels,sec_per_iter\n";
    char buf[128];
    for (const AblationRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%lld,%s,%.6g,%.6g,%.6g,%.6g,%lld,%lld,%.4g\n",
                      r.config.c_str(), static_cast<long long>(r.target_fov),
                      r.context_fovs.c_str(), r.median_dsc, r.q84_minus, r.q16_minus,
                      r.nonzero_pct, static_cast<long long>(r.params),
                      static_cast<long long>(r.input_voxels), r.sec_per_iter);
        f << buf;
    }
}

}  // namespace mrseg
