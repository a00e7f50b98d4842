#include "mrseg/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mrseg/checkpoint.hpp"
#include "mrseg/dataset.hpp"
#include "mrseg/errors.hpp"
#include "mrseg/metrics.hpp"
#include "mrseg/phantom.hpp"
#include "mrseg/rng.hpp"
#include "mrseg/trainer.hpp"

namespace mrseg {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr const char* kVersion = "mrseg-0.1.0";

std::string iso_utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Reruns must never clobber prior results, so --out has to be a new path.
void claim_out_dir(const std::string& out) {
    if (fs::exists(out)) throw ConfigError("output directory already exists: " + out);
    fs::create_directories(out);
}

void write_run_manifest(const std::string& out, const std::string& command, const json& inputs,
                        const std::string& started) {
    json j;
    j["command"] = command;
    j["inputs"] = inputs;
    j["version"] = kVersion;
    j["started_utc"] = started;
    j["finished_utc"] = iso_utc_now();
    j["out_dir"] = out;
    std::ofstream f(out + "/manifest.json");
    if (!f) throw IoError(IoErrc::WriteFailed, "cannot write " + out + "/manifest.json");
    f << j.dump(2) << "\n";
}

struct LoadedDataset {
    DatasetManifest manifest;
    std::vector<std::pair<Volume, Volume>> pairs;
};

LoadedDataset load_dataset(const std::string& manifest_path) {
    LoadedDataset ds;
    ds.manifest = load_dataset_manifest(manifest_path);
    for (const ScanEntry& scan : ds.manifest.scans)
        ds.pairs.emplace_back(read_volume(resolve_scan_path(manifest_path, scan.image)),
                              read_volume(resolve_scan_path(manifest_path, scan.labels)));
    return ds;
}

ClassMap load_class_map(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(IoErrc::FileNotFound, "class map not found: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    json j;
    try {
        j = json::parse(ss.str());
    } catch (const json::exception& e) {
        throw ConfigError(std::string("class map: ") + e.what());
    }
    if (!j.is_object() || !j.contains("classes") || !j.at("classes").is_array())
        throw ConfigError("class map: expected an object with a 'classes' name array");
    ClassMap cm;
    for (const json& name : j.at("classes")) {
        if (!name.is_string()) throw ConfigError("class map: names must be strings");
        cm.names.push_back(name.get<std::string>());
    }
    cm.count = static_cast<int64_t>(cm.names.size());
    cm.validate();
    return cm;
}

int cmd_generate(const std::string& spec_path, int64_t scans, uint64_t seed,
                 const std::string& out) {
    const std::string started = iso_utc_now();
    const PhantomSpec spec = load_phantom_spec(spec_path);
    if (scans < 1) throw ConfigError("--scans must be > 0");

    const auto dataset = make_dataset(scans, spec, seed);
    claim_out_dir(out);
    const int64_t fold_count = std::min<int64_t>(5, scans);
    const std::string manifest =
        save_dataset(out + "/data", dataset, phantom_class_map(spec), fold_count);

    json inputs;
    inputs["spec"] = spec_path;
    inputs["scans"] = scans;
    inputs["seed"] = seed;
    write_run_manifest(out, "generate", inputs, started);
    std::printf("generate: %lld scans of %lldx%lldx%lld -> %s\n", static_cast<long long>(scans),
                static_cast<long long>(spec.dims[0]), static_cast<long long>(spec.dims[1]),
                static_cast<long long>(spec.dims[2]), manifest.c_str());
    return 0;
}

int cmd_train(const std::string& net_path, const std::string& train_path,
              const std::string& data_path, int64_t fold, const std::string& out) {
    const std::string started = iso_utc_now();
    const NetworkConfig net_cfg = load_network_config(net_path);
    TrainConfig tc = load_train_config(train_path);
    const LoadedDataset ds = load_dataset(data_path);
    if (ds.manifest.classes.count != net_cfg.class_count)
        throw ConfigError("network predicts " + std::to_string(net_cfg.class_count) +
                          " classes but the dataset has " +
                          std::to_string(ds.manifest.classes.count));
    const FoldPlan plan =
        FoldPlan::round_robin(static_cast<int64_t>(ds.pairs.size()), ds.manifest.fold_count);
    if (fold < 0 || fold >= plan.fold_count)
        throw ConfigError("--fold must lie in [0, " + std::to_string(plan.fold_count) + ")");

    const PatchSpec patch = net_cfg.patch_spec();
    const FoldPlan::Fold& role = plan.folds[static_cast<size_t>(fold)];
    std::vector<PreparedScan> train_set, val_set;
    for (int64_t id : role.train)
        train_set.push_back(prepare_scan(id, ds.pairs[static_cast<size_t>(id)].first,
                                         ds.pairs[static_cast<size_t>(id)].second, patch,
                                         tc.normalization));
    for (int64_t id : role.val)
        val_set.push_back(prepare_scan(id, ds.pairs[static_cast<size_t>(id)].first,
                                       ds.pairs[static_cast<size_t>(id)].second, patch,
                                       tc.normalization));
    claim_out_dir(out);

    auto net = build_network<float>(net_cfg, derive_seed(tc.seed, "net.init"));
    tc.out_dir = out;
    const TrainResult result = train(net, train_set, val_set, tc);
    write_loss_history_csv(out + "/loss_history.csv", result.history);

    json inputs;
    inputs["net_config"] = net_path;
    inputs["train_config"] = train_path;
    inputs["data"] = data_path;
    inputs["fold"] = fold;
    inputs["seed"] = tc.seed;
    write_run_manifest(out, "train", inputs, started);
    std::printf("train: config %c fold %lld, %lld iterations, final loss %.5f, best iter %lld, "
                "%.3f s/iter -> %s\n",
                net_cfg.config_label, static_cast<long long>(fold),
                static_cast<long long>(tc.iterations), result.history.back().total,
                static_cast<long long>(result.best_iteration), result.sec_per_iter, out.c_str());
    return 0;
}

int cmd_predict(const std::string& ckpt_path, const std::string& image_path,
                const std::string& out) {
    const std::string started = iso_utc_now();
    const LoadedCheckpoint ckpt = read_checkpoint(ckpt_path);
    auto net = build_network<float>(ckpt.config, 0);
    load_checkpoint(ckpt_path, net);
    const Volume image = read_volume(image_path);
    const NormalizationMode mode = parse_normalization(ckpt.meta.normalization);
    claim_out_dir(out);

    const Volume pred = predict(net, image, mode);
    write_volume(pred, out + "/prediction");

    json inputs;
    inputs["checkpoint"] = ckpt_path;
    inputs["image"] = image_path;
    write_run_manifest(out, "predict", inputs, started);
    std::printf("predict: config %c, %lldx%lldx%lld, %lld classes -> %s/prediction\n",
                ckpt.config.config_label, static_cast<long long>(pred.dims[0]),
                static_cast<long long>(pred.dims[1]), static_cast<long long>(pred.dims[2]),
                static_cast<long long>(pred.classes), out.c_str());
    return 0;
}

int cmd_evaluate(const std::string& pred_path, const std::string& truth_path,
                 const std::string& classes_path, const std::string& out) {
    const std::string started = iso_utc_now();
    const Volume pred = read_volume(pred_path);
    const Volume truth = read_volume(truth_path);
    const ClassMap cm = load_class_map(classes_path);
    claim_out_dir(out);

    const MetricsReport report = evaluate(pred, truth, cm);
    write_metrics_csv(report, cm, out + "/metrics.csv");
    write_metrics_summary_json(report, out + "/summary.json");

    json inputs;
    inputs["pred"] = pred_path;
    inputs["truth"] = truth_path;
    inputs["classes"] = classes_path;
    write_run_manifest(out, "evaluate", inputs, started);
    std::printf("evaluate: median %.4f, nonzero %.1f%% -> %s\n", report.median,
                report.nonzero_fraction, out.c_str());
    return 0;
}

int cmd_ablation(const std::vector<std::string>& config_paths, const std::string& data_path,
                 const std::vector<int64_t>& fold_subset, const std::string& train_path,
                 const std::string& out) {
    const std::string started = iso_utc_now();
    std::vector<NetworkConfig> configs;
    for (const std::string& p : config_paths) configs.push_back(load_network_config(p));
    const LoadedDataset ds = load_dataset(data_path);
    for (const NetworkConfig& cfg : configs)
        if (ds.manifest.classes.count != cfg.class_count)
            throw ConfigError(std::string("config ") + cfg.config_label + " predicts " +
                              std::to_string(cfg.class_count) + " classes but the dataset has " +
                              std::to_string(ds.manifest.classes.count));
    const FoldPlan plan =
        FoldPlan::round_robin(static_cast<int64_t>(ds.pairs.size()), ds.manifest.fold_count);
    TrainConfig base = train_path.empty() ? TrainConfig{} : load_train_config(train_path);
    claim_out_dir(out);
    base.out_dir = out;

    const CrossValResult result =
        run_cross_validation(configs, ds.pairs, plan, base, fold_subset);

    std::vector<AblationRow> rows;
    for (const ConfigOutcome& outcome : result.outcomes) {
        rows.push_back(outcome.row);
        write_metrics_csv(outcome.pooled, ds.manifest.classes,
                          out + "/" + outcome.row.config + "_pooled.csv");
        write_metrics_summary_json(outcome.pooled,
                                   out + "/" + outcome.row.config + "_summary.json");
    }
    write_ablation_csv(out + "/ablation.csv", rows);

    json inputs;
    inputs["configs"] = config_paths;
    inputs["data"] = data_path;
    inputs["folds"] = fold_subset;
    inputs["train_config"] = train_path.empty() ? json() : json(train_path);
    inputs["seed"] = base.seed;
    write_run_manifest(out, "ablation", inputs, started);
    std::printf("ablation: %zu configs over %zu folds -> %s/ablation.csv\n", configs.size(),
                fold_subset.empty() ? static_cast<size_t>(plan.fold_count) : fold_subset.size(),
                out.c_str());
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"Multi-resolution 3D segmentation experiments"};
    app.name("mrseg");
    app.require_subcommand(1);

    std::string spec_path, out, net_path, train_path, data_path;
    std::string ckpt_path, image_path, pred_path, truth_path, classes_path;
    std::vector<std::string> config_paths;
    std::vector<int64_t> fold_subset;
    int64_t scans = 16, fold = 0;
    uint64_t seed = 1;

    CLI::App* gen = app.add_subcommand("generate", "Synthesize a phantom dataset");
    gen->add_option("--spec", spec_path, "Phantom spec JSON")->required();
    gen->add_option("--scans", scans, "Number of scans to draw");
    gen->add_option("--seed", seed, "Dataset RNG seed");
    gen->add_option("--out", out, "Fresh output directory")->required();

    CLI::App* trn = app.add_subcommand("train", "Train one config on one fold");
    trn->add_option("--net-config", net_path, "Network config JSON")->required();
    trn->add_option("--train-config", train_path, "Train config JSON")->required();
    trn->add_option("--data", data_path, "Dataset manifest JSON")->required();
    trn->add_option("--fold", fold, "Fold index")->required();
    trn->add_option("--out", out, "Fresh output directory")->required();

    CLI::App* prd = app.add_subcommand("predict", "Segment a volume with a checkpoint");
    prd->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
    prd->add_option("--image", image_path, "Intensity volume stem or header")->required();
    prd->add_option("--out", out, "Fresh output directory")->required();

    CLI::App* evl = app.add_subcommand("evaluate", "Score a prediction against truth");
    evl->add_option("--pred", pred_path, "Predicted label volume")->required();
    evl->add_option("--truth", truth_path, "Ground-truth label volume")->required();
    evl->add_option("--classes", classes_path, "Class name JSON")->required();
    evl->add_option("--out", out, "Fresh output directory")->required();

    CLI::App* abl = app.add_subcommand("ablation", "Cross-validate several configs");
    abl->add_option("--configs", config_paths, "Network config JSON paths")->required();
    abl->add_option("--data", data_path, "Dataset manifest JSON")->required();
    abl->add_option("--folds", fold_subset, "Fold subset (default: all folds)");
    abl->add_option("--train-config", train_path, "Train config JSON (default: desk protocol)");
    abl->add_option("--out", out, "Fresh output directory")->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
        if (*gen) return cmd_generate(spec_path, scans, seed, out);
        if (*trn) return cmd_train(net_path, train_path, data_path, fold, out);
        if (*prd) return cmd_predict(ckpt_path, image_path, out);
        if (*evl) return cmd_evaluate(pred_path, truth_path, classes_path, out);
        if (*abl) return cmd_ablation(config_paths, data_path, fold_subset, train_path, out);
        throw ConfigError("no subcommand given");
    } catch (const CLI::CallForHelp& e) {
        std::printf("%s", app.help().c_str());
        return 0;
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const RuntimeFailure& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
}

}  // namespace mrseg
