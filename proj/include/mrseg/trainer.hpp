#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mrseg/dataset.hpp"
#include "mrseg/loss.hpp"
#include "mrseg/metrics.hpp"
#include "mrseg/network.hpp"
#include "mrseg/volume.hpp"

namespace mrseg {

enum class NormalizationMode { ZScore, None };

const char* normalization_name(NormalizationMode m);
NormalizationMode parse_normalization(const std::string& name);

struct TrainConfig {
    int64_t iterations = 2000;
    double lr = 0.001;
    int64_t batch_size = 2;
    uint64_t seed = 1;
    int64_t checkpoint_interval = 0;  // 0: only final/best checkpoints
    int64_t val_interval = 200;       // 0: never evaluate validation scans
    NormalizationMode normalization = NormalizationMode::ZScore;
    // Probability that a sampled patch is centered on a labeled voxel
    // instead of drawn uniformly; speeds up learning of thin structures.
    double fg_bias = 0.5;
    std::string out_dir;  // empty: write no checkpoints

    void validate() const;
};

// JSON form with every field optional: {iterations, lr, batch_size, seed,
// checkpoint_interval, val_interval, normalization, fg_bias}. Unknown keys
// are rejected; out_dir is never read from a file.
TrainConfig parse_train_config(const std::string& json_text);
TrainConfig load_train_config(const std::string& path);
std::string train_config_json(const TrainConfig& cfg);

// A scan made sample-ready: normalized, edge-padded for the patch spec, with
// the original labels kept for evaluation and the labeled voxel positions
// indexed for biased sampling.
struct PreparedScan {
    int64_t id = 0;
    IVec3 dims{0, 0, 0};  // original extent
    IVec3 pad{0, 0, 0};
    Volume image;        // normalized + padded
    Volume labels;       // padded
    Volume orig_labels;  // unpadded
    std::vector<int64_t> fg_flat;  // labeled voxels, flat over the original frame
};

PreparedScan prepare_scan(int64_t id, const Volume& image, const Volume& labels,
                          const PatchSpec& spec, NormalizationMode mode);

// Round-robin test assignment: scan i lands in fold i % fold_count. The two
// validation scans are borrowed from the head of the next fold's test set;
// everything else trains.
struct FoldPlan {
    struct Fold {
        std::vector<int64_t> train, val, test;
    };
    int64_t scan_count = 0;
    int64_t fold_count = 0;
    std::vector<Fold> folds;

    static FoldPlan round_robin(int64_t scan_count, int64_t fold_count);
    void validate() const;
};

struct TrainResult {
    std::vector<LossReport> history;  // one entry per iteration
    int64_t best_iteration = -1;      // -1: no validation ran
    double best_val_median = 0.0;
    double sec_per_iter = 0.0;
};

// Adam on the combined target+context loss over randomly sampled patches.
// Deterministic per seed. When validation scans are given, the net ends up
// holding the best-validation-median parameters; otherwise the final ones.
TrainResult train(NetworkInstance<float>& net, const std::vector<PreparedScan>& train_scans,
                  const std::vector<PreparedScan>& val_scans, const TrainConfig& cfg);

// Sliding-window inference: pad, tile, argmax per voxel; where tiles overlap
// the tile with the nearest center wins. Output dims equal input dims.
Volume predict(const NetworkInstance<float>& net, const Volume& image, NormalizationMode mode);

// Same, for a scan already prepared with the net's patch spec.
Volume predict_prepared(const NetworkInstance<float>& net, const PreparedScan& scan);

void write_loss_history_csv(const std::string& path, const std::vector<LossReport>& history);

struct AblationRow {
    std::string config;
    int64_t target_fov = 0;
    std::string context_fovs;  // semicolon-joined voxel extents, e.g. "32;64"
    double median_dsc = 0.0;
    double q84_minus = 0.0;  // q84 - median
    double q16_minus = 0.0;  // median - q16
    double nonzero_pct = 0.0;
    int64_t params = 0;
    int64_t input_voxels = 0;
    double sec_per_iter = 0.0;
};

struct ConfigOutcome {
    AblationRow row;
    MetricsReport pooled;                  // voxel-count aggregate over all test scans
    std::vector<MetricsReport> per_scan;   // one per test scan, fold-major order
};

struct CrossValResult {
    std::vector<ConfigOutcome> outcomes;
};

// Trains each config on each selected fold (all folds when fold_subset is
// empty), predicts that fold's test scans, and aggregates. Scan volumes are
// taken raw; preparation runs per config because padding depends on kappas.
CrossValResult run_cross_validation(const std::vector<NetworkConfig>& configs,
                                    const std::vector<std::pair<Volume, Volume>>& dataset,
                                    const FoldPlan& folds, const TrainConfig& base,
                                    const std::vector<int64_t>& fold_subset = {});

void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows);

}  // namespace mrseg
