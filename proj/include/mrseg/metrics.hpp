#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mrseg/volume.hpp"

namespace mrseg {

// Per-class hard-label evaluation. A class counts as defined when it occurs
// in the truth or the prediction; classes absent from both carry no DSC.
// Median and quantiles run over defined classes with DSC > 0 only;
// nonzero_fraction is the percentage of defined classes with DSC > 0.
struct MetricsReport {
    int64_t class_count = 0;
    std::vector<double> per_class_dsc;  // meaningful only where dsc_defined
    std::vector<bool> dsc_defined;
    std::vector<int64_t> tp, fp, fn;
    double median = 0, q16 = 0, q84 = 0;  // NaN when no class qualifies
    double nonzero_fraction = 0;
    std::vector<std::vector<int64_t>> confusion;  // [truth class][predicted class]
};

MetricsReport evaluate(const Volume& prediction, const Volume& truth, const ClassMap& classes);

// Builds the report from pre-accumulated counts; evaluate() and multi-scan
// aggregation both funnel through this.
MetricsReport finalize_metrics(std::vector<int64_t> tp, std::vector<int64_t> fp,
                               std::vector<int64_t> fn,
                               std::vector<std::vector<int64_t>> confusion);

// Linear interpolation between order statistics at rank (n-1)*q.
// `values` need not be sorted; NaN on empty input.
double quantile_linear(std::vector<double> values, double q);

// Rows and columns restricted to `subset`, in subset order.
std::vector<std::vector<int64_t>> confusion_submatrix(const MetricsReport& report,
                                                      const std::vector<int64_t>& subset);

// class,name,dsc,tp,fp,fn rows; absent classes leave the dsc cell empty.
void write_metrics_csv(const MetricsReport& report, const ClassMap& classes,
                       const std::string& path);
// {"median":..,"q16":..,"q84":..,"nonzero_fraction":..}; NaN becomes null.
void write_metrics_summary_json(const MetricsReport& report, const std::string& path);
// Confusion counts with class-name header row and column.
void write_confusion_csv(const MetricsReport& report, const ClassMap& classes,
                         const std::string& path);

}  // namespace mrseg
