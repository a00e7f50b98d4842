#include "mrseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "json.hpp"

namespace mrseg {

double quantile_linear(std::vector<double> values, double q) {
    if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(values.begin(), values.end());
    const double pos = static_cast<double>(values.size() - 1) * q;
    const auto lo = static_cast<size_t>(pos);
    if (lo + 1 >= values.size()) return values.back();
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[lo + 1] - values[lo]);
}

MetricsReport finalize_metrics(std::vector<int64_t> tp, std::vector<int64_t> fp,
                               std::vector<int64_t> fn,
                               std::vector<std::vector<int64_t>> confusion) {
    MetricsReport r;
    r.class_count = static_cast<int64_t>(tp.size());
    r.tp = std::move(tp);
    r.fp = std::move(fp);
    r.fn = std::move(fn);
    r.confusion = std::move(confusion);
    r.per_class_dsc.assign(static_cast<size_t>(r.class_count), 0.0);
    r.dsc_defined.assign(static_cast<size_t>(r.class_count), false);

    std::vector<double> included;
    int64_t defined = 0, nonzero = 0;
    for (int64_t c = 0; c < r.class_count; ++c) {
        const auto i = static_cast<size_t>(c);
        if (r.tp[i] + r.fp[i] + r.fn[i] == 0) continue;  // absent everywhere
        r.dsc_defined[i] = true;
        ++defined;
        r.per_class_dsc[i] =
            2.0 * static_cast<double>(r.tp[i]) /
            static_cast<double>(2 * r.tp[i] + r.fp[i] + r.fn[i]);
        if (r.per_class_dsc[i] > 0.0) {
            ++nonzero;
            included.push_back(r.per_class_dsc[i]);
        }
    }
    r.median = quantile_linear(included, 0.5);
    r.q16 = quantile_linear(included, 0.16);
    r.q84 = quantile_linear(included, 0.84);
    r.nonzero_fraction =
        defined == 0 ? 0.0 : 100.0 * static_cast<double>(nonzero) / static_cast<double>(defined);
    return r;
}

MetricsReport evaluate(const Volume& prediction, const Volume& truth, const ClassMap& classes) {
    classes.validate();
    if (prediction.dtype != VolumeDtype::U16Label || truth.dtype != VolumeDtype::U16Label)
        throw ConfigError("evaluate expects label volumes");
    if (prediction.dims != truth.dims)
        throw ConfigError("evaluate: prediction dims do not match truth dims");
    if (prediction.classes != classes.count || truth.classes != classes.count)
        throw ConfigError("evaluate: volume class counts do not match the class map");

    const int64_t C = classes.count;
    std::vector<int64_t> tp(C, 0), fp(C, 0), fn(C, 0);
    std::vector<std::vector<int64_t>> conf(static_cast<size_t>(C),
                                           std::vector<int64_t>(static_cast<size_t>(C), 0));
    const int64_t n = truth.voxels();
    for (int64_t i = 0; i < n; ++i) {
        const auto t = truth.ldata[static_cast<size_t>(i)];
        const auto p = prediction.ldata[static_cast<size_t>(i)];
        ++conf[t][p];
        if (t == p) {
            ++tp[t];
        } else {
            ++fn[t];
            ++fp[p];
        }
    }
    return finalize_metrics(std::move(tp), std::move(fp), std::move(fn), std::move(conf));
}

std::vector<std::vector<int64_t>> confusion_submatrix(const MetricsReport& report,
                                                      const std::vector<int64_t>& subset) {
    for (int64_t c : subset)
        if (c < 0 || c >= report.class_count)
            throw ConfigError("confusion_submatrix: class index out of range");
    std::vector<std::vector<int64_t>> out(subset.size(),
                                          std::vector<int64_t>(subset.size(), 0));
    for (size_t i = 0; i < subset.size(); ++i)
        for (size_t j = 0; j < subset.size(); ++j)
            out[i][j] = report.confusion[static_cast<size_t>(subset[i])]
                                        [static_cast<size_t>(subset[j])];
    return out;
}

void write_metrics_csv(const MetricsReport& report, const ClassMap& classes,
                       const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError(IoErrc::WriteFailed, "cannot write " + path);
    f << "class,name,dsc,tp,fp,fn\n";
    for (int64_t c = 0; c < report.class_count; ++c) {
        const auto i = static_cast<size_t>(c);
        f << c << "," << classes.names[i] << ",";
        if (report.dsc_defined[i]) f << report.per_class_dsc[i];
        f << "," << report.tp[i] << "," << report.fp[i] << "," << report.fn[i] << "\n";
    }
    if (!f) throw IoError(IoErrc::WriteFailed, "cannot write " + path);
}

void write_metrics_summary_json(const MetricsReport& report, const std::string& path) {
    nlohmann::json j;
    auto put = [&](const char* key, double v) {
        if (std::isnan(v))
            j[key] = nullptr;
        else
            j[key] = v;
    };
    put("median", report.median);
    put("q16", report.q16);
    put("q84", report.q84);
    j["nonzero_fraction"] = report.nonzero_fraction;
    std::ofstream f(path);
    if (!f) throw IoError(IoErrc::WriteFailed, "cannot write " + path);
    f << j.dump(2) << "\n";
    if (!f) throw IoError(IoErrc::WriteFailed, "cannot write " + path);
}

void write_confusion_csv(const MetricsReport& report, const ClassMap& classes,
                         const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError(IoErrc::WriteFailed, "cannot write " + path);
    f << "truth\\pred";
    for (const auto& name : classes.names) f << "," << name;
    f << "\n";
    for (int64_t t = 0; t < report.class_count; ++t) {
        f << classes.names[static_cast<size_t>(t)];
        for (int64_t p = 0; p < report.class_count; ++p)
            f << "," << report.confusion[static_cast<size_t>(t)][static_cast<size_t>(p)];
        f << "\n";
    }
    if (!f) throw IoError(IoErrc::WriteFailed, "cannot write " + path);
}

}  // namespace mrseg
