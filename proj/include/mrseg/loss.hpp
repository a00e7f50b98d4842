#pragma once

#include <vector>

#include "mrseg/autograd.hpp"
#include "mrseg/tensor.hpp"

namespace mrseg {

struct LossComponents {
    double dice = 0;
    double xent = 0;
};

// Scalar snapshot of one optimization step's loss terms. `total` is always
// rebuilt as target_loss + context_losses in list order, so re-summing in
// that order reproduces it bit-exactly.
struct LossReport {
    double total = 0;
    double target_loss = 0;
    std::vector<double> context_losses;
    LossComponents target_parts;
    std::vector<LossComponents> context_parts;
};

template <typename T>
struct LossGraph {
    ag::NodePtr<T> total;  // scalar root for backward
    LossReport report;
};

template <typename T>
Array<T> one_hot(const Array<int64_t>& labels, int64_t class_count) {
    if (labels.shape.size() != 4)
        throw ConfigError("one_hot expects labels shaped [N,D,H,W]");
    const int64_t N = labels.shape[0];
    const int64_t V = labels.shape[1] * labels.shape[2] * labels.shape[3];
    Array<T> out = Array<T>::zeros(
        {N, class_count, labels.shape[1], labels.shape[2], labels.shape[3]});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < V; ++i) {
            const int64_t c = labels.data[static_cast<size_t>(n * V + i)];
            if (c < 0 || c >= class_count) throw ConfigError("one_hot: label out of range");
            out.data[static_cast<size_t>((n * class_count + c) * V + i)] = T(1);
        }
    return out;
}

// (1/C) * sum_c (1 - (2*sum(p_c*g_c) + eps) / (sum(p_c^2) + sum(g_c^2) + eps))
// over softmax probabilities p. The eps in the numerator keeps classes that
// are absent from both prediction and truth at a loss of zero.
template <typename T>
ag::NodePtr<T> soft_dice_loss(const ag::NodePtr<T>& logits, const Array<T>& labels_onehot,
                              T eps = T(1e-5)) {
    if (logits->value.shape != labels_onehot.shape)
        throw ConfigError("soft_dice_loss: logits shape " + shape_str(logits->value.shape) +
                          " vs one-hot labels " + shape_str(labels_onehot.shape));
    const int64_t C = logits->value.shape[1];
    auto g = ag::constant(labels_onehot);
    auto p = ag::softmax_channels(logits);
    auto num = ag::sum_per_channel(ag::mul(p, g));
    auto den = ag::add(ag::sum_per_channel(ag::mul(p, p)), ag::sum_per_channel(ag::mul(g, g)));
    auto frac = ag::div_elem(ag::add_scalar(ag::scale(num, T(2)), eps), ag::add_scalar(den, eps));
    return ag::add_scalar(ag::scale(ag::sum_all(frac), T(-1) / static_cast<T>(C)), T(1));
}

// Mean voxel cross-entropy; labels shaped [N,D,H,W] with integer class ids.
template <typename T>
ag::NodePtr<T> cross_entropy_loss(const ag::NodePtr<T>& logits, const Array<int64_t>& labels) {
    const auto& ls = logits->value.shape;
    if (ls.size() != 5 || labels.shape.size() != 4 || labels.shape[0] != ls[0] ||
        labels.shape[1] != ls[2] || labels.shape[2] != ls[3] || labels.shape[3] != ls[4])
        throw ConfigError("cross_entropy_loss: labels " + shape_str(labels.shape) +
                          " do not match logits " + shape_str(ls));
    return ag::cross_entropy_mean(logits, labels.data);
}

// Per head, loss = dice + xent; total = target head + each context head in
// list order. Heads that do not exist (config A and C context networks)
// simply do not appear in `context_logits`.
template <typename T>
LossGraph<T> combined_loss(const ag::NodePtr<T>& target_logits, const Array<int64_t>& target_labels,
                           const std::vector<ag::NodePtr<T>>& context_logits,
                           const std::vector<Array<int64_t>>& context_labels) {
    if (context_logits.size() != context_labels.size())
        throw ConfigError("combined_loss: one label patch required per context head");
    const int64_t C = target_logits->value.shape[1];

    LossGraph<T> out;
    auto head = [&](const ag::NodePtr<T>& logits, const Array<int64_t>& labels,
                    LossComponents& parts) {
        auto dice = soft_dice_loss(logits, one_hot<T>(labels, C));
        auto xent = cross_entropy_loss(logits, labels);
        parts.dice = static_cast<double>(dice->value.data[0]);
        parts.xent = static_cast<double>(xent->value.data[0]);
        return ag::add(dice, xent);
    };

    auto target = head(target_logits, target_labels, out.report.target_parts);
    out.report.target_loss = static_cast<double>(target->value.data[0]);
    out.total = target;
    for (size_t k = 0; k < context_logits.size(); ++k) {
        out.report.context_parts.emplace_back();
        auto ctx = head(context_logits[k], context_labels[k], out.report.context_parts.back());
        out.report.context_losses.push_back(static_cast<double>(ctx->value.data[0]));
        out.total = ag::add(out.total, ctx);
    }
    out.report.total = out.report.target_loss;
    for (double c : out.report.context_losses) out.report.total += c;
    return out;
}

}  // namespace mrseg
