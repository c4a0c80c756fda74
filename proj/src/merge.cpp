#include "svc/merge.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "svc/errors.hpp"
#include "svc/rng.hpp"

namespace svc {

namespace {

void check_task_list(std::span<const Matrix> deltas) {
    if (deltas.empty()) {
        throw EmptyTaskList("merge requires at least one task delta");
    }
    for (std::size_t i = 1; i < deltas.size(); ++i) {
        if (!deltas[i].same_shape(deltas[0])) {
            throw ShapeMismatch("task delta " + std::to_string(i) + " is " +
                                std::to_string(deltas[i].rows()) + "x" +
                                std::to_string(deltas[i].cols()) + ", expected " +
                                std::to_string(deltas[0].rows()) + "x" +
                                std::to_string(deltas[0].cols()));
        }
    }
}

// Entry-wise reduction over tasks with order-independent accumulation.
template <typename Fn>
Matrix reduce_entries(std::span<const Matrix> deltas, Fn&& fn) {
    const std::size_t count = deltas[0].size();
    Matrix out(deltas[0].rows(), deltas[0].cols());
    std::vector<double> column(deltas.size());
    for (std::size_t e = 0; e < count; ++e) {
        for (std::size_t i = 0; i < deltas.size(); ++i) column[i] = deltas[i].values()[e];
        out.values()[e] = fn(column);
    }
    return out;
}

}  // namespace

std::string_view merge_tag_name(MergeTag tag) {
    switch (tag) {
        case MergeTag::Sum: return "sum";
        case MergeTag::Average: return "average";
        case MergeTag::Ties: return "ties";
        case MergeTag::Dare: return "dare";
    }
    return "unknown";
}

Matrix merge_sum(std::span<const Matrix> deltas) {
    check_task_list(deltas);
    return reduce_entries(deltas, [](const std::vector<double>& v) { return ordered_sum(v); });
}

Matrix merge_average(std::span<const Matrix> deltas) {
    check_task_list(deltas);
    const double k = static_cast<double>(deltas.size());
    return reduce_entries(deltas, [&](const std::vector<double>& v) { return ordered_sum(v) / k; });
}

Matrix merge_ties(std::span<const Matrix> deltas, double trim_fraction) {
    check_task_list(deltas);
    if (!(trim_fraction > 0.0 && trim_fraction <= 1.0)) {
        throw InvalidTrimFraction("trim fraction must be in (0, 1], got " +
                                  std::to_string(trim_fraction));
    }
    const std::size_t count = deltas[0].size();
    const std::size_t keep = std::min<std::size_t>(
        count, static_cast<std::size_t>(
                   std::ceil(trim_fraction * static_cast<double>(count) - 1e-9)));

    // Per-task trimmed copies: everything outside the top-|value| set is zero.
    std::vector<std::vector<double>> trimmed(deltas.size(),
                                             std::vector<double>(count, 0.0));
    std::vector<std::size_t> order(count);
    for (std::size_t i = 0; i < deltas.size(); ++i) {
        const auto vals = deltas[i].values();
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return std::abs(vals[a]) > std::abs(vals[b]);
        });
        for (std::size_t k = 0; k < keep; ++k) trimmed[i][order[k]] = vals[order[k]];
    }

    Matrix out(deltas[0].rows(), deltas[0].cols());
    std::vector<double> column(deltas.size());
    std::vector<double> agreeing;
    agreeing.reserve(deltas.size());
    for (std::size_t e = 0; e < count; ++e) {
        for (std::size_t i = 0; i < deltas.size(); ++i) column[i] = trimmed[i][e];
        const double total = ordered_sum(column);
        if (total == 0.0) continue;
        const double elected = total > 0.0 ? 1.0 : -1.0;
        agreeing.clear();
        for (double v : column) {
            if (v * elected > 0.0) agreeing.push_back(v);
        }
        if (!agreeing.empty()) {
            out.values()[e] = ordered_sum(agreeing) / static_cast<double>(agreeing.size());
        }
    }
    return out;
}

Matrix merge_dare(std::span<const Matrix> deltas, double drop_rate, DareBase base,
                  std::uint64_t seed, std::string_view param_name,
                  std::span<const std::uint64_t> task_ids) {
    check_task_list(deltas);
    if (!(drop_rate >= 0.0 && drop_rate < 1.0)) {
        throw InvalidDropRate("drop rate must be in [0, 1), got " + std::to_string(drop_rate));
    }
    if (!task_ids.empty() && task_ids.size() != deltas.size()) {
        throw LengthMismatch("task id list must match the task count");
    }
    const double rescale = 1.0 / (1.0 - drop_rate);
    std::vector<Matrix> randomized;
    randomized.reserve(deltas.size());
    for (std::size_t i = 0; i < deltas.size(); ++i) {
        const std::uint64_t task_id = task_ids.empty() ? i : task_ids[i];
        const KeyedRng rng(seed, param_name, task_id);
        Matrix dropped = deltas[i];
        auto vals = dropped.values();
        for (std::size_t e = 0; e < vals.size(); ++e) {
            if (rng.uniform(e) < drop_rate) {
                vals[e] = 0.0;
            } else {
                vals[e] *= rescale;
            }
        }
        randomized.push_back(std::move(dropped));
    }
    return base == DareBase::Sum ? merge_sum(randomized) : merge_average(randomized);
}

MergedDelta merge_deltas(std::span<const DeltaStore> task_deltas, const MergeMethod& method) {
    if (task_deltas.empty()) {
        throw EmptyTaskList("merge requires at least one task delta store");
    }
    const DeltaStore& first = task_deltas[0];
    for (std::size_t i = 1; i < task_deltas.size(); ++i) {
        if (task_deltas[i].size() != first.size()) {
            throw ParameterSetMismatch("task " + std::to_string(i) +
                                       " has a different parameter count");
        }
    }

    MergedDelta merged;
    merged.method = method;
    merged.task_count = task_deltas.size();
    for (std::size_t p = 0; p < first.size(); ++p) {
        const std::string& name = first.name_at(p);
        const TensorEntry& lead = first.entry_at(p);
        const std::uint64_t count = lead.numel();
        if (count == 0) {
            merged.deltas.add(name, lead);
            continue;
        }
        std::vector<Matrix> flats;
        flats.reserve(task_deltas.size());
        for (std::size_t i = 0; i < task_deltas.size(); ++i) {
            if (!task_deltas[i].contains(name)) {
                throw ParameterSetMismatch("parameter '" + name + "' missing from task " +
                                           std::to_string(i));
            }
            const TensorEntry& entry = task_deltas[i].at(name);
            if (entry.shape != lead.shape) {
                throw ShapeMismatch("parameter '" + name + "': shapes differ across tasks");
            }
            flats.emplace_back(1, count, entry.as_f64());
        }
        Matrix result = [&] {
            switch (method.tag) {
                case MergeTag::Sum: return merge_sum(flats);
                case MergeTag::Average: return merge_average(flats);
                case MergeTag::Ties: return merge_ties(flats, method.ties_trim_fraction);
                case MergeTag::Dare:
                    return merge_dare(flats, method.dare_drop_rate, method.dare_base, method.seed,
                                      name);
            }
            throw InvalidConfig("unknown merge method");
        }();
        merged.deltas.add(name, TensorEntry::from_f64(Dtype::F64, lead.shape,
                                                      result.values()));
    }
    return merged;
}

TensorStore assemble_weights(const TensorStore& pretrained, const MergedDelta& calibrated,
                             double lambda) {
    if (!std::isfinite(lambda)) {
        throw InvalidConfig("lambda must be finite");
    }
    if (pretrained.size() != calibrated.deltas.size()) {
        throw ParameterSetMismatch("pre-trained store and merged delta cover different parameters");
    }
    TensorStore out;
    out.metadata() = pretrained.metadata();
    for (std::size_t p = 0; p < pretrained.size(); ++p) {
        const std::string& name = pretrained.name_at(p);
        const TensorEntry& pre = pretrained.entry_at(p);
        if (!calibrated.deltas.contains(name)) {
            throw ParameterSetMismatch("parameter '" + name + "' missing from merged delta");
        }
        const TensorEntry& delta = calibrated.deltas.at(name);
        if (delta.shape != pre.shape) {
            throw ShapeMismatch("parameter '" + name + "': delta shape differs from weights");
        }
        std::vector<double> values = pre.as_f64();
        const std::vector<double> d = delta.as_f64();
        for (std::size_t k = 0; k < values.size(); ++k) values[k] += lambda * d[k];
        out.add(name, TensorEntry::from_f64(pre.dtype, pre.shape, values));
    }
    return out;
}

}  // namespace svc
