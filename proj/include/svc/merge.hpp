#pragma once

#include <cstdint>
#include <span>
#include <string_view>

#include "svc/matrix.hpp"
#include "svc/tensor_store.hpp"

namespace svc {

enum class MergeTag { Sum, Average, Ties, Dare };
enum class DareBase { Sum, Average };

std::string_view merge_tag_name(MergeTag tag);

// Base merge selection plus method-specific knobs.
struct MergeMethod {
    MergeTag tag = MergeTag::Sum;
    double ties_trim_fraction = 0.2;
    double dare_drop_rate = 0.9;
    DareBase dare_base = DareBase::Sum;
    std::uint64_t seed = 0;
};

Matrix merge_sum(std::span<const Matrix> deltas);
Matrix merge_average(std::span<const Matrix> deltas);

// Per task, keep the ceil(trim_fraction * numel) largest-magnitude entries
// (ties broken toward lower flat index), elect the per-entry sign from the
// sum of kept values, then average the kept values that agree with it.
// A sign tie (or no kept value) yields 0.
Matrix merge_ties(std::span<const Matrix> deltas, double trim_fraction);

// Zeroes each entry of each delta independently with probability drop_rate,
// rescales survivors by 1/(1-drop_rate), then applies the base merge. Draws
// are keyed by (seed, param_name, task id, flat index); task_ids defaults to
// the list positions 0..K-1.
Matrix merge_dare(std::span<const Matrix> deltas, double drop_rate, DareBase base,
                  std::uint64_t seed, std::string_view param_name = {},
                  std::span<const std::uint64_t> task_ids = {});

// Merged update for every parameter of a delta set.
struct MergedDelta {
    DeltaStore deltas;
    MergeMethod method;
    std::size_t task_count = 0;
};

MergedDelta merge_deltas(std::span<const DeltaStore> task_deltas, const MergeMethod& method);

// pretrained + lambda * delta, cast back to each parameter's stored dtype.
TensorStore assemble_weights(const TensorStore& pretrained, const MergedDelta& calibrated,
                             double lambda);

}  // namespace svc
