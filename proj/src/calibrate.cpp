#include "svc/calibrate.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

#include "svc/errors.hpp"
#include "svc/glob.hpp"
#include "svc/parallel.hpp"

namespace svc {

void CalibrationConfig::validate(std::size_t task_count) const {
    if (!(alpha > 0.0 && alpha <= 1.0)) {
        throw InvalidConfig("alpha must be in (0, 1], got " + std::to_string(alpha));
    }
    if (mode == CalibrationMode::Preference && target_task >= task_count) {
        throw InvalidConfig("target task " + std::to_string(target_task) +
                            " out of range for " + std::to_string(task_count) + " tasks");
    }
    if (!(response_eps >= 0.0) || !(noise_floor >= 0.0)) {
        throw InvalidConfig("tolerances must be non-negative");
    }
}

double calibration_factor(std::span<const double> s_values, double alpha) {
    if (s_values.empty()) {
        throw EmptyList("calibration factor needs at least one coefficient");
    }
    if (!(alpha > 0.0 && alpha <= 1.0)) {
        throw InvalidConfig("alpha must be in (0, 1], got " + std::to_string(alpha));
    }
    std::vector<double> clipped(s_values.begin(), s_values.end());
    for (double& s : clipped) s = std::max(alpha, s);
    return static_cast<double>(s_values.size()) / ordered_sum(clipped);
}

CalibrationResult calibrate_matrix(std::span<const Matrix> deltas, const Matrix& merged,
                                   const CalibrationConfig& cfg) {
    if (deltas.empty()) {
        throw EmptyTaskList("calibration needs at least one task delta");
    }
    cfg.validate(deltas.size());
    for (const Matrix& d : deltas) {
        if (!d.same_shape(merged)) {
            throw DimensionMismatch("task delta shape does not match the merged update");
        }
    }

    const SpectralDecomposition decomp = svd(merged, cfg.svd);
    const std::size_t tasks = deltas.size();
    const std::size_t rank = decomp.rank();

    // Under RowSpace the responses are delta * v_r instead of u_r^T * delta;
    // transposing once lets both sides share the same row-combination path.
    const bool row_space = cfg.basis == ResponseBasis::RowSpace;
    std::vector<Matrix> oriented;
    oriented.reserve(tasks);
    for (const Matrix& d : deltas) oriented.push_back(row_space ? d.transposed() : d);
    const Matrix merged_oriented = row_space ? merged.transposed() : merged;
    const Matrix& directions = row_space ? decomp.v : decomp.u;

    std::vector<double> resp_floor(tasks);
    for (std::size_t i = 0; i < tasks; ++i) {
        resp_floor[i] = cfg.response_eps * std::max(1.0, deltas[i].frobenius_norm());
    }
    const double sigma_floor = rank > 0 ? cfg.noise_floor * decomp.sigma[0] : 0.0;

    CalibrationResult result{std::vector<double>(rank, 1.0), decomp.sigma,
                             std::vector<double>(rank, 0.0),
                             std::vector<std::size_t>(rank, 0), Matrix(1, 1)};

    std::vector<double> direction(directions.rows());
    std::vector<double> retained_s;
    retained_s.reserve(tasks);
    for (std::size_t r = 0; r < rank; ++r) {
        for (std::size_t i = 0; i < direction.size(); ++i) direction[i] = directions(i, r);
        const SubspaceResponse merged_resp =
            subspace_response(direction, merged_oriented, r + 1, kMergedTask);

        retained_s.clear();
        bool target_retained = false;
        double target_s = 0.0;
        for (std::size_t i = 0; i < tasks; ++i) {
            const SubspaceResponse resp =
                subspace_response(direction, oriented[i], r + 1, static_cast<int>(i));
            if (std::sqrt(resp.norm_sq) <= resp_floor[i]) continue;
            const double s = projection_coefficient(merged_resp, resp, 0.0);
            retained_s.push_back(s);
            if (cfg.mode == CalibrationMode::Preference && i == cfg.target_task) {
                target_retained = true;
                target_s = s;
            }
        }
        result.retained_count[r] = retained_s.size();

        double gamma = 1.0;
        if (decomp.sigma[r] > sigma_floor) {
            if (cfg.mode == CalibrationMode::Preference) {
                if (target_retained) gamma = 1.0 / std::max(cfg.alpha, target_s);
            } else if (!retained_s.empty()) {
                gamma = calibration_factor(retained_s, cfg.alpha);
            }
        }
        result.gamma[r] = gamma;
        result.sigma_tilde[r] = gamma * decomp.sigma[r];
    }

    result.calibrated = reconstruct(decomp, result.sigma_tilde);
    return result;
}

std::vector<double> calibrate_vector(std::span<const std::vector<double>> task_vectors,
                                     std::span<const double> merged_vector,
                                     const CalibrationConfig& cfg) {
    if (task_vectors.empty()) {
        throw EmptyTaskList("calibration needs at least one task vector");
    }
    cfg.validate(task_vectors.size());
    for (const auto& v : task_vectors) {
        if (v.size() != merged_vector.size()) {
            throw LengthMismatch("task vector length does not match the merged vector");
        }
    }

    std::vector<double> retained_s;
    retained_s.reserve(task_vectors.size());
    bool target_retained = false;
    double target_s = 0.0;
    for (std::size_t i = 0; i < task_vectors.size(); ++i) {
        const double norm_sq = norm2_sq(task_vectors[i]);
        const double floor = cfg.response_eps * std::max(1.0, std::sqrt(norm_sq));
        if (std::sqrt(norm_sq) <= floor) continue;
        const double s = dot(merged_vector, task_vectors[i]) / norm_sq;
        retained_s.push_back(s);
        if (cfg.mode == CalibrationMode::Preference && i == cfg.target_task) {
            target_retained = true;
            target_s = s;
        }
    }

    double gamma = 1.0;
    if (cfg.mode == CalibrationMode::Preference) {
        if (target_retained) gamma = 1.0 / std::max(cfg.alpha, target_s);
    } else if (!retained_s.empty()) {
        gamma = calibration_factor(retained_s, cfg.alpha);
    }

    std::vector<double> out(merged_vector.begin(), merged_vector.end());
    for (double& v : out) v *= gamma;
    return out;
}

namespace {

// (shape[0], product of the remaining dimensions) for tensors with 2+ dims.
std::pair<std::size_t, std::size_t> flattened_dims(const std::vector<std::uint64_t>& shape) {
    std::size_t cols = 1;
    for (std::size_t d = 1; d < shape.size(); ++d) cols *= static_cast<std::size_t>(shape[d]);
    return {static_cast<std::size_t>(shape[0]), cols};
}

}  // namespace

MergedDelta calibrate_store(std::span<const DeltaStore> task_deltas, const MergedDelta& merged,
                            const CalibrationConfig& cfg, std::span<const std::string> include,
                            std::span<const std::string> exclude, unsigned threads) {
    if (task_deltas.empty()) {
        throw EmptyTaskList("calibration needs at least one task delta store");
    }
    cfg.validate(task_deltas.size());

    const std::size_t params = merged.deltas.size();
    std::vector<TensorEntry> results(params);
    parallel_for(params, threads, [&](std::size_t p) {
        const std::string& name = merged.deltas.name_at(p);
        const TensorEntry& entry = merged.deltas.entry_at(p);
        try {
            const std::uint64_t count = entry.numel();
            if (count == 0 || entry.shape.empty() ||
                !selected_by_patterns(name, include, exclude)) {
                results[p] = entry;
                return;
            }
            std::vector<std::vector<double>> task_values;
            task_values.reserve(task_deltas.size());
            for (std::size_t i = 0; i < task_deltas.size(); ++i) {
                if (!task_deltas[i].contains(name)) {
                    throw ParameterSetMismatch("missing from task " + std::to_string(i));
                }
                const TensorEntry& task_entry = task_deltas[i].at(name);
                if (task_entry.shape != entry.shape) {
                    throw ShapeMismatch("shape differs from the merged delta in task " +
                                        std::to_string(i));
                }
                task_values.push_back(task_entry.as_f64());
            }

            if (entry.shape.size() == 1) {
                const std::vector<double> calibrated =
                    calibrate_vector(task_values, entry.as_f64(), cfg);
                results[p] = TensorEntry::from_f64(entry.dtype, entry.shape, calibrated);
                return;
            }

            const auto [rows, cols] = flattened_dims(entry.shape);
            std::vector<Matrix> flats;
            flats.reserve(task_values.size());
            for (auto& values : task_values) flats.emplace_back(rows, cols, std::move(values));
            const Matrix merged_flat(rows, cols, entry.as_f64());
            CalibrationResult calibrated = calibrate_matrix(flats, merged_flat, cfg);
            std::vector<double> out(calibrated.calibrated.values().begin(),
                                    calibrated.calibrated.values().end());
            results[p] = TensorEntry::from_f64(entry.dtype, entry.shape, out);
        } catch (const Error& e) {
            throw Error(e.kind(), "parameter '" + name + "': " + e.what(), e.exit_code());
        }
    });

    MergedDelta out;
    out.method = merged.method;
    out.task_count = merged.task_count;
    out.deltas.metadata() = merged.deltas.metadata();
    for (std::size_t p = 0; p < params; ++p) {
        out.deltas.add(merged.deltas.name_at(p), std::move(results[p]));
    }
    return out;
}

}  // namespace svc
