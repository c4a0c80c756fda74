#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "svc/matrix.hpp"
#include "svc/merge.hpp"
#include "svc/spectral.hpp"
#include "svc/svd.hpp"

namespace svc {

enum class CalibrationMode { Aggregate, Preference };
enum class ResponseBasis { ColumnSpace, RowSpace };

struct CalibrationConfig {
    double alpha = 1.0;  // floor in (0, 1]
    CalibrationMode mode = CalibrationMode::Aggregate;
    std::size_t target_task = 0;  // Preference only
    ResponseBasis basis = ResponseBasis::ColumnSpace;
    double response_eps = kDefaultResponseEps;
    double noise_floor = kDefaultNoiseFloor;
    SvdOptions svd;

    void validate(std::size_t task_count) const;  // throws InvalidConfig
};

// K_r / sum(max(alpha, s_i)) over the given coefficients: the harmonic mean
// of the clipped per-task scalings 1/max(alpha, s_i).
double calibration_factor(std::span<const double> s_values, double alpha);

struct CalibrationResult {
    std::vector<double> gamma;
    std::vector<double> sigma;
    std::vector<double> sigma_tilde;
    std::vector<std::size_t> retained_count;
    Matrix calibrated;
};

// Rescales the singular values of the merged update by per-subspace factors
// derived from the task responses, leaving singular directions unchanged.
// Subspaces below the noise floor, and subspaces where no task passes the
// retention filter, keep gamma = 1.
CalibrationResult calibrate_matrix(std::span<const Matrix> deltas, const Matrix& merged,
                                   const CalibrationConfig& cfg);

// One-dimensional counterpart: rescales the merged vector by the aggregated
// factor computed from per-task projection coefficients. Returns the merged
// vector unchanged when no task vector passes the retention filter.
std::vector<double> calibrate_vector(std::span<const std::vector<double>> task_vectors,
                                     std::span<const double> merged_vector,
                                     const CalibrationConfig& cfg);

// Applies calibration parameter-wise: tensors with 2+ dimensions are
// flattened to (shape[0], rest), vectors use the 1D rule, scalars and
// pattern-excluded parameters pass through untouched.
MergedDelta calibrate_store(std::span<const DeltaStore> task_deltas, const MergedDelta& merged,
                            const CalibrationConfig& cfg,
                            std::span<const std::string> include = {},
                            std::span<const std::string> exclude = {}, unsigned threads = 1);

}  // namespace svc
