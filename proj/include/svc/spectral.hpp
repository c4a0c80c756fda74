#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "svc/matrix.hpp"
#include "svc/svd.hpp"

namespace svc {

inline constexpr int kMergedTask = -1;

// Default retention filter coefficient: task i is kept in a subspace when its
// response norm exceeds response_eps * max(1, ||delta_i||_F).
inline constexpr double kDefaultResponseEps = 1e-9;

// Subspaces with sigma_r <= noise_floor * sigma_1 are flagged and their
// overlap statistics zeroed; calibration leaves them unchanged.
inline constexpr double kDefaultNoiseFloor = 1e-12;

// A task's effect along one direction of the merged basis: a = u_r^T * delta.
struct SubspaceResponse {
    std::size_t r = 0;  // 1-based subspace index
    int task = kMergedTask;
    std::vector<double> a;
    double norm_sq = 0.0;
};

SubspaceResponse subspace_response(std::span<const double> u_r, const Matrix& delta,
                                   std::size_t r = 0, int task = kMergedTask);

// <merged, task> / ||task||^2. Values above 1 signal amplification of the
// task along its own response direction, below 1 attenuation.
double projection_coefficient(const SubspaceResponse& merged, const SubspaceResponse& task,
                              double resp_floor = 0.0);

// (s - 1)^2 * norm_sq: squared distance between the merged response's
// projection onto the task response and the task response itself.
double interference_energy(double s, double norm_sq);

// 1/s for s > 0, otherwise the boundary value 0.
double optimal_scaling(double s);

struct CrossTermMatrix {
    std::size_t r = 0;
    std::size_t tasks = 0;
    std::vector<double> values;  // row-major tasks x tasks

    double at(std::size_t i, std::size_t j) const { return values[i * tasks + j]; }
};

CrossTermMatrix cross_term_matrix(std::span<const SubspaceResponse> responses);

// Per-subspace gap diagnostic. Entries of the per-task vectors are zeroed for
// tasks that fail the retention filter.
struct SubspaceStats {
    double sigma = 0.0;
    double sigma_star = 0.0;
    double gap = 0.0;
    bool below_noise_floor = false;
    std::vector<double> s;
    std::vector<double> gamma_opt;
    std::vector<double> interference;
    std::vector<double> response_norm_sq;
    std::vector<bool> retained;
};

struct SubspaceOverlapReport {
    std::vector<SubspaceStats> subspaces;  // index r-1
    std::vector<double> task_delta_fro;
};

// sigma_star is sigma times the mean of the retained tasks' optimal scalings;
// with no retained task the subspace is neutral (sigma_star = sigma, gap 0).
SubspaceOverlapReport gap_report(const SpectralDecomposition& decomp,
                                 std::span<const Matrix> deltas,
                                 double response_eps = kDefaultResponseEps,
                                 double noise_floor = kDefaultNoiseFloor);

}  // namespace svc
