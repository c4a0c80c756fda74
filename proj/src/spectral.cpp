#include "svc/spectral.hpp"

#include <cmath>
#include <string>

#include "svc/errors.hpp"

namespace svc {

SubspaceResponse subspace_response(std::span<const double> u_r, const Matrix& delta,
                                   std::size_t r, int task) {
    if (u_r.size() != delta.rows()) {
        throw DimensionMismatch("direction has length " + std::to_string(u_r.size()) +
                                ", delta has " + std::to_string(delta.rows()) + " rows");
    }
    const double len = norm2(u_r);
    if (std::abs(len - 1.0) > 1e-10) {
        throw NonUnitDirection("direction norm is " + std::to_string(len) + ", expected 1");
    }
    SubspaceResponse out;
    out.r = r;
    out.task = task;
    out.a.assign(delta.cols(), 0.0);
    for (std::size_t i = 0; i < delta.rows(); ++i) {
        const double w = u_r[i];
        if (w == 0.0) continue;
        const auto row = delta.row(i);
        for (std::size_t j = 0; j < delta.cols(); ++j) out.a[j] += w * row[j];
    }
    out.norm_sq = norm2_sq(out.a);
    return out;
}

double projection_coefficient(const SubspaceResponse& merged, const SubspaceResponse& task,
                              double resp_floor) {
    if (merged.a.size() != task.a.size()) {
        throw LengthMismatch("responses have different lengths");
    }
    if (merged.r != task.r) {
        throw DimensionMismatch("responses belong to different subspaces");
    }
    if (std::sqrt(task.norm_sq) <= resp_floor) {
        throw DegenerateResponse("task response norm is at or below the retention floor");
    }
    return dot(merged.a, task.a) / task.norm_sq;
}

double interference_energy(double s, double norm_sq) {
    const double d = s - 1.0;
    return d * d * norm_sq;
}

double optimal_scaling(double s) {
    return s > 0.0 ? 1.0 / s : 0.0;
}

CrossTermMatrix cross_term_matrix(std::span<const SubspaceResponse> responses) {
    if (responses.empty()) {
        throw EmptyTaskList("cross-term matrix needs at least one response");
    }
    for (std::size_t i = 1; i < responses.size(); ++i) {
        if (responses[i].a.size() != responses[0].a.size()) {
            throw LengthMismatch("responses have different lengths");
        }
        if (responses[i].r != responses[0].r) {
            throw DimensionMismatch("responses belong to different subspaces");
        }
    }
    CrossTermMatrix out;
    out.r = responses[0].r;
    out.tasks = responses.size();
    out.values.assign(out.tasks * out.tasks, 0.0);
    for (std::size_t i = 0; i < out.tasks; ++i) {
        for (std::size_t j = i; j < out.tasks; ++j) {
            const double g = dot(responses[i].a, responses[j].a);
            out.values[i * out.tasks + j] = g;
            out.values[j * out.tasks + i] = g;
        }
    }
    return out;
}

SubspaceOverlapReport gap_report(const SpectralDecomposition& decomp,
                                 std::span<const Matrix> deltas, double response_eps,
                                 double noise_floor) {
    if (deltas.empty()) {
        throw EmptyTaskList("gap report needs at least one task delta");
    }
    const std::size_t m = decomp.u.rows();
    const std::size_t n = decomp.v.rows();
    for (const Matrix& d : deltas) {
        if (d.rows() != m || d.cols() != n) {
            throw DimensionMismatch("task delta shape does not match the decomposition");
        }
    }

    const std::size_t tasks = deltas.size();
    const std::size_t rank = decomp.rank();
    SubspaceOverlapReport report;
    report.task_delta_fro.reserve(tasks);
    std::vector<double> resp_floor(tasks);
    for (std::size_t i = 0; i < tasks; ++i) {
        const double fro = deltas[i].frobenius_norm();
        report.task_delta_fro.push_back(fro);
        resp_floor[i] = response_eps * std::max(1.0, fro);
    }
    const double sigma_floor = rank > 0 ? noise_floor * decomp.sigma[0] : 0.0;

    std::vector<double> u_col(m);
    report.subspaces.reserve(rank);
    for (std::size_t r = 0; r < rank; ++r) {
        SubspaceStats stats;
        stats.sigma = decomp.sigma[r];
        stats.s.assign(tasks, 0.0);
        stats.gamma_opt.assign(tasks, 0.0);
        stats.interference.assign(tasks, 0.0);
        stats.response_norm_sq.assign(tasks, 0.0);
        stats.retained.assign(tasks, false);
        stats.below_noise_floor = stats.sigma <= sigma_floor;
        if (stats.below_noise_floor) {
            stats.sigma_star = stats.sigma;
            stats.gap = 0.0;
            report.subspaces.push_back(std::move(stats));
            continue;
        }

        for (std::size_t i = 0; i < m; ++i) u_col[i] = decomp.u(i, r);
        // The merged response along u_r is sigma_r * v_r by the decomposition.
        SubspaceResponse merged;
        merged.r = r + 1;
        merged.a.resize(n);
        for (std::size_t j = 0; j < n; ++j) merged.a[j] = stats.sigma * decomp.v(j, r);
        merged.norm_sq = norm2_sq(merged.a);

        std::vector<double> retained_gamma;
        retained_gamma.reserve(tasks);
        for (std::size_t i = 0; i < tasks; ++i) {
            const SubspaceResponse resp =
                subspace_response(u_col, deltas[i], r + 1, static_cast<int>(i));
            stats.response_norm_sq[i] = resp.norm_sq;
            if (std::sqrt(resp.norm_sq) <= resp_floor[i]) continue;
            stats.retained[i] = true;
            const double s = projection_coefficient(merged, resp, 0.0);
            stats.s[i] = s;
            stats.gamma_opt[i] = optimal_scaling(s);
            stats.interference[i] = interference_energy(s, resp.norm_sq);
            retained_gamma.push_back(stats.gamma_opt[i]);
        }
        if (retained_gamma.empty()) {
            stats.sigma_star = stats.sigma;
        } else {
            const double mean_gamma =
                ordered_sum(retained_gamma) / static_cast<double>(retained_gamma.size());
            stats.sigma_star = mean_gamma * stats.sigma;
        }
        stats.gap = stats.sigma - stats.sigma_star;
        report.subspaces.push_back(std::move(stats));
    }
    return report;
}

}  // namespace svc
