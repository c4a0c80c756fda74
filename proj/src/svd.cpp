#include "svc/svd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "svc/errors.hpp"

namespace svc {

namespace {

// Relative threshold below which a column pair counts as orthogonal.
constexpr double kOrthTol = 1e-15;

// Column-major workspace so Jacobi rotations touch contiguous memory.
struct ColumnMajor {
    std::size_t m;
    std::size_t n;
    std::vector<double> a;

    ColumnMajor(std::size_t m_, std::size_t n_) : m(m_), n(n_), a(m_ * n_, 0.0) {}

    double* col(std::size_t j) noexcept { return a.data() + j * m; }
    const double* col(std::size_t j) const noexcept { return a.data() + j * m; }
};

double column_dot(const ColumnMajor& w, std::size_t p, std::size_t q) {
    const double* cp = w.col(p);
    const double* cq = w.col(q);
    double acc = 0.0;
    for (std::size_t i = 0; i < w.m; ++i) acc += cp[i] * cq[i];
    return acc;
}

void rotate_columns(ColumnMajor& w, std::size_t p, std::size_t q, double c, double s) {
    double* cp = w.col(p);
    double* cq = w.col(q);
    for (std::size_t i = 0; i < w.m; ++i) {
        const double xp = cp[i];
        const double xq = cq[i];
        cp[i] = c * xp - s * xq;
        cq[i] = s * xp + c * xq;
    }
}

// Orthogonalizes `vec` (length m) against the filled columns of u.
void orthogonalize(const ColumnMajor& u, const std::vector<char>& filled, std::vector<double>& vec) {
    for (std::size_t j = 0; j < u.n; ++j) {
        if (!filled[j]) continue;
        const double* cj = u.col(j);
        double proj = 0.0;
        for (std::size_t i = 0; i < u.m; ++i) proj += cj[i] * vec[i];
        for (std::size_t i = 0; i < u.m; ++i) vec[i] -= proj * cj[i];
    }
}

// Deterministic fill for left-vector columns whose singular value is exactly
// zero: pick the standard basis vector with the largest residual after
// projecting out the filled columns, then orthonormalize it.
void complete_null_column(ColumnMajor& u, std::vector<char>& filled, std::size_t target) {
    const std::size_t m = u.m;
    std::size_t best_axis = 0;
    double best_residual = -1.0;
    std::vector<double> candidate(m, 0.0);
    for (std::size_t axis = 0; axis < m; ++axis) {
        std::fill(candidate.begin(), candidate.end(), 0.0);
        candidate[axis] = 1.0;
        orthogonalize(u, filled, candidate);
        const double residual = norm2_sq(candidate);
        if (residual > best_residual) {
            best_residual = residual;
            best_axis = axis;
        }
    }
    std::fill(candidate.begin(), candidate.end(), 0.0);
    candidate[best_axis] = 1.0;
    orthogonalize(u, filled, candidate);
    orthogonalize(u, filled, candidate);
    const double nrm = norm2(candidate);
    double* dst = u.col(target);
    for (std::size_t i = 0; i < m; ++i) dst[i] = candidate[i] / nrm;
    filled[target] = 1;
}

}  // namespace

SpectralDecomposition svd(const Matrix& a, const SvdOptions& options) {
    if (!a.is_finite()) {
        throw NonFiniteInput("svd: input matrix contains non-finite values");
    }

    // Work on the taller orientation; swap u and v back at the end.
    const bool swapped = a.rows() < a.cols();
    const std::size_t m = swapped ? a.cols() : a.rows();
    const std::size_t n = swapped ? a.rows() : a.cols();

    // Power-of-two prescaling: keeps column products away from overflow and
    // cancels exactly when the singular values are scaled back.
    double max_abs = 0.0;
    for (double v : a.values()) max_abs = std::max(max_abs, std::abs(v));
    int scale_exp = 0;
    if (max_abs > 0.0) std::frexp(max_abs, &scale_exp);

    ColumnMajor w(m, n);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            const double v = std::ldexp(a(i, j), -scale_exp);
            if (swapped) {
                w.col(i)[j] = v;
            } else {
                w.col(j)[i] = v;
            }
        }
    }

    ColumnMajor v(n, n);
    for (std::size_t j = 0; j < n; ++j) v.col(j)[j] = 1.0;

    // One-sided Jacobi: rotate column pairs until all are pairwise orthogonal
    // relative to their norms.
    bool converged = (n <= 1);
    for (int sweep = 0; sweep < options.max_sweeps && !converged; ++sweep) {
        // Columns of exactly rank-deficient input decay toward zero across
        // sweeps; once their squared norm falls out of the normal range the
        // rotation angle against large columns underflows to an exact no-op
        // and the sweep would never settle. Flush such debris to zero; those
        // columns take the deterministic null-column path instead.
        for (std::size_t j = 0; j < n; ++j) {
            const double nsq = column_dot(w, j, j);
            if (nsq > 0.0 && nsq < std::numeric_limits<double>::min()) {
                double* cj = w.col(j);
                for (std::size_t i = 0; i < m; ++i) cj[i] = 0.0;
            }
        }
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double app = column_dot(w, p, p);
                const double aqq = column_dot(w, q, q);
                if (app == 0.0 || aqq == 0.0) continue;
                const double apq = column_dot(w, p, q);
                // Norm-based comparison: squaring both sides would underflow
                // for near-null columns and pass pairs that are not orthogonal.
                if (std::abs(apq) <= kOrthTol * std::sqrt(app) * std::sqrt(aqq)) continue;
                const double zeta = (aqq - app) / (2.0 * apq);
                const double abs_zeta = std::abs(zeta);
                const double sign = zeta >= 0.0 ? 1.0 : -1.0;
                // |zeta| + sqrt(1 + zeta^2), written so zeta^2 cannot overflow.
                const double t =
                    abs_zeta > 1.0
                        ? sign / (abs_zeta *
                                  (1.0 + std::sqrt(1.0 + (1.0 / abs_zeta) * (1.0 / abs_zeta))))
                        : sign / (abs_zeta + std::sqrt(1.0 + zeta * zeta));
                if (t == 0.0) continue;  // exact identity rotation
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                rotate_columns(w, p, q, c, s);
                rotate_columns(v, p, q, c, s);
                rotated = true;
            }
        }
        converged = !rotated;
    }
    if (!converged) {
        throw ConvergenceFailure("svd: Jacobi iteration did not converge within " +
                                 std::to_string(options.max_sweeps) + " sweeps");
    }

    std::vector<double> col_norm(n);
    for (std::size_t j = 0; j < n; ++j) col_norm[j] = std::sqrt(column_dot(w, j, j));

    // Sort descending; ties keep the pre-sort column order.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return col_norm[x] > col_norm[y]; });

    ColumnMajor u_cols(m, n);
    std::vector<char> filled(n, 0);
    std::vector<double> sigma(n, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t j = order[r];
        sigma[r] = std::ldexp(col_norm[j], scale_exp);
        if (col_norm[j] > 0.0) {
            const double* src = w.col(j);
            double* dst = u_cols.col(r);
            for (std::size_t i = 0; i < m; ++i) dst[i] = src[i] / col_norm[j];
            filled[r] = 1;
        }
    }
    for (std::size_t r = 0; r < n; ++r) {
        if (!filled[r]) complete_null_column(u_cols, filled, r);
    }

    Matrix u_tall(m, n);
    Matrix v_right(n, n);
    for (std::size_t r = 0; r < n; ++r) {
        const double* uc = u_cols.col(r);
        for (std::size_t i = 0; i < m; ++i) u_tall(i, r) = uc[i];
        const double* vc = v.col(order[r]);
        for (std::size_t i = 0; i < n; ++i) v_right(i, r) = vc[i];
    }

    SpectralDecomposition out{swapped ? std::move(v_right) : std::move(u_tall), std::move(sigma),
                              swapped ? std::move(u_tall) : std::move(v_right)};

    // Sign convention: the largest-magnitude entry of each left vector is made
    // non-negative, flipping the paired right vector with it.
    for (std::size_t r = 0; r < out.rank(); ++r) {
        std::size_t pivot = 0;
        double best = -1.0;
        for (std::size_t i = 0; i < out.u.rows(); ++i) {
            const double mag = std::abs(out.u(i, r));
            if (mag > best) {
                best = mag;
                pivot = i;
            }
        }
        if (out.u(pivot, r) < 0.0) {
            for (std::size_t i = 0; i < out.u.rows(); ++i) out.u(i, r) = -out.u(i, r);
            for (std::size_t i = 0; i < out.v.rows(); ++i) out.v(i, r) = -out.v(i, r);
        }
    }
    return out;
}

Matrix reconstruct(const SpectralDecomposition& d, std::span<const double> sigma_override) {
    if (sigma_override.size() != d.rank()) {
        throw LengthMismatch("reconstruct: override has " + std::to_string(sigma_override.size()) +
                             " values, rank is " + std::to_string(d.rank()));
    }
    const std::size_t m = d.u.rows();
    const std::size_t n = d.v.rows();
    Matrix out(m, n);
    for (std::size_t r = 0; r < d.rank(); ++r) {
        const double s = sigma_override[r];
        if (s == 0.0) continue;
        for (std::size_t i = 0; i < m; ++i) {
            const double us = d.u(i, r) * s;
            double* row = out.row(i).data();
            for (std::size_t j = 0; j < n; ++j) row[j] += us * d.v(j, r);
        }
    }
    return out;
}

}  // namespace svc
