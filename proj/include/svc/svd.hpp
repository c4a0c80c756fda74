#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "svc/matrix.hpp"

namespace svc {

struct SvdOptions {
    int max_sweeps = 100;
};

// Thin SVD of an m x n matrix: u is m x R and v is n x R with orthonormal
// columns, R = min(m, n), singular values sorted descending. The output is
// deterministic for identical input: fixed sweep order and a sign convention
// that makes the largest-magnitude entry of each left vector non-negative.
struct SpectralDecomposition {
    Matrix u;
    std::vector<double> sigma;
    Matrix v;

    std::size_t rank() const noexcept { return sigma.size(); }
};

SpectralDecomposition svd(const Matrix& a, const SvdOptions& options = {});

// Sum over r of sigma_override[r] * u_r * v_r^T.
Matrix reconstruct(const SpectralDecomposition& d, std::span<const double> sigma_override);

}  // namespace svc
