#pragma once

#include "hsprobe/matrix.hpp"

#include <vector>

namespace hsprobe::linalg {

struct SymmetricEigen {
    std::vector<double> values;  // descending
    Matrix<double> vectors;      // row i is the unit eigenvector for values[i]
};

// Full eigendecomposition of a symmetric matrix: Householder reduction to
// tridiagonal form followed by implicit QL iterations. Only the lower
// triangle of `a` is read.
SymmetricEigen symmetric_eigen(const Matrix<double>& a);

}  // namespace hsprobe::linalg
