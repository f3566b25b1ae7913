#pragma once

#include <vector>

#include "para/matrix.hpp"

namespace para {

// Thin QR factors of a full-column-rank input: q has orthonormal columns,
// r_factor is upper triangular with non-negative diagonal, q * r_factor
// reconstructs the input. The sign convention makes the factorization
// unique, so results are deterministic.
struct QrResult {
    Matrix q;
    Matrix r_factor;
};

// Householder thin QR of b (rows >= cols >= 1). Throws DegenerateColumns if
// the smallest column-pivot norm is <= 1e-12 * ||b||_F, ShapeError if
// rows < cols.
QrResult qr_thin(const Matrix& b);

// Column-pivoted QR truncated at pivot_tol: returns the orthonormal columns
// whose pivot norm exceeded pivot_tol, plus the pivot norm seen at each
// elimination step (including the one that stopped it, when any remained).
struct RankRevealingQr {
    Matrix q;
    std::vector<double> pivot_norms;
};
RankRevealingQr rank_revealing_qr(const Matrix& m, double pivot_tol);

struct SvdResult {
    Matrix u;                  // rows x cols, columns for sigma > 0 orthonormal
    std::vector<double> sigma; // length cols, descending
    Matrix v;                  // cols x cols, orthogonal
};

// One-sided Jacobi SVD. Accuracy over speed; fine for the small dense
// matrices this library works with.
SvdResult svd_jacobi(const Matrix& m);

std::vector<double> singular_values(const Matrix& m);

// 1e-9 * max(rows, cols) * sigma_max
double default_rank_tolerance(const Matrix& m, double sigma_max);

// Number of singular values strictly greater than tol.
int numerical_rank(const Matrix& m, double tol);
int numerical_rank(const Matrix& m); // default tolerance

// Orthonormal basis of the kernel of m (columns), using the default rank
// tolerance. Result has m.cols() rows and nullity columns.
Matrix null_space(const Matrix& m);

// Q Q^T for a matrix with orthonormal columns (checked to 1e-8, else
// NotOrthonormal). An empty q yields the zero projector.
Matrix projector(const Matrix& q);

// max |Q^T Q - I|; 0 for an empty q.
double orthonormality_defect(const Matrix& q);

} // namespace para
