#include "para/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace para {

namespace {

double column_norm(const Matrix& m, int j, int from_row) {
    double s = 0.0;
    for (int i = from_row; i < m.rows(); ++i) s += m(i, j) * m(i, j);
    return std::sqrt(s);
}

// Apply the Householder reflector I - 2 v v^T (v normalized, acting on rows
// [from, rows)) to columns [col_from, col_to) of m.
void apply_reflector(Matrix& m, const std::vector<double>& v, int from, int col_from, int col_to) {
    for (int j = col_from; j < col_to; ++j) {
        double dot = 0.0;
        for (int i = from; i < m.rows(); ++i) dot += v[i - from] * m(i, j);
        dot *= 2.0;
        for (int i = from; i < m.rows(); ++i) m(i, j) -= dot * v[i - from];
    }
}

// Householder vector for x = m[from:, col]; returns false when x is zero.
// After the reflector, the column becomes (alpha, 0, ..., 0).
bool make_reflector(const Matrix& m, int from, int col, std::vector<double>& v, double& alpha) {
    const int len = m.rows() - from;
    v.assign(len, 0.0);
    double norm = column_norm(m, col, from);
    if (norm == 0.0) return false;
    alpha = m(from, col) >= 0.0 ? -norm : norm;
    for (int i = 0; i < len; ++i) v[i] = m(from + i, col);
    v[0] -= alpha;
    double vnorm = 0.0;
    for (double x : v) vnorm += x * x;
    vnorm = std::sqrt(vnorm);
    if (vnorm == 0.0) return false;
    for (double& x : v) x /= vnorm;
    return true;
}

} // namespace

QrResult qr_thin(const Matrix& b) {
    const int d = b.rows();
    const int r = b.cols();
    if (r < 1 || d < r) {
        throw ShapeError("qr_thin: need rows >= cols >= 1, got " + std::to_string(d) + "x" +
                         std::to_string(r));
    }

    // Full-column-rank precondition, judged by column-pivot norms.
    const double fro = b.frobenius_norm();
    const double rank_tol = 1e-12 * fro;
    RankRevealingQr rr = rank_revealing_qr(b, rank_tol);
    if (rr.q.cols() < r) {
        throw DegenerateColumns("qr_thin: smallest column-pivot norm <= 1e-12*||b||_F (collapsed or zero columns)");
    }

    Matrix rfac = b;
    std::vector<std::vector<double>> reflectors(r);
    std::vector<double> v;
    for (int j = 0; j < r; ++j) {
        double alpha = 0.0;
        if (!make_reflector(rfac, j, j, v, alpha)) {
            throw DegenerateColumns("qr_thin: zero pivot at column " + std::to_string(j));
        }
        apply_reflector(rfac, v, j, j, r);
        rfac(j, j) = alpha;
        reflectors[j] = v;
    }

    // Thin Q = H_0 ... H_{r-1} applied to the first r columns of I.
    Matrix q(d, r);
    for (int j = 0; j < r; ++j) q(j, j) = 1.0;
    for (int j = r - 1; j >= 0; --j) apply_reflector(q, reflectors[j], j, 0, r);

    // Fix signs so diag(R) >= 0, and zero out the strict lower triangle.
    QrResult out;
    out.r_factor = Matrix(r, r);
    for (int i = 0; i < r; ++i)
        for (int j = i; j < r; ++j) out.r_factor(i, j) = rfac(i, j);
    for (int j = 0; j < r; ++j) {
        if (out.r_factor(j, j) < 0.0) {
            for (int k = j; k < r; ++k) out.r_factor(j, k) = -out.r_factor(j, k);
            for (int i = 0; i < d; ++i) q(i, j) = -q(i, j);
        }
    }
    out.q = std::move(q);
    return out;
}

RankRevealingQr rank_revealing_qr(const Matrix& m, double pivot_tol) {
    const int d = m.rows();
    const int n = m.cols();
    const int steps = std::min(d, n);

    Matrix work = m;
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);

    RankRevealingQr out;
    std::vector<std::vector<double>> reflectors;
    std::vector<double> v;
    int kept = 0;
    for (int j = 0; j < steps; ++j) {
        // Recompute trailing column norms; cheap at these sizes and immune
        // to the classic norm-downdating cancellation.
        int best = j;
        double best_norm = -1.0;
        for (int c = j; c < n; ++c) {
            const double nrm = column_norm(work, c, j);
            if (nrm > best_norm) {
                best_norm = nrm;
                best = c;
            }
        }
        out.pivot_norms.push_back(best_norm);
        if (best_norm <= pivot_tol) break;
        if (best != j) {
            for (int i = 0; i < d; ++i) std::swap(work(i, j), work(i, best));
            std::swap(perm[j], perm[best]);
        }
        double alpha = 0.0;
        if (!make_reflector(work, j, j, v, alpha)) break;
        apply_reflector(work, v, j, j, n);
        work(j, j) = alpha;
        reflectors.push_back(v);
        ++kept;
    }

    Matrix q(d, kept);
    for (int j = 0; j < kept; ++j) q(j, j) = 1.0;
    for (int j = kept - 1; j >= 0; --j) apply_reflector(q, reflectors[j], j, 0, kept);
    out.q = std::move(q);
    return out;
}

SvdResult svd_jacobi(const Matrix& m) {
    const int k = m.cols();
    Matrix w = m;
    Matrix v = Matrix::identity(k);

    const double conv_tol = 1e-14;
    const int max_sweeps = 64;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (int p = 0; p < k - 1; ++p) {
            for (int q = p + 1; q < k; ++q) {
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (int i = 0; i < w.rows(); ++i) {
                    app += w(i, p) * w(i, p);
                    aqq += w(i, q) * w(i, q);
                    apq += w(i, p) * w(i, q);
                }
                if (app == 0.0 || aqq == 0.0) continue;
                if (std::abs(apq) <= conv_tol * std::sqrt(app * aqq)) continue;
                rotated = true;
                const double zeta = (aqq - app) / (2.0 * apq);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double cs = 1.0 / std::sqrt(1.0 + t * t);
                const double sn = cs * t;
                for (int i = 0; i < w.rows(); ++i) {
                    const double wp = w(i, p), wq = w(i, q);
                    w(i, p) = cs * wp - sn * wq;
                    w(i, q) = sn * wp + cs * wq;
                }
                for (int i = 0; i < k; ++i) {
                    const double vp = v(i, p), vq = v(i, q);
                    v(i, p) = cs * vp - sn * vq;
                    v(i, q) = sn * vp + cs * vq;
                }
            }
        }
        if (!rotated) break;
    }

    SvdResult out;
    out.sigma.resize(k);
    for (int j = 0; j < k; ++j) out.sigma[j] = column_norm(w, j, 0);

    // Sort singular values descending, permuting U and V along.
    std::vector<int> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return out.sigma[a] > out.sigma[b]; });

    Matrix u(m.rows(), k);
    Matrix vs(k, k);
    std::vector<double> sig(k);
    for (int jj = 0; jj < k; ++jj) {
        const int src = order[jj];
        sig[jj] = out.sigma[src];
        if (sig[jj] > 0.0) {
            for (int i = 0; i < m.rows(); ++i) u(i, jj) = w(i, src) / sig[jj];
        }
        for (int i = 0; i < k; ++i) vs(i, jj) = v(i, src);
    }
    out.sigma = std::move(sig);
    out.u = std::move(u);
    out.v = std::move(vs);
    return out;
}

std::vector<double> singular_values(const Matrix& m) {
    // Same spectrum either way; fewer Jacobi column pairs on the tall side.
    return m.cols() > m.rows() ? svd_jacobi(m.transpose()).sigma : svd_jacobi(m).sigma;
}

double default_rank_tolerance(const Matrix& m, double sigma_max) {
    return 1e-9 * std::max(m.rows(), m.cols()) * sigma_max;
}

int numerical_rank(const Matrix& m, double tol) {
    if (tol < 0.0) throw Error("numerical_rank: tol must be >= 0");
    const std::vector<double> s = singular_values(m);
    int r = 0;
    for (double x : s)
        if (x > tol) ++r;
    return r;
}

int numerical_rank(const Matrix& m) {
    const std::vector<double> s = singular_values(m);
    const double smax = s.empty() ? 0.0 : s.front();
    const double tol = default_rank_tolerance(m, smax);
    int r = 0;
    for (double x : s)
        if (x > tol) ++r;
    return r;
}

Matrix null_space(const Matrix& m) {
    const SvdResult s = svd_jacobi(m);
    const double smax = s.sigma.empty() ? 0.0 : s.sigma.front();
    const double tol = default_rank_tolerance(m, smax);
    int nullity = 0;
    for (double x : s.sigma)
        if (x <= tol) ++nullity;
    Matrix basis(m.cols(), nullity);
    int jj = 0;
    for (int j = 0; j < static_cast<int>(s.sigma.size()); ++j) {
        if (s.sigma[j] <= tol) {
            for (int i = 0; i < m.cols(); ++i) basis(i, jj) = s.v(i, j);
            ++jj;
        }
    }
    return basis;
}

double orthonormality_defect(const Matrix& q) {
    if (q.cols() == 0) return 0.0;
    double defect = 0.0;
    for (int a = 0; a < q.cols(); ++a) {
        for (int b = a; b < q.cols(); ++b) {
            double dot = 0.0;
            for (int i = 0; i < q.rows(); ++i) dot += q(i, a) * q(i, b);
            const double target = a == b ? 1.0 : 0.0;
            defect = std::max(defect, std::abs(dot - target));
        }
    }
    return defect;
}

Matrix projector(const Matrix& q) {
    if (orthonormality_defect(q) > 1e-8) {
        throw NotOrthonormal("projector: columns are not orthonormal to 1e-8");
    }
    Matrix p(q.rows(), q.rows());
    for (int a = 0; a < q.cols(); ++a) {
        for (int i = 0; i < q.rows(); ++i) {
            const double qi = q(i, a);
            if (qi == 0.0) continue;
            for (int j = 0; j < q.rows(); ++j) p(i, j) += qi * q(j, a);
        }
    }
    return p;
}

} // namespace para
