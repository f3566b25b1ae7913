#include "para/verify.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

#include "para/adapter.hpp"
#include "para/combine.hpp"
#include "para/errors.hpp"
#include "para/linalg.hpp"
#include "para/matrix.hpp"
#include "para/metrics.hpp"
#include "para/rng.hpp"

namespace para {
namespace {

Matrix random_orthonormal(Rng& rng, int d, int r) {
    if (r == 0) return Matrix(d, 0);
    return qr_thin(rng.gaussian_matrix(d, r)).q;
}

// d x k with exact rank d0 and singular values in [0.5, 2].
Matrix random_rank_matrix(Rng& rng, int d, int k, int d0) {
    const Matrix u = random_orthonormal(rng, d, d0);
    const Matrix v = random_orthonormal(rng, k, d0);
    Matrix w(d, k);
    for (int t = 0; t < d0; ++t) {
        const double s = rng.uniform(0.5, 2.0);
        for (int i = 0; i < d; ++i) {
            for (int j = 0; j < k; ++j) w(i, j) += s * u(i, t) * v(j, t);
        }
    }
    return w;
}

Matrix in_space_q(Rng& rng, const Matrix& w0, int r) {
    if (r == 0) return Matrix(w0.rows(), 0);
    return qr_thin(w0 * rng.gaussian_matrix(w0.cols(), r)).q;
}

// Columns [from, to) of m.
Matrix cols_range(const Matrix& m, int from, int to) {
    Matrix out(m.rows(), to - from);
    for (int j = from; j < to; ++j) {
        for (int i = 0; i < m.rows(); ++i) out(i, j - from) = m(i, j);
    }
    return out;
}

SuiteResult rank_theorem_suite(int trials, std::uint64_t seed) {
    SuiteResult suite{"rank_theorem", trials, 0, 0.0, 0.0};
    Rng rng(seed);
    for (int t = 0; t < trials; ++t) {
        const int d = rng.uniform_int(3, 64);
        const int k = rng.uniform_int(2, 48);
        const int d0 = rng.uniform_int(1, std::min(d, k));
        const int r = rng.uniform_int(1, std::min(8, d0));
        const Matrix w0 = random_rank_matrix(rng, d, k, d0);
        const Matrix q = in_space_q(rng, w0, r);
        const Matrix reduced = reduce_weight(w0, q);
        const double tol = default_rank_tolerance(w0, singular_values(w0).front());
        const int gap = std::abs(numerical_rank(reduced, tol) - (d0 - r));
        suite.max_error = std::max(suite.max_error, double(gap));
        if (gap != 0) ++suite.failures;
    }
    return suite;
}

SuiteResult equivalence_suite(int trials, std::uint64_t seed) {
    SuiteResult suite{"merge_equivalence", trials, 0, 0.0, 1e-9};
    Rng rng(seed);
    for (int t = 0; t < trials; ++t) {
        const int d = rng.uniform_int(4, 64);
        const int k = d + rng.uniform_int(0, 8);
        const Matrix w0 = rng.gaussian_matrix(d, k);
        // factors built over one orthonormal basis so span(q2) splits into a
        // part inside span(q1) plus an orthogonal part (the regime where the
        // sequential and merged paths provably agree)
        const int r1 = rng.uniform_int(1, std::min(8, d / 2));
        const int r2 = rng.uniform_int(1, std::min(8, d / 2));
        const int overlap = rng.uniform_int(0, std::min(r1, r2));
        const Matrix basis = random_orthonormal(rng, d, r1 + r2 - overlap);
        const Matrix q1 = cols_range(basis, 0, r1) * random_orthonormal(rng, r1, r1);
        const Matrix q2 =
            cols_range(basis, r1 - overlap, r1 - overlap + r2) * random_orthonormal(rng, r2, r2);
        const double gap = merge_equivalence_gap(w0, q1, q2);
        suite.max_error = std::max(suite.max_error, gap);
        if (gap > suite.tolerance) ++suite.failures;
    }
    return suite;
}

SuiteResult idempotence_suite(int trials, std::uint64_t seed) {
    SuiteResult suite{"idempotence", trials, 0, 0.0, 1e-12};
    Rng rng(seed);
    for (int t = 0; t < trials; ++t) {
        const int d = rng.uniform_int(3, 64);
        const int k = rng.uniform_int(2, 48);
        const Matrix w0 = rng.gaussian_matrix(d, k);
        const Matrix q = in_space_q(rng, w0, rng.uniform_int(1, std::min(8, std::min(d, k))));
        const Matrix once = reduce_weight(w0, q);
        const double diff = max_abs_diff(reduce_weight(once, q), once);
        suite.max_error = std::max(suite.max_error, diff);
        if (diff > suite.tolerance) ++suite.failures;
    }
    return suite;
}

SuiteResult nullity_suite(int trials, std::uint64_t seed) {
    SuiteResult suite{"nullity", trials, 0, 0.0, 1e-9};
    Rng rng(seed);
    for (int t = 0; t < trials; ++t) {
        const int d = rng.uniform_int(3, 48);
        const int k = rng.uniform_int(2, 32);
        const int d0 = rng.uniform_int(1, std::min(d, k));
        const int r = rng.uniform_int(1, std::min(8, d0));
        const Matrix w0 = random_rank_matrix(rng, d, k, d0);
        const Matrix q = in_space_q(rng, w0, r);
        const Matrix reduced = reduce_weight(w0, q);
        bool bad = nullity_gain(w0, reduced) != r;

        // perturbing the input along kernel(W_reduced) must not move Wx
        const Matrix basis = null_space(reduced);
        if (basis.cols() > 0) {
            const Matrix x = rng.gaussian_matrix(k, 1);
            const Matrix y0 = reduced * x;
            const int j = rng.uniform_int(0, basis.cols() - 1);
            const double moved = frobenius_distance(reduced * (x + basis.col(j)), y0);
            suite.max_error = std::max(suite.max_error, moved);
            bad = bad || moved > suite.tolerance;
        }
        if (bad) ++suite.failures;
    }
    return suite;
}

SuiteResult annihilation_suite(int trials, std::uint64_t seed) {
    SuiteResult suite{"lora_annihilation", trials, 0, 0.0, 1e-12};
    Rng rng(seed);
    const double alphas[] = {0.0, 1.0, 5.0};
    for (int t = 0; t < trials; ++t) {
        const int d = rng.uniform_int(3, 16);
        const int k = rng.uniform_int(2, 16);
        const int rl = rng.uniform_int(1, std::min(3, std::min(d, k)));
        const Matrix w0 = rng.gaussian_matrix(d, k);
        LoraAdapter lora{"layer", rng.gaussian_matrix(d, rl), rng.gaussian_matrix(rl, k), 1.0};
        const Matrix q = qr_thin(lora.b_up).q; // spans col(B_up)

        Matrix wiped[3], kept[3];
        for (int a = 0; a < 3; ++a) {
            lora.alpha = alphas[a];
            wiped[a] = combine_lora_then_para(w0, q, lora).w;
            kept[a] = combine_para_then_lora(w0, q, lora).w;
        }
        bool bad = false;
        for (int a = 0; a < 3; ++a) {
            for (int b = a + 1; b < 3; ++b) {
                const double same = max_abs_diff(wiped[a], wiped[b]);
                suite.max_error = std::max(suite.max_error, same);
                bad = bad || same > suite.tolerance;
                // with the additive term applied after reduction, alphas
                // must stay distinguishable
                bad = bad || frobenius_distance(kept[a], kept[b]) <= 1e-3;
            }
        }
        if (bad) ++suite.failures;
    }
    return suite;
}

} // namespace

bool VerifySummary::all_passed() const {
    return std::all_of(suites.begin(), suites.end(),
                       [](const SuiteResult& s) { return s.passed(); });
}

VerifySummary run_verify(int trials, std::uint64_t seed) {
    if (trials < 1) throw Error("run_verify: trials must be positive");
    VerifySummary summary;
    summary.trials = trials;
    summary.seed = seed;
    // fixed per-suite offsets so suites draw independent streams
    summary.suites.push_back(rank_theorem_suite(trials, seed * 5 + 1));
    summary.suites.push_back(equivalence_suite(trials, seed * 5 + 2));
    summary.suites.push_back(idempotence_suite(trials, seed * 5 + 3));
    summary.suites.push_back(nullity_suite(trials, seed * 5 + 4));
    summary.suites.push_back(annihilation_suite(trials, seed * 5 + 5));
    return summary;
}

std::string to_json(const VerifySummary& summary) {
    nlohmann::json doc;
    doc["trials"] = summary.trials;
    doc["seed"] = summary.seed;
    doc["all_passed"] = summary.all_passed();
    nlohmann::json suites = nlohmann::json::array();
    for (const SuiteResult& s : summary.suites) {
        nlohmann::json js;
        js["name"] = s.name;
        js["trials"] = s.trials;
        js["failures"] = s.failures;
        js["max_error"] = s.max_error;
        js["tolerance"] = s.tolerance;
        js["passed"] = s.passed();
        suites.push_back(js);
    }
    doc["suites"] = suites;
    return doc.dump();
}

} // namespace para
