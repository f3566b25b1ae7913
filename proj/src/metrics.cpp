#include "para/metrics.hpp"

#include <cmath>
#include <limits>

#include "para/adapter.hpp"
#include "para/errors.hpp"
#include "para/linalg.hpp"
#include "para/rng.hpp"

namespace para {
namespace {

void check_grid(const ImageGrid& g) {
    if (g.height < 1 || g.width < 1) throw ShapeError("ssim: grid dimensions must be positive");
    if (std::int64_t(g.height) * g.width != std::int64_t(g.pixels.size())) {
        throw ShapeError("ssim: pixel count does not match height*width");
    }
    if (!(g.dynamic_range > 0.0)) throw InvariantViolation("ssim: dynamic range must be positive");
    for (double v : g.pixels) {
        if (!std::isfinite(v) || v < 0.0 || v > g.dynamic_range) {
            throw InvariantViolation("ssim: pixel outside [0, dynamic_range]");
        }
    }
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / double(v.size());
}

// Perturbations along the kernel of the reduced weight must not move the
// output (the exact-annihilation case of the stability argument).
void check_kernel_invariance(const Matrix& w_reduced, const Matrix& x, double noise_scale) {
    const Matrix basis = null_space(w_reduced);
    if (basis.cols() == 0) return;
    const Matrix y0 = w_reduced * x;
    for (int j = 0; j < basis.cols(); ++j) {
        const Matrix xj = x + noise_scale * basis.col(j);
        if (frobenius_distance(w_reduced * xj, y0) > 1e-9) {
            throw InvariantViolation("stability_probe: kernel perturbation moved the output");
        }
    }
}

} // namespace

double ssim(const ImageGrid& a, const ImageGrid& b) {
    check_grid(a);
    check_grid(b);
    if (a.height != b.height || a.width != b.width) {
        throw ShapeError("ssim: grid dimensions differ");
    }
    if (a.dynamic_range != b.dynamic_range) {
        throw ShapeError("ssim: grids disagree on dynamic range");
    }
    const double l = a.dynamic_range;
    const double c1 = (0.01 * l) * (0.01 * l);
    const double c2 = (0.03 * l) * (0.03 * l);

    const double ma = mean_of(a.pixels);
    const double mb = mean_of(b.pixels);
    double va = 0.0, vb = 0.0, cov = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        const double da = a.pixels[i] - ma;
        const double db = b.pixels[i] - mb;
        va += da * da;
        vb += db * db;
        cov += da * db;
    }
    const double n = double(a.pixels.size());
    va /= n;
    vb /= n;
    cov /= n;

    return ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) /
           ((ma * ma + mb * mb + c1) * (va + vb + c2));
}

DiversityReport pairwise_ssim(const std::vector<ImageGrid>& samples) {
    if (samples.size() < 2) throw ShapeError("pairwise_ssim: need at least two samples");
    std::vector<double> values;
    values.reserve(samples.size() * (samples.size() - 1) / 2);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        for (std::size_t j = i + 1; j < samples.size(); ++j) {
            values.push_back(ssim(samples[i], samples[j]));
        }
    }
    const double mean = mean_of(values);
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    var /= double(values.size());

    DiversityReport report;
    report.n_samples = int(samples.size());
    report.mean_pairwise_ssim = mean;
    report.std_pairwise_ssim = std::sqrt(var);
    return report;
}

int nullity_gain(const Matrix& w0, const Matrix& w_reduced) {
    if (!w0.same_shape(w_reduced)) throw ShapeError("nullity_gain: shapes differ");
    if (w0.empty()) throw ShapeError("nullity_gain: empty matrices");
    const std::vector<double> sigma = singular_values(w0);
    const double tol = default_rank_tolerance(w0, sigma.front());
    int rank0 = 0;
    for (double s : sigma) {
        if (s > tol) ++rank0;
    }
    return rank0 - numerical_rank(w_reduced, tol);
}

std::vector<ImageGrid> render_outputs(const std::vector<Matrix>& outputs) {
    if (outputs.empty()) throw ShapeError("render_outputs: no outputs");
    const int dim = outputs.front().rows();
    for (const Matrix& m : outputs) {
        if (m.cols() != 1 || m.rows() != dim || dim < 1) {
            throw NonConforming("render_outputs: outputs must be equal-length column vectors");
        }
        if (!m.all_finite()) throw NonConforming("render_outputs: non-finite output");
    }

    const int h = int(std::floor(std::sqrt(double(dim))));
    const int w = dim / h;
    const int kept = h * w; // dim entries beyond h*w are dropped, not rendered

    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (const Matrix& m : outputs) {
        for (int i = 0; i < kept; ++i) {
            lo = std::min(lo, m(i, 0));
            hi = std::max(hi, m(i, 0));
        }
    }
    std::vector<ImageGrid> grids;
    grids.reserve(outputs.size());
    for (const Matrix& m : outputs) {
        ImageGrid g;
        g.height = h;
        g.width = w;
        g.pixels.resize(std::size_t(h) * w);
        for (std::size_t i = 0; i < g.pixels.size(); ++i) {
            g.pixels[i] = hi > lo ? (m(int(i), 0) - lo) / (hi - lo) : 0.5;
        }
        grids.push_back(std::move(g));
    }
    return grids;
}

DiversityReport stability_probe(const ToyModel& model, const AdapterBundle& bundle,
                                const Matrix& base_input, int n_perturbations,
                                double noise_scale, std::uint64_t seed) {
    validate(model);
    if (bundle.kind != BundleKind::para) {
        throw NonConforming("stability_probe: expected a para bundle");
    }
    if (n_perturbations < 2) throw Error("stability_probe: need at least two perturbations");
    if (!(noise_scale > 0.0)) throw Error("stability_probe: noise_scale must be positive");
    const int k = model.layers.front().w0.cols();
    if (base_input.cols() != 1 || base_input.rows() != k || !base_input.all_finite()) {
        throw NonConforming("stability_probe: base_input must be a finite k x 1 vector");
    }

    const ToyModel applied = apply_para_bundle(model, bundle);

    Rng rng(seed);
    std::vector<Matrix> outputs;
    outputs.reserve(std::size_t(n_perturbations));
    for (int i = 0; i < n_perturbations; ++i) {
        const Matrix x = base_input + noise_scale * rng.gaussian_matrix(k, 1);
        outputs.push_back(forward(applied, x));
    }

    DiversityReport report = pairwise_ssim(render_outputs(outputs));
    int gain = 0;
    for (std::size_t li = 0; li < model.layers.size(); ++li) {
        gain += nullity_gain(model.layers[li].w0, applied.layers[li].w0);
    }
    report.nullity_gain = gain;

    if (model.layers.size() == 1 && model.activation == Activation::linear) {
        check_kernel_invariance(applied.layers.front().w0, base_input, noise_scale);
    }
    return report;
}

} // namespace para
