#pragma once

#include <cstdint>
#include <vector>

#include "para/bundle.hpp"
#include "para/matrix.hpp"
#include "para/model.hpp"

namespace para {

// Small grayscale image: row-major pixels inside [0, dynamic_range].
struct ImageGrid {
    int height = 0;
    int width = 0;
    std::vector<double> pixels;
    double dynamic_range = 1.0;
};

struct DiversityReport {
    int n_samples = 0;
    double mean_pairwise_ssim = 0.0;
    double std_pairwise_ssim = 0.0;
    int nullity_gain = 0;
};

// Single-window SSIM: means, variances and covariance are taken over the
// whole grid at once instead of a sliding window. Symmetric, in [-1, 1].
double ssim(const ImageGrid& a, const ImageGrid& b);

// Mean and (population) standard deviation of ssim over all unordered
// pairs. nullity_gain in the report stays 0 here.
DiversityReport pairwise_ssim(const std::vector<ImageGrid>& samples);

// rank(w0) - rank(w_reduced). Both ranks are measured with the tolerance
// anchored at w0's top singular value, so a fully annihilated w_reduced is
// not judged against its own roundoff scale.
int nullity_gain(const Matrix& w0, const Matrix& w_reduced);

// Renders column vectors as grids under one shared min-max normalization
// (so relative magnitudes across the set survive). height = floor(sqrt(dim)),
// width = dim / height, trailing entries that don't fill the grid are
// dropped. A zero-range batch renders mid-gray.
std::vector<ImageGrid> render_outputs(const std::vector<Matrix>& outputs);

// Pushes base_input plus seeded Gaussian perturbations through the model
// with the para bundle applied, renders the outputs, and scores pairwise
// SSIM. nullity_gain in the report sums the per-layer rank loss. For a
// single linear layer, perturbations along kernel(W_reduced) are also
// checked to leave the output unchanged (within 1e-9).
DiversityReport stability_probe(const ToyModel& model, const AdapterBundle& bundle,
                                const Matrix& base_input, int n_perturbations,
                                double noise_scale, std::uint64_t seed);

} // namespace para
