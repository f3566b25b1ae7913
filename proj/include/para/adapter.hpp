#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "para/linalg.hpp"
#include "para/matrix.hpp"

namespace para {

// Axis layout of a convolution kernel; flattening groups (c_in, h, w) into
// the column index so the kernel becomes a c_out x (c_in*h*w) matrix.
struct ConvShape {
    int c_out = 0;
    int c_in = 0;
    int h = 0;
    int w = 0;

    std::int64_t element_count() const {
        return std::int64_t(c_out) * c_in * h * w;
    }
    bool operator==(const ConvShape&) const = default;
};

// 4-axis kernel tensor, row-major over (c_out, c_in, h, w).
struct Tensor4 {
    ConvShape shape;
    std::vector<double> data;
};

// Requested reduction rank r plus the per-layer cap factor gamma in (0, 1].
struct RankPolicy {
    int requested_rank = 1;
    double gamma = 1.0;
};

// Per-layer reduction adapter: learnable B (d x r) plus the rank policy.
// A zero B means "untrained"; consumers treat it as the identity.
struct ParaAdapter {
    std::string layer_name;
    Matrix b;
    int requested_rank = 1;
    double gamma = 1.0;
    std::optional<ConvShape> conv_shape;

    RankPolicy policy() const { return RankPolicy{requested_rank, gamma}; }
};

// Additive low-rank adapter: W0 + alpha * b_up * a_down.
struct LoraAdapter {
    std::string layer_name;
    Matrix b_up;   // d x r
    Matrix a_down; // r x k
    double alpha = 1.0;
};

void validate(const ParaAdapter& adapter);
void validate(const LoraAdapter& adapter);

// Piecewise rank cap: r if r <= gamma*base_rank, else floor(gamma*base_rank).
// A result of 0 means the layer stays unmodified.
int rank_adjust(const RankPolicy& policy, int base_rank);

// Orthonormal factor of B via thin QR. Throws DegenerateColumns for a
// zero/collapsed B (untrained adapters have no factor).
Matrix derive_q(const ParaAdapter& adapter);

// Same, after truncating B to its first rank_adjust(policy, base_rank)
// columns. rank_adjust of 0 yields an empty factor (no reduction).
Matrix derive_q_clamped(const ParaAdapter& adapter, int base_rank);

// W0 - Q Q^T W0. Empty q returns W0 unchanged.
Matrix reduce_weight(const Matrix& w0, const Matrix& q);

// (W0 - Q Q^T W0) x without materializing the d x d projector:
// W0 x, then Q^T (W0 x), then subtract Q times that.
Matrix apply_reduced(const Matrix& w0, const Matrix& q, const Matrix& x);

Matrix flatten_kernel(const Tensor4& kernel);
Tensor4 unflatten_kernel(const Matrix& m, const ConvShape& shape);

// Kernel-space reduction: flatten to c_out x (c_in*h*w), reduce with the
// factor of b (c_out rows), reshape back.
Tensor4 reduce_conv(const Tensor4& kernel, const Matrix& b);

std::int64_t param_count_para(int d, int r);
std::int64_t param_count_lora(int d, int k, int r);

} // namespace para
