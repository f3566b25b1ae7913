#include "para/adapter.hpp"

#include <cmath>
#include <string>

namespace para {

void validate(const ParaAdapter& adapter) {
    if (adapter.requested_rank < 1) {
        throw Error("ParaAdapter '" + adapter.layer_name + "': requested_rank must be >= 1");
    }
    if (adapter.b.cols() != adapter.requested_rank) {
        throw ShapeError("ParaAdapter '" + adapter.layer_name + "': b has " +
                         std::to_string(adapter.b.cols()) + " columns, requested_rank is " +
                         std::to_string(adapter.requested_rank));
    }
    if (!(adapter.gamma > 0.0) || adapter.gamma > 1.0) {
        throw Error("ParaAdapter '" + adapter.layer_name + "': gamma must be in (0, 1]");
    }
    if (adapter.conv_shape && adapter.conv_shape->c_out != adapter.b.rows()) {
        throw ShapeError("ParaAdapter '" + adapter.layer_name + "': b rows must equal c_out");
    }
    if (!adapter.b.all_finite()) {
        throw Error("ParaAdapter '" + adapter.layer_name + "': non-finite entries in b");
    }
}

void validate(const LoraAdapter& adapter) {
    if (adapter.b_up.cols() != adapter.a_down.rows()) {
        throw ShapeError("LoraAdapter '" + adapter.layer_name + "': b_up cols " +
                         std::to_string(adapter.b_up.cols()) + " != a_down rows " +
                         std::to_string(adapter.a_down.rows()));
    }
    if (!adapter.b_up.all_finite() || !adapter.a_down.all_finite() ||
        !std::isfinite(adapter.alpha)) {
        throw Error("LoraAdapter '" + adapter.layer_name + "': non-finite entries");
    }
}

int rank_adjust(const RankPolicy& policy, int base_rank) {
    if (base_rank < 1) throw Error("rank_adjust: base_rank must be >= 1");
    if (policy.requested_rank < 1) throw Error("rank_adjust: requested_rank must be >= 1");
    if (!(policy.gamma > 0.0) || policy.gamma > 1.0) {
        throw Error("rank_adjust: gamma must be in (0, 1]");
    }
    const double cap = policy.gamma * base_rank;
    if (policy.requested_rank <= cap) return policy.requested_rank;
    return static_cast<int>(std::floor(cap));
}

Matrix derive_q(const ParaAdapter& adapter) {
    return qr_thin(adapter.b).q;
}

Matrix derive_q_clamped(const ParaAdapter& adapter, int base_rank) {
    const int r_eff = rank_adjust(adapter.policy(), base_rank);
    if (r_eff == 0) return Matrix(adapter.b.rows(), 0);
    return qr_thin(adapter.b.take_cols(r_eff)).q;
}

namespace {

void check_reduction_shapes(const Matrix& w0, const Matrix& q) {
    if (q.cols() == 0) return;
    if (q.rows() != w0.rows()) {
        throw ShapeError("reduce: q has " + std::to_string(q.rows()) + " rows, w0 has " +
                         std::to_string(w0.rows()));
    }
    if (orthonormality_defect(q) > 1e-8) {
        throw NotOrthonormal("reduce: q columns are not orthonormal to 1e-8");
    }
}

} // namespace

Matrix reduce_weight(const Matrix& w0, const Matrix& q) {
    check_reduction_shapes(w0, q);
    if (q.cols() == 0) return w0;
    const Matrix coeffs = q.transpose() * w0; // r x k
    return w0 - q * coeffs;
}

Matrix apply_reduced(const Matrix& w0, const Matrix& q, const Matrix& x) {
    check_reduction_shapes(w0, q);
    if (w0.cols() != x.rows()) {
        throw ShapeError("apply_reduced: w0 cols " + std::to_string(w0.cols()) + " != x rows " +
                         std::to_string(x.rows()));
    }
    const Matrix h = w0 * x; // d x n
    if (q.cols() == 0) return h;
    return h - q * (q.transpose() * h);
}

Matrix flatten_kernel(const Tensor4& kernel) {
    const ConvShape& s = kernel.shape;
    if (s.c_out < 1 || s.c_in < 1 || s.h < 1 || s.w < 1) {
        throw ShapeError("flatten_kernel: all axes must be positive");
    }
    if (static_cast<std::int64_t>(kernel.data.size()) != s.element_count()) {
        throw ShapeError("flatten_kernel: data length does not match shape");
    }
    // Row-major (c_out, c_in, h, w) is already laid out as
    // c_out x (c_in*h*w); the flatten is a pure reinterpretation.
    return Matrix(s.c_out, s.c_in * s.h * s.w, kernel.data);
}

Tensor4 unflatten_kernel(const Matrix& m, const ConvShape& shape) {
    if (m.rows() != shape.c_out || std::int64_t(m.cols()) != std::int64_t(shape.c_in) * shape.h * shape.w) {
        throw ShapeError("unflatten_kernel: matrix does not match shape");
    }
    return Tensor4{shape, m.data()};
}

Tensor4 reduce_conv(const Tensor4& kernel, const Matrix& b) {
    const Matrix w0 = flatten_kernel(kernel);
    if (b.cols() > 0 && b.rows() != kernel.shape.c_out) {
        throw ShapeError("reduce_conv: b must have c_out rows");
    }
    Matrix q(kernel.shape.c_out, 0);
    if (b.cols() > 0) q = qr_thin(b).q;
    return unflatten_kernel(reduce_weight(w0, q), kernel.shape);
}

std::int64_t param_count_para(int d, int r) {
    if (d < 1 || r < 1) throw Error("param_count_para: dimensions must be positive");
    return std::int64_t(d) * r;
}

std::int64_t param_count_lora(int d, int k, int r) {
    if (d < 1 || k < 1 || r < 1) throw Error("param_count_lora: dimensions must be positive");
    return (std::int64_t(d) + k) * r;
}

} // namespace para
