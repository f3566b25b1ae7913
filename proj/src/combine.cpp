#include "para/combine.hpp"

#include <string>

#include "para/errors.hpp"
#include "para/linalg.hpp"

namespace para {

namespace {

constexpr double kMergePivotTol = 1e-10;

void check_factor(const Matrix& w0, const Matrix& q, const char* name) {
    if (q.rows() != w0.rows()) {
        throw ShapeError(std::string(name) + " has " + std::to_string(q.rows()) +
                         " rows, weight has " + std::to_string(w0.rows()));
    }
    if (q.cols() > 0 && orthonormality_defect(q) > 1e-8) {
        throw NotOrthonormal(std::string(name) + ": columns are not orthonormal");
    }
}

void check_lora(const Matrix& w0, const LoraAdapter& lora) {
    validate(lora);
    if (lora.b_up.rows() != w0.rows() || lora.a_down.cols() != w0.cols()) {
        throw ShapeError("lora adapter " + lora.layer_name + " does not conform to a " +
                         std::to_string(w0.rows()) + "x" + std::to_string(w0.cols()) + " weight");
    }
}

} // namespace

Matrix merged_factor(const Matrix& q1, const Matrix& q2) {
    return rank_revealing_qr(Matrix::hcat(q1, q2), kMergePivotTol).q;
}

std::string to_string(CombineMethod method) {
    switch (method) {
        case CombineMethod::merged_qr: return "merged_qr";
        case CombineMethod::sequential: return "sequential";
        case CombineMethod::para_then_lora: return "para_then_lora";
        case CombineMethod::lora_then_para: return "lora_then_para";
        case CombineMethod::lora_form: return "lora_form";
    }
    return "unknown";
}

CombinedWeight merge_para_qr(const Matrix& w0, const Matrix& q1, const Matrix& q2) {
    check_factor(w0, q1, "q1");
    check_factor(w0, q2, "q2");
    const Matrix qm = merged_factor(q1, q2);
    CombinedWeight out;
    out.w = reduce_weight(w0, qm);
    out.method = CombineMethod::merged_qr;
    out.effective_rank_removed = qm.cols();
    return out;
}

CombinedWeight merge_para_sequential(const Matrix& w0, const Matrix& q1, const Matrix& q2) {
    check_factor(w0, q1, "q1");
    check_factor(w0, q2, "q2");
    CombinedWeight out;
    out.w = reduce_weight(reduce_weight(w0, q1), q2);
    out.method = CombineMethod::sequential;
    // Same bookkeeping as the merged path: the span of the union.
    out.effective_rank_removed = merged_factor(q1, q2).cols();
    return out;
}

double merge_equivalence_gap(const Matrix& w0, const Matrix& q1, const Matrix& q2) {
    const Matrix merged = merge_para_qr(w0, q1, q2).w;
    const Matrix sequential = merge_para_sequential(w0, q1, q2).w;
    const double gap = frobenius_distance(merged, sequential);
    const double scale = w0.frobenius_norm();
    return scale > 0.0 ? gap / scale : gap;
}

CombinedWeight combine_para_then_lora(const Matrix& w0, const Matrix& q, const LoraAdapter& lora) {
    check_factor(w0, q, "q");
    check_lora(w0, lora);
    CombinedWeight out;
    out.w = reduce_weight(w0, q) + lora.alpha * (lora.b_up * lora.a_down);
    out.method = CombineMethod::para_then_lora;
    out.effective_rank_removed = q.cols();
    return out;
}

CombinedWeight combine_lora_then_para(const Matrix& w0, const Matrix& q, const LoraAdapter& lora) {
    check_factor(w0, q, "q");
    check_lora(w0, lora);
    CombinedWeight out;
    out.w = reduce_weight(w0 + lora.alpha * (lora.b_up * lora.a_down), q);
    out.method = CombineMethod::lora_then_para;
    out.effective_rank_removed = q.cols();
    return out;
}

CombinedWeight combine_lora_form(const Matrix& w0, const Matrix& q, const LoraAdapter& lora,
                                 double alpha1, double alpha2) {
    check_factor(w0, q, "q");
    check_lora(w0, lora);
    if (q.cols() != lora.b_up.cols()) {
        throw ShapeError("lora_form needs q.cols == adapter rank, got " +
                         std::to_string(q.cols()) + " vs " + std::to_string(lora.b_up.cols()));
    }
    const Matrix left = -alpha1 * q + alpha2 * lora.b_up;
    const Matrix right = alpha1 * (q.transpose() * w0) + alpha2 * lora.a_down;
    CombinedWeight out;
    out.w = w0 + left * right;
    out.method = CombineMethod::lora_form;
    out.effective_rank_removed = 0;
    return out;
}

} // namespace para
