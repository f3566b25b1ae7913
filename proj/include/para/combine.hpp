#pragma once

#include <string>

#include "para/adapter.hpp"
#include "para/matrix.hpp"

namespace para {

enum class CombineMethod {
    merged_qr,
    sequential,
    para_then_lora,
    lora_then_para,
    lora_form,
};

std::string to_string(CombineMethod method);

struct CombinedWeight {
    Matrix w;
    CombineMethod method = CombineMethod::merged_qr;
    // Dimension of the subspace projected out of w0. For the two pure
    // reduction methods this equals dim(span(q1) union span(q2)); for the
    // mixed methods it is q.cols, and for lora_form (no projector step) 0.
    int effective_rank_removed = 0;
};

// Orthonormal basis of span(q1) + span(q2): [q1 q2] re-orthonormalized with
// column-pivoted QR, dependent columns dropped at pivot norm 1e-10.
Matrix merged_factor(const Matrix& q1, const Matrix& q2);

// Merge two reduction factors via merged_factor, then reduce w0 by it.
CombinedWeight merge_para_qr(const Matrix& w0, const Matrix& q1, const Matrix& q2);

// Same combination done as two chained reductions: w1 = reduce(w0, q1),
// then reduce(w1, q2). Agrees with merge_para_qr (to ~1e-9 relative) when
// span(q2) splits into a part inside span(q1) plus a part orthogonal to it;
// for fully generic factor pairs the two paths can differ.
CombinedWeight merge_para_sequential(const Matrix& w0, const Matrix& q1, const Matrix& q2);

// Relative Frobenius gap between the sequential and merged-QR paths,
// measured against ||w0||_F (absolute gap when w0 is zero).
double merge_equivalence_gap(const Matrix& w0, const Matrix& q1, const Matrix& q2);

// reduce(w0, q) + alpha * B_up * A_down.
CombinedWeight combine_para_then_lora(const Matrix& w0, const Matrix& q, const LoraAdapter& lora);

// (I - QQ^T)(w0 + alpha * B_up * A_down). Diagnostic ordering: when q spans
// col(B_up) the additive term is wiped out entirely.
CombinedWeight combine_lora_then_para(const Matrix& w0, const Matrix& q, const LoraAdapter& lora);

// w0 + (-a1*Q + a2*B)(a1*Q^T*w0 + a2*A). Rejected scheme, kept for
// comparison; requires q.cols to match the adapter rank.
CombinedWeight combine_lora_form(const Matrix& w0, const Matrix& q, const LoraAdapter& lora,
                                 double alpha1, double alpha2);

} // namespace para
