#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "para/bundle.hpp"
#include "para/matrix.hpp"
#include "para/model.hpp"

namespace para {

struct TrainConfig {
    int rank = 4;
    double gamma = 1.0;
    int steps = 200;
    double learning_rate = 1e-2;
    double ridge_eps = 1e-8;
    std::uint64_t seed = 0;
    std::string layer_filter = "*";
};

void validate(const TrainConfig& cfg);

struct TrainReport {
    std::vector<double> loss_history;
    std::map<std::string, int> final_effective_ranks;
    std::map<std::string, double> b_column_independence; // smallest sigma of B
};

using TargetPair = std::pair<Matrix, Matrix>;

// Ridge-regularized stand-in for QQ^T: B (B^T B + eps I)^{-1} B^T. Exact
// projector in the eps -> 0 limit for full-column-rank B; exactly zero at
// B = 0, which keeps the zero-init forward identical to the base model.
Matrix soft_projector(const Matrix& b, double eps);

// Loss of the reduced forward pass over all targets, plus (optionally)
// dL/dB per trained layer and the projector-level gradient G_P (used for
// the first-step kick scale). trained_layers indexes model.layers; bs runs
// parallel to it. Exposed so tests can difference it numerically.
double para_loss_and_gradients(const ToyModel& model, const std::vector<int>& trained_layers,
                               const std::vector<Matrix>& bs, const std::vector<TargetPair>& targets,
                               double eps, std::vector<Matrix>* grad_b,
                               std::vector<Matrix>* grad_p = nullptr);

// Zero-init full-batch gradient descent on the soft-projector reduction of
// every layer matching cfg.layer_filter. Deterministic given cfg.seed.
std::pair<AdapterBundle, TrainReport> train_para(const ToyModel& model,
                                                 const std::vector<TargetPair>& targets,
                                                 const TrainConfig& cfg);

// Canonical apply-time form: clamp each B to its adjusted rank and replace
// it by the thin-QR Q; zero or degenerate layers get the identity flag.
AdapterBundle finalize_adapters(const AdapterBundle& bundle);

} // namespace para
