#include "para/train.hpp"

#include <fnmatch.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "para/errors.hpp"
#include "para/linalg.hpp"
#include "para/rng.hpp"

namespace para {

namespace {

// Inverse of a small SPD matrix via Cholesky; a = L L^T, then columns of
// a^{-1} are solved one at a time. Sizes here are r x r with r <= a few dozen.
Matrix spd_inverse(const Matrix& a) {
    const int n = a.rows();
    Matrix chol(n, n);
    for (int j = 0; j < n; ++j) {
        for (int i = j; i < n; ++i) {
            double s = a(i, j);
            for (int k = 0; k < j; ++k) s -= chol(i, k) * chol(j, k);
            if (i == j) {
                chol(j, j) = std::sqrt(s);
            } else {
                chol(i, j) = s / chol(j, j);
            }
        }
    }
    Matrix inv(n, n);
    std::vector<double> col(n);
    for (int rhs = 0; rhs < n; ++rhs) {
        for (int i = 0; i < n; ++i) {
            double s = (i == rhs) ? 1.0 : 0.0;
            for (int k = 0; k < i; ++k) s -= chol(i, k) * col[k];
            col[i] = s / chol(i, i);
        }
        for (int i = n - 1; i >= 0; --i) {
            double s = col[i];
            for (int k = i + 1; k < n; ++k) s -= chol(k, i) * inv(k, rhs);
            inv(i, rhs) = s / chol(i, i);
        }
    }
    return inv;
}

struct Batched {
    Matrix x;
    Matrix y;
};

Batched batch_targets(const ToyModel& model, const std::vector<TargetPair>& targets) {
    if (targets.empty()) throw NonConforming("need at least one target pair");
    const int in_rows = model.layers.front().w0.cols();
    const int out_rows = model.layers.back().w0.rows();
    Batched out{Matrix(in_rows, 0), Matrix(out_rows, 0)};
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const Matrix& x = targets[i].first;
        const Matrix& y = targets[i].second;
        if (x.rows() != in_rows || y.rows() != out_rows || x.cols() != y.cols() || x.cols() < 1) {
            throw NonConforming("target pair " + std::to_string(i) + " does not conform to the model");
        }
        out.x = Matrix::hcat(out.x, x);
        out.y = Matrix::hcat(out.y, y);
    }
    return out;
}

double sum_squares(const Matrix& m) {
    double s = 0.0;
    for (int i = 0; i < m.rows(); ++i)
        for (int j = 0; j < m.cols(); ++j) s += m(i, j) * m(i, j);
    return s;
}

// Loss + gradients on a prebatched target block. grad_b / grad_p may be
// null; both run parallel to trained_layers when present.
double batched_loss_and_gradients(const ToyModel& model, const std::vector<int>& trained_layers,
                                  const std::vector<Matrix>& bs, const Batched& batch, double eps,
                                  std::vector<Matrix>* grad_b, std::vector<Matrix>* grad_p) {
    const std::size_t n_layers = model.layers.size();

    // Reduced weights for the trained layers, base weights elsewhere.
    std::vector<Matrix> weights(n_layers);
    std::vector<int> slot_of_layer(n_layers, -1);
    for (std::size_t t = 0; t < trained_layers.size(); ++t) {
        const int l = trained_layers[t];
        slot_of_layer[l] = static_cast<int>(t);
        const Matrix& w0 = model.layers[l].w0;
        weights[l] = w0 - soft_projector(bs[t], eps) * w0;
    }

    // Forward, keeping post-activation values for the backward pass.
    const bool use_tanh = model.activation == Activation::tanh;
    std::vector<Matrix> acts(n_layers + 1);
    acts[0] = batch.x;
    for (std::size_t l = 0; l < n_layers; ++l) {
        const Matrix& w = weights[l].rows() > 0 ? weights[l] : model.layers[l].w0;
        Matrix z = w * acts[l];
        if (l + 1 < n_layers && use_tanh) {
            for (int i = 0; i < z.rows(); ++i)
                for (int j = 0; j < z.cols(); ++j) z(i, j) = std::tanh(z(i, j));
        }
        acts[l + 1] = std::move(z);
    }

    const Matrix residual = acts[n_layers] - batch.y;
    const double loss = sum_squares(residual);
    if (!grad_b && !grad_p) return loss;

    if (grad_b) grad_b->assign(trained_layers.size(), Matrix());
    if (grad_p) grad_p->assign(trained_layers.size(), Matrix());

    Matrix delta = 2.0 * residual;
    for (int l = static_cast<int>(n_layers) - 1; l >= 0; --l) {
        const int slot = slot_of_layer[l];
        if (slot >= 0) {
            const Matrix& w0 = model.layers[l].w0;
            const Matrix& b = bs[slot];
            const Matrix g_w = delta * acts[l].transpose();
            const Matrix g_p = -1.0 * (g_w * w0.transpose());
            if (grad_p) (*grad_p)[slot] = g_p;
            if (grad_b) {
                const int r = b.cols();
                Matrix gram = b.transpose() * b;
                for (int i = 0; i < r; ++i) gram(i, i) += eps;
                const Matrix m_inv = spd_inverse(gram);
                const Matrix bm = b * m_inv;
                const Matrix g_m = b.transpose() * (g_p * b);
                (*grad_b)[slot] =
                    g_p * bm + g_p.transpose() * bm - bm * (g_m + g_m.transpose()) * m_inv;
            }
        }
        if (l > 0) {
            const Matrix& w = weights[l].rows() > 0 ? weights[l] : model.layers[l].w0;
            delta = w.transpose() * delta;
            if (use_tanh) {
                // act' = 1 - tanh^2, and acts[l] already holds tanh(z).
                for (int i = 0; i < delta.rows(); ++i)
                    for (int j = 0; j < delta.cols(); ++j)
                        delta(i, j) *= 1.0 - acts[l](i, j) * acts[l](i, j);
            }
        }
    }
    return loss;
}

} // namespace

void validate(const TrainConfig& cfg) {
    if (cfg.rank < 1) throw Error("train config: rank must be >= 1");
    if (cfg.steps < 1) throw Error("train config: steps must be >= 1");
    if (cfg.learning_rate < 0.0) throw Error("train config: learning_rate must be >= 0");
    if (!(cfg.ridge_eps > 0.0)) throw Error("train config: ridge_eps must be > 0");
    if (!(cfg.gamma > 0.0 && cfg.gamma <= 1.0)) throw Error("train config: gamma must be in (0, 1]");
}

Matrix soft_projector(const Matrix& b, double eps) {
    if (!(eps > 0.0)) throw Error("soft_projector: eps must be > 0");
    if (b.cols() == 0) return Matrix(b.rows(), b.rows());
    Matrix gram = b.transpose() * b;
    for (int i = 0; i < b.cols(); ++i) gram(i, i) += eps;
    return b * spd_inverse(gram) * b.transpose();
}

double para_loss_and_gradients(const ToyModel& model, const std::vector<int>& trained_layers,
                               const std::vector<Matrix>& bs, const std::vector<TargetPair>& targets,
                               double eps, std::vector<Matrix>* grad_b,
                               std::vector<Matrix>* grad_p) {
    validate(model);
    if (bs.size() != trained_layers.size()) {
        throw NonConforming("need exactly one B per trained layer");
    }
    return batched_loss_and_gradients(model, trained_layers, bs, batch_targets(model, targets),
                                      eps, grad_b, grad_p);
}

std::pair<AdapterBundle, TrainReport> train_para(const ToyModel& model,
                                                 const std::vector<TargetPair>& targets,
                                                 const TrainConfig& cfg) {
    validate(model);
    validate(cfg);
    const Batched batch = batch_targets(model, targets);

    std::vector<int> trained;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        if (fnmatch(cfg.layer_filter.c_str(), model.layers[l].name.c_str(), 0) == 0) {
            trained.push_back(static_cast<int>(l));
        }
    }

    std::vector<Matrix> bs;
    std::vector<int> base_ranks;
    bs.reserve(trained.size());
    for (int l : trained) {
        bs.emplace_back(model.layers[l].w0.rows(), cfg.rank);
        base_ranks.push_back(numerical_rank(model.layers[l].w0));
    }

    Rng rng(cfg.seed);
    TrainReport report;
    report.loss_history.reserve(cfg.steps);
    std::vector<Matrix> grads, grads_p;
    for (int step = 0; step < cfg.steps; ++step) {
        const double loss =
            batched_loss_and_gradients(model, trained, bs, batch, cfg.ridge_eps, &grads, &grads_p);
        if (!std::isfinite(loss)) {
            throw DivergedLoss("loss became non-finite at step " + std::to_string(step) +
                               " (learning rate too high?)");
        }
        report.loss_history.push_back(loss);
        for (std::size_t t = 0; t < trained.size(); ++t) {
            // dL/dB vanishes identically at B = 0 (the projector is quadratic
            // there), so the first update of a still-zero B is a seeded kick
            // sized so the next steps move B by a comparable amount.
            if (cfg.learning_rate > 0.0 && bs[t].max_abs() == 0.0) {
                const Matrix sym = grads_p[t] + grads_p[t].transpose();
                const double lam = sym.frobenius_norm();
                if (lam > 0.0) {
                    Matrix kick = rng.gaussian_matrix(bs[t].rows(), bs[t].cols());
                    const double norm = kick.frobenius_norm();
                    if (norm > 0.0) {
                        bs[t] = std::sqrt(cfg.learning_rate * lam) / norm * kick;
                    }
                }
                continue;
            }
            bs[t] = bs[t] - cfg.learning_rate * grads[t];
        }
    }

    AdapterBundle bundle;
    bundle.kind = BundleKind::para;
    bundle.activation = model.activation;
    for (std::size_t t = 0; t < trained.size(); ++t) {
        const ModelLayer& layer = model.layers[trained[t]];
        BundleEntry entry;
        entry.layer_name = layer.name;
        entry.b = bs[t];
        entry.conv_shape = layer.conv_shape;
        entry.r = cfg.rank;
        entry.gamma = cfg.gamma;
        entry.base_rank = base_ranks[t];
        entry.layer_cols = layer.w0.cols();
        bundle.entries.push_back(std::move(entry));

        const std::vector<double> sigma = singular_values(bs[t]);
        report.b_column_independence[layer.name] = sigma.empty() ? 0.0 : sigma.back();
        int r_eff = rank_adjust(RankPolicy{cfg.rank, cfg.gamma}, base_ranks[t]);
        if (r_eff > 0) {
            try {
                qr_thin(bs[t].take_cols(r_eff));
            } catch (const DegenerateColumns&) {
                r_eff = 0;
            }
        }
        report.final_effective_ranks[layer.name] = r_eff;
    }
    return {std::move(bundle), std::move(report)};
}

AdapterBundle finalize_adapters(const AdapterBundle& bundle) {
    AdapterBundle out = bundle;
    if (out.kind != BundleKind::para) return out;
    for (BundleEntry& entry : out.entries) {
        if (entry.finalized || entry.identity) continue;
        const int r_eff = rank_adjust(RankPolicy{entry.r, entry.gamma}, entry.base_rank);
        if (r_eff == 0) {
            entry.identity = true;
            entry.b = Matrix(entry.b.rows(), 0);
            entry.finalized = true;
            continue;
        }
        try {
            entry.b = qr_thin(entry.b.take_cols(r_eff)).q;
            entry.finalized = true;
        } catch (const DegenerateColumns&) {
            entry.identity = true;
            entry.b = Matrix(entry.b.rows(), 0);
            entry.finalized = true;
        }
    }
    return out;
}

} // namespace para
