#include "doctest.h"

#include <cmath>
#include <cstring>

#include "para/train.hpp"
#include "para/rng.hpp"
#include "test_helpers.hpp"

using namespace para;

namespace {

ToyModel single_layer(const Matrix& w0, const std::string& name = "lin0") {
    ToyModel m;
    m.layers.push_back({name, w0, std::nullopt});
    return m;
}

// y = (w0 - q* q*^T w0) x for a planted unit direction q* inside col(w0).
struct Planted {
    ToyModel model;
    std::vector<TargetPair> targets;
    Matrix qstar;
};

Planted make_planted(Rng& rng, int d, int k, int n_samples) {
    Planted p;
    const Matrix w0 = test::random_matrix(rng, d, k);
    p.qstar = qr_thin(w0 * test::random_matrix(rng, k, 1)).q;
    p.model = single_layer(w0);
    const Matrix x = test::random_matrix(rng, k, n_samples);
    const Matrix y = reduce_weight(w0, p.qstar) * x;
    p.targets.push_back({x, y});
    return p;
}

double base_loss(const ToyModel& model, const std::vector<TargetPair>& targets) {
    return para_loss_and_gradients(model, {}, {}, targets, 1e-8, nullptr);
}

// Central finite differences of the training loss in every entry of bs[slot].
Matrix fd_gradient(const ToyModel& model, const std::vector<int>& trained,
                   std::vector<Matrix> bs, std::size_t slot,
                   const std::vector<TargetPair>& targets, double eps) {
    const double h = 1e-6;
    Matrix out(bs[slot].rows(), bs[slot].cols());
    for (int i = 0; i < out.rows(); ++i) {
        for (int j = 0; j < out.cols(); ++j) {
            const double saved = bs[slot](i, j);
            bs[slot](i, j) = saved + h;
            const double up = para_loss_and_gradients(model, trained, bs, targets, eps, nullptr);
            bs[slot](i, j) = saved - h;
            const double down = para_loss_and_gradients(model, trained, bs, targets, eps, nullptr);
            bs[slot](i, j) = saved;
            out(i, j) = (up - down) / (2.0 * h);
        }
    }
    return out;
}

void check_gradients(const ToyModel& model, const std::vector<int>& trained,
                     const std::vector<Matrix>& bs, const std::vector<TargetPair>& targets) {
    const double eps = 1e-8;
    std::vector<Matrix> analytic;
    para_loss_and_gradients(model, trained, bs, targets, eps, &analytic);
    for (std::size_t slot = 0; slot < trained.size(); ++slot) {
        const Matrix fd = fd_gradient(model, trained, bs, slot, targets, eps);
        const double scale = 1.0 + analytic[slot].max_abs();
        CHECK(max_abs_diff(fd, analytic[slot]) <= 1e-5 * scale);
    }
}

} // namespace

TEST_CASE("soft projector of zero B is exactly zero") {
    const Matrix p = soft_projector(Matrix(3, 2), 1e-8);
    CHECK(p.rows() == 3);
    CHECK(p.cols() == 3);
    CHECK(p.max_abs() == 0.0);
    CHECK(soft_projector(Matrix(4, 0), 1e-8).max_abs() == 0.0);
}

TEST_CASE("soft projector on a unit axis") {
    const double eps = 1e-9;
    const Matrix p = soft_projector(Matrix(3, 1, {1, 0, 0}), eps);
    CHECK(p(0, 0) == doctest::Approx(1.0 / (1.0 + eps)).epsilon(1e-12));
    CHECK(std::abs(p(0, 1)) + std::abs(p(1, 1)) + std::abs(p(2, 2)) == 0.0);
}

TEST_CASE("soft projector approaches the QR projector") {
    Rng rng(7);
    const Matrix b = test::random_matrix(rng, 8, 3);
    const Matrix soft = soft_projector(b, 1e-9);
    const Matrix hard = projector(qr_thin(b).q);
    CHECK(max_abs_diff(soft, hard) <= 1e-6);
    CHECK(max_abs_diff(soft, soft.transpose()) <= 1e-14);
}

TEST_CASE("soft projector rejects nonpositive eps") {
    CHECK_THROWS_AS(soft_projector(Matrix(3, 1, {1, 0, 0}), 0.0), Error);
}

TEST_CASE("analytic gradient matches central differences") {
    Rng rng(31);

    SUBCASE("single linear layer 6x4, r=2") {
        const ToyModel model = single_layer(test::random_matrix(rng, 6, 4));
        std::vector<TargetPair> targets{{test::random_matrix(rng, 4, 3), test::random_matrix(rng, 6, 3)}};
        check_gradients(model, {0}, {test::random_matrix(rng, 6, 2)}, targets);
    }

    SUBCASE("single linear layer 8x3, r=3, two pairs") {
        const ToyModel model = single_layer(test::random_matrix(rng, 8, 3));
        std::vector<TargetPair> targets{{test::random_matrix(rng, 3, 2), test::random_matrix(rng, 8, 2)},
                                        {test::random_matrix(rng, 3, 1), test::random_matrix(rng, 8, 1)}};
        check_gradients(model, {0}, {test::random_matrix(rng, 8, 3)}, targets);
    }

    SUBCASE("two tanh layers, both trained") {
        ToyModel model;
        model.activation = Activation::tanh;
        model.layers.push_back({"a", test::random_matrix(rng, 5, 4), std::nullopt});
        model.layers.push_back({"b", test::random_matrix(rng, 3, 5), std::nullopt});
        std::vector<TargetPair> targets{{test::random_matrix(rng, 4, 4), test::random_matrix(rng, 3, 4)}};
        check_gradients(model, {0, 1}, {test::random_matrix(rng, 5, 2), test::random_matrix(rng, 3, 2)},
                        targets);
    }

    SUBCASE("two tanh layers, only the first trained") {
        ToyModel model;
        model.activation = Activation::tanh;
        model.layers.push_back({"a", test::random_matrix(rng, 6, 3), std::nullopt});
        model.layers.push_back({"b", test::random_matrix(rng, 4, 6), std::nullopt});
        std::vector<TargetPair> targets{{test::random_matrix(rng, 3, 3), test::random_matrix(rng, 4, 3)}};
        check_gradients(model, {0}, {test::random_matrix(rng, 6, 2)}, targets);
    }
}

TEST_CASE("zero steps of effective training leave the model untouched") {
    Rng rng(90);
    Planted p = make_planted(rng, 8, 6, 3);
    TrainConfig cfg;
    cfg.rank = 2;
    cfg.steps = 1;
    cfg.learning_rate = 0.0;
    cfg.seed = 5;
    auto [bundle, report] = train_para(p.model, p.targets, cfg);

    REQUIRE(bundle.entries.size() == 1);
    CHECK(bundle.entries[0].b.max_abs() == 0.0);
    REQUIRE(report.loss_history.size() == 1);
    // Bitwise equality with the base-model loss: zero B must be a true no-op.
    CHECK(report.loss_history[0] == base_loss(p.model, p.targets));
}

TEST_CASE("planted rank-1 reduction is recovered") {
    Rng rng(501);
    Planted p = make_planted(rng, 8, 6, 3);
    TrainConfig cfg;
    cfg.rank = 1;
    cfg.steps = 500;
    cfg.learning_rate = 1e-2;
    cfg.seed = 2;
    auto [bundle, report] = train_para(p.model, p.targets, cfg);

    CHECK(report.loss_history.back() < 1e-6);
    CHECK(report.final_effective_ranks.at("lin0") == 1);
    CHECK(report.b_column_independence.at("lin0") > 1e-6);

    // The learned direction matches the planted one up to sign.
    const AdapterBundle fin = finalize_adapters(bundle);
    REQUIRE(fin.entries[0].b.cols() == 1);
    double dot = 0.0;
    for (int i = 0; i < 8; ++i) dot += fin.entries[0].b(i, 0) * p.qstar(i, 0);
    CHECK(std::abs(dot) > 1.0 - 1e-4);
}

TEST_CASE("descent is monotone-ish at the default learning rate") {
    for (std::uint64_t seed : {11u, 12u, 13u}) {
        Rng rng(7000 + seed);
        Planted p = make_planted(rng, 8, 6, 3);
        TrainConfig cfg;
        cfg.rank = 1;
        cfg.seed = seed;
        auto [bundle, report] = train_para(p.model, p.targets, cfg);
        const std::vector<double>& h = report.loss_history;
        REQUIRE(h.size() == 200);

        // Windows that already sit at the convergence floor are noise, not
        // descent information; only count meaningful increases.
        const double floor = 1e-12 * (1.0 + h[0]);
        int bad = 0, total = 0;
        for (std::size_t i = 0; i + 10 < h.size(); ++i) {
            if (h[i] <= floor) continue;
            ++total;
            if (h[i + 10] > h[i] + floor) ++bad;
        }
        INFO("seed ", seed, ": ", bad, "/", total, " window increases");
        CHECK(bad * 20 <= total); // <= 5%
    }
}

TEST_CASE("trained B keeps independent columns") {
    int independent = 0;
    for (int s = 0; s < 100; ++s) {
        Rng rng(9000 + s);
        Planted p = make_planted(rng, 10, 8, 4);
        TrainConfig cfg;
        cfg.rank = 4;
        cfg.steps = 300;
        cfg.learning_rate = 5e-2;
        cfg.seed = static_cast<std::uint64_t>(s);
        auto [bundle, report] = train_para(p.model, p.targets, cfg);
        if (report.b_column_independence.at("lin0") > 1e-6) ++independent;
    }
    INFO(independent, "/100 runs with independent columns");
    CHECK(independent >= 95);
}

TEST_CASE("training is deterministic per seed") {
    Rng rng(77);
    Planted p = make_planted(rng, 6, 5, 2);
    TrainConfig cfg;
    cfg.rank = 2;
    cfg.steps = 50;
    cfg.seed = 42;

    auto [b1, r1] = train_para(p.model, p.targets, cfg);
    auto [b2, r2] = train_para(p.model, p.targets, cfg);
    CHECK(r1.loss_history == r2.loss_history);
    REQUIRE(b1.entries[0].b.data().size() == b2.entries[0].b.data().size());
    CHECK(std::memcmp(b1.entries[0].b.data().data(), b2.entries[0].b.data().data(),
                      b1.entries[0].b.data().size() * sizeof(double)) == 0);

    cfg.seed = 43;
    auto [b3, r3] = train_para(p.model, p.targets, cfg);
    CHECK(max_abs_diff(b1.entries[0].b, b3.entries[0].b) > 0.0);
}

TEST_CASE("absurd learning rate raises DivergedLoss") {
    Rng rng(83);
    Planted p = make_planted(rng, 6, 5, 2);
    TrainConfig cfg;
    cfg.rank = 1;
    cfg.steps = 10;
    cfg.learning_rate = 1e308;
    cfg.seed = 1;
    CHECK_THROWS_AS(train_para(p.model, p.targets, cfg), DivergedLoss);
}

TEST_CASE("layer filter controls which layers get adapters") {
    Rng rng(60);
    ToyModel model;
    model.layers.push_back({"enc.w1", test::random_matrix(rng, 4, 4), std::nullopt});
    model.layers.push_back({"enc.w2", test::random_matrix(rng, 4, 4), std::nullopt});
    model.layers.push_back({"dec.w1", test::random_matrix(rng, 4, 4), std::nullopt});
    std::vector<TargetPair> targets{{test::random_matrix(rng, 4, 2), test::random_matrix(rng, 4, 2)}};

    TrainConfig cfg;
    cfg.rank = 1;
    cfg.steps = 3;
    cfg.layer_filter = "enc.*";
    auto [bundle, report] = train_para(model, targets, cfg);
    REQUIRE(bundle.entries.size() == 2);
    CHECK(bundle.entries[0].layer_name == "enc.w1");
    CHECK(bundle.entries[1].layer_name == "enc.w2");

    cfg.layer_filter = "*.w1";
    auto [bundle2, report2] = train_para(model, targets, cfg);
    REQUIRE(bundle2.entries.size() == 2);
    CHECK(bundle2.entries[1].layer_name == "dec.w1");
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    cfg.steps = 0;
    CHECK_THROWS_AS(validate(cfg), Error);
    cfg = TrainConfig{};
    cfg.learning_rate = -1.0;
    CHECK_THROWS_AS(validate(cfg), Error);
    cfg = TrainConfig{};
    cfg.ridge_eps = 0.0;
    CHECK_THROWS_AS(validate(cfg), Error);
    cfg = TrainConfig{};
    cfg.rank = 0;
    CHECK_THROWS_AS(validate(cfg), Error);
    cfg = TrainConfig{};
    cfg.gamma = 1.5;
    CHECK_THROWS_AS(validate(cfg), Error);
}

TEST_CASE("finalize turns trained B into an orthonormal factor") {
    Rng rng(21);
    Planted p = make_planted(rng, 8, 6, 3);
    TrainConfig cfg;
    cfg.rank = 2;
    cfg.steps = 100;
    cfg.seed = 3;
    auto [bundle, report] = train_para(p.model, p.targets, cfg);

    const AdapterBundle fin = finalize_adapters(bundle);
    REQUIRE(fin.entries.size() == 1);
    CHECK(fin.entries[0].finalized);
    CHECK_FALSE(fin.entries[0].identity);
    CHECK(orthonormality_defect(fin.entries[0].b) <= 1e-10);

    // Idempotent: a second pass is a bitwise no-op.
    const AdapterBundle fin2 = finalize_adapters(fin);
    CHECK(std::memcmp(fin2.entries[0].b.data().data(), fin.entries[0].b.data().data(),
                      fin.entries[0].b.data().size() * sizeof(double)) == 0);
}

TEST_CASE("finalize flags zero and rank-zero layers as identity") {
    Rng rng(22);
    Planted p = make_planted(rng, 8, 6, 3);
    TrainConfig cfg;
    cfg.rank = 2;
    cfg.steps = 1;
    cfg.learning_rate = 0.0; // B stays zero
    auto [bundle, report] = train_para(p.model, p.targets, cfg);
    const AdapterBundle fin = finalize_adapters(bundle);
    CHECK(fin.entries[0].identity);
    CHECK(fin.entries[0].b.cols() == 0);

    // gamma small enough that rank_adjust returns 0: also identity.
    AdapterBundle capped = bundle;
    capped.entries[0].b = test::random_matrix(rng, 8, 2);
    capped.entries[0].gamma = 1.0 / 40.0;
    CHECK(finalize_adapters(capped).entries[0].identity);
}

TEST_CASE("finalize keeps an already-orthonormal B") {
    Rng rng(23);
    AdapterBundle bundle;
    bundle.kind = BundleKind::para;
    BundleEntry e;
    e.layer_name = "l";
    e.b = test::random_orthonormal(rng, 7, 3);
    e.r = 3;
    e.gamma = 1.0;
    e.base_rank = 7;
    bundle.entries.push_back(e);
    const AdapterBundle fin = finalize_adapters(bundle);
    CHECK(max_abs_diff(fin.entries[0].b, bundle.entries[0].b) <= 1e-12);
}
