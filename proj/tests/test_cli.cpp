#include "doctest.h"

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "para/adapter.hpp"
#include "para/bundle.hpp"
#include "para/errors.hpp"
#include "para/linalg.hpp"
#include "para/model.hpp"
#include "para/rng.hpp"
#include "test_helpers.hpp"

using namespace para;
using nlohmann::json;

namespace {

struct CliResult {
    int status = -1;
    std::string out;
    std::string err;
};

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::ostringstream buf;
    buf << f.rdbuf();
    return buf.str();
}

CliResult run_cli(const std::string& args) {
    const std::string out_path = "tmp_cli_stdout.txt";
    const std::string err_path = "tmp_cli_stderr.txt";
    const std::string cmd =
        std::string(PARA_CLI_PATH) + " " + args + " >" + out_path + " 2>" + err_path;
    const int raw = std::system(cmd.c_str());
    CliResult result;
    result.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    result.out = slurp(out_path);
    result.err = slurp(err_path);
    std::remove(out_path.c_str());
    std::remove(err_path.c_str());
    return result;
}

struct TempFile {
    std::string path;
    explicit TempFile(std::string name) : path(std::move(name)) {}
    ~TempFile() { std::remove(path.c_str()); }
};

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    f << text;
}

// Single-layer base model saved as a bundle, returning the weight used.
Matrix write_single_layer_model(Rng& rng, int d, int k, const std::string& path) {
    ToyModel model;
    model.layers.push_back(ModelLayer{"enc.w1", test::random_matrix(rng, d, k), std::nullopt});
    save_bundle(model_to_bundle(model), path);
    return model.layers[0].w0;
}

} // namespace

TEST_CASE("cli verify output is byte-identical per seed") {
    const CliResult first = run_cli("verify --trials 40 --seed 7");
    const CliResult second = run_cli("verify --trials 40 --seed 7");
    CHECK(first.status == 0);
    CHECK(second.status == 0);
    CHECK(first.out == second.out);
    CHECK(!first.out.empty());
    const json doc = json::parse(first.out);
    CHECK(doc.at("all_passed").get<bool>());
    CHECK(doc.at("suites").size() == 5);
}

TEST_CASE("cli train then reduce recovers the planted reduction") {
    Rng rng(601);
    const int d = 8;
    TempFile model_file("tmp_cli_model.para");
    TempFile targets_file("tmp_cli_targets.csv");
    TempFile adapter_file("tmp_cli_adapter.para");
    TempFile report_file("tmp_cli_adapter.para.report.json");
    TempFile reduced_file("tmp_cli_reduced.para");
    TempFile reduced_again("tmp_cli_reduced2.para");

    const Matrix w0 = write_single_layer_model(rng, d, d, model_file.path);
    const Matrix q_star = test::random_in_space_q(rng, w0, 1);
    const Matrix target_w = reduce_weight(w0, q_star);

    std::ostringstream csv;
    csv << std::setprecision(17);
    for (int j = 0; j < d; ++j) csv << "x_" << j << ",";
    for (int j = 0; j < d; ++j) csv << "y_" << j << (j + 1 < d ? "," : "\n");
    for (int s = 0; s < 6; ++s) {
        const Matrix x = test::random_matrix(rng, d, 1);
        const Matrix y = target_w * x;
        for (int j = 0; j < d; ++j) csv << x(j, 0) << ",";
        for (int j = 0; j < d; ++j) csv << y(j, 0) << (j + 1 < d ? "," : "\n");
    }
    write_text(targets_file.path, csv.str());

    const CliResult trained = run_cli("train --model " + model_file.path + " --targets " +
                                      targets_file.path + " --rank 1 --steps 400 "
                                      "--learning-rate 0.01 --seed 2 --out " + adapter_file.path);
    REQUIRE(trained.status == 0);
    const json train_out = json::parse(trained.out);
    CHECK(train_out.at("final_loss").get<double>() < 1e-6);
    CHECK(train_out.at("final_effective_ranks").at("enc.w1").get<int>() == 1);
    const json report = json::parse(slurp(report_file.path));
    CHECK(report.at("loss_history").size() == 400);

    const CliResult reduced = run_cli("reduce --model " + model_file.path + " --adapter " +
                                      adapter_file.path + " --out " + reduced_file.path);
    REQUIRE(reduced.status == 0);
    const json reduce_out = json::parse(reduced.out);
    CHECK(reduce_out.at("layers")[0].at("changed").get<bool>());

    const ToyModel after = bundle_to_model(load_bundle(reduced_file.path));
    CHECK(frobenius_distance(after.layers[0].w0, target_w) / target_w.frobenius_norm() < 1e-3);

    // file-level idempotence: reducing the reduced model changes nothing
    const CliResult again = run_cli("reduce --model " + reduced_file.path + " --adapter " +
                                    adapter_file.path + " --out " + reduced_again.path);
    REQUIRE(again.status == 0);
    const ToyModel twice = bundle_to_model(load_bundle(reduced_again.path));
    CHECK(max_abs_diff(twice.layers[0].w0, after.layers[0].w0) <= 1e-12);
}

TEST_CASE("cli inspect reports the parameter ratio against LoRA") {
    Rng rng(602);
    TempFile bundle_file("tmp_cli_inspect.para");
    AdapterBundle bundle;
    bundle.kind = BundleKind::para;
    BundleEntry e;
    e.layer_name = "attn.q";
    e.b = test::random_matrix(rng, 1024, 16);
    e.r = 16;
    e.layer_cols = 1024;
    e.base_rank = 1024;
    bundle.entries.push_back(e);
    save_bundle(bundle, bundle_file.path);

    const CliResult inspected = run_cli("inspect " + bundle_file.path);
    REQUIRE(inspected.status == 0);
    const json doc = json::parse(inspected.out);
    CHECK(doc.at("kind").get<std::string>() == "para");
    const json& entry = doc.at("entries")[0];
    CHECK(entry.at("params_para").get<long long>() == 16384);
    CHECK(entry.at("params_lora_equivalent").get<long long>() == 32768);
    CHECK(entry.at("lora_to_para_ratio").get<double>() == 2.0);
    CHECK(entry.at("para_to_lora_ratio").get<double>() == 0.5);
}

TEST_CASE("cli merge reports the removed rank per layer") {
    Rng rng(603);
    TempFile model_file("tmp_cli_merge_model.para");
    TempFile a_file("tmp_cli_merge_a.para");
    TempFile b_file("tmp_cli_merge_b.para");
    TempFile ab_file("tmp_cli_merge_ab.para");

    const Matrix w0 = write_single_layer_model(rng, 8, 6, model_file.path);
    const Matrix basis = test::random_orthonormal(rng, 8, 3);

    auto factor_bundle = [](const Matrix& q) {
        AdapterBundle bundle;
        bundle.kind = BundleKind::para;
        BundleEntry e;
        e.layer_name = "enc.w1";
        e.b = q;
        e.r = q.cols();
        e.finalized = true;
        bundle.entries.push_back(e);
        return bundle;
    };
    Matrix q1(8, 2), q2(8, 2);
    for (int i = 0; i < 8; ++i) {
        q1(i, 0) = basis(i, 0);
        q1(i, 1) = basis(i, 1);
        q2(i, 0) = basis(i, 1); // one shared direction
        q2(i, 1) = basis(i, 2);
    }
    save_bundle(factor_bundle(q1), a_file.path);
    save_bundle(factor_bundle(q2), b_file.path);

    const CliResult merged = run_cli("merge --a " + a_file.path + " --b " + b_file.path +
                                     " --base " + model_file.path + " --out " + ab_file.path);
    REQUIRE(merged.status == 0);
    json doc = json::parse(merged.out);
    CHECK(doc.at("layers")[0].at("effective_rank_removed").get<int>() == 3);

    const AdapterBundle ab = load_bundle(ab_file.path);
    REQUIRE(ab.entries.size() == 1);
    CHECK(ab.entries[0].b.cols() == 3);
    CHECK(orthonormality_defect(ab.entries[0].b) <= 1e-10);
    const Matrix via_bundle = reduce_weight(w0, ab.entries[0].b);
    const Matrix direct = reduce_weight(reduce_weight(w0, q1), q2);
    CHECK(frobenius_distance(via_bundle, direct) / w0.frobenius_norm() <= 1e-9);

    // duplicate subspace: merging a bundle with itself keeps its rank
    const CliResult self_merge = run_cli("merge --a " + a_file.path + " --b " + a_file.path +
                                         " --base " + model_file.path + " --out " + ab_file.path);
    REQUIRE(self_merge.status == 0);
    doc = json::parse(self_merge.out);
    CHECK(doc.at("layers")[0].at("effective_rank_removed").get<int>() == 2);
}

TEST_CASE("cli combine-lora honors the composition order") {
    Rng rng(604);
    TempFile model_file("tmp_cli_cl_model.para");
    TempFile para_file("tmp_cli_cl_para.para");
    TempFile lora_file("tmp_cli_cl_lora.para");
    TempFile out0("tmp_cli_cl_out0.para");
    TempFile out5("tmp_cli_cl_out5.para");

    write_single_layer_model(rng, 5, 4, model_file.path);
    const Matrix b_up = test::random_matrix(rng, 5, 2);
    const Matrix a_down = test::random_matrix(rng, 2, 4);

    AdapterBundle lora;
    lora.kind = BundleKind::lora;
    BundleEntry le;
    le.layer_name = "enc.w1";
    le.b_up = b_up;
    le.a_down = a_down;
    le.alpha = 1.0;
    le.r = 2;
    lora.entries.push_back(le);
    save_bundle(lora, lora_file.path);

    AdapterBundle paras;
    paras.kind = BundleKind::para;
    BundleEntry pe;
    pe.layer_name = "enc.w1";
    pe.b = qr_thin(b_up).q; // spans col(B_up)
    pe.r = 2;
    pe.finalized = true;
    paras.entries.push_back(pe);
    save_bundle(paras, para_file.path);

    const std::string shared = " --para " + para_file.path + " --lora " + lora_file.path +
                               " --base " + model_file.path;
    // lora-first: the reduction wipes the additive term, alpha stops mattering
    REQUIRE(run_cli("combine-lora" + shared + " --order lora-first --alpha 0 --out " + out0.path)
                .status == 0);
    REQUIRE(run_cli("combine-lora" + shared + " --order lora-first --alpha 5 --out " + out5.path)
                .status == 0);
    const Matrix wiped0 = bundle_to_model(load_bundle(out0.path)).layers[0].w0;
    const Matrix wiped5 = bundle_to_model(load_bundle(out5.path)).layers[0].w0;
    CHECK(max_abs_diff(wiped0, wiped5) <= 1e-12);

    // para-first: the additive term survives, alpha shows up in the weights
    REQUIRE(run_cli("combine-lora" + shared + " --order para-first --alpha 0 --out " + out0.path)
                .status == 0);
    REQUIRE(run_cli("combine-lora" + shared + " --order para-first --alpha 5 --out " + out5.path)
                .status == 0);
    const Matrix kept0 = bundle_to_model(load_bundle(out0.path)).layers[0].w0;
    const Matrix kept5 = bundle_to_model(load_bundle(out5.path)).layers[0].w0;
    CHECK(frobenius_distance(kept0, kept5) > 1e-3);

    // lora-form runs and reports no projector step
    const CliResult form =
        run_cli("combine-lora" + shared + " --order lora-form --alpha1 0.5 --alpha2 2 --out " +
                out0.path);
    REQUIRE(form.status == 0);
    const json doc = json::parse(form.out);
    CHECK(doc.at("layers")[0].at("effective_rank_removed").get<int>() == 0);
    CHECK(doc.at("layers")[0].at("method").get<std::string>() == "lora_form");
}

TEST_CASE("cli diversity emits a report") {
    Rng rng(605);
    TempFile model_file("tmp_cli_div_model.para");
    TempFile adapter_file("tmp_cli_div_adapter.para");
    const Matrix w0 = write_single_layer_model(rng, 16, 16, model_file.path);

    AdapterBundle bundle;
    bundle.kind = BundleKind::para;
    BundleEntry e;
    e.layer_name = "enc.w1";
    e.b = test::random_matrix(rng, 16, 2);
    e.r = 2;
    e.base_rank = 16;
    bundle.entries.push_back(e);
    save_bundle(bundle, adapter_file.path);

    const CliResult probed = run_cli("diversity --model " + model_file.path + " --adapter " +
                                     adapter_file.path + " --samples 6 --noise 0.3 --seed 9");
    REQUIRE(probed.status == 0);
    const json doc = json::parse(probed.out);
    CHECK(doc.at("n_samples").get<int>() == 6);
    CHECK(doc.at("nullity_gain").get<int>() == 2);
    CHECK(doc.at("mean_pairwise_ssim").get<double>() <= 1.0);
    CHECK(doc.at("mean_pairwise_ssim").get<double>() >= -1.0);

    const CliResult again = run_cli("diversity --model " + model_file.path + " --adapter " +
                                    adapter_file.path + " --samples 6 --noise 0.3 --seed 9");
    CHECK(again.out == probed.out); // seeded determinism
}

TEST_CASE("cli error handling and exit codes") {
    SUBCASE("unknown flag is a usage error") {
        const CliResult r = run_cli("verify --bogus 3");
        CHECK(r.status == 2);
        CHECK(json::parse(r.err).contains("error"));
        CHECK(r.out.empty());
    }
    SUBCASE("missing subcommand is a usage error") {
        const CliResult r = run_cli("");
        CHECK(r.status == 2);
        CHECK(json::parse(r.err).contains("error"));
    }
    SUBCASE("nonexistent input file is a usage error") {
        const CliResult r = run_cli("inspect no_such_bundle.para");
        CHECK(r.status == 2);
        CHECK(json::parse(r.err).contains("error"));
    }
    SUBCASE("wrong bundle kind is an operational error") {
        Rng rng(606);
        TempFile model_file("tmp_cli_err_model.para");
        write_single_layer_model(rng, 4, 4, model_file.path);
        // pass the model bundle where a para adapter is expected
        const CliResult r = run_cli("reduce --model " + model_file.path + " --adapter " +
                                    model_file.path + " --out tmp_cli_err_out.para");
        CHECK(r.status == 1);
        const json err = json::parse(r.err);
        CHECK(err.at("error").get<std::string>().find("expected para") != std::string::npos);
    }
    SUBCASE("train without required paths fails cleanly") {
        const CliResult r = run_cli("train --rank 2");
        CHECK(r.status == 1);
        CHECK(json::parse(r.err).contains("error"));
    }
    SUBCASE("help exits zero") {
        const CliResult r = run_cli("--help");
        CHECK(r.status == 0);
        CHECK(r.out.find("train") != std::string::npos);
    }
}
