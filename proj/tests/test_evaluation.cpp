#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "cvseq/evaluation.hpp"
#include "cvseq/training.hpp"

using namespace cvseq;
namespace fs = std::filesystem;

static fs::path scratch_dir() {
    fs::path p = fs::temp_directory_path() / "cvseq_evaluation_tests";
    fs::create_directories(p);
    return p;
}

// unit scale: one pixel of error is one meter
static SatPatchGeo unit_patch() { return sat_patch(geo_point(40.0, -74.0), 1.0, 256); }

static SequenceResult make_result(const std::string& id, double error_m) {
    SequenceResult r;
    r.seq_id = id;
    r.sequence_error_m = error_m;
    return r;
}

TEST_CASE("sequence_error averages per-frame errors") {
    SatPatchGeo patch = unit_patch();
    // frame errors of 2 m and 4 m
    std::vector<PixelUV> pred{{12, 10}, {30, 24}};
    std::vector<PixelUV> gt{{10, 10}, {30, 20}};
    SequenceResult res = sequence_error("seq_a", pred, gt, patch, 1.0);
    CHECK(res.frames[0].error_m == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(res.frames[1].error_m == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(res.sequence_error_m == doctest::Approx(3.0).epsilon(1e-12));

    SequenceResult perfect = sequence_error("seq_b", gt, gt, patch, 1.0);
    CHECK(perfect.sequence_error_m == 0.0);

    SequenceResult single = sequence_error("seq_c", {{5, 0}}, {{0, 0}}, patch, 1.0);
    CHECK(single.sequence_error_m == doctest::Approx(5.0).epsilon(1e-12));

    CHECK_THROWS_AS(sequence_error("seq_d", pred, {{0, 0}}, patch, 1.0),
                    std::invalid_argument);
    CHECK_THROWS_AS(sequence_error("seq_e", {}, {}, patch, 1.0), std::invalid_argument);
}

TEST_CASE("aggregate fixtures") {
    DatasetReport r1 = aggregate({make_result("a", 1), make_result("b", 2), make_result("c", 9)});
    CHECK(r1.mean_error_m == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(r1.median_error_m == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(r1.count == 3);

    DatasetReport r2 = aggregate({make_result("a", 1), make_result("b", 3)});
    CHECK(r2.mean_error_m == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(r2.median_error_m == doctest::Approx(2.0).epsilon(1e-12));

    DatasetReport r3 = aggregate({make_result("a", 5), make_result("b", 5), make_result("c", 5)});
    CHECK(r3.mean_error_m == r3.median_error_m);

    CHECK_THROWS_AS(aggregate({}), std::invalid_argument);
}

TEST_CASE("aggregate is permutation-invariant") {
    Rng rng(5);
    std::vector<SequenceResult> results;
    for (int i = 0; i < 17; i++)
        results.push_back(make_result("seq_" + std::to_string(i), rng.uniform(0.1, 30.0)));
    DatasetReport base = aggregate(results);
    for (int shuffle = 0; shuffle < 100; shuffle++) {
        rng.shuffle(results);
        DatasetReport r = aggregate(results);
        CHECK(r.mean_error_m == base.mean_error_m);
        CHECK(r.median_error_m == base.median_error_m);
        CHECK(r.sequences[0].seq_id == base.sequences[0].seq_id);  // canonical order
    }
}

TEST_CASE("scaling every error scales mean and median") {
    Rng rng(6);
    std::vector<SequenceResult> results, scaled;
    double c = 2.75;
    for (int i = 0; i < 9; i++) {
        double e = rng.uniform(0.5, 20.0);
        results.push_back(make_result("s" + std::to_string(i), e));
        scaled.push_back(make_result("s" + std::to_string(i), c * e));
    }
    DatasetReport r = aggregate(results);
    DatasetReport rs = aggregate(scaled);
    CHECK(rs.mean_error_m == doctest::Approx(c * r.mean_error_m).epsilon(1e-12));
    CHECK(rs.median_error_m == doctest::Approx(c * r.median_error_m).epsilon(1e-12));
}

TEST_CASE("the reported headline aggregates are representable exactly") {
    // engineered sequence errors reproducing mean 3.29 / median 1.74
    DatasetReport r = aggregate({make_result("a", 1.74), make_result("b", 1.74),
                                 make_result("c", 1.74), make_result("d", 7.94)});
    CHECK(r.mean_error_m == 3.29);
    CHECK(r.median_error_m == 1.74);
}

TEST_CASE("report files roundtrip and are deterministic") {
    fs::path dir = scratch_dir();
    SatPatchGeo patch = unit_patch();
    std::vector<PixelUV> pred{{12.25, 10.5}, {30.0, 24.125}};
    std::vector<PixelUV> gt{{10.0, 10.0}, {30.0, 20.0}};
    DatasetReport report = aggregate({sequence_error("seq_x", pred, gt, patch, 1.0),
                                      make_result("seq_y", 4.5)});

    std::string jpath = (dir / "report.json").string();
    write_report_json(report, jpath);
    std::ifstream in(jpath);
    nlohmann::json j = nlohmann::json::parse(in);
    CHECK(j["mean_error_m"].get<double>() == report.mean_error_m);
    CHECK(j["median_error_m"].get<double>() == report.median_error_m);
    CHECK(j["count"].get<int>() == 2);
    CHECK(j["sequences"].size() == 2);
    CHECK(j["sequences"][0]["seq_id"] == "seq_x");
    CHECK(j["sequences"][0]["frames"][0]["pred_u"].get<double>() == 12.25);
    CHECK(j["sequences"][0]["frames"][1]["gt_v"].get<double>() == 20.0);
    CHECK(j["sequences"][0]["frames"][0]["error_m"].get<double>() ==
          report.sequences[0].frames[0].error_m);

    // csv: header plus one row per sequence
    std::string cpath = (dir / "report.csv").string();
    write_report_csv(report, cpath);
    std::ifstream cin(cpath);
    std::string line;
    int rows = 0;
    std::getline(cin, line);
    CHECK(line == "seq_id,sequence_error_m");
    while (std::getline(cin, line)) rows++;
    CHECK(rows == 2);

    // reruns produce byte-identical files
    std::string jpath2 = (dir / "report2.json").string();
    write_report_json(report, jpath2);
    std::ifstream f1(jpath), f2(jpath2);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
}

TEST_CASE("evaluate_model runs sequence-mode inference over a synthetic set") {
    SyntheticConfig sc;
    sc.grid_n = 4;
    sc.feat_dim = 8;
    sc.t = 3;
    sc.num_sequences = 5;
    sc.dup_prob = 0.0;
    sc.noise_sigma = 0.05;
    sc.step_px = 8.0;
    sc.size_px = 32;
    sc.seed = 21;
    SyntheticDataset ds = generate_synthetic(sc);

    ModelConfig cfg;
    cfg.d = 8;
    cfg.c = 8;
    cfg.n = 4;
    cfg.m = 1;
    cfg.num_heads = 2;
    cfg.t = 3;
    cfg.sat_px = 32;
    cfg.ffn_hidden = 16;
    cfg.extractor = "identity";
    auto ex = std::make_shared<IdentityFeatureExtractor>(cfg.c, cfg.n);
    LocalizationModel model(cfg, ex, ex, 9, true);

    DatasetReport report = evaluate_model(model, ds.sequences, 32);
    CHECK(report.count == 5);
    CHECK(report.sequences[0].frames.size() == 3);
    CHECK(report.mean_error_m >= 0.0);
    // patch is 32 px at 1 m/px: no error can exceed the diagonal
    CHECK(report.mean_error_m <= 32.0 * 1.4143);

    // repeated evaluation is deterministic
    LocalizationModel base(cfg, ex, ex, 9, false);
    DatasetReport r1 = evaluate_model(base, ds.sequences, 32);
    DatasetReport r2 = evaluate_model(base, ds.sequences, 32);
    CHECK(r1.mean_error_m == r2.mean_error_m);
}
