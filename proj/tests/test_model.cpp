#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "cvseq/model.hpp"

using namespace cvseq;

static ModelConfig tiny_config() {
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
    return cfg;
}

static LocalizationModel tiny_model(uint64_t seed = 5, bool use_tam = true) {
    ModelConfig cfg = tiny_config();
    auto ex = std::make_shared<IdentityFeatureExtractor>(cfg.c, cfg.n);
    return LocalizationModel(cfg, ex, ex, seed, use_tam);
}

static void zero_all(Tensor t) { std::fill(t.data().begin(), t.data().end(), 0.0); }

TEST_CASE("config validation") {
    ModelConfig cfg = tiny_config();
    cfg.sat_px = 33;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.num_heads = 3;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.extractor = "resnet50";
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    CHECK_NOTHROW(tiny_config().validate());
}

TEST_CASE("default config produces 1024 satellite tokens of width 256") {
    ModelConfig cfg;
    cfg.validate();
    CHECK(cfg.n * cfg.n == 1024);
    CHECK(cfg.d == 256);
    CHECK(cfg.sat_px / cfg.n == 8);
}

TEST_CASE("identity extractor contract") {
    IdentityFeatureExtractor ex(8, 4);
    Rng rng(1);
    Tensor grid = Tensor::randn({8, 4, 4}, rng);
    CHECK(ex.extract_satellite(grid).data() == grid.data());
    CHECK_THROWS_AS(ex.extract_satellite(Tensor::zeros({8, 5, 5})), std::invalid_argument);
    Tensor vec = Tensor::randn({8}, rng);
    CHECK(ex.extract_ground(vec).shape() == Shape{8, 1, 1});
    CHECK_THROWS_AS(ex.extract_ground(Tensor::zeros({7})), std::invalid_argument);
}

TEST_CASE("conv extractor downsamples by the floor-halving chain") {
    Rng rng(2);
    ConvFeatureExtractor ex(3, 16, rng);
    // 270 x 480 maps to 33 x 60, the 1/8 floor chain
    Tensor img = Tensor::zeros({3, 270, 480});
    Tensor feat = ex.extract_ground(img);
    CHECK(feat.shape() == Shape{16, 33, 60});
    CHECK(ConvFeatureExtractor::out_side(270) == 33);
    CHECK(ConvFeatureExtractor::out_side(256) == 32);
}

TEST_CASE("extract_and_project flattens tokens and reduces channels") {
    LocalizationModel model = tiny_model();
    Rng rng(3);
    Tensor ground = Tensor::randn({8}, rng);
    Tensor sat = Tensor::randn({8, 4, 4}, rng);
    auto [gt, st] = model.extract_and_project(ground, sat);
    CHECK(gt.shape() == Shape{1, 8});
    CHECK(st.shape() == Shape{16, 8});
}

TEST_CASE("identity extractor tokens equal input rows under an identity projection") {
    ModelConfig cfg = tiny_config();
    auto ex = std::make_shared<IdentityFeatureExtractor>(cfg.c, cfg.n);
    LocalizationModel model(cfg, ex, ex, 7, true);
    for (auto& [name, p] : model.parameters()) {
        if (name == "projection.weight") {
            std::fill(p.data().begin(), p.data().end(), 0.0);
            for (int i = 0; i < 8; i++) p.data()[static_cast<size_t>(i) * 8 + i] = 1.0;
        }
        if (name == "projection.bias") zero_all(p);
    }
    Rng rng(4);
    Tensor sat = Tensor::randn({8, 4, 4}, rng);
    auto [gt, st] = model.extract_and_project(Tensor::randn({8}, rng), sat);
    // token k of the satellite view is cell (k/4, k%4) across channels
    for (int tok = 0; tok < 16; tok++)
        for (int ch = 0; ch < 8; ch++)
            CHECK(st(tok, ch) == doctest::Approx(sat.at({ch, tok / 4, tok % 4})).epsilon(1e-12));
}

TEST_CASE("fusion output is satellite-shaped for any ground token count") {
    LocalizationModel model = tiny_model();
    Rng rng(5);
    Tensor st = Tensor::randn({16, 8}, rng);
    for (int lg : {1, 3, 9}) {
        Tensor gt = Tensor::randn({lg, 8}, rng);
        CHECK(model.fuse(gt, st).shape() == Shape{16, 8});
    }
}

TEST_CASE("M = 0 degenerates to a single cross-attention block") {
    ModelConfig cfg = tiny_config();
    cfg.m = 0;
    auto ex = std::make_shared<IdentityFeatureExtractor>(cfg.c, cfg.n);
    LocalizationModel model(cfg, ex, ex, 11, true);
    bool has_round_params = false;
    for (auto& [name, p] : model.parameters())
        if (name.find("fusion.round") != std::string::npos) has_round_params = true;
    CHECK_FALSE(has_round_params);
    Rng rng(6);
    CHECK(model.fuse(Tensor::randn({2, 8}, rng), Tensor::randn({16, 8}, rng)).shape() ==
          Shape{16, 8});
}

TEST_CASE("zeroed value and FFN weights make fusion return the projected satellite tokens") {
    LocalizationModel model = tiny_model();
    for (auto& [name, p] : model.parameters()) {
        bool in_fusion = name.rfind("fusion.", 0) == 0;
        bool value_proj = name.find(".wv.") != std::string::npos;
        bool ffn_out = name.find(".ffn.fc2.") != std::string::npos;
        if (in_fusion && (value_proj || ffn_out)) zero_all(p);
    }
    Rng rng(7);
    Tensor gt = Tensor::randn({2, 8}, rng);
    Tensor st = Tensor::randn({16, 8}, rng);
    Tensor fused = model.fuse(gt, st);
    for (int i = 0; i < st.numel(); i++)
        CHECK(fused.data()[static_cast<size_t>(i)] == st.data()[static_cast<size_t>(i)]);
}

TEST_CASE("temporal attention: zeroed module is exactly the identity") {
    Rng rng(8);
    TemporalAttention tam(8, 2, 16, rng);
    tam.zero_for_baseline();
    Tensor fusion = Tensor::randn({16, 8}, rng);
    Tensor hidden = Tensor::randn({16, 8}, rng);
    Tensor pe = sinusoidal_pe_2d(4, 8);
    Tensor out = tam.forward(fusion, hidden, pe);
    for (int i = 0; i < fusion.numel(); i++)
        CHECK(out.data()[static_cast<size_t>(i)] == fusion.data()[static_cast<size_t>(i)]);
}

TEST_CASE("temporal attention is finite and differentiable when fusion == hidden") {
    Rng rng(9);
    TemporalAttention tam(8, 2, 16, rng);
    Tensor fusion = Tensor::randn({16, 8}, rng);
    Tensor pe = sinusoidal_pe_2d(4, 8);
    Tensor out = tam.forward(fusion, fusion, pe);
    CHECK(out.shape() == Shape{16, 8});
    for (double v : out.data()) CHECK(std::isfinite(v));
    double err = grad_check(
        [&](const std::vector<Tensor>& xs) {
            Tensor y = tam.forward(xs[0], xs[0], pe);
            return sum(mul(y, y));
        },
        {fusion});
    CHECK(err < 1e-4);
}

TEST_CASE("temporal attention rejects mismatched shapes") {
    Rng rng(10);
    TemporalAttention tam(8, 2, 16, rng);
    Tensor pe = sinusoidal_pe_2d(4, 8);
    CHECK_THROWS_AS(tam.forward(Tensor::zeros({16, 8}), Tensor::zeros({15, 8}), pe),
                    std::invalid_argument);
}

TEST_CASE("prediction heads") {
    ModelConfig big;
    big.d = 8;
    big.c = 8;
    big.n = 32;
    big.m = 0;
    big.num_heads = 2;
    big.sat_px = 256;
    big.ffn_hidden = 8;
    auto ex = std::make_shared<IdentityFeatureExtractor>(big.c, big.n);
    LocalizationModel model(big, ex, ex, 13, true);
    Rng rng(11);
    Tensor feat = Tensor::randn({1024, 8}, rng);
    GridPrediction pred = model.predict_heads(feat);
    CHECK(pred.logits.shape() == Shape{1024});
    CHECK(pred.offsets.shape() == Shape{1, 2});
    CHECK(pred.offsets(0, 0) > 0.0);
    CHECK(pred.offsets(0, 0) < 1.0);
    CHECK(pred.offsets(0, 1) > 0.0);
    CHECK(pred.offsets(0, 1) < 1.0);
}

TEST_CASE("zero-weight heads give uniform logits and centered offsets") {
    LocalizationModel model = tiny_model();
    for (auto& [name, p] : model.parameters())
        if (name.rfind("head.", 0) == 0) zero_all(p);
    Rng rng(12);
    GridPrediction pred = model.predict_heads(Tensor::randn({16, 8}, rng));
    for (double v : pred.logits.data()) CHECK(v == 0.0);
    CHECK(pred.offsets(0, 0) == 0.5);
    CHECK(pred.offsets(0, 1) == 0.5);
}

TEST_CASE("decode fixtures") {
    ModelConfig cfg;  // N=32, sat_px=256, cell 8 px
    GridPrediction pred;
    pred.logits = Tensor::zeros({1024});
    pred.offsets = Tensor::from_data({1, 2}, {0.5, 0.5});
    auto [u0, v0] = decode(pred, cfg);
    CHECK(u0 == 4.0);  // argmax ties resolve to the lowest index
    CHECK(v0 == 4.0);

    auto [u1, v1] = decode_cell(2 * 32 + 3, 0.25, 0.75, cfg);
    CHECK(u1 == doctest::Approx(26.0).epsilon(1e-12));
    CHECK(v1 == doctest::Approx(22.0).epsilon(1e-12));
}

TEST_CASE("decode clamps out-of-range offsets") {
    ModelConfig cfg;
    GridPrediction pred;
    pred.logits = Tensor::zeros({1024});
    pred.offsets = Tensor::from_data({1, 2}, {1.75, -0.5});
    auto [u, v] = decode(pred, cfg);
    CHECK(u == 8.0);
    CHECK(v == 0.0);
}

TEST_CASE("encode_target fixtures") {
    ModelConfig cfg;
    EncodedTarget t = encode_target(4.0, 4.0, cfg);
    CHECK(t.cell == 0);
    CHECK(t.off_x == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(t.off_y == doctest::Approx(0.5).epsilon(1e-12));

    CHECK(encode_target(255.9, 255.9, cfg).cell == 1023);

    EncodedTarget o = encode_target(0.0, 0.0, cfg);
    CHECK(o.cell == 0);
    CHECK(o.off_x == 0.0);
    CHECK(o.off_y == 0.0);

    CHECK_THROWS_AS(encode_target(256.0, 10.0, cfg), std::out_of_range);
    CHECK_THROWS_AS(encode_target(-0.1, 10.0, cfg), std::out_of_range);
}

TEST_CASE("decode/encode roundtrip on cell and offsets") {
    ModelConfig cfg;
    Rng rng(13);
    for (int trial = 0; trial < 200; trial++) {
        int cell = rng.uniform_int(0, 1023);
        double ox = rng.uniform(0.01, 0.99);
        double oy = rng.uniform(0.01, 0.99);
        auto [u, v] = decode_cell(cell, ox, oy, cfg);
        EncodedTarget t = encode_target(u, v, cfg);
        CHECK(t.cell == cell);
        CHECK(t.off_x == doctest::Approx(ox).epsilon(1e-9));
        CHECK(t.off_y == doctest::Approx(oy).epsilon(1e-9));
    }
}

TEST_CASE("step stores the fusion feature as the hidden state at t = 0") {
    LocalizationModel model = tiny_model();
    Rng rng(14);
    Tensor ground = Tensor::randn({8}, rng);
    Tensor sat = Tensor::randn({8, 4, 4}, rng);
    auto res = model.step(ground, sat, std::nullopt, 0);
    auto [gt, st] = model.extract_and_project(ground, sat);
    Tensor fusion = model.fuse(gt, st);
    REQUIRE(res.hidden.tokens.numel() == fusion.numel());
    for (int i = 0; i < fusion.numel(); i++)
        CHECK(res.hidden.tokens.data()[static_cast<size_t>(i)] ==
              fusion.data()[static_cast<size_t>(i)]);
    CHECK(res.hidden.step_index == 0);
}

TEST_CASE("step returns the exact tensor fed to the heads") {
    LocalizationModel model = tiny_model();
    Rng rng(15);
    Tensor ground = Tensor::randn({8}, rng);
    Tensor sat = Tensor::randn({8, 4, 4}, rng);
    auto r0 = model.step(ground, sat, std::nullopt, 0);
    auto r1 = model.step(ground, sat, r0.hidden, 1);
    GridPrediction direct = model.predict_heads(r1.hidden.tokens);
    for (int i = 0; i < direct.logits.numel(); i++)
        CHECK(direct.logits.data()[static_cast<size_t>(i)] ==
              r1.pred.logits.data()[static_cast<size_t>(i)]);
}

TEST_CASE("step sequencing errors") {
    LocalizationModel model = tiny_model();
    Rng rng(16);
    Tensor ground = Tensor::randn({8}, rng);
    Tensor sat = Tensor::randn({8, 4, 4}, rng);
    auto r0 = model.step(ground, sat, std::nullopt, 0);
    CHECK_THROWS_AS(model.step(ground, sat, r0.hidden, 0), std::logic_error);
    CHECK_THROWS_AS(model.step(ground, sat, std::nullopt, 1), std::logic_error);
    auto r1 = model.step(ground, sat, r0.hidden, 1);
    CHECK_THROWS_AS(model.step(ground, sat, r0.hidden, 2), std::logic_error);
    CHECK_NOTHROW(model.step(ground, sat, r1.hidden, 2));
}

TEST_CASE("temporal module engaged after t = 0 changes repeated-input predictions") {
    LocalizationModel model = tiny_model();
    Rng rng(17);
    Tensor ground = Tensor::randn({8}, rng);
    Tensor sat = Tensor::randn({8, 4, 4}, rng);
    auto r0 = model.step(ground, sat, std::nullopt, 0);
    auto r1 = model.step(ground, sat, r0.hidden, 1);
    bool same = true;
    for (int i = 0; i < r0.pred.logits.numel(); i++)
        if (r0.pred.logits.data()[static_cast<size_t>(i)] !=
            r1.pred.logits.data()[static_cast<size_t>(i)])
            same = false;
    CHECK_FALSE(same);
}

TEST_CASE("zeroed temporal module reproduces the per-frame baseline at every step") {
    LocalizationModel seq_model = tiny_model(21, true);
    LocalizationModel base_model = tiny_model(21, false);  // same seed, no TAM
    seq_model.tam().zero_for_baseline();

    Rng rng(18);
    std::optional<HiddenState> hidden;
    for (int t = 0; t < 3; t++) {
        Tensor ground = Tensor::randn({8}, rng);
        Tensor sat = Tensor::randn({8, 4, 4}, rng);
        auto rs = seq_model.step(ground, sat, hidden, t);
        hidden = rs.hidden;
        auto rb = base_model.step(ground, sat, std::nullopt, 0);
        for (int i = 0; i < rs.pred.logits.numel(); i++)
            CHECK(rs.pred.logits.data()[static_cast<size_t>(i)] ==
                  rb.pred.logits.data()[static_cast<size_t>(i)]);
        CHECK(rs.pred.offsets(0, 0) == rb.pred.offsets(0, 0));
        CHECK(rs.pred.offsets(0, 1) == rb.pred.offsets(0, 1));
    }
}

TEST_CASE("baseline and temporal models share parameter layout apart from the module") {
    LocalizationModel with_tam = tiny_model(4, true);
    LocalizationModel without = tiny_model(4, false);
    ParamList pa = with_tam.parameters();
    ParamList pb = without.parameters();
    size_t tam_params = 0;
    for (auto& [name, p] : pa)
        if (name.rfind("tam.", 0) == 0) tam_params++;
    CHECK(tam_params > 0);
    CHECK(pa.size() == pb.size() + tam_params);
}

TEST_CASE("frozen extractor exclusion") {
    ModelConfig cfg = tiny_config();
    cfg.extractor = "conv";
    Rng r1(1), r2(2);
    auto gex = std::make_shared<ConvFeatureExtractor>(3, cfg.c, r1);
    auto sex = std::make_shared<ConvFeatureExtractor>(3, cfg.c, r2);
    LocalizationModel model(cfg, gex, sex, 3, true);
    size_t all = model.parameters().size();
    size_t frozen = model.trainable_parameters(true).size();
    CHECK(all > frozen);
    for (auto& [name, p] : model.trainable_parameters(true))
        CHECK(name.rfind("extractor", 0) != 0);
}

TEST_CASE("end-to-end gradients on the tiny model match finite differences") {
    // N=4, D=8, M=1, heads=2: the full pipeline through a 2-step recurrence
    LocalizationModel model = tiny_model(31, true);
    Rng rng(19);
    std::vector<Tensor> inputs;
    for (int t = 0; t < 2; t++) inputs.push_back(Tensor::randn({8}, rng));
    Tensor sat = Tensor::randn({8, 4, 4}, rng);

    auto run = [&](const std::vector<Tensor>& xs) {
        std::optional<HiddenState> hidden;
        Tensor acc;
        for (int t = 0; t < 2; t++) {
            auto res = model.step(xs[static_cast<size_t>(t)], xs[2], hidden, t);
            hidden = res.hidden;
            Tensor term = add(pick(softmax(res.pred.logits, 0), 5),
                              sum(mul(res.pred.offsets, res.pred.offsets)));
            acc = acc.defined() ? add(acc, term) : term;
        }
        return acc;
    };
    double err = grad_check(run, {inputs[0], inputs[1], sat});
    CHECK(err < 1e-3);
}
