// Command-line entry point binding segmentation, synthetic data generation,
// two-phase training, evaluation, and the gradient-check suite.

#include <omp.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "cvseq/dataset.hpp"
#include "cvseq/evaluation.hpp"
#include "cvseq/io.hpp"
#include "cvseq/training.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    cvseq::ModelConfig model;
    cvseq::TrainConfig train;
    uint64_t model_seed = 1;

    ordered_json to_json() const {
        ordered_json j;
        j["extractor"] = model.extractor;
        j["d"] = model.d;
        j["c"] = model.c;
        j["n"] = model.n;
        j["m"] = model.m;
        j["heads"] = model.num_heads;
        j["t"] = model.t;
        j["sat_px"] = model.sat_px;
        j["ffn_hidden"] = model.ffn_hidden;
        j["lambda_cls"] = train.loss.lambda_cls;
        j["lambda_mse"] = train.loss.lambda_mse;
        j["lr"] = train.lr;
        j["lr_extractor"] = train.lr_extractor;
        j["weight_decay"] = train.weight_decay;
        j["clip_norm"] = train.clip_norm;
        j["epochs"] = train.epochs;
        j["batch_size"] = train.batch_size;
        j["seed"] = train.seed;
        j["model_seed"] = model_seed;
        return j;
    }
};

RunConfig parse_run_config(const std::string& path) {
    RunConfig cfg;
    cfg.train.t = cfg.model.t;
    if (path.empty()) return cfg;
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    ordered_json j;
    try {
        j = ordered_json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path + ": " + e.what());
    }
    for (auto& [key, value] : j.items()) {
        try {
            if (key == "extractor") cfg.model.extractor = value.get<std::string>();
            else if (key == "d") cfg.model.d = value.get<int>();
            else if (key == "c") cfg.model.c = value.get<int>();
            else if (key == "n") cfg.model.n = value.get<int>();
            else if (key == "m") cfg.model.m = value.get<int>();
            else if (key == "heads") cfg.model.num_heads = value.get<int>();
            else if (key == "t") { cfg.model.t = value.get<int>(); cfg.train.t = cfg.model.t; }
            else if (key == "sat_px") cfg.model.sat_px = value.get<int>();
            else if (key == "ffn_hidden") cfg.model.ffn_hidden = value.get<int>();
            else if (key == "lambda_cls") cfg.train.loss.lambda_cls = value.get<double>();
            else if (key == "lambda_mse") cfg.train.loss.lambda_mse = value.get<double>();
            else if (key == "lr") cfg.train.lr = value.get<double>();
            else if (key == "lr_extractor") cfg.train.lr_extractor = value.get<double>();
            else if (key == "weight_decay") cfg.train.weight_decay = value.get<double>();
            else if (key == "clip_norm") cfg.train.clip_norm = value.get<double>();
            else if (key == "epochs") cfg.train.epochs = value.get<int>();
            else if (key == "batch_size") cfg.train.batch_size = value.get<int>();
            else if (key == "seed") cfg.train.seed = value.get<uint64_t>();
            else if (key == "model_seed") cfg.model_seed = value.get<uint64_t>();
            else throw ConfigError("config file " + path + ": unknown key '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config file " + path + ": bad value for '" + key + "': " +
                              e.what());
        }
    }
    return cfg;
}

void write_resolved_config(const RunConfig& cfg, const fs::path& out_dir) {
    std::ofstream out(out_dir / "resolved_config.json");
    out << cfg.to_json().dump(2) << "\n";
}

cvseq::LocalizationModel build_model(const RunConfig& cfg, bool use_tam) {
    cfg.model.validate();
    std::shared_ptr<cvseq::FeatureExtractor> gex, sex;
    if (cfg.model.extractor == "identity") {
        auto shared = std::make_shared<cvseq::IdentityFeatureExtractor>(cfg.model.c, cfg.model.n);
        gex = shared;
        sex = shared;
    } else {
        cvseq::Rng grng(cfg.model_seed ^ 0x9e3779b97f4a7c15ull);
        cvseq::Rng srng(cfg.model_seed ^ 0xc2b2ae3d27d4eb4full);
        gex = std::make_shared<cvseq::ConvFeatureExtractor>(3, cfg.model.c, grng);
        sex = std::make_shared<cvseq::ConvFeatureExtractor>(3, cfg.model.c, srng);
    }
    return cvseq::LocalizationModel(cfg.model, gex, sex, cfg.model_seed, use_tam);
}

std::vector<cvseq::SequenceSample> load_dataset(const std::string& manifest, int model_px) {
    std::vector<cvseq::FrameRecord> records = cvseq::read_manifest(manifest);
    std::string base_dir = fs::path(manifest).parent_path().string();
    cvseq::LoadResult loaded = cvseq::load_sequences(records, model_px, base_dir);
    if (loaded.dropped > 0)
        std::cerr << "warning: dropped " << loaded.dropped
                  << " sequence(s) with frames outside their patch\n";
    return std::move(loaded.sequences);
}

// --- segment ----------------------------------------------------------------

struct SegmentArgs {
    std::string input, out_dir;
    double spacing_m = 8.0, max_span_m = 50.0;
    int min_frames = 6;
    double res_mpp = 0.114;
    int size_px = 640;
    int model_px = 256;
    double jitter_m = 0.0;
    uint64_t seed = 0;
};

int run_segment(const SegmentArgs& args) {
    fs::create_directories(args.out_dir);
    std::vector<cvseq::FrameRecord> records = cvseq::read_manifest(args.input);

    std::map<std::string, std::vector<cvseq::FrameRecord>> tracks;
    for (auto& r : records) tracks[r.seq_id].push_back(r);

    cvseq::SegmentationParams params;
    params.spacing_m = args.spacing_m;
    params.max_span_m = args.max_span_m;
    params.min_frames = args.min_frames;
    params.validate();

    cvseq::PatchPolicy policy;
    policy.res_mpp = args.res_mpp;
    policy.size_px = args.size_px;
    policy.model_px = args.model_px;
    policy.jitter_m = args.jitter_m;
    policy.seed = args.seed;

    std::vector<cvseq::FrameRecord> out_records;
    int kept = 0, dropped = 0;
    for (auto& [track_id, frames] : tracks) {
        std::sort(frames.begin(), frames.end(),
                  [](const cvseq::FrameRecord& a, const cvseq::FrameRecord& b) {
                      return a.frame_index < b.frame_index;
                  });
        std::vector<cvseq::GeoPoint> gps;
        for (auto& f : frames) gps.push_back(f.gps);
        std::vector<int> sampled = cvseq::resample_track_indices(gps, params.spacing_m);
        std::vector<cvseq::FrameRecord> sampled_frames;
        std::vector<cvseq::GeoPoint> sampled_gps;
        for (int i : sampled) {
            sampled_frames.push_back(frames[static_cast<size_t>(i)]);
            sampled_gps.push_back(gps[static_cast<size_t>(i)]);
        }
        auto ranges = cvseq::segment(sampled_gps, params);
        cvseq::BuildResult built = cvseq::build_samples(ranges, sampled_frames, policy);
        dropped += built.rejected;
        kept += static_cast<int>(ranges.size()) - built.rejected;
        for (auto& r : built.records) out_records.push_back(std::move(r));
    }
    cvseq::write_manifest(out_records, (fs::path(args.out_dir) / "sequences.jsonl").string());
    std::cout << "segment: kept " << kept << " sequence(s), dropped " << dropped
              << " (out-of-patch), input tracks " << tracks.size() << "\n";
    if (kept == 0) std::cerr << "warning: no sequences produced\n";
    return kExitOk;
}

// --- synth ------------------------------------------------------------------

int run_synth(const cvseq::SyntheticConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    fs::create_directories(out_dir);
    cvseq::SyntheticDataset ds = cvseq::generate_synthetic(cfg);
    cvseq::write_synthetic(ds, out_dir);
    ordered_json j;
    j["grid"] = cfg.grid_n;
    j["feat_dim"] = cfg.feat_dim;
    j["seq_len"] = cfg.t;
    j["count"] = cfg.num_sequences;
    j["dup_prob"] = cfg.dup_prob;
    j["noise"] = cfg.noise_sigma;
    j["step_px"] = cfg.step_px;
    j["size_px"] = cfg.size_px;
    j["seed"] = cfg.seed;
    std::ofstream out(fs::path(out_dir) / "resolved_config.json");
    out << j.dump(2) << "\n";
    std::cout << "synth: wrote " << ds.sequences.size() << " sequence(s) to " << out_dir << "\n";
    return kExitOk;
}

// --- train --------------------------------------------------------------------

struct TrainArgs {
    std::string mode, config_path, data, init, out_dir;
    std::optional<uint64_t> seed;
    bool no_pretrain = false;
};

int run_train(const TrainArgs& args) {
    if (args.mode != "baseline" && args.mode != "sequential")
        throw ConfigError("--mode must be baseline or sequential, got '" + args.mode + "'");
    if (args.mode == "sequential" && args.init.empty() && !args.no_pretrain)
        throw ConfigError(
            "sequential training needs --init <baseline checkpoint> (or --no-pretrain to start "
            "from scratch)");
    RunConfig cfg = parse_run_config(args.config_path);
    if (args.seed) cfg.train.seed = *args.seed;
    fs::create_directories(args.out_dir);
    write_resolved_config(cfg, args.out_dir);

    std::vector<cvseq::SequenceSample> data = load_dataset(args.data, cfg.model.sat_px);
    if (data.empty()) {
        std::cerr << "error: dataset is empty\n";
        return kExitData;
    }

    bool use_tam = args.mode == "sequential";
    cvseq::LocalizationModel model = build_model(cfg, use_tam);
    if (!args.init.empty()) {
        cvseq::ParamList params = model.parameters();
        cvseq::load_checkpoint(args.init, params, /*allow_missing=*/use_tam);
    }

    cvseq::TrainLogWriter log((fs::path(args.out_dir) / "train_log.jsonl").string());
    cvseq::TrainSummary summary;
    if (args.mode == "baseline") {
        summary = cvseq::train_baseline(model, data, cfg.train, &log);
    } else {
        summary = cvseq::train_sequential(model, data, cfg.train, &log);
    }
    std::string ckpt = (fs::path(args.out_dir) / "checkpoint.bin").string();
    cvseq::save_checkpoint(ckpt, model.parameters());
    std::cout << "train: " << summary.steps << " step(s), final loss " << summary.final_loss
              << ", checkpoint " << ckpt << "\n";
    if (summary.skipped_sequences > 0)
        std::cout << "train: skipped " << summary.skipped_sequences << " short sequence(s)\n";
    return kExitOk;
}

// --- eval ---------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint, data, out_path, csv_path, config_path;
    bool no_tam = false;
};

int run_eval(const EvalArgs& args) {
    RunConfig cfg = parse_run_config(args.config_path);
    std::vector<cvseq::SequenceSample> data = load_dataset(args.data, cfg.model.sat_px);
    if (data.empty()) {
        std::cerr << "error: dataset is empty\n";
        return kExitData;
    }
    cvseq::LocalizationModel model = build_model(cfg, !args.no_tam);
    cvseq::ParamList params = model.parameters();
    cvseq::load_checkpoint(args.checkpoint, params);

    cvseq::DatasetReport report = cvseq::evaluate_model(model, data, cfg.model.sat_px);
    fs::path out = args.out_path;
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    cvseq::write_report_json(report, out.string());
    if (!args.csv_path.empty()) cvseq::write_report_csv(report, args.csv_path);
    write_resolved_config(cfg, out.has_parent_path() ? out.parent_path() : fs::path("."));
    std::cout << "eval: " << report.count << " sequence(s), mean " << report.mean_error_m
              << " m, median " << report.median_error_m << " m\n";
    return kExitOk;
}

// --- gradcheck -------------------------------------------------------------------

struct CheckOutcome {
    std::string name;
    double err;
    double tol;
};

int run_gradcheck(double tol_override, bool as_json) {
    using namespace cvseq;
    double op_tol = tol_override >= 0.0 ? tol_override : 1e-4;
    double e2e_tol = tol_override >= 0.0 ? tol_override : 1e-3;
    std::vector<CheckOutcome> outcomes;
    Rng rng(2024);

    auto check = [&](const std::string& name, double err, double tol) {
        outcomes.push_back({name, err, tol});
    };

    {
        Tensor a = Tensor::randn({5, 7}, rng);
        Tensor b = Tensor::randn({7, 4}, rng);
        check("op.matmul", grad_check([](const std::vector<Tensor>& xs) {
                  return sum(matmul(xs[0], xs[1]));
              }, {a, b}), op_tol);
        Tensor x = Tensor::randn({4, 6}, rng);
        check("op.softmax", grad_check([](const std::vector<Tensor>& xs) {
                  return pick(reshape(softmax(xs[0], 1), {24}), 9);
              }, {x}), op_tol);
        check("op.elementwise", grad_check([](const std::vector<Tensor>& xs) {
                  Tensor y = mul(sigmoid(xs[0]), cvseq::exp(scale(xs[0], 0.3)));
                  return mean(add(y, relu(xs[0])));
              }, {x}), op_tol);
        Tensor gamma = Tensor::full({6}, 1.2);
        Tensor beta = Tensor::randn({6}, rng, 0.2);
        check("op.layer_norm", grad_check([](const std::vector<Tensor>& xs) {
                  Tensor y = layer_norm(xs[0], xs[1], xs[2]);
                  return sum(mul(y, y));
              }, {x, gamma, beta}), op_tol);
        Tensor img = Tensor::randn({2, 6, 6}, rng);
        Tensor w = Tensor::randn({3, 2, 4, 4}, rng, 0.3);
        Tensor cb = Tensor::randn({3}, rng, 0.1);
        check("op.conv2d", grad_check([](const std::vector<Tensor>& xs) {
                  Tensor y = conv2d(xs[0], xs[1], xs[2], 2, 1);
                  return sum(mul(y, y));
              }, {img, w, cb}), op_tol);
        check("op.structure", grad_check([](const std::vector<Tensor>& xs) {
                  Tensor t = transpose(xs[0]);
                  Tensor c = concat({t, t}, 0);
                  return sum(mul(slice(c, 0, 1, 4), slice(c, 0, 2, 4)));
              }, {x}), op_tol);
    }
    {
        Rng brng(7);
        MultiHeadAttention mha(8, 2, brng);
        Tensor q = Tensor::randn({3, 8}, rng);
        Tensor k = Tensor::randn({4, 8}, rng);
        Tensor v = Tensor::randn({4, 8}, rng);
        check("block.attention", grad_check([&](const std::vector<Tensor>& xs) {
                  Tensor y = mha.forward(xs[0], xs[1], xs[2]);
                  return sum(mul(y, y));
              }, {q, k, v}), op_tol);
        SelfAttentionBlock sab(8, 2, 16, brng);
        check("block.sab", grad_check([&](const std::vector<Tensor>& xs) {
                  Tensor y = sab.forward(xs[0]);
                  return sum(mul(y, y));
              }, {Tensor::randn({4, 8}, rng)}), op_tol);
        CrossAttentionBlock cab(8, 2, 16, brng);
        check("block.cab", grad_check([&](const std::vector<Tensor>& xs) {
                  Tensor y = cab.forward(xs[0], xs[1]);
                  return sum(mul(y, y));
              }, {Tensor::randn({3, 8}, rng), Tensor::randn({5, 8}, rng)}), op_tol);
        TemporalAttention tam(8, 2, 16, brng);
        Tensor pe = sinusoidal_pe_2d(4, 8);
        check("block.tam", grad_check([&](const std::vector<Tensor>& xs) {
                  Tensor y = tam.forward(xs[0], xs[1], pe);
                  return sum(mul(y, y));
              }, {Tensor::randn({16, 8}, rng), Tensor::randn({16, 8}, rng)}), op_tol);
    }
    {
        // end-to-end tiny model: N=4, D=8, M=1, heads=2, T=3
        ModelConfig mc;
        mc.d = 8;
        mc.c = 8;
        mc.n = 4;
        mc.m = 1;
        mc.num_heads = 2;
        mc.t = 3;
        mc.sat_px = 32;
        mc.ffn_hidden = 16;
        mc.extractor = "identity";
        auto ex = std::make_shared<IdentityFeatureExtractor>(mc.c, mc.n);
        LocalizationModel model(mc, ex, ex, 5, true);
        std::vector<Tensor> inputs;
        for (int t = 0; t < 3; t++) inputs.push_back(Tensor::randn({8}, rng));
        inputs.push_back(Tensor::randn({8, 4, 4}, rng));
        LossWeights lw;
        auto run = [&](const std::vector<Tensor>& xs) {
            std::optional<HiddenState> hidden;
            std::vector<std::pair<Tensor, Tensor>> losses;
            for (int t = 0; t < 3; t++) {
                auto res = model.step(xs[static_cast<size_t>(t)], xs[3], hidden, t);
                hidden = res.hidden;
                losses.emplace_back(loss_cls(res.pred.logits, 3 + t),
                                    loss_mse(res.pred.offsets, 0.25, 0.75));
            }
            return loss_seq_graph(losses, lw);
        };
        check("model.end_to_end", grad_check(run, inputs), e2e_tol);
    }

    bool ok = true;
    ordered_json out = ordered_json::array();
    for (const auto& o : outcomes) {
        bool pass = o.err < o.tol;
        ok = ok && pass;
        if (as_json) {
            ordered_json e;
            e["component"] = o.name;
            e["max_rel_err"] = o.err;
            e["tol"] = o.tol;
            e["pass"] = pass;
            out.push_back(e);
        } else {
            std::printf("%-18s max_rel_err %.3e  tol %.1e  %s\n", o.name.c_str(), o.err, o.tol,
                        pass ? "PASS" : "FAIL");
        }
    }
    if (as_json) {
        ordered_json doc;
        doc["components"] = out;
        doc["pass"] = ok;
        std::cout << doc.dump(2) << "\n";
    }
    return ok ? kExitOk : kExitNumerical;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cross-view sequential image localization toolkit"};
    app.require_subcommand(1);
    int threads = 0;
    app.add_option("--threads", threads, "cap worker threads (0 = library default)");

    SegmentArgs seg;
    CLI::App* seg_cmd = app.add_subcommand("segment", "segment GPS tracks into sequences");
    seg_cmd->add_option("--input", seg.input, "input frame manifest (JSON-lines)")->required();
    seg_cmd->add_option("--out", seg.out_dir, "output directory")->required();
    seg_cmd->add_option("--spacing-m", seg.spacing_m, "resampling spacing in meters");
    seg_cmd->add_option("--max-span-m", seg.max_span_m, "max first-to-last distance");
    seg_cmd->add_option("--min-frames", seg.min_frames, "minimum frames per sequence");
    seg_cmd->add_option("--res-mpp", seg.res_mpp, "satellite resolution, m/px");
    seg_cmd->add_option("--size-px", seg.size_px, "satellite native size");
    seg_cmd->add_option("--model-px", seg.model_px, "model input size");
    seg_cmd->add_option("--jitter-m", seg.jitter_m, "satellite center jitter radius");
    seg_cmd->add_option("--seed", seg.seed, "jitter seed");

    cvseq::SyntheticConfig synth;
    std::string synth_out;
    CLI::App* synth_cmd = app.add_subcommand("synth", "generate the synthetic benchmark");
    synth_cmd->add_option("--out", synth_out, "output directory")->required();
    synth_cmd->add_option("--grid", synth.grid_n, "grid side N");
    synth_cmd->add_option("--feat-dim", synth.feat_dim, "signature dimension");
    synth_cmd->add_option("--seq-len", synth.t, "frames per sequence");
    synth_cmd->add_option("--count", synth.num_sequences, "number of sequences");
    synth_cmd->add_option("--dup-prob", synth.dup_prob, "per-frame duplication probability");
    synth_cmd->add_option("--noise", synth.noise_sigma, "observation noise sigma");
    synth_cmd->add_option("--step-px", synth.step_px, "trajectory step in pixels");
    synth_cmd->add_option("--size-px", synth.size_px, "world size in pixels");
    synth_cmd->add_option("--seed", synth.seed, "generator seed");

    TrainArgs train;
    CLI::App* train_cmd = app.add_subcommand("train", "train the localization model");
    train_cmd->add_option("--mode", train.mode, "baseline | sequential")->required();
    train_cmd->add_option("--config", train.config_path, "run config JSON");
    train_cmd->add_option("--data", train.data, "training manifest")->required();
    train_cmd->add_option("--init", train.init, "checkpoint to restore before training");
    train_cmd->add_option("--out", train.out_dir, "output directory")->required();
    uint64_t train_seed = 0;
    CLI::Option* seed_opt = train_cmd->add_option("--seed", train_seed, "training seed override");
    train_cmd->add_flag("--no-pretrain", train.no_pretrain,
                        "allow sequential training without a baseline checkpoint");

    EvalArgs eval;
    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    eval_cmd->add_option("--checkpoint", eval.checkpoint, "model checkpoint")->required();
    eval_cmd->add_option("--data", eval.data, "evaluation manifest")->required();
    eval_cmd->add_option("--out", eval.out_path, "report JSON path")->required();
    eval_cmd->add_option("--csv", eval.csv_path, "also write a CSV report");
    eval_cmd->add_option("--config", eval.config_path, "run config JSON");
    eval_cmd->add_flag("--no-tam", eval.no_tam, "per-frame inference without the temporal module");

    std::string gc_scale = "tiny";
    double gc_tol = -1.0;
    bool gc_json = false;
    CLI::App* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient audit");
    gc_cmd->add_option("--scale", gc_scale, "suite scale (tiny)");
    gc_cmd->add_option("--tol", gc_tol, "override every tolerance");
    gc_cmd->add_flag("--json", gc_json, "machine-readable output");

    CLI11_PARSE(app, argc, argv);
    if (threads > 0) omp_set_num_threads(threads);

    try {
        if (*seg_cmd) return run_segment(seg);
        if (*synth_cmd) return run_synth(synth, synth_out);
        if (*train_cmd) {
            if (*seed_opt) train.seed = train_seed;
            return run_train(train);
        }
        if (*eval_cmd) return run_eval(eval);
        if (*gc_cmd) {
            if (gc_scale != "tiny") throw ConfigError("unknown gradcheck scale '" + gc_scale + "'");
            return run_gradcheck(gc_tol, gc_json);
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::runtime_error& e) {
        std::string msg = e.what();
        std::cerr << "error: " << msg << "\n";
        return msg.find("non-finite") != std::string::npos ? kExitNumerical : kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitConfig;
}
