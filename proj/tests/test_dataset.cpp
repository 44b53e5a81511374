#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "cvseq/dataset.hpp"
#include "cvseq/io.hpp"

using namespace cvseq;
namespace fs = std::filesystem;

static fs::path scratch_dir() {
    fs::path p = fs::temp_directory_path() / "cvseq_dataset_tests";
    fs::create_directories(p);
    return p;
}

static constexpr double kMeterLat = 1.0 / 111194.92664455873;  // degrees per meter

// straight track running north, given per-point spacing in meters
static std::vector<GeoPoint> straight_track(int count, double step_m) {
    std::vector<GeoPoint> t;
    for (int i = 0; i < count; i++) t.push_back(geo_point(40.0 + i * step_m * kMeterLat, -74.0));
    return t;
}

// Independent transcription of the segmentation procedure: walk from the
// anchor point by point until the direct distance exceeds the span, emit
// everything before that point, restart from the midpoint, drop short runs.
static std::vector<std::pair<int, int>> reference_segment(const std::vector<GeoPoint>& s,
                                                          double span, int min_frames) {
    std::vector<std::pair<int, int>> out;
    int n = static_cast<int>(s.size());
    int a = 0;
    while (a < n) {
        int x = a + 1;
        while (x < n && haversine_m(s[static_cast<size_t>(a)], s[static_cast<size_t>(x)]) <= span)
            x++;
        if (x >= n) {
            if (n - a >= min_frames) out.push_back({a, n - 1});
            break;
        }
        int last = x - 1;
        if (last - a + 1 >= min_frames) out.push_back({a, last});
        int next = a + (last - a) / 2;
        a = next > a ? next : a + 1;
    }
    return out;
}

TEST_CASE("resample keeps the first frame and every 8 m after") {
    std::vector<GeoPoint> track = straight_track(40, 1.001);
    std::vector<int> kept = resample_track_indices(track, 8.0);
    CHECK(kept[0] == 0);
    CHECK(kept[1] == 8);
    CHECK(kept[2] == 16);
    CHECK(kept.size() == 5);
    std::vector<GeoPoint> pts = resample_track(track, 8.0);
    for (size_t i = 1; i < pts.size(); i++)
        CHECK(haversine_m(pts[i - 1], pts[i]) == doctest::Approx(8.008).epsilon(1e-3));
}

TEST_CASE("resample of a short track is a single point") {
    std::vector<GeoPoint> track = straight_track(3, 1.0);
    CHECK(resample_track(track, 8.0).size() == 1);
    CHECK_THROWS_AS(resample_track({}, 8.0), std::invalid_argument);
}

TEST_CASE("resampled cumulative spacing is at least the requested spacing") {
    Rng rng(31);
    for (int trial = 0; trial < 20; trial++) {
        std::vector<GeoPoint> track;
        double lat = 40.0, lon = -74.0, heading = rng.uniform(0, 6.28);
        for (int i = 0; i < 120; i++) {
            track.push_back(geo_point(lat, lon));
            heading += 0.12 * rng.normal();
            double step = rng.uniform(0.5, 6.0);
            lat += step * std::cos(heading) * kMeterLat;
            lon += step * std::sin(heading) * kMeterLat / std::cos(40.0 * 3.14159265 / 180.0);
        }
        std::vector<int> kept = resample_track_indices(track, 8.0);
        for (size_t k = 1; k < kept.size(); k++) {
            double cum = 0.0;
            for (int i = kept[k - 1] + 1; i <= kept[k]; i++)
                cum += haversine_m(track[static_cast<size_t>(i - 1)],
                                   track[static_cast<size_t>(i)]);
            CHECK(cum >= 8.0);
        }
    }
}

TEST_CASE("segmentation fixture: 8 m straight line") {
    // s0..s6 span 48 m; s0 -> s7 is 56 m and breaks the 50 m limit
    std::vector<GeoPoint> pts = straight_track(14, 8.01);
    SegmentationParams params;
    std::vector<std::pair<int, int>> ranges = segment(pts, params);
    REQUIRE(!ranges.empty());
    CHECK(ranges[0] == std::pair<int, int>{0, 6});
    REQUIRE(ranges.size() >= 2);
    CHECK(ranges[1].first == 3);  // restart from the midpoint of [0,6]
    for (auto [a, b] : ranges) {
        CHECK(b - a + 1 >= params.min_frames);
        CHECK(haversine_m(pts[static_cast<size_t>(a)], pts[static_cast<size_t>(b)]) <= 50.0);
    }
}

TEST_CASE("five-point tracks yield no sequence") {
    std::vector<GeoPoint> pts = straight_track(5, 8.0);
    CHECK(segment(pts, SegmentationParams{}).empty());
}

TEST_CASE("segmentation matches the reference transcription on random polylines") {
    Rng rng(97);
    SegmentationParams params;
    for (int trial = 0; trial < 300; trial++) {
        std::vector<GeoPoint> pts;
        double lat = 40.0 + rng.uniform(-0.5, 0.5), lon = -74.0 + rng.uniform(-0.5, 0.5);
        double heading = rng.uniform(0, 6.28);
        int n = rng.uniform_int(2, 60);
        for (int i = 0; i < n; i++) {
            pts.push_back(geo_point(lat, lon));
            heading += 0.3 * rng.normal();
            // mostly 8 m hops with occasional long jumps to hit the edge cases
            double step = rng.uniform() < 0.1 ? rng.uniform(40.0, 80.0) : rng.uniform(6.0, 10.0);
            lat += step * std::cos(heading) * kMeterLat;
            lon += step * std::sin(heading) * kMeterLat / std::cos(lat * 3.14159265 / 180.0);
        }
        auto got = segment(pts, params);
        auto want = reference_segment(pts, params.max_span_m, params.min_frames);
        CHECK(got == want);
        int prev_anchor = -1;
        for (auto [a, b] : got) {
            CHECK(b - a + 1 >= params.min_frames);
            CHECK(haversine_m(pts[static_cast<size_t>(a)], pts[static_cast<size_t>(b)]) <=
                  params.max_span_m);
            CHECK(a > prev_anchor);
            prev_anchor = a;
        }
    }
}

static std::vector<FrameRecord> track_records(const std::vector<GeoPoint>& pts) {
    std::vector<FrameRecord> recs;
    for (size_t i = 0; i < pts.size(); i++) {
        FrameRecord r;
        r.seq_id = "drive0";
        r.frame_index = static_cast<int>(i);
        r.gps = pts[i];
        r.feature_path = "features/frame_" + std::to_string(i) + ".bin";
        recs.push_back(r);
    }
    return recs;
}

TEST_CASE("build_samples centers the patch on the midpoint frame") {
    std::vector<GeoPoint> pts = straight_track(7, 8.0);
    PatchPolicy policy;
    policy.res_mpp = 0.2;
    policy.size_px = 640;
    policy.model_px = 256;
    BuildResult built = build_samples({{0, 6}}, track_records(pts), policy);
    CHECK(built.rejected == 0);
    REQUIRE(built.records.size() == 7);
    const FrameRecord& mid = built.records[3];
    CHECK(mid.sat_center->lat == pts[3].lat);
    CHECK(mid.sat_center->lon == pts[3].lon);
    SatPatchGeo patch = sat_patch(*mid.sat_center, *mid.sat_res_mpp, *mid.sat_size_px);
    auto [u, v] = gps_to_pixel(pts[3], patch);
    CHECK(u == doctest::Approx(320.0).epsilon(1e-9));
    CHECK(v == doctest::Approx(320.0).epsilon(1e-9));
}

TEST_CASE("build_samples is deterministic without jitter and bounded with it") {
    std::vector<GeoPoint> pts = straight_track(7, 8.0);
    PatchPolicy policy;
    policy.res_mpp = 0.2;
    policy.size_px = 640;
    BuildResult a = build_samples({{0, 6}}, track_records(pts), policy);
    BuildResult b = build_samples({{0, 6}}, track_records(pts), policy);
    CHECK(a.records[0].sat_center->lat == b.records[0].sat_center->lat);

    policy.jitter_m = 5.0;
    policy.seed = 7;
    BuildResult j = build_samples({{0, 6}}, track_records(pts), policy);
    CHECK(haversine_m(*j.records[0].sat_center, pts[3]) <= 5.0 + 1e-6);
}

TEST_CASE("build_samples rejects sequences with frames outside the patch") {
    std::vector<GeoPoint> pts = straight_track(7, 8.0);
    pts[6] = geo_point(40.01, -74.0);  // ~1.1 km north, far outside a 128 m patch
    PatchPolicy policy;
    policy.res_mpp = 0.2;
    policy.size_px = 640;
    BuildResult built = build_samples({{0, 6}}, track_records(pts), policy);
    CHECK(built.rejected == 1);
    CHECK(built.records.empty());
}

TEST_CASE("manifest write/read is the identity") {
    fs::path dir = scratch_dir();
    std::vector<GeoPoint> pts = straight_track(3, 8.0);
    std::vector<FrameRecord> recs = track_records(pts);
    recs[1].heading_deg = 87.5;
    recs[2].extra["note"] = "hand labelled";
    recs[2].extra["quality"] = 3;
    std::string path = (dir / "manifest.jsonl").string();
    write_manifest(recs, path);
    std::vector<FrameRecord> back = read_manifest(path);
    REQUIRE(back.size() == 3);
    CHECK(back[0].seq_id == "drive0");
    CHECK(back[1].heading_deg.has_value());
    CHECK(*back[1].heading_deg == 87.5);
    CHECK(back[2].extra["note"] == "hand labelled");
    CHECK(back[2].extra["quality"] == 3);
    CHECK(back[0].gps.lat == pts[0].lat);

    // unknown fields survive a rewrite
    std::string path2 = (dir / "manifest2.jsonl").string();
    write_manifest(back, path2);
    std::vector<FrameRecord> again = read_manifest(path2);
    CHECK(again[2].extra["note"] == "hand labelled");
}

TEST_CASE("malformed manifest lines cite their line number") {
    fs::path dir = scratch_dir();
    std::string path = (dir / "broken.jsonl").string();
    {
        std::ofstream out(path);
        out << R"({"seq_id":"a","frame_index":0,"lat":40.0,"lon":-74.0,"feature_path":"f0.bin"})"
            << "\n";
        out << R"({"seq_id":"a","frame_index":1,"lat":40.0,"lon":-74.0,"feature_path":"f1.bin"})"
            << "\n";
        out << "{not json}\n";
    }
    try {
        read_manifest(path);
        FAIL("expected a parse error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
}

TEST_CASE("manifest schema violations") {
    fs::path dir = scratch_dir();
    std::string path = (dir / "schema.jsonl").string();
    {
        std::ofstream out(path);
        out << R"({"seq_id":"a","frame_index":0,"lat":40.0,"lon":-74.0})" << "\n";
    }
    CHECK_THROWS_AS(read_manifest(path), std::runtime_error);
    {
        std::ofstream out(path);
        out << R"({"seq_id":"a","frame_index":0,"lat":40.0,"lon":-74.0,)"
            << R"("feature_path":"f.bin","image_path":"i.png"})" << "\n";
    }
    CHECK_THROWS_AS(read_manifest(path), std::runtime_error);
    {
        std::ofstream out(path);
        out << R"({"seq_id":"a","frame_index":0,"lat":140.0,"lon":-74.0,"feature_path":"f.bin"})"
            << "\n";
    }
    try {
        read_manifest(path);
        FAIL("expected a range error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("line 1") != std::string::npos);
    }
}

TEST_CASE("empty manifests are empty datasets, not errors") {
    fs::path dir = scratch_dir();
    std::string path = (dir / "empty.jsonl").string();
    std::ofstream(path).close();
    CHECK(read_manifest(path).empty());
}

static SyntheticConfig small_synth(uint64_t seed) {
    SyntheticConfig cfg;
    cfg.grid_n = 16;
    cfg.feat_dim = 8;
    cfg.t = 4;
    cfg.num_sequences = 12;
    cfg.dup_prob = 0.0;
    cfg.noise_sigma = 0.0;
    cfg.step_px = 8.0;
    cfg.size_px = 128;
    cfg.seed = seed;
    cfg.min_dup_dist_cells = 5.0;
    return cfg;
}

TEST_CASE("synthetic generation is bit-deterministic per seed") {
    SyntheticDataset a = generate_synthetic(small_synth(42));
    SyntheticDataset b = generate_synthetic(small_synth(42));
    REQUIRE(a.sequences.size() == b.sequences.size());
    for (size_t i = 0; i < a.sequences.size(); i++) {
        CHECK(a.sequences[i].sat_input.data() == b.sequences[i].sat_input.data());
        for (size_t t = 0; t < a.sequences[i].frames.size(); t++) {
            CHECK(a.sequences[i].frames[t].input.data() ==
                  b.sequences[i].frames[t].input.data());
            CHECK(a.sequences[i].frames[t].gt_u == b.sequences[i].frames[t].gt_u);
        }
    }
    SyntheticDataset c = generate_synthetic(small_synth(43));
    CHECK(a.sequences[0].sat_input.data() != c.sequences[0].sat_input.data());
}

// memoryless matcher: pick the cell whose signature is closest to the frame
static int nearest_cell(const Tensor& grid, const Tensor& feat, int n, int c) {
    size_t plane = static_cast<size_t>(n) * n;
    int best = 0;
    double best_d = 1e300;
    for (int cell = 0; cell < n * n; cell++) {
        double d = 0.0;
        for (int ch = 0; ch < c; ch++) {
            double diff = grid.data()[ch * plane + static_cast<size_t>(cell)] -
                          feat.data()[static_cast<size_t>(ch)];
            d += diff * diff;
        }
        if (d < best_d) {
            best_d = d;
            best = cell;
        }
    }
    return best;
}

TEST_CASE("noise-free unduplicated worlds are solved exactly by nearest signature") {
    SyntheticConfig cfg = small_synth(7);
    SyntheticDataset ds = generate_synthetic(cfg);
    double cell_px = static_cast<double>(cfg.size_px) / cfg.grid_n;
    for (const auto& seq : ds.sequences)
        for (const auto& f : seq.frames) {
            int truth = static_cast<int>(f.gt_v / cell_px) * cfg.grid_n +
                        static_cast<int>(f.gt_u / cell_px);
            CHECK(nearest_cell(seq.sat_input, f.input, cfg.grid_n, cfg.feat_dim) == truth);
        }
}

TEST_CASE("fully duplicated worlds defeat memoryless matching about half the time") {
    SyntheticConfig cfg;
    cfg.grid_n = 32;
    cfg.feat_dim = 8;
    cfg.t = 6;
    cfg.num_sequences = 40;
    cfg.dup_prob = 1.0;
    cfg.noise_sigma = 0.0;
    cfg.step_px = 8.0;
    cfg.size_px = 256;
    cfg.seed = 3;
    SyntheticDataset ds = generate_synthetic(cfg);
    double cell_px = 8.0;
    size_t plane = 1024;
    int dup_frames = 0, wrong = 0;
    for (const auto& seq : ds.sequences)
        for (const auto& f : seq.frames) {
            int truth = static_cast<int>(f.gt_v / cell_px) * cfg.grid_n +
                        static_cast<int>(f.gt_u / cell_px);
            // duplicated = another cell carries the exact same signature
            int copies = 0;
            for (int cell = 0; cell < 1024; cell++) {
                bool same = true;
                for (int ch = 0; ch < cfg.feat_dim && same; ch++)
                    same = seq.sat_input.data()[ch * plane + static_cast<size_t>(cell)] ==
                           seq.sat_input.data()[ch * plane + static_cast<size_t>(truth)];
                if (same) copies++;
            }
            if (copies < 2) continue;
            dup_frames++;
            if (nearest_cell(seq.sat_input, f.input, cfg.grid_n, cfg.feat_dim) != truth) wrong++;
        }
    CHECK(dup_frames > 150);
    double rate = static_cast<double>(wrong) / dup_frames;
    CHECK(rate > 0.35);
    CHECK(rate < 0.65);
}

TEST_CASE("trajectories advance by a constant step") {
    SyntheticConfig cfg = small_synth(11);
    SyntheticDataset ds = generate_synthetic(cfg);
    for (const auto& seq : ds.sequences)
        for (size_t t = 1; t < seq.frames.size(); t++) {
            double d = std::hypot(seq.frames[t].gt_u - seq.frames[t - 1].gt_u,
                                  seq.frames[t].gt_v - seq.frames[t - 1].gt_v);
            CHECK(d == doctest::Approx(cfg.step_px).epsilon(1e-9));
        }
}

TEST_CASE("synthetic roundtrip through manifest and feature files") {
    fs::path dir = scratch_dir() / "synth_out";
    fs::remove_all(dir);
    SyntheticConfig cfg = small_synth(13);
    cfg.noise_sigma = 0.1;
    SyntheticDataset ds = generate_synthetic(cfg);
    write_synthetic(ds, dir.string());

    std::vector<FrameRecord> records = read_manifest((dir / "manifest.jsonl").string());
    CHECK(records.size() == ds.records.size());
    LoadResult loaded = load_sequences(records, cfg.size_px, dir.string());
    CHECK(loaded.dropped == 0);
    REQUIRE(loaded.sequences.size() == ds.sequences.size());
    for (size_t i = 0; i < loaded.sequences.size(); i++) {
        const SequenceSample& got = loaded.sequences[i];
        const SequenceSample& want = ds.sequences[i];
        CHECK(got.seq_id == want.seq_id);
        REQUIRE(got.frames.size() == want.frames.size());
        for (size_t t = 0; t < got.frames.size(); t++) {
            // ground truth survives the GPS roundtrip to well under a pixel
            CHECK(got.frames[t].gt_u == doctest::Approx(want.frames[t].gt_u).epsilon(1e-6));
            CHECK(got.frames[t].gt_v == doctest::Approx(want.frames[t].gt_v).epsilon(1e-6));
            // features come back at 32-bit storage precision
            for (int ch = 0; ch < cfg.feat_dim; ch++)
                CHECK(got.frames[t].input.data()[static_cast<size_t>(ch)] ==
                      static_cast<double>(static_cast<float>(
                          want.frames[t].input.data()[static_cast<size_t>(ch)])));
        }
    }
}

TEST_CASE("count zero gives an empty dataset") {
    SyntheticConfig cfg = small_synth(1);
    cfg.num_sequences = 0;
    SyntheticDataset ds = generate_synthetic(cfg);
    CHECK(ds.sequences.empty());
    CHECK(ds.records.empty());
}
