#include "cvseq/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "cvseq/io.hpp"
#include "cvseq/rng.hpp"

namespace fs = std::filesystem;

namespace cvseq {

void SegmentationParams::validate() const {
    if (!(spacing_m > 0.0) || !(max_span_m > 0.0))
        throw std::invalid_argument("segmentation: spacing and span must be positive");
    if (min_frames < 2) throw std::invalid_argument("segmentation: min_frames must be >= 2");
}

std::vector<int> resample_track_indices(const std::vector<GeoPoint>& track, double spacing_m) {
    if (track.empty()) throw std::invalid_argument("resample_track: empty track");
    if (!(spacing_m > 0.0)) throw std::invalid_argument("resample_track: non-positive spacing");
    std::vector<int> kept{0};
    double accum = 0.0;
    for (size_t i = 1; i < track.size(); i++) {
        accum += haversine_m(track[i - 1], track[i]);
        if (accum >= spacing_m) {
            kept.push_back(static_cast<int>(i));
            accum = 0.0;
        }
    }
    return kept;
}

std::vector<GeoPoint> resample_track(const std::vector<GeoPoint>& track, double spacing_m) {
    std::vector<GeoPoint> out;
    for (int i : resample_track_indices(track, spacing_m))
        out.push_back(track[static_cast<size_t>(i)]);
    return out;
}

std::vector<std::pair<int, int>> segment(const std::vector<GeoPoint>& samples,
                                         const SegmentationParams& params) {
    params.validate();
    std::vector<std::pair<int, int>> ranges;
    int count = static_cast<int>(samples.size());
    int anchor = 0;
    while (anchor < count) {
        int exceed = -1;
        for (int x = anchor + 1; x < count; x++) {
            if (haversine_m(samples[static_cast<size_t>(anchor)], samples[static_cast<size_t>(x)]) >
                params.max_span_m) {
                exceed = x;
                break;
            }
        }
        if (exceed < 0) {
            // tail of the track: emit the final partial range and stop
            if (count - anchor >= params.min_frames) ranges.emplace_back(anchor, count - 1);
            break;
        }
        int last = exceed - 1;
        if (last - anchor + 1 >= params.min_frames) ranges.emplace_back(anchor, last);
        // midpoint restart; anchors must strictly increase to terminate
        anchor = std::max(anchor + 1, anchor + (last - anchor) / 2);
    }
    return ranges;
}

BuildResult build_samples(const std::vector<std::pair<int, int>>& ranges,
                          const std::vector<FrameRecord>& frames, const PatchPolicy& policy) {
    BuildResult result;
    Rng rng(policy.seed);
    int seq_no = 0;
    for (auto [first, last] : ranges) {
        if (first < 0 || last >= static_cast<int>(frames.size()) || first > last)
            throw std::invalid_argument("build_samples: range [" + std::to_string(first) + "," +
                                        std::to_string(last) + "] outside the frame list");
        int mid = first + (last - first) / 2;
        GeoPoint center = frames[static_cast<size_t>(mid)].gps;
        if (policy.jitter_m > 0.0) {
            auto [dx, dy] = rng.in_disk(policy.jitter_m);
            // displace the satellite center on the local tangent plane
            SatPatchGeo ref = sat_patch(center, 1.0, 4);  // 1 m/px scratch mapping
            center = pixel_to_gps(2.0 + dx, 2.0 - dy, ref);
        }
        SatPatchGeo patch = sat_patch(center, policy.res_mpp, policy.size_px);

        std::string seq_id = frames[static_cast<size_t>(first)].seq_id + "_seg" +
                             std::to_string(seq_no);
        std::vector<FrameRecord> seq_records;
        bool ok = true;
        for (int i = first; i <= last; i++) {
            FrameRecord rec = frames[static_cast<size_t>(i)];
            try {
                (void)gps_to_pixel(rec.gps, patch);
            } catch (const std::out_of_range&) {
                ok = false;
                break;
            }
            rec.seq_id = seq_id;
            rec.frame_index = i - first;
            rec.sat_center = patch.center;
            rec.sat_res_mpp = patch.res_mpp;
            rec.sat_size_px = patch.size_px;
            seq_records.push_back(std::move(rec));
        }
        if (!ok) {
            result.rejected++;
            continue;
        }
        for (auto& r : seq_records) result.records.push_back(std::move(r));
        seq_no++;
    }
    return result;
}

// --- manifests -------------------------------------------------------------------

static const std::set<std::string> kKnownFields = {
    "seq_id",         "frame_index",    "lat",         "lon",
    "heading_deg",    "image_path",     "feature_path", "sat_image_path",
    "sat_feature_path", "sat_center_lat", "sat_center_lon", "sat_res_mpp",
    "sat_size_px"};

static FrameRecord record_from_json(const nlohmann::ordered_json& j, int line_no) {
    auto fail = [line_no](const std::string& msg) {
        throw std::runtime_error("manifest line " + std::to_string(line_no) + ": " + msg);
    };
    FrameRecord rec;
    try {
        rec.seq_id = j.at("seq_id").get<std::string>();
        rec.frame_index = j.at("frame_index").get<int>();
        rec.gps = geo_point(j.at("lat").get<double>(), j.at("lon").get<double>());
    } catch (const nlohmann::json::exception& e) {
        fail(std::string("missing or malformed required field (") + e.what() + ")");
    } catch (const std::invalid_argument& e) {
        fail(e.what());
    }
    if (j.contains("heading_deg") && !j["heading_deg"].is_null())
        rec.heading_deg = j["heading_deg"].get<double>();
    if (j.contains("image_path")) rec.image_path = j["image_path"].get<std::string>();
    if (j.contains("feature_path")) rec.feature_path = j["feature_path"].get<std::string>();
    if (rec.image_path.has_value() == rec.feature_path.has_value())
        fail("exactly one of image_path/feature_path is required");
    if (j.contains("sat_image_path")) rec.sat_image_path = j["sat_image_path"].get<std::string>();
    if (j.contains("sat_feature_path"))
        rec.sat_feature_path = j["sat_feature_path"].get<std::string>();
    if (j.contains("sat_center_lat") != j.contains("sat_center_lon"))
        fail("sat_center_lat/sat_center_lon must come together");
    if (j.contains("sat_center_lat"))
        rec.sat_center = geo_point(j["sat_center_lat"].get<double>(),
                                   j["sat_center_lon"].get<double>());
    if (j.contains("sat_res_mpp")) rec.sat_res_mpp = j["sat_res_mpp"].get<double>();
    if (j.contains("sat_size_px")) rec.sat_size_px = j["sat_size_px"].get<int>();
    rec.extra = nlohmann::ordered_json::object();
    for (auto& [key, value] : j.items())
        if (!kKnownFields.count(key)) rec.extra[key] = value;
    return rec;
}

static nlohmann::ordered_json record_to_json(const FrameRecord& rec) {
    nlohmann::ordered_json j;
    j["seq_id"] = rec.seq_id;
    j["frame_index"] = rec.frame_index;
    j["lat"] = rec.gps.lat;
    j["lon"] = rec.gps.lon;
    if (rec.heading_deg) j["heading_deg"] = *rec.heading_deg;
    if (rec.image_path) j["image_path"] = *rec.image_path;
    if (rec.feature_path) j["feature_path"] = *rec.feature_path;
    if (rec.sat_image_path) j["sat_image_path"] = *rec.sat_image_path;
    if (rec.sat_feature_path) j["sat_feature_path"] = *rec.sat_feature_path;
    if (rec.sat_center) {
        j["sat_center_lat"] = rec.sat_center->lat;
        j["sat_center_lon"] = rec.sat_center->lon;
    }
    if (rec.sat_res_mpp) j["sat_res_mpp"] = *rec.sat_res_mpp;
    if (rec.sat_size_px) j["sat_size_px"] = *rec.sat_size_px;
    for (auto& [key, value] : rec.extra.items()) j[key] = value;
    return j;
}

std::vector<FrameRecord> read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest " + path);
    std::vector<FrameRecord> records;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        line_no++;
        if (line.empty()) continue;
        nlohmann::ordered_json j;
        try {
            j = nlohmann::ordered_json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("manifest line " + std::to_string(line_no) +
                                     ": invalid JSON (" + e.what() + ")");
        }
        records.push_back(record_from_json(j, line_no));
    }
    return records;
}

void write_manifest(const std::vector<FrameRecord>& records, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    for (const auto& rec : records) out << record_to_json(rec).dump() << "\n";
    if (!out) throw std::runtime_error("write failed for " + path);
}

// --- loading -----------------------------------------------------------------------

static Tensor load_input(const std::string& base_dir, const std::string& rel,
                         const char* expected_name) {
    fs::path p = fs::path(rel).is_absolute() ? fs::path(rel) : fs::path(base_dir) / rel;
    if (p.extension() == ".png") return read_png_rgb(p.string());
    auto tensors = load_tensors(p.string());
    for (auto& [name, t] : tensors)
        if (name == expected_name) return t;
    if (tensors.size() == 1) return tensors[0].second;
    throw std::runtime_error("no '" + std::string(expected_name) + "' entry in " + p.string());
}

LoadResult load_sequences(const std::vector<FrameRecord>& records, int model_px,
                          const std::string& base_dir) {
    std::map<std::string, std::vector<FrameRecord>> by_seq;
    for (const auto& r : records) by_seq[r.seq_id].push_back(r);

    LoadResult result;
    for (auto& [seq_id, frames] : by_seq) {
        std::sort(frames.begin(), frames.end(),
                  [](const FrameRecord& a, const FrameRecord& b) {
                      return a.frame_index < b.frame_index;
                  });
        const FrameRecord& head = frames.front();
        if (!head.sat_center || !head.sat_res_mpp || !head.sat_size_px)
            throw std::runtime_error("sequence " + seq_id +
                                     ": satellite patch fields (sat_center_lat/lon, "
                                     "sat_res_mpp, sat_size_px) are required for loading");
        SatPatchGeo patch = sat_patch(*head.sat_center, *head.sat_res_mpp, *head.sat_size_px);
        double to_model = static_cast<double>(model_px) / patch.size_px;

        SequenceSample sample;
        sample.seq_id = seq_id;
        sample.patch = patch;
        if (head.sat_feature_path)
            sample.sat_input = load_input(base_dir, *head.sat_feature_path, "grid");
        else if (head.sat_image_path)
            sample.sat_input = load_input(base_dir, *head.sat_image_path, "grid");
        else
            throw std::runtime_error("sequence " + seq_id +
                                     ": sat_feature_path or sat_image_path required");
        bool ok = true;
        for (const auto& rec : frames) {
            SequenceFrame f;
            f.frame_index = rec.frame_index;
            try {
                auto [u, v] = gps_to_pixel(rec.gps, patch);
                f.gt_u = u * to_model;
                f.gt_v = v * to_model;
            } catch (const std::out_of_range&) {
                ok = false;
                break;
            }
            f.input = rec.feature_path ? load_input(base_dir, *rec.feature_path, "feature")
                                       : load_input(base_dir, *rec.image_path, "feature");
            sample.frames.push_back(std::move(f));
        }
        if (!ok) {
            result.dropped++;
            continue;
        }
        result.sequences.push_back(std::move(sample));
    }
    return result;
}

// --- synthetic ---------------------------------------------------------------------

void SyntheticConfig::validate() const {
    if (grid_n <= 0 || feat_dim <= 0 || t <= 0 || num_sequences < 0)
        throw std::invalid_argument("synthetic: sizes must be positive");
    if (dup_prob < 0.0 || dup_prob > 1.0)
        throw std::invalid_argument("synthetic: dup_prob must be in [0,1]");
    if (!(step_px > 0.0)) throw std::invalid_argument("synthetic: step_px must be positive");
    if (size_px % grid_n != 0)
        throw std::invalid_argument("synthetic: size_px must be divisible by grid_n");
}

SyntheticDataset generate_synthetic(const SyntheticConfig& cfg) {
    cfg.validate();
    SyntheticDataset ds;
    Rng rng(cfg.seed);
    double cell_px = static_cast<double>(cfg.size_px) / cfg.grid_n;
    constexpr double kPi = 3.14159265358979323846;

    for (int s = 0; s < cfg.num_sequences; s++) {
        // fresh landmark world per sequence
        Tensor grid = Tensor::randn({cfg.feat_dim, cfg.grid_n, cfg.grid_n}, rng);

        // constant-step trajectory with mild heading drift, kept inside the patch
        std::vector<std::pair<double, double>> pos;
        bool placed = false;
        for (int attempt = 0; attempt < cfg.max_retries && !placed; attempt++) {
            pos.clear();
            double margin = 0.1 * cfg.size_px;
            double x = rng.uniform(margin, cfg.size_px - margin);
            double y = rng.uniform(margin, cfg.size_px - margin);
            double heading = rng.uniform(0.0, 2.0 * kPi);
            pos.emplace_back(x, y);
            bool inside = true;
            for (int t = 1; t < cfg.t; t++) {
                heading += cfg.heading_noise * rng.normal();
                x += cfg.step_px * std::cos(heading);
                y += cfg.step_px * std::sin(heading);
                if (x < 1.0 || x >= cfg.size_px - 1.0 || y < 1.0 || y >= cfg.size_px - 1.0) {
                    inside = false;
                    break;
                }
                pos.emplace_back(x, y);
            }
            placed = inside;
        }
        if (!placed)
            throw std::runtime_error("synthetic: could not place a trajectory after " +
                                     std::to_string(cfg.max_retries) + " retries");

        auto cell_of = [&](double u, double v) {
            int c = static_cast<int>(u / cell_px);
            int r = static_cast<int>(v / cell_px);
            return std::pair<int, int>{r, c};
        };
        std::set<std::pair<int, int>> trajectory_cells;
        for (auto [u, v] : pos) trajectory_cells.insert(cell_of(u, v));

        // duplicate some visited signatures at far-away distractor cells
        auto& gd = grid.data();
        size_t plane = static_cast<size_t>(cfg.grid_n) * cfg.grid_n;
        for (auto [u, v] : pos) {
            if (rng.uniform() >= cfg.dup_prob) continue;
            auto [r, c] = cell_of(u, v);
            int dr = 0, dc = 0;
            bool found = false;
            for (int tries = 0; tries < 200 && !found; tries++) {
                dr = rng.uniform_int(0, cfg.grid_n - 1);
                dc = rng.uniform_int(0, cfg.grid_n - 1);
                double dist = std::hypot(dr - r, dc - c);
                found = dist >= cfg.min_dup_dist_cells && !trajectory_cells.count({dr, dc});
            }
            if (!found) continue;  // tiny grids may have no eligible distractor
            for (int ch = 0; ch < cfg.feat_dim; ch++)
                gd[ch * plane + static_cast<size_t>(dr) * cfg.grid_n + dc] =
                    gd[ch * plane + static_cast<size_t>(r) * cfg.grid_n + c];
        }

        // georeference: one patch per sequence on a synthetic lat/lon lattice
        GeoPoint center = geo_point(cfg.base_lat + 0.01 * (s % 100),
                                    cfg.base_lon + 0.01 * (s / 100));
        SatPatchGeo patch = sat_patch(center, cfg.res_mpp, cfg.size_px);

        char seq_name[32];
        std::snprintf(seq_name, sizeof(seq_name), "synth_%05d", s);
        std::string sat_file = std::string("features/") + seq_name + "_sat.bin";
        ds.files.emplace_back(sat_file, grid);

        SequenceSample sample;
        sample.seq_id = seq_name;
        sample.patch = patch;
        sample.sat_input = grid;

        for (int t = 0; t < cfg.t; t++) {
            auto [u, v] = pos[static_cast<size_t>(t)];
            auto [r, c] = cell_of(u, v);
            Tensor feat = Tensor::zeros({cfg.feat_dim});
            for (int ch = 0; ch < cfg.feat_dim; ch++)
                feat.data()[static_cast<size_t>(ch)] =
                    gd[ch * plane + static_cast<size_t>(r) * cfg.grid_n + c] +
                    cfg.noise_sigma * rng.normal();
            std::string frame_file = std::string("features/") + seq_name + "_f" +
                                     std::to_string(t) + ".bin";
            ds.files.emplace_back(frame_file, feat);

            double heading_rad = t + 1 < cfg.t
                ? std::atan2(pos[t + 1].second - v, pos[t + 1].first - u)
                : std::atan2(v - pos[t - 1 >= 0 ? t - 1 : 0].second,
                             u - pos[t - 1 >= 0 ? t - 1 : 0].first);

            FrameRecord rec;
            rec.seq_id = seq_name;
            rec.frame_index = t;
            rec.gps = pixel_to_gps(u, v, patch);
            rec.heading_deg = heading_rad * 180.0 / kPi;
            rec.feature_path = frame_file;
            rec.sat_feature_path = sat_file;
            rec.sat_center = patch.center;
            rec.sat_res_mpp = patch.res_mpp;
            rec.sat_size_px = patch.size_px;
            ds.records.push_back(rec);

            SequenceFrame f;
            f.frame_index = t;
            f.input = feat;
            f.gt_u = u;
            f.gt_v = v;
            sample.frames.push_back(std::move(f));
        }
        ds.sequences.push_back(std::move(sample));
    }
    return ds;
}

void write_synthetic(const SyntheticDataset& ds, const std::string& out_dir) {
    fs::create_directories(fs::path(out_dir) / "features");
    for (const auto& [rel, tensor] : ds.files) {
        const char* name = rel.find("_sat") != std::string::npos ? "grid" : "feature";
        save_tensors((fs::path(out_dir) / rel).string(), {{name, tensor}});
    }
    write_manifest(ds.records, (fs::path(out_dir) / "manifest.jsonl").string());
}

}  // namespace cvseq
