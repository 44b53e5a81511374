#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cvseq/geo.hpp"
#include "cvseq/tensor.hpp"

namespace cvseq {

// One manifest line. Exactly one of image_path/feature_path must be set.
struct FrameRecord {
    std::string seq_id;
    int frame_index = 0;
    GeoPoint gps;
    std::optional<double> heading_deg;
    std::optional<std::string> image_path;
    std::optional<std::string> feature_path;
    std::optional<std::string> sat_image_path;
    std::optional<std::string> sat_feature_path;
    std::optional<GeoPoint> sat_center;
    std::optional<double> sat_res_mpp;
    std::optional<int> sat_size_px;
    nlohmann::ordered_json extra;  // unknown fields, preserved on rewrite
};

struct SegmentationParams {
    double spacing_m = 8.0;
    double max_span_m = 50.0;
    int min_frames = 6;
    void validate() const;
};

// Greedy arc-length resampling: emit the first point, then every first track
// point at cumulative distance >= spacing from the last emitted one. Points
// snap to existing frames; nothing is interpolated.
std::vector<GeoPoint> resample_track(const std::vector<GeoPoint>& track, double spacing_m);
// index variant for callers that need to know which frames were kept
std::vector<int> resample_track_indices(const std::vector<GeoPoint>& track, double spacing_m);

// Inclusive index ranges over resampled points: from each anchor, grow until
// the direct distance first exceeds max_span_m, emit everything before that
// point, restart from the midpoint. Ranges shorter than min_frames are
// dropped (the anchor still advances).
std::vector<std::pair<int, int>> segment(const std::vector<GeoPoint>& samples,
                                         const SegmentationParams& params);

struct PatchPolicy {
    double res_mpp = 0.114;
    int size_px = 640;
    int model_px = 256;
    double jitter_m = 0.0;  // uniform-in-disk satellite center offset
    uint64_t seed = 0;
};

// A training/evaluation sequence with inputs materialized as tensors.
struct SequenceFrame {
    int frame_index = 0;
    Tensor input;          // ground image [3,H,W] or feature vector [C]
    double gt_u = 0.0;     // ground truth at model scale
    double gt_v = 0.0;
};

struct SequenceSample {
    std::string seq_id;
    SatPatchGeo patch;
    Tensor sat_input;  // satellite image [3,S,S] or feature grid [C,N,N]
    std::vector<SequenceFrame> frames;
};

// Applies segmentation ranges to frame records: per range, one patch centered
// on the midpoint frame (plus optional jitter), ground-truth pixels at model
// scale via the tangent-plane mapping. Sequences with any frame outside the
// patch are rejected and counted.
struct BuildResult {
    std::vector<FrameRecord> records;  // records of kept sequences, patch fields set
    int rejected = 0;
};
BuildResult build_samples(const std::vector<std::pair<int, int>>& ranges,
                          const std::vector<FrameRecord>& frames, const PatchPolicy& policy);

// --- manifests -------------------------------------------------------------------

std::vector<FrameRecord> read_manifest(const std::string& path);
void write_manifest(const std::vector<FrameRecord>& records, const std::string& path);

// Groups records by seq_id (canonical order: seq_id, then frame_index), loads
// inputs, and recomputes ground-truth pixels from GPS against the patch.
// Sequences with frames that miss the patch are dropped and counted.
struct LoadResult {
    std::vector<SequenceSample> sequences;
    int dropped = 0;
};
LoadResult load_sequences(const std::vector<FrameRecord>& records, int model_px,
                          const std::string& base_dir);

// --- synthetic benchmark -----------------------------------------------------------

struct SyntheticConfig {
    int grid_n = 32;
    int feat_dim = 16;
    int t = 6;
    int num_sequences = 200;
    double dup_prob = 0.3;
    double noise_sigma = 0.1;
    double step_px = 8.0;
    uint64_t seed = 42;
    int size_px = 256;        // native == model scale for the synthetic world
    double res_mpp = 1.0;
    double min_dup_dist_cells = 10.0;
    double heading_noise = 0.05;
    int max_retries = 100;
    double base_lat = 40.0;
    double base_lon = -74.0;
    void validate() const;
};

struct SyntheticDataset {
    std::vector<SequenceSample> sequences;
    std::vector<FrameRecord> records;              // manifest rows (feature paths relative)
    std::vector<std::pair<std::string, Tensor>> files;  // feature files to write, path -> tensor
};

// Each sequence gets its own world: an N x N grid of Gaussian landmark
// signatures; a constant-step trajectory with small heading noise; per frame,
// the true cell's signature plus observation noise. With probability dup_prob
// a frame's cell signature is duplicated at a distractor cell far away, which
// no memoryless matcher can resolve.
SyntheticDataset generate_synthetic(const SyntheticConfig& cfg);

// writes manifest.jsonl plus feature files under <out_dir>/features/
void write_synthetic(const SyntheticDataset& ds, const std::string& out_dir);

}  // namespace cvseq
