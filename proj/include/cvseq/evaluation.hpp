#pragma once

#include <string>
#include <vector>

#include "cvseq/dataset.hpp"
#include "cvseq/geo.hpp"
#include "cvseq/model.hpp"

namespace cvseq {

struct FrameResult {
    double pred_u = 0.0, pred_v = 0.0;
    double gt_u = 0.0, gt_v = 0.0;
    double error_m = 0.0;
};

struct SequenceResult {
    std::string seq_id;
    std::vector<FrameResult> frames;
    double sequence_error_m = 0.0;  // mean of per-frame errors
};

struct DatasetReport {
    double mean_error_m = 0.0;
    double median_error_m = 0.0;  // even counts: average of the two middle values
    int count = 0;
    std::vector<SequenceResult> sequences;
};

// per-frame errors in meters at native satellite resolution, averaged
SequenceResult sequence_error(const std::string& seq_id, const std::vector<PixelUV>& pred_px,
                              const std::vector<PixelUV>& gt_px, const SatPatchGeo& patch,
                              double model_scale);

// mean and median over sequence errors; results are sorted by seq_id
DatasetReport aggregate(std::vector<SequenceResult> results);

void write_report_json(const DatasetReport& report, const std::string& path);
void write_report_csv(const DatasetReport& report, const std::string& path);

// Sequence-mode inference over a dataset: hidden state engaged when the model
// carries the temporal module, per-frame otherwise.
DatasetReport evaluate_model(LocalizationModel& model,
                             const std::vector<SequenceSample>& dataset, int model_px);

}  // namespace cvseq
