#include "cvseq/evaluation.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace cvseq {

SequenceResult sequence_error(const std::string& seq_id, const std::vector<PixelUV>& pred_px,
                              const std::vector<PixelUV>& gt_px, const SatPatchGeo& patch,
                              double model_scale) {
    if (pred_px.size() != gt_px.size())
        throw std::invalid_argument("sequence_error: " + std::to_string(pred_px.size()) +
                                    " predictions vs " + std::to_string(gt_px.size()) +
                                    " ground-truth pixels");
    if (pred_px.empty()) throw std::invalid_argument("sequence_error: empty sequence");
    SequenceResult res;
    res.seq_id = seq_id;
    double total = 0.0;
    for (size_t i = 0; i < pred_px.size(); i++) {
        FrameResult fr;
        fr.pred_u = pred_px[i].first;
        fr.pred_v = pred_px[i].second;
        fr.gt_u = gt_px[i].first;
        fr.gt_v = gt_px[i].second;
        fr.error_m = pixel_error_to_meters(pred_px[i], gt_px[i], patch, model_scale);
        total += fr.error_m;
        res.frames.push_back(fr);
    }
    res.sequence_error_m = total / static_cast<double>(pred_px.size());
    return res;
}

DatasetReport aggregate(std::vector<SequenceResult> results) {
    if (results.empty()) throw std::invalid_argument("aggregate: no sequence results");
    std::sort(results.begin(), results.end(),
              [](const SequenceResult& a, const SequenceResult& b) { return a.seq_id < b.seq_id; });
    DatasetReport report;
    report.count = static_cast<int>(results.size());
    std::vector<double> errors;
    errors.reserve(results.size());
    double total = 0.0;
    for (const auto& r : results) {
        errors.push_back(r.sequence_error_m);
        total += r.sequence_error_m;
    }
    report.mean_error_m = total / static_cast<double>(errors.size());
    std::sort(errors.begin(), errors.end());
    size_t n = errors.size();
    report.median_error_m =
        n % 2 == 1 ? errors[n / 2] : (errors[n / 2 - 1] + errors[n / 2]) / 2.0;
    report.sequences = std::move(results);
    return report;
}

static nlohmann::ordered_json report_to_json(const DatasetReport& report) {
    nlohmann::ordered_json j;
    j["mean_error_m"] = report.mean_error_m;
    j["median_error_m"] = report.median_error_m;
    j["count"] = report.count;
    j["sequences"] = nlohmann::ordered_json::array();
    for (const auto& seq : report.sequences) {
        nlohmann::ordered_json js;
        js["seq_id"] = seq.seq_id;
        js["sequence_error_m"] = seq.sequence_error_m;
        js["frames"] = nlohmann::ordered_json::array();
        for (const auto& f : seq.frames) {
            nlohmann::ordered_json jf;
            jf["pred_u"] = f.pred_u;
            jf["pred_v"] = f.pred_v;
            jf["gt_u"] = f.gt_u;
            jf["gt_v"] = f.gt_v;
            jf["error_m"] = f.error_m;
            js["frames"].push_back(jf);
        }
        j["sequences"].push_back(js);
    }
    return j;
}

void write_report_json(const DatasetReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << report_to_json(report).dump(2) << "\n";
    if (!out) throw std::runtime_error("write failed for " + path);
}

void write_report_csv(const DatasetReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << "seq_id,sequence_error_m\n";
    out.precision(17);
    for (const auto& seq : report.sequences)
        out << seq.seq_id << "," << seq.sequence_error_m << "\n";
    if (!out) throw std::runtime_error("write failed for " + path);
}

DatasetReport evaluate_model(LocalizationModel& model, const std::vector<SequenceSample>& dataset,
                             int model_px) {
    if (dataset.empty()) throw std::invalid_argument("evaluate_model: empty dataset");
    std::vector<SequenceResult> results;
    for (const auto& seq : dataset) {
        std::vector<PixelUV> preds, gts;
        std::optional<HiddenState> hidden;
        for (size_t t = 0; t < seq.frames.size(); t++) {
            const SequenceFrame& frame = seq.frames[t];
            auto res = model.step(frame.input, seq.sat_input, hidden,
                                  model.use_tam() ? static_cast<int>(t) : 0);
            if (model.use_tam()) {
                // keep the values, drop the tape: inference needs no gradient history
                Tensor detached = Tensor::from_data(res.hidden.tokens.shape(),
                                                    res.hidden.tokens.data());
                hidden = HiddenState{detached, res.hidden.step_index};
            }
            preds.push_back(decode(res.pred, model.config()));
            gts.push_back({frame.gt_u, frame.gt_v});
        }
        double model_scale = static_cast<double>(seq.patch.size_px) / model_px;
        results.push_back(sequence_error(seq.seq_id, preds, gts, seq.patch, model_scale));
    }
    return aggregate(std::move(results));
}

}  // namespace cvseq
