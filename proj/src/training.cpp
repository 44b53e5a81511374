#include "cvseq/training.hpp"

#include <cmath>
#include <iostream>
#include <stdexcept>

#include <json.hpp>

namespace cvseq {

void LossWeights::validate() const {
    if (lambda_cls < 0.0 || lambda_mse < 0.0)
        throw std::invalid_argument("loss weights must be non-negative");
    if (lambda_cls == 0.0 && lambda_mse == 0.0)
        throw std::invalid_argument("loss weights must not both be zero");
}

Tensor loss_cls(const Tensor& logits, int target_cell) {
    if (target_cell < 0 || target_cell >= logits.numel())
        throw std::invalid_argument("loss_cls: target " + std::to_string(target_cell) +
                                    " out of range [0," + std::to_string(logits.numel()) + ")");
    return sub(logsumexp(logits), pick(logits, target_cell));
}

Tensor loss_mse(const Tensor& pred_offsets, double gt_x, double gt_y) {
    Tensor gt = Tensor::from_data(pred_offsets.shape(), {gt_x, gt_y});
    Tensor diff = sub(pred_offsets, gt);
    return mean(mul(diff, diff));
}

double loss_seq(const std::vector<std::pair<double, double>>& per_step, const LossWeights& w) {
    w.validate();
    if (per_step.empty()) throw std::invalid_argument("loss_seq: empty step list");
    double acc = 0.0;
    for (auto [cls, mse] : per_step) acc += w.lambda_cls * cls + w.lambda_mse * mse;
    return acc / static_cast<double>(per_step.size());
}

Tensor loss_seq_graph(const std::vector<std::pair<Tensor, Tensor>>& per_step,
                      const LossWeights& w) {
    w.validate();
    if (per_step.empty()) throw std::invalid_argument("loss_seq: empty step list");
    Tensor acc;
    for (const auto& [cls, mse] : per_step) {
        Tensor term = add(scale(cls, w.lambda_cls), scale(mse, w.lambda_mse));
        acc = acc.defined() ? add(acc, term) : term;
    }
    return scale(acc, 1.0 / static_cast<double>(per_step.size()));
}

// --- optimizer -----------------------------------------------------------------

AdamW::AdamW(std::vector<Group> groups, AdamWConfig cfg)
    : groups_(std::move(groups)), cfg_(cfg) {
    m_.resize(groups_.size());
    v_.resize(groups_.size());
    for (size_t g = 0; g < groups_.size(); g++) {
        size_t total = 0;
        for (auto& [name, p] : groups_[g].params) total += static_cast<size_t>(p.numel());
        m_[g].assign(total, 0.0);
        v_[g].assign(total, 0.0);
    }
}

void AdamW::step() {
    // validate before mutating anything so a bad batch leaves state intact
    for (auto& group : groups_)
        for (auto& [name, p] : group.params) {
            if (!p.has_grad()) continue;
            for (double g : p.grad())
                if (!std::isfinite(g))
                    throw std::runtime_error("adamw: non-finite gradient in '" + name +
                                             "', step rejected");
        }
    step_count_++;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
    for (size_t gi = 0; gi < groups_.size(); gi++) {
        auto& group = groups_[gi];
        size_t off = 0;
        for (auto& [name, p] : group.params) {
            size_t n = static_cast<size_t>(p.numel());
            if (!p.has_grad()) {
                off += n;
                continue;
            }
            auto& theta = p.data();
            const auto& grad = p.grad();
            for (size_t i = 0; i < n; i++) {
                double g = grad[i];
                double& m = m_[gi][off + i];
                double& v = v_[gi][off + i];
                m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
                v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g * g;
                double mhat = m / bc1;
                double vhat = v / bc2;
                theta[i] -= group.lr * mhat / (std::sqrt(vhat) + cfg_.eps) +
                            group.lr * cfg_.weight_decay * theta[i];
            }
            off += n;
        }
    }
}

void AdamW::zero_grad() {
    for (auto& group : groups_)
        for (auto& [name, p] : group.params) p.zero_grad();
}

double clip_global_norm(const ParamList& params, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, p] : params) {
        if (!p.has_grad()) continue;
        for (double g : p.node()->grad) sq += g * g;
    }
    double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        double s = max_norm / norm;
        for (const auto& [name, p] : params) {
            if (!p.has_grad()) continue;
            for (double& g : p.node()->grad) g *= s;
        }
    }
    return norm;
}

// --- trainers ------------------------------------------------------------------

TrainLogWriter::TrainLogWriter(const std::string& path) : out_(path) {
    if (!out_) throw std::runtime_error("cannot open training log " + path);
}

void TrainLogWriter::append(const StepLog& e) {
    if (!out_.is_open()) return;
    nlohmann::ordered_json j;
    j["step"] = e.step;
    j["loss"] = e.loss;
    j["loss_cls"] = e.loss_cls;
    j["loss_mse"] = e.loss_mse;
    j["lr"] = e.lr;
    out_ << j.dump() << "\n";
}

static AdamW make_optimizer(LocalizationModel& model, const TrainConfig& cfg) {
    std::vector<AdamW::Group> groups;
    ParamList extractor, rest;
    for (auto& [name, p] : model.trainable_parameters(cfg.freeze_extractor)) {
        if (name.rfind("extractor", 0) == 0)
            extractor.emplace_back(name, p);
        else
            rest.emplace_back(name, p);
    }
    if (!extractor.empty()) groups.push_back({std::move(extractor), cfg.lr_extractor});
    groups.push_back({std::move(rest), cfg.lr});
    AdamWConfig ac;
    ac.weight_decay = cfg.weight_decay;
    return AdamW(std::move(groups), ac);
}

TrainSummary train_baseline(LocalizationModel& model, const std::vector<SequenceSample>& dataset,
                            const TrainConfig& cfg, TrainLogWriter* log) {
    if (dataset.empty()) throw std::invalid_argument("train_baseline: empty dataset");
    cfg.loss.validate();
    AdamW opt = make_optimizer(model, cfg);
    ParamList trainable = model.trainable_parameters(cfg.freeze_extractor);
    Rng rng(cfg.seed);
    TrainSummary summary;

    for (int epoch = 0; epoch < cfg.epochs; epoch++) {
        std::vector<int> order(dataset.size());
        for (size_t i = 0; i < order.size(); i++) order[i] = static_cast<int>(i);
        rng.shuffle(order);
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            int bs = static_cast<int>(end - start);
            opt.zero_grad();
            double batch_loss = 0.0, batch_cls = 0.0, batch_mse = 0.0;
            for (size_t bi = start; bi < end; bi++) {
                const SequenceSample& seq = dataset[static_cast<size_t>(order[bi])];
                const SequenceFrame& frame =
                    seq.frames[static_cast<size_t>(rng.uniform_int(
                        0, static_cast<int>(seq.frames.size()) - 1))];
                auto res = model.step(frame.input, seq.sat_input, std::nullopt, 0);
                EncodedTarget target = encode_target(frame.gt_u, frame.gt_v, model.config());
                Tensor lc = loss_cls(res.pred.logits, target.cell);
                Tensor lm = loss_mse(res.pred.offsets, target.off_x, target.off_y);
                Tensor frame_loss =
                    add(scale(lc, cfg.loss.lambda_cls), scale(lm, cfg.loss.lambda_mse));
                batch_cls += lc.value() / bs;
                batch_mse += lm.value() / bs;
                batch_loss += frame_loss.value() / bs;
                scale(frame_loss, 1.0 / bs).backward();
            }
            clip_global_norm(trainable, cfg.clip_norm);
            opt.step();
            summary.steps = opt.steps();
            summary.final_loss = batch_loss;
            if (log) log->append({opt.steps(), batch_loss, batch_cls, batch_mse, cfg.lr});
        }
    }
    return summary;
}

TrainSummary train_sequential(LocalizationModel& model,
                              const std::vector<SequenceSample>& dataset,
                              const TrainConfig& cfg, TrainLogWriter* log) {
    if (dataset.empty()) throw std::invalid_argument("train_sequential: empty dataset");
    cfg.loss.validate();
    TrainConfig seq_cfg = cfg;
    seq_cfg.freeze_extractor = true;  // pre-trained extractors stay fixed in phase two
    AdamW opt = make_optimizer(model, seq_cfg);
    ParamList trainable = model.trainable_parameters(true);
    Rng rng(cfg.seed);
    TrainSummary summary;

    for (int epoch = 0; epoch < cfg.epochs; epoch++) {
        std::vector<int> order(dataset.size());
        for (size_t i = 0; i < order.size(); i++) order[i] = static_cast<int>(i);
        rng.shuffle(order);
        for (int oi : order) {
            const SequenceSample& seq = dataset[static_cast<size_t>(oi)];
            if (static_cast<int>(seq.frames.size()) < cfg.t) {
                if (epoch == 0) {
                    summary.skipped_sequences++;
                    std::cerr << "warning: sequence " << seq.seq_id << " has "
                              << seq.frames.size() << " frames, needs " << cfg.t
                              << "; skipped\n";
                }
                continue;
            }
            opt.zero_grad();
            std::optional<HiddenState> hidden;
            std::vector<std::pair<Tensor, Tensor>> step_losses;
            double sum_cls = 0.0, sum_mse = 0.0;
            for (int t = 0; t < cfg.t; t++) {
                const SequenceFrame& frame = seq.frames[static_cast<size_t>(t)];
                auto res = model.step(frame.input, seq.sat_input, hidden, t);
                hidden = res.hidden;
                EncodedTarget target = encode_target(frame.gt_u, frame.gt_v, model.config());
                Tensor lc = loss_cls(res.pred.logits, target.cell);
                Tensor lm = loss_mse(res.pred.offsets, target.off_x, target.off_y);
                sum_cls += lc.value();
                sum_mse += lm.value();
                step_losses.emplace_back(lc, lm);
            }
            Tensor total = loss_seq_graph(step_losses, cfg.loss);
            double loss_value = total.value();
            total.backward();
            clip_global_norm(trainable, cfg.clip_norm);
            opt.step();
            summary.steps = opt.steps();
            summary.final_loss = loss_value;
            if (log)
                log->append({opt.steps(), loss_value, sum_cls / cfg.t, sum_mse / cfg.t, cfg.lr});
        }
    }
    return summary;
}

}  // namespace cvseq
