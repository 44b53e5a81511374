#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "cvseq/dataset.hpp"
#include "cvseq/model.hpp"

namespace cvseq {

struct LossWeights {
    double lambda_cls = 1.0;
    double lambda_mse = 10.0;
    void validate() const;
};

// categorical cross-entropy over the N^2 grid cells, -log softmax(logits)[target]
Tensor loss_cls(const Tensor& logits, int target_cell);

// mean squared error over the two offset components
Tensor loss_mse(const Tensor& pred_offsets, double gt_x, double gt_y);

// sequence objective: mean over steps of the weighted per-step losses
double loss_seq(const std::vector<std::pair<double, double>>& per_step, const LossWeights& w);
Tensor loss_seq_graph(const std::vector<std::pair<Tensor, Tensor>>& per_step,
                      const LossWeights& w);

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Decoupled weight decay: theta <- theta - lr * mhat/(sqrt(vhat)+eps) - lr * wd * theta
class AdamW {
public:
    struct Group {
        ParamList params;
        double lr = 1e-4;
    };

    AdamW(std::vector<Group> groups, AdamWConfig cfg);

    void step();       // throws on non-finite gradients; the update is rejected
    void zero_grad();
    int64_t steps() const { return step_count_; }

private:
    std::vector<Group> groups_;
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_, v_;  // flattened per group, concatenated
    int64_t step_count_ = 0;
};

// scales grads in place when the global norm exceeds max_norm; returns the norm
double clip_global_norm(const ParamList& params, double max_norm);

struct TrainConfig {
    int epochs = 2;
    int batch_size = 4;
    uint64_t seed = 42;
    double lr = 1e-4;
    double lr_extractor = 1e-5;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    LossWeights loss;
    int t = 6;                      // frames consumed per sequence in sequential mode
    bool freeze_extractor = false;  // forced on in sequential mode
};

struct StepLog {
    int64_t step = 0;
    double loss = 0.0;
    double loss_cls = 0.0;
    double loss_mse = 0.0;
    double lr = 0.0;
};

// JSON-lines, one record per optimizer step
class TrainLogWriter {
public:
    TrainLogWriter() = default;
    explicit TrainLogWriter(const std::string& path);
    void append(const StepLog& entry);

private:
    std::ofstream out_;
};

struct TrainSummary {
    int64_t steps = 0;
    double final_loss = 0.0;
    int skipped_sequences = 0;
};

// Phase one: single random frame per sequence against its satellite patch,
// no temporal module involved, batched loss.
TrainSummary train_baseline(LocalizationModel& model,
                            const std::vector<SequenceSample>& dataset, const TrainConfig& cfg,
                            TrainLogWriter* log = nullptr);

// Phase two: full sequences with the hidden-state recurrence, extractors
// frozen, loss averaged over steps and backpropagated through time.
TrainSummary train_sequential(LocalizationModel& model,
                              const std::vector<SequenceSample>& dataset,
                              const TrainConfig& cfg, TrainLogWriter* log = nullptr);

}  // namespace cvseq
