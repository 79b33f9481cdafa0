#pragma once

#include <iosfwd>
#include <span>

#include "gqkva/vit.hpp"

namespace gqkva {

struct TrainHyper {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
    int64_t batch_size = 32;
    int64_t steps = 2000;
    enum class Schedule { Constant, Cosine };
    Schedule schedule = Schedule::Cosine;
    uint64_t seed = 0;

    void validate() const;
    double lr_at(int64_t step) const;  // step is 1-based
};

struct CrossEntropyResult {
    double loss = 0.0;
    Tensor dlogits;  // (softmax - one_hot) / batch
};

// Mean negative log-softmax at the label indices, with its gradient.
CrossEntropyResult cross_entropy(const Tensor& logits, std::span<const int64_t> labels);

struct AdamWState {
    std::vector<Tensor> m, v;
    int64_t step = 0;
};

// One AdamW update. Decoupled decay (w -= lr*wd*w) is applied before the
// moment term, only where decay[i] is set; moments are bias-corrected with
// the incremented state.step.
void adamw_step(std::span<Tensor* const> weights, std::span<const Tensor* const> grads,
                std::span<const char> decay, AdamWState& state, const TrainHyper& hyper,
                double lr);

struct Dataset {
    Tensor train_images, val_images;  // [n, C, S, S]
    std::vector<int64_t> train_labels, val_labels;
    int64_t classes = 0;
};

// Class-conditional gratings (distinct orientation/frequency per class) with
// per-sample amplitude jitter and pixel noise; round-robin labels, 90/10
// train/validation split, fully determined by the seed.
Dataset synth_dataset(uint64_t seed, int64_t n_samples, int64_t image_size, int64_t classes,
                      int64_t channels = 1);

// Softmax regression on raw pixels; returns validation accuracy. Used to
// establish a dataset is learnable at all.
double linear_probe_accuracy(const Dataset& data, int iterations = 200, double lr = 0.5);

struct StepRecord {
    int64_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double ms_per_batch = 0.0;
};

struct EpochRecord {
    int64_t epoch = 0;
    double val_accuracy = 0.0;
};

struct TrainLog {
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
    double final_val_accuracy = 0.0;
};

class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(int64_t step, const std::string& message)
        : std::runtime_error(message), step_(step) {}
    int64_t step() const { return step_; }

private:
    int64_t step_;
};

// Runs hyper.steps optimizer steps over the dataset, shuffling per epoch
// from the seed. Deterministic in everything but the timing fields. Emits
// line-delimited JSON records to log_stream when given. Stops early once a
// validation accuracy >= stop_at_val_accuracy is observed (disabled when
// negative).
TrainLog train_loop(const ViTConfig& cfg, const TrainHyper& hyper, const Dataset& data,
                    ViTWeights& weights, std::ostream* log_stream = nullptr,
                    double stop_at_val_accuracy = -1.0);

double evaluate_accuracy(const ViTConfig& cfg, const ViTWeights& w, const Tensor& images,
                         std::span<const int64_t> labels, int64_t batch_size);

}  // namespace gqkva
