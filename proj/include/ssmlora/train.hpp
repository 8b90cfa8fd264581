#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssmlora/encoder.hpp"
#include "ssmlora/tasks.hpp"

namespace ssmlora {

// Adam over a fixed set of trainable tensors. Steps are deterministic
// functions of the accumulated gradients.
class Adam {
  public:
    Adam(std::vector<NamedParam> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);

    void step();
    void zero_grad();
    std::size_t num_params() const;

  private:
    std::vector<NamedParam> params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    double lr_;
    double beta1_;
    double beta2_;
    double eps_;
    std::uint64_t t_ = 0;
};

struct TrainOptions {
    double lr = 1e-3;
    std::size_t batch_size = 32;
    std::size_t max_epochs = 50;
    std::size_t patience = 10;
    std::uint64_t seed = 1;
    // Cap on eval examples scored per epoch; 0 means the whole eval set.
    std::size_t eval_subset = 0;
    // Stop once training accuracy reaches this level; 0 disables.
    double stop_train_acc = 0.0;
};

void validate_train_options(const TrainOptions& opts);

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double eval_acc = 0.0;
    double seconds = 0.0;
};

struct Metrics {
    std::vector<EpochRecord> epochs;
    double best_eval_acc = 0.0;
    std::size_t best_epoch = 0;
    double final_train_acc = 0.0;
    std::size_t trainable_params = 0;
    bool early_stopped = false;
    double total_seconds = 0.0;
};

Metrics train(FrozenEncoder& model, const Dataset& train_set, const Dataset& eval_set,
              const TrainOptions& opts);

// Generates both splits from the task spec, then trains.
Metrics train(FrozenEncoder& model, const TaskSpec& task, const TrainOptions& opts);

struct LengthBin {
    std::size_t seq_len = 0;
    std::size_t count = 0;
    double accuracy = 0.0;
};

struct EvalResult {
    double accuracy = 0.0;
    std::size_t count = 0;
    std::vector<LengthBin> by_length;
};

EvalResult evaluate(const FrozenEncoder& model, const Dataset& data,
                    std::size_t batch_size = 64);

struct CoordCheck {
    std::string name;
    std::size_t coord = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

struct GradcheckReport {
    double max_rel_err = 0.0;
    std::size_t coords_checked = 0;
    CoordCheck worst;
    std::vector<CoordCheck> per_matrix;  // worst coordinate of each parameter
};

// Compares reverse-mode gradients of every adapter parameter against central
// finite differences of the batch loss, holding the recurrent hand-offs at
// their recorded values. Dropout is off. Coordinates are sampled uniformly
// without replacement per matrix.
GradcheckReport gradcheck(FrozenEncoder& model, const Dataset& data,
                          std::size_t coords_per_matrix = 64, double delta = 1e-5,
                          std::uint64_t seed = 1, std::size_t batch_size = 4);

}  // namespace ssmlora
