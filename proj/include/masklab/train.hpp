#pragma once

#include <cstdint>
#include <vector>

#include "masklab/model.hpp"
#include "masklab/tasks.hpp"

namespace masklab {

struct BaseTrainConfig {
    std::size_t epochs = 2000;
    std::size_t batch_size = 0;  // 0 = full batch
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    // Stop once train accuracy reaches this (checked every eval_every epochs);
    // > 1 disables early stopping.
    double target_train_accuracy = 1.0;
    std::size_t eval_every = 10;
};

struct TrainEpochStat {
    std::size_t epoch = 0;
    double loss = 0.0;
    double train_accuracy = -1.0;  // -1 between accuracy checks
};

struct BaseTrainResult {
    std::vector<TrainEpochStat> curve;
    std::size_t epochs_run = 0;
    bool diverged = false;  // hit a non-finite loss; model restored to the last finite epoch
    double final_train_loss = 0.0;
    double final_test_loss = 0.0;
    double final_train_accuracy = 0.0;
    double final_test_accuracy = 0.0;
    double train_accuracy_add = 0.0;
    double train_accuracy_mul = 0.0;
    double test_accuracy_add = 0.0;
    double test_accuracy_mul = 0.0;
};

/// Trains every model weight on the multitask dataset with answer-position
/// cross-entropy. Mutates the model in place; on divergence the parameters
/// roll back to the last epoch with a finite loss.
BaseTrainResult train_base(Model& model, const TaskDataset& train, const TaskDataset& test,
                           const BaseTrainConfig& config);

/// Argmax accuracy and mean cross-entropy at the answer positions, without
/// any mask. Pure read of the model.
std::pair<double, double> accuracy_and_loss(const Model& model, const TaskDataset& data);

}  // namespace masklab
