#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "masklab/masking.hpp"
#include "masklab/model.hpp"
#include "masklab/subnetwork.hpp"
#include "masklab/tasks.hpp"

namespace masklab {

struct DiscoveryConfig {
    MaskConfig mask;
    std::string task = "all";  // "add", "mul", or "all"
    std::size_t epochs = 400;
    std::size_t batch_size = 0;  // 0 = full batch
    double learning_rate = 0.05;
    std::uint64_t seed = 0;
    bool probe_mode = false;

    double l0_lambda() const { return mask.l0_lambda; }
    void validate() const;  // throws std::invalid_argument
};

struct CurvePoint {
    std::size_t epoch = 0;
    double task_loss = 0.0;      // mean over the epoch's steps
    double l0_value = 0.0;       // normalized L0 (expected or proxy), end of epoch
    double soft_sparsity = 0.0;  // 1 - mean soft keep probability, end of epoch
};

struct EvalResult {
    double accuracy = 0.0;
    double loss = 0.0;
    std::size_t count = 0;
};

struct DiscoveryResult {
    Subnetwork subnetwork;
    std::vector<CurvePoint> curve;
    double final_task_loss = 0.0;
    double final_l0 = 0.0;
    // Hard-mask accuracy on the training slice, through the probe head when
    // one was trained.
    EvalResult train_eval;
};

/// Freezes-in-place contract: the model must already be frozen; only mask
/// parameters (plus the probe head in probe mode) receive gradient updates.
/// Minimizes answer cross-entropy + l0_lambda * (sum of per-entry penalties)
/// / (total mask entries). Hard-Concrete and Continuous Sparsification only.
DiscoveryResult discover(const Model& model, const TaskDataset& data,
                         const DiscoveryConfig& config);

/// Magnitude baseline: per-layer magnitude masks, no training.
DiscoveryResult baseline_discover(const Model& model, const DiscoveryConfig& config);

/// discover() plus a freshly initialized linear head reading the final
/// hidden state at the answer position, trained jointly with the masks.
DiscoveryResult probe_discover(const Model& model, const TaskDataset& data,
                               const DiscoveryConfig& config);

enum class EvalMode { Full, Subnet, Complement };

std::string eval_mode_name(EvalMode m);
EvalMode parse_eval_mode(const std::string& s);  // throws on unknown name

/// Answer-position argmax accuracy and mean cross-entropy. Full ignores the
/// subnetwork; Subnet applies its binary masks; Complement applies 1 - mask.
/// The subnetwork must carry this model's fingerprint.
EvalResult evaluate(const Model& model, const Subnetwork* subnet, const TaskDataset& data,
                    EvalMode mode);

/// epoch,task_loss,l0_value,soft_sparsity rows.
std::string curve_to_csv(const std::vector<CurvePoint>& curve);

}  // namespace masklab
