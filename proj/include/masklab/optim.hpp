#pragma once

#include <cstddef>
#include <vector>

#include "masklab/tensor.hpp"

namespace masklab {

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Adam with bias correction. Moment buffers are keyed by parameter order, so
// the parameter list must not change between steps.
class Adam {
  public:
    Adam(std::vector<Tensor> params, AdamConfig config = {});

    // Applies one update from the gradients currently accumulated on the
    // parameters. Throws if any parameter is missing a gradient, naming it.
    void step();

    // Drops accumulated gradients on all parameters.
    void zero_grad();

    std::size_t step_count() const { return t_; }
    const AdamConfig& config() const { return config_; }

  private:
    std::vector<Tensor> params_;
    AdamConfig config_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::size_t t_ = 0;
};

}  // namespace masklab
