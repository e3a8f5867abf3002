#include "masklab/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace masklab {

Adam::Adam(std::vector<Tensor> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
    if (!(config_.learning_rate >= 0.0)) {
        throw std::invalid_argument("adam: learning_rate must be non-negative");
    }
    if (!(config_.beta1 >= 0.0 && config_.beta1 < 1.0) ||
        !(config_.beta2 >= 0.0 && config_.beta2 < 1.0)) {
        throw std::invalid_argument("adam: betas must lie in [0, 1)");
    }
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Tensor& p : params_) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
    }
}

void Adam::step() {
    std::string missing;
    for (const Tensor& p : params_) {
        if (!p.has_grad()) {
            if (!missing.empty()) missing += ", ";
            missing += p.name().empty() ? "(unnamed)" : p.name();
        }
    }
    if (!missing.empty()) {
        throw std::runtime_error("adam: no gradient for parameter(s) " + missing +
                                 "; run backward before step");
    }
    ++t_;
    double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& data = params_[i].data();
        const auto& g = params_[i].grad();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < data.size(); ++j) {
            m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
            v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
            double mhat = m[j] / bc1;
            double vhat = v[j] / bc2;
            data[j] -= config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon);
        }
    }
}

void Adam::zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
}

}  // namespace masklab
