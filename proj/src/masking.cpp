#include "masklab/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace masklab {

std::string strategy_name(MaskStrategy s) {
    switch (s) {
        case MaskStrategy::HardConcrete: return "hard_concrete";
        case MaskStrategy::ContinuousSparsification: return "continuous_sparsification";
        case MaskStrategy::Magnitude: return "magnitude";
    }
    return "?";
}

std::string granularity_name(Granularity g) {
    return g == Granularity::Weight ? "weight" : "neuron";
}

MaskStrategy parse_strategy(const std::string& s) {
    if (s == "hard_concrete") return MaskStrategy::HardConcrete;
    if (s == "continuous_sparsification") return MaskStrategy::ContinuousSparsification;
    if (s == "magnitude") return MaskStrategy::Magnitude;
    throw std::invalid_argument(
        "unknown strategy '" + s +
        "' (expected hard_concrete, continuous_sparsification, or magnitude)");
}

Granularity parse_granularity(const std::string& s) {
    if (s == "weight") return Granularity::Weight;
    if (s == "neuron") return Granularity::Neuron;
    throw std::invalid_argument("unknown granularity '" + s + "' (expected weight or neuron)");
}

void MaskConfig::validate() const {
    if (!(hc_gamma < 0.0 && hc_zeta > 1.0)) {
        throw std::invalid_argument("mask config: need hc_gamma < 0 < 1 < hc_zeta");
    }
    if (!(hc_beta > 0.0)) throw std::invalid_argument("mask config: hc_beta must be > 0");
    if (!(cs_beta_final >= 1.0)) {
        throw std::invalid_argument("mask config: cs_beta_final must be >= 1");
    }
    if (strategy == MaskStrategy::Magnitude) {
        if (prune_fraction < 0.0) {
            throw std::invalid_argument("mask config: magnitude strategy requires prune_fraction");
        }
        if (prune_fraction > 1.0) {
            throw std::invalid_argument("mask config: prune_fraction must lie in [0, 1]");
        }
    }
    if (l0_lambda < 0.0) throw std::invalid_argument("mask config: l0_lambda must be >= 0");
}

double AnnealState::current_beta() const {
    if (total == 0) throw std::invalid_argument("anneal: total steps must be >= 1");
    double frac = static_cast<double>(std::min(step, total)) / static_cast<double>(total);
    return std::pow(beta_final, frac);
}

void AnnealState::advance() {
    if (step < total) ++step;
}

MaskedLayer make_masked_layer(const Tensor& w, const Tensor& b, const MaskConfig& config) {
    config.validate();
    if (w.shape().size() != 2) {
        throw std::invalid_argument("masked layer: weight must be 2-D, got " +
                                    shape_str(w.shape()));
    }
    if (b.defined() && (b.shape().size() != 1 || b.dim(0) != w.dim(0))) {
        throw std::invalid_argument("masked layer: bias " + shape_str(b.shape()) +
                                    " does not match weight " + shape_str(w.shape()));
    }
    MaskedLayer layer;
    layer.base_weight = w;
    layer.base_bias = b;
    layer.config = config;
    std::vector<std::size_t> mshape =
        config.granularity == Granularity::Weight ? w.shape() : std::vector<std::size_t>{w.dim(0)};
    switch (config.strategy) {
        case MaskStrategy::HardConcrete:
            layer.mask_params = Tensor::full(mshape, config.hc_init_logalpha, true);
            break;
        case MaskStrategy::ContinuousSparsification:
            layer.mask_params = Tensor::full(mshape, config.cs_init_s, true);
            break;
        case MaskStrategy::Magnitude:
            layer.mask_params = magnitude_mask(w, config.prune_fraction, config.granularity);
            break;
    }
    std::string base = w.name().empty() ? "layer" : w.name();
    layer.mask_params.set_name(base + ".mask");
    return layer;
}

Tensor hc_mask_from_uniform(const Tensor& log_alpha, const MaskConfig& config, const Tensor& u) {
    config.validate();
    if (u.shape() != log_alpha.shape()) {
        throw std::invalid_argument("hc mask: uniform draws " + shape_str(u.shape()) +
                                    " do not match parameters " + shape_str(log_alpha.shape()));
    }
    Tensor logit_u = sub(log(u), log(sub(Tensor::scalar(1.0), u)));
    Tensor s = sigmoid(mul(add(logit_u, log_alpha), 1.0 / config.hc_beta));
    Tensor stretched = add(mul(s, config.hc_zeta - config.hc_gamma), config.hc_gamma);
    return clamp(stretched, 0.0, 1.0);
}

Tensor hc_sample_mask(const Tensor& log_alpha, const MaskConfig& config, Rng& rng) {
    constexpr double eps = 1e-12;
    std::vector<double> draws(log_alpha.size());
    for (double& d : draws) d = std::min(std::max(rng.uniform(), eps), 1.0 - eps);
    Tensor u = Tensor::from_data(log_alpha.shape(), std::move(draws), false);
    return hc_mask_from_uniform(log_alpha, config, u);
}

Tensor hc_expected_l0(const Tensor& log_alpha, const MaskConfig& config) {
    config.validate();
    double shift = -config.hc_beta * std::log(-config.hc_gamma / config.hc_zeta);
    return sum(sigmoid(add(log_alpha, shift)));
}

Tensor hc_eval_mask(const Tensor& log_alpha, const MaskConfig& config) {
    config.validate();
    std::vector<double> out(log_alpha.size());
    const auto& a = log_alpha.data();
    double span = config.hc_zeta - config.hc_gamma;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double sig = 1.0 / (1.0 + std::exp(-a[i]));
        double zhat = std::clamp(sig * span + config.hc_gamma, 0.0, 1.0);
        out[i] = zhat >= 0.5 ? 1.0 : 0.0;
    }
    return Tensor::from_data(log_alpha.shape(), std::move(out), false);
}

Tensor cs_soft_mask(const Tensor& s, const AnnealState& anneal) {
    return sigmoid(mul(s, anneal.current_beta()));
}

Tensor cs_final_mask(const Tensor& s) {
    std::vector<double> out(s.size());
    const auto& sv = s.data();
    for (std::size_t i = 0; i < sv.size(); ++i) out[i] = sv[i] > 0.0 ? 1.0 : 0.0;
    return Tensor::from_data(s.shape(), std::move(out), false);
}

Tensor magnitude_mask(const Tensor& base_weights, double prune_fraction, Granularity granularity) {
    if (!(prune_fraction >= 0.0 && prune_fraction <= 1.0)) {
        throw std::invalid_argument("magnitude mask: prune_fraction must lie in [0, 1]");
    }
    if (base_weights.shape().size() != 2) {
        throw std::invalid_argument("magnitude mask: weight must be 2-D, got " +
                                    shape_str(base_weights.shape()));
    }
    const auto& wv = base_weights.data();
    std::size_t rows = base_weights.dim(0), cols = base_weights.dim(1);

    auto prune_smallest = [prune_fraction](const std::vector<double>& scores) {
        std::size_t n = scores.size();
        // The 1e-9 nudge absorbs representation error in fraction*n
        // (0.1 * 10 lands just below 1.0 in binary floating point).
        auto k = static_cast<std::size_t>(
            std::floor(prune_fraction * static_cast<double>(n) + 1e-9));
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
        std::vector<double> mask(n, 1.0);
        for (std::size_t i = 0; i < k; ++i) mask[order[i]] = 0.0;
        return mask;
    };

    if (granularity == Granularity::Weight) {
        std::vector<double> scores(wv.size());
        for (std::size_t i = 0; i < wv.size(); ++i) scores[i] = std::abs(wv[i]);
        return Tensor::from_data(base_weights.shape(), prune_smallest(scores), false);
    }
    std::vector<double> scores(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) acc += wv[r * cols + c] * wv[r * cols + c];
        scores[r] = std::sqrt(acc);
    }
    return Tensor::from_data({rows}, prune_smallest(scores), false);
}

std::pair<Tensor, Tensor> apply_mask(const Tensor& w, const Tensor& b, const Tensor& mask,
                                     Granularity granularity) {
    if (granularity == Granularity::Weight) {
        if (mask.shape() != w.shape()) {
            throw std::invalid_argument("apply_mask: weight mask " + shape_str(mask.shape()) +
                                        " does not match weight " + shape_str(w.shape()));
        }
        return {mul(w, mask), b};
    }
    if (mask.shape().size() != 1 || mask.dim(0) != w.dim(0)) {
        throw std::invalid_argument("apply_mask: neuron mask " + shape_str(mask.shape()) +
                                    " does not match weight " + shape_str(w.shape()));
    }
    Tensor masked_b = b.defined() ? mul(b, mask) : b;
    return {row_scale(w, mask), masked_b};
}

Tensor current_mask(const MaskedLayer& layer, const AnnealState* anneal, Rng* rng) {
    switch (layer.config.strategy) {
        case MaskStrategy::Magnitude:
            return layer.mask_params;
        case MaskStrategy::HardConcrete:
            if (layer.mode == MaskedLayer::Mode::Eval) {
                return hc_eval_mask(layer.mask_params, layer.config);
            }
            if (!rng) {
                throw std::invalid_argument(
                    "masked forward: hard-concrete training needs a generator");
            }
            return hc_sample_mask(layer.mask_params, layer.config, *rng);
        case MaskStrategy::ContinuousSparsification:
            if (layer.mode == MaskedLayer::Mode::Eval) {
                return cs_final_mask(layer.mask_params);
            }
            if (!anneal) {
                throw std::invalid_argument(
                    "masked forward: continuous sparsification training needs an anneal state");
            }
            return cs_soft_mask(layer.mask_params, *anneal);
    }
    throw std::logic_error("masked forward: unhandled strategy");
}

Tensor masked_forward(const MaskedLayer& layer, const Tensor& x, const AnnealState* anneal,
                      Rng* rng) {
    Tensor mask = current_mask(layer, anneal, rng);
    auto [w, b] = apply_mask(layer.base_weight, layer.base_bias, mask, layer.config.granularity);
    return linear(x, w, b);
}

}  // namespace masklab
