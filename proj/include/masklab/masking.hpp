#pragma once

#include <cstddef>
#include <string>

#include "masklab/rng.hpp"
#include "masklab/tensor.hpp"

namespace masklab {

enum class MaskStrategy { HardConcrete, ContinuousSparsification, Magnitude };
enum class Granularity { Weight, Neuron };

std::string strategy_name(MaskStrategy s);
std::string granularity_name(Granularity g);
MaskStrategy parse_strategy(const std::string& s);    // throws on unknown name
Granularity parse_granularity(const std::string& s);  // throws on unknown name

struct MaskConfig {
    MaskStrategy strategy = MaskStrategy::HardConcrete;
    Granularity granularity = Granularity::Weight;
    // Hard-concrete gate: stretch interval (gamma, zeta) around [0,1],
    // temperature beta, and the initial log-odds of keeping an entry.
    double hc_gamma = -0.1;
    double hc_zeta = 1.1;
    double hc_beta = 2.0 / 3.0;
    double hc_init_logalpha = 3.0;
    // Continuous sparsification: final inverse temperature and initial s.
    double cs_beta_final = 200.0;
    double cs_init_s = 2.0;
    // Magnitude baseline only; negative means unset.
    double prune_fraction = -1.0;
    double l0_lambda = 0.1;

    void validate() const;  // throws std::invalid_argument
};

/// Exponential inverse-temperature schedule beta_t = beta_final^(t/T),
/// advancing 1 -> beta_final over T steps.
struct AnnealState {
    double beta_final = 200.0;
    std::size_t step = 0;
    std::size_t total = 1;

    double current_beta() const;
    void advance();  // saturates at total
};

/// A frozen linear layer plus trainable mask parameters. Only mask_params
/// ever carries gradients; Eval-mode forwards are deterministic.
struct MaskedLayer {
    enum class Mode { Train, Eval };

    Tensor base_weight;  // [out x in], requires_grad stays false
    Tensor base_bias;    // [out] or undefined
    Tensor mask_params;  // [out x in] (Weight) or [out] (Neuron); binary data for Magnitude
    MaskConfig config;
    Mode mode = Mode::Train;
};

/// Wraps (w, b) per config: initializes mask parameters at the configured
/// starting point (Magnitude: computes the binary mask immediately).
MaskedLayer make_masked_layer(const Tensor& w, const Tensor& b, const MaskConfig& config);

/// Deterministic hard-concrete gate given the uniform draws:
/// s = sigmoid((log u - log(1-u) + logalpha) / beta), z = clamp(s*(zeta-gamma)+gamma, 0, 1).
/// Differentiable in log_alpha (u is treated as a constant).
Tensor hc_mask_from_uniform(const Tensor& log_alpha, const MaskConfig& config, const Tensor& u);

/// One stochastic gate sample; u drawn per entry in (1e-12, 1-1e-12).
Tensor hc_sample_mask(const Tensor& log_alpha, const MaskConfig& config, Rng& rng);

/// Closed-form expected L0: sum over entries of
/// sigmoid(logalpha - beta*log(-gamma/zeta)); differentiable in log_alpha.
Tensor hc_expected_l0(const Tensor& log_alpha, const MaskConfig& config);

/// Deterministic binarization: zhat = clamp(sigmoid(logalpha)*(zeta-gamma)+gamma, 0, 1),
/// keep iff zhat >= 0.5 (tie keeps).
Tensor hc_eval_mask(const Tensor& log_alpha, const MaskConfig& config);

/// Soft mask sigmoid(current_beta * s); summed it doubles as the L0 proxy.
Tensor cs_soft_mask(const Tensor& s, const AnnealState& anneal);

/// Hard mask after annealing: keep iff s > 0 (tie prunes).
Tensor cs_final_mask(const Tensor& s);

/// Binary mask zeroing exactly floor(prune_fraction * n) entries of smallest
/// |w| (Weight) or rows of smallest L2 norm (Neuron); ties pruned lowest flat
/// index first. Shape [out x in] for Weight, [out] for Neuron.
Tensor magnitude_mask(const Tensor& base_weights, double prune_fraction, Granularity granularity);

/// Effective (weight, bias) under a mask. Weight granularity multiplies
/// entries and leaves the bias alone; Neuron granularity scales rows and the
/// bias by the per-row mask. Masked-out units contribute exactly zero.
std::pair<Tensor, Tensor> apply_mask(const Tensor& w, const Tensor& b, const Tensor& mask,
                                     Granularity granularity);

/// The mask a forward pass would use right now: samples (HC Train), reads the
/// schedule (CS Train), or binarizes (Eval). Magnitude returns its fixed mask.
Tensor current_mask(const MaskedLayer& layer, const AnnealState* anneal = nullptr,
                    Rng* rng = nullptr);

/// y = (W masked) x + (b masked); see apply_mask and current_mask.
Tensor masked_forward(const MaskedLayer& layer, const Tensor& x,
                      const AnnealState* anneal = nullptr, Rng* rng = nullptr);

}  // namespace masklab
