#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "masklab/rng.hpp"
#include "masklab/tensor.hpp"

namespace masklab {

struct TransformerConfig {
    std::size_t n_layers = 2;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t d_mlp = 256;
    std::size_t vocab_size = 0;
    std::size_t max_seq_len = 0;
    bool causal = true;

    std::size_t d_head() const { return d_model / n_heads; }
    void validate() const;  // throws std::invalid_argument
};

enum class ModelArch { Transformer, Mlp };

/// A model is an ordered bag of named parameter tensors plus the architecture
/// that interprets them. Parameter order is canonical: it fixes the checkpoint
/// blob layout and the fingerprint.
struct Model {
    ModelArch arch = ModelArch::Transformer;
    TransformerConfig config;           // Transformer only
    std::vector<std::size_t> widths;    // Mlp only: layer widths, in -> ... -> out
    std::vector<std::pair<std::string, Tensor>> params;
    bool frozen = false;

    const Tensor& param(const std::string& name) const;  // throws on unknown name
    bool has_param(const std::string& name) const;

    /// Hierarchical ids of the maskable linear sublayers, in canonical order.
    /// Transformer: layer{L}.attn.{q,k,v,o}, layer{L}.mlp.{fc1,fc2} per layer.
    /// Mlp: mlp.fc{i}. Embeddings, layernorms and the unembedding are never
    /// maskable.
    std::vector<std::string> maskable_layer_ids() const;

    /// Weight and bias tensors of a maskable layer ("<id>.w", "<id>.b").
    std::pair<Tensor, Tensor> layer_weights(const std::string& layer_id) const;

    /// Marks the model frozen and drops requires_grad on every parameter.
    void freeze();
    /// Flat copy of all parameter values, for freeze-contract checks.
    std::vector<double> snapshot() const;
};

/// Swap-in replacement for a maskable layer's (weight, bias) during forward;
/// returning the inputs unchanged applies no mask. The hook runs under the
/// active tape, so anything it computes participates in backward.
using WeightHook =
    std::function<std::pair<Tensor, Tensor>(const std::string& layer_id, const Tensor& w,
                                            const Tensor& b)>;

/// Pre-layernorm GPT2-style stack: token+position embeddings; per layer
/// {LN -> multi-head causal attention (separate q/k/v/o linears) -> residual;
/// LN -> MLP (fc1, gelu, fc2) -> residual}; final LN -> unembedding (no bias,
/// no weight tying). All weights drawn from N(0, 0.02^2) with the given seed;
/// layernorm gains start at 1, biases at 0.
Model build_transformer(const TransformerConfig& config, std::uint64_t seed);

/// Plain MLP over the given widths: fc1..fcN with gelu between, none after
/// the last. Every fc layer is maskable.
Model build_mlp(const std::vector<std::size_t>& widths, std::uint64_t seed);

struct ForwardTrace {
    Tensor hidden;  // final pre-unembedding representation [batch*seq x d_model]
    Tensor logits;  // [batch*seq x vocab]
};

/// Runs the transformer on a batch of equal-length token rows. Exposes the
/// final-layernorm hidden state alongside the logits so probe heads can read
/// the representation directly.
ForwardTrace transformer_apply(const Model& m, const std::vector<std::vector<int>>& tokens,
                               const WeightHook& hook = {});

/// Logits reshaped to [batch x seq x vocab].
Tensor forward(const Model& m, const std::vector<std::vector<int>>& tokens,
               const WeightHook& hook = {});

/// MLP forward on x[n x in]; hook as above.
Tensor mlp_apply(const Model& m, const Tensor& x, const WeightHook& hook = {});

/// Feature index range [begin, end) owned by one attention head: rows of the
/// q/k/v weights (their output features) and columns of the o weight (its
/// input features).
struct HeadSlice {
    std::size_t head;
    std::size_t begin;
    std::size_t end;
};

std::vector<HeadSlice> attention_head_slices(const Model& m, std::size_t layer);

/// 64-bit FNV-1a over the canonical manifest core (architecture, shapes,
/// weight digest — not file paths), formatted as 16 lowercase hex digits.
/// Stable across save/load and across machines.
std::string model_fingerprint(const Model& m);

/// Writes `<path>` (JSON manifest) plus a sibling raw little-endian f64 blob
/// whose basename the manifest records. Returns the fingerprint.
std::string save_checkpoint(const Model& m, const std::string& path);

/// Rebuilds a model from a manifest written by save_checkpoint. Verifies blob
/// length and the recorded fingerprint; throws std::runtime_error naming the
/// offending field on any mismatch.
Model load_checkpoint(const std::string& path);

}  // namespace masklab
