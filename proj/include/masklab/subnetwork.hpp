#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "masklab/masking.hpp"
#include "masklab/model.hpp"

namespace masklab {

struct LayerMask {
    std::vector<std::size_t> shape;  // [out x in] (Weight) or [out] (Neuron)
    std::vector<std::uint8_t> bits;  // one 0/1 per entry, row-major

    std::size_t total() const { return bits.size(); }
    std::size_t kept() const;
    bool operator==(const LayerMask&) const = default;
};

struct SubnetworkMeta {
    std::string strategy;     // producing strategy, or combine provenance
    std::string task;         // data slice the mask was optimized for
    std::string config_json;  // opaque snapshot of the producing configuration
    // Enough architecture to group attention entries by head without the
    // checkpoint on hand.
    std::size_t n_layers = 0;
    std::size_t d_model = 0;
    std::size_t n_heads = 0;
    std::size_t d_mlp = 0;
    bool operator==(const SubnetworkMeta&) const = default;
};

/// Immutable set of kept entries over a specific model's maskable layers.
/// The fingerprint pins the model; applying a subnetwork to any other model
/// is an error.
struct Subnetwork {
    std::string fingerprint;
    Granularity granularity = Granularity::Weight;
    std::vector<std::pair<std::string, LayerMask>> layers;  // canonical model order
    SubnetworkMeta meta;

    const LayerMask* find(const std::string& layer_id) const;
    bool operator==(const Subnetwork&) const = default;
};

/// Binds per-layer binary masks (data in {0,1}) to a model. Mask ids must be
/// exactly the model's maskable layers, in any order; shapes must match the
/// granularity.
Subnetwork make_subnetwork(const Model& model, Granularity granularity,
                           const std::vector<std::pair<std::string, Tensor>>& masks,
                           SubnetworkMeta meta);

enum class CombineOp { Intersect, Union, Difference };

/// Element-wise boolean combination; requires equal fingerprint, granularity,
/// and layer shapes. Difference keeps entries of a not in b.
Subnetwork combine(const Subnetwork& a, const Subnetwork& b, CombineOp op);

/// Flips every bit; the complement ablation mask.
Subnetwork complement(const Subnetwork& a);

struct SparsityRow {
    std::string layer;
    std::size_t kept = 0;
    std::size_t total = 0;
    double kept_fraction = 0.0;
};

struct SparsityReport {
    std::vector<SparsityRow> per_layer;
    std::size_t kept = 0;
    std::size_t total = 0;
    double kept_fraction = 0.0;    // kept / total, size-weighted
    double pruned_fraction = 0.0;  // 1 - kept_fraction
};

SparsityReport sparsity(const Subnetwork& s);

struct OverlapRow {
    std::string scope;  // layer id, "<layer id>.head<h>", or "TOTAL"
    std::size_t total = 0;
    std::size_t kept_a = 0;
    std::size_t kept_b = 0;
    std::size_t intersection = 0;
    std::size_t union_count = 0;
    double jaccard = 0.0;  // intersection / union, 0 when union is 0
    double sparsity_a = 0.0;  // kept_a / total
    double sparsity_b = 0.0;
};

struct OverlapReport {
    std::string fingerprint;
    Granularity granularity = Granularity::Weight;
    std::vector<OverlapRow> rows;  // per layer, then per head group, then TOTAL last
    const OverlapRow& total() const;
    const OverlapRow* find(const std::string& scope) const;
};

/// Set statistics per layer, per attention-head group, and overall.
OverlapReport overlap(const Subnetwork& a, const Subnetwork& b);

std::string overlap_to_json(const OverlapReport& r);
std::string overlap_to_csv(const OverlapReport& r);

/// Flat mask indices owned by one attention head within a layer's mask: rows
/// of q/k/v (their output features; the neuron entries themselves at Neuron
/// granularity) and columns of o. Empty for layers without a per-head
/// grouping (MLP sublayers; o at Neuron granularity, whose rows are not
/// head-attributable).
std::vector<std::size_t> head_entry_indices(const std::string& layer_id, const LayerMask& mask,
                                            Granularity granularity, std::size_t n_heads,
                                            std::size_t head);

/// Writes one JSON document (`.subnet.json`): manifest fields plus per-layer
/// masks as base64 bit-packed arrays, LSB-first within bytes.
void save_subnetwork(const Subnetwork& s, const std::string& path);

/// Round-trip counterpart of save_subnetwork; throws std::runtime_error
/// naming the offending field on any malformation.
Subnetwork load_subnetwork(const std::string& path);

}  // namespace masklab
