#pragma once

#include <optional>
#include <string>

#include "masklab/subnetwork.hpp"

namespace masklab {

struct VizColors {
    std::string a_only = "#1f77b4";  // blue
    std::string b_only = "#ff7f0e";  // orange
    std::string both = "#9467bd";    // purple
    std::string pruned = "#d9d9d9";  // light gray
};

/// One or two subnetworks over the same model. With two, every cell is
/// classified by set membership (a only / b only / both / pruned).
struct VizSpec {
    Subnetwork a;
    std::optional<Subnetwork> b;
    VizColors colors;
    double cell = 4.0;  // pixels per mask entry
    std::string title;
};

struct VizOutput {
    std::string svg;
    std::string sidecar_json;  // per-panel counts, for programmatic checks
};

/// Layer-major grid figure: one panel per attention head slice of each
/// attention sublayer and one per MLP sublayer. Weight granularity draws a
/// 2-D cell grid (rows = out, cols = in), neuron granularity one cell per
/// neuron; grids over 128 cells per axis are block-averaged (majority class,
/// ties resolved both > a_only > b_only > pruned). Output is deterministic:
/// identical inputs give byte-identical text.
VizOutput render(const VizSpec& spec);

/// Grouped bar chart over the report's per-layer rows: kept fraction of a and
/// b plus jaccard, numerically annotated.
std::string render_summary(const OverlapReport& report);

}  // namespace masklab
