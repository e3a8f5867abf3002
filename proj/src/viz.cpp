#include "masklab/viz.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace masklab {

using json = nlohmann::ordered_json;

namespace {

constexpr double kPageWidth = 1000.0;
constexpr double kMargin = 16.0;
constexpr double kTitleH = 14.0;
constexpr double kPanelGap = 12.0;
constexpr std::size_t kMaxCellsPerAxis = 128;

enum CellClass { kPruned = 0, kAOnly = 1, kBOnly = 2, kBoth = 3 };

const char* class_css(int c) {
    switch (c) {
        case kAOnly: return "ca";
        case kBOnly: return "cb";
        case kBoth: return "cab";
        default: return "coff";
    }
}

std::string fmt(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.1f", v);
    return buf;
}

std::string fmt3(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.3f", v);
    return buf;
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

struct PanelSource {
    std::string scope;
    std::vector<std::size_t> entry_indices;  // into the layer's flat mask
    const LayerMask* mask_a;
    const LayerMask* mask_b;  // null for single-subnetwork figures
    std::size_t rows, cols;   // logical grid of the entries
};

struct PanelGeom {
    PanelSource src;
    std::size_t grid_r, grid_c;  // displayed cells
    std::size_t block_r, block_c;
    double x = 0, y = 0, w = 0, h = 0;
    std::size_t count[4] = {0, 0, 0, 0};  // entry-level class counts
};

int classify(std::uint8_t a, std::uint8_t b, bool has_b) {
    if (!has_b) return a ? kAOnly : kPruned;
    if (a && b) return kBoth;
    if (a) return kAOnly;
    if (b) return kBOnly;
    return kPruned;
}

// Per-layer panel split: one panel per attention head slice, whole-layer
// panels for MLP sublayers and for attention layers whose entries are not
// head-attributable under this granularity.
std::vector<PanelSource> build_sources(const Subnetwork& a, const Subnetwork* b) {
    std::vector<PanelSource> sources;
    std::size_t n_heads = a.meta.n_heads;
    for (std::size_t li = 0; li < a.layers.size(); ++li) {
        const auto& [id, ma] = a.layers[li];
        const LayerMask* mb = b ? &b->layers[li].second : nullptr;
        bool split = false;
        std::vector<PanelSource> head_panels;
        for (std::size_t h = 0; h < n_heads; ++h) {
            auto idx = head_entry_indices(id, ma, a.granularity, n_heads, h);
            if (idx.empty()) break;
            PanelSource s;
            s.scope = id + ".head" + std::to_string(h);
            s.mask_a = &ma;
            s.mask_b = mb;
            if (a.granularity == Granularity::Weight) {
                // q/k/v heads slice rows; o slices columns. Either way the
                // index list is a contiguous-by-row rectangle.
                std::size_t cols_full = ma.shape[1];
                bool o_layer = id.size() >= 7 && id.compare(id.size() - 7, 7, ".attn.o") == 0;
                s.rows = o_layer ? ma.shape[0] : idx.size() / cols_full;
                s.cols = idx.size() / s.rows;
            } else {
                s.rows = 1;
                s.cols = idx.size();
            }
            s.entry_indices = std::move(idx);
            head_panels.push_back(std::move(s));
            split = true;
        }
        if (split) {
            for (auto& p : head_panels) sources.push_back(std::move(p));
            continue;
        }
        PanelSource s;
        s.scope = id;
        s.mask_a = &ma;
        s.mask_b = mb;
        s.entry_indices.resize(ma.total());
        for (std::size_t i = 0; i < ma.total(); ++i) s.entry_indices[i] = i;
        if (ma.shape.size() == 2) {
            s.rows = ma.shape[0];
            s.cols = ma.shape[1];
        } else {
            s.rows = 1;
            s.cols = ma.shape[0];
        }
        sources.push_back(std::move(s));
    }
    return sources;
}

}  // namespace

VizOutput render(const VizSpec& spec) {
    const Subnetwork& a = spec.a;
    const Subnetwork* b = spec.b ? &*spec.b : nullptr;
    if (b) {
        // Reuses the overlap compatibility checks (fingerprint, granularity,
        // layer shapes) without keeping the report.
        (void)overlap(a, *b);
    }
    if (!(spec.cell > 0.0)) throw std::invalid_argument("viz: cell size must be positive");

    std::vector<PanelGeom> panels;
    for (PanelSource& src : build_sources(a, b)) {
        PanelGeom g;
        g.block_r = (src.rows + kMaxCellsPerAxis - 1) / kMaxCellsPerAxis;
        g.block_c = (src.cols + kMaxCellsPerAxis - 1) / kMaxCellsPerAxis;
        g.grid_r = (src.rows + g.block_r - 1) / g.block_r;
        g.grid_c = (src.cols + g.block_c - 1) / g.block_c;
        for (std::size_t i = 0; i < src.entry_indices.size(); ++i) {
            std::size_t j = src.entry_indices[i];
            ++g.count[classify(src.mask_a->bits[j], src.mask_b ? src.mask_b->bits[j] : 0,
                               src.mask_b != nullptr)];
        }
        g.src = std::move(src);
        panels.push_back(std::move(g));
    }

    // Flow layout: panels wrap left to right inside the fixed page width.
    double x = kMargin, y = kMargin + 40.0;
    double row_h = 0.0;
    for (PanelGeom& g : panels) {
        g.w = static_cast<double>(g.grid_c) * spec.cell;
        g.h = static_cast<double>(g.grid_r) * spec.cell + kTitleH;
        if (x > kMargin && x + g.w > kPageWidth - kMargin) {
            x = kMargin;
            y += row_h + kPanelGap;
            row_h = 0.0;
        }
        g.x = x;
        g.y = y;
        x += g.w + kPanelGap;
        row_h = std::max(row_h, g.h);
    }
    double height = y + row_h + kMargin;

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(kPageWidth)
        << "\" height=\"" << fmt(height) << "\" viewBox=\"0 0 " << fmt(kPageWidth) << " "
        << fmt(height) << "\">\n";
    svg << "<style>\n"
        << ".ca{fill:" << spec.colors.a_only << ";}\n"
        << ".cb{fill:" << spec.colors.b_only << ";}\n"
        << ".cab{fill:" << spec.colors.both << ";}\n"
        << ".coff{fill:" << spec.colors.pruned << ";}\n"
        << ".cell{stroke:none;}\n"
        << ".frame{fill:none;stroke:#888888;stroke-width:0.5;}\n"
        << "text{font-family:sans-serif;fill:#222222;}\n"
        << "</style>\n";
    svg << "<rect x=\"0\" y=\"0\" width=\"" << fmt(kPageWidth) << "\" height=\"" << fmt(height)
        << "\" fill=\"#ffffff\"/>\n";

    std::string title = spec.title.empty() ? (b ? a.meta.task + " vs " + spec.b->meta.task
                                                : a.meta.task + " subnetwork")
                                           : spec.title;
    svg << "<text x=\"" << fmt(kMargin) << "\" y=\"" << fmt(kMargin + 4.0)
        << "\" font-size=\"13\" font-weight=\"bold\">" << xml_escape(title) << "</text>\n";

    // Legend: swatch + label per class in use.
    double lx = kMargin;
    double ly = kMargin + 16.0;
    auto legend_entry = [&](const char* css, const std::string& label) {
        svg << "<rect class=\"cell " << css << "\" x=\"" << fmt(lx) << "\" y=\"" << fmt(ly)
            << "\" width=\"10\" height=\"10\"/>\n";
        svg << "<text x=\"" << fmt(lx + 14.0) << "\" y=\"" << fmt(ly + 9.0)
            << "\" font-size=\"10\">" << xml_escape(label) << "</text>\n";
        lx += 14.0 + 7.0 * static_cast<double>(label.size()) + 18.0;
    };
    if (b) {
        legend_entry("ca", "a only");
        legend_entry("cb", "b only");
        legend_entry("cab", "both");
    } else {
        legend_entry("ca", "kept");
    }
    legend_entry("coff", "pruned");

    json sidecar;
    sidecar["format"] = "viz-sidecar";
    sidecar["fingerprint"] = a.fingerprint;
    sidecar["granularity"] = granularity_name(a.granularity);
    sidecar["subnetworks"] = b ? 2 : 1;
    sidecar["title"] = title;
    json jpanels = json::array();

    for (const PanelGeom& g : panels) {
        std::string caption;
        if (b) {
            caption = g.src.scope + "  a:" + std::to_string(g.count[kAOnly] + g.count[kBoth]) +
                      " b:" + std::to_string(g.count[kBOnly] + g.count[kBoth]) +
                      " both:" + std::to_string(g.count[kBoth]) + "/" +
                      std::to_string(g.src.entry_indices.size());
        } else {
            caption = g.src.scope + "  kept:" + std::to_string(g.count[kAOnly]) + "/" +
                      std::to_string(g.src.entry_indices.size()) +
                      " pruned:" + std::to_string(g.count[kPruned]);
        }
        svg << "<g class=\"panel\" data-scope=\"" << xml_escape(g.src.scope) << "\">\n";
        svg << "<text x=\"" << fmt(g.x) << "\" y=\"" << fmt(g.y + 10.0) << "\" font-size=\"9\">"
            << xml_escape(caption) << "</text>\n";

        std::size_t cells_drawn = 0;
        for (std::size_t r = 0; r < g.grid_r; ++r) {
            for (std::size_t c = 0; c < g.grid_c; ++c) {
                int cls;
                if (g.block_r == 1 && g.block_c == 1) {
                    std::size_t j = g.src.entry_indices[r * g.src.cols + c];
                    cls = classify(g.src.mask_a->bits[j],
                                   g.src.mask_b ? g.src.mask_b->bits[j] : 0,
                                   g.src.mask_b != nullptr);
                } else {
                    // Majority class over the covered block; ties prefer the
                    // most informative class.
                    std::size_t votes[4] = {0, 0, 0, 0};
                    for (std::size_t br = r * g.block_r;
                         br < std::min((r + 1) * g.block_r, g.src.rows); ++br) {
                        for (std::size_t bc = c * g.block_c;
                             bc < std::min((c + 1) * g.block_c, g.src.cols); ++bc) {
                            std::size_t j = g.src.entry_indices[br * g.src.cols + bc];
                            ++votes[classify(g.src.mask_a->bits[j],
                                             g.src.mask_b ? g.src.mask_b->bits[j] : 0,
                                             g.src.mask_b != nullptr)];
                        }
                    }
                    static const int kPriority[4] = {kBoth, kAOnly, kBOnly, kPruned};
                    cls = kPruned;
                    std::size_t best = 0;
                    for (int cand : kPriority) {
                        if (votes[cand] > best) {
                            best = votes[cand];
                            cls = cand;
                        }
                    }
                }
                svg << "<rect class=\"cell " << class_css(cls) << "\" x=\""
                    << fmt(g.x + static_cast<double>(c) * spec.cell) << "\" y=\""
                    << fmt(g.y + kTitleH + static_cast<double>(r) * spec.cell) << "\" width=\""
                    << fmt(spec.cell) << "\" height=\"" << fmt(spec.cell) << "\"/>\n";
                ++cells_drawn;
            }
        }
        svg << "<rect class=\"frame\" x=\"" << fmt(g.x) << "\" y=\"" << fmt(g.y + kTitleH)
            << "\" width=\"" << fmt(static_cast<double>(g.grid_c) * spec.cell) << "\" height=\""
            << fmt(static_cast<double>(g.grid_r) * spec.cell) << "\"/>\n";
        svg << "</g>\n";

        json jp;
        jp["scope"] = g.src.scope;
        jp["entries"] = g.src.entry_indices.size();
        jp["cells_drawn"] = cells_drawn;
        jp["grid_rows"] = g.grid_r;
        jp["grid_cols"] = g.grid_c;
        jp["block_rows"] = g.block_r;
        jp["block_cols"] = g.block_c;
        jp["pruned"] = g.count[kPruned];
        jp["a_only"] = g.count[kAOnly];
        jp["b_only"] = g.count[kBOnly];
        jp["both"] = g.count[kBoth];
        jp["kept_a"] = g.count[kAOnly] + g.count[kBoth];
        jp["kept_b"] = g.count[kBOnly] + g.count[kBoth];
        jpanels.push_back(std::move(jp));
    }
    svg << "</svg>\n";
    sidecar["panels"] = std::move(jpanels);

    VizOutput out;
    out.svg = svg.str();
    out.sidecar_json = sidecar.dump(2) + "\n";
    return out;
}

std::string render_summary(const OverlapReport& report) {
    std::vector<const OverlapRow*> rows;
    for (const OverlapRow& r : report.rows) {
        if (r.scope != "TOTAL" && r.scope.find(".head") == std::string::npos) {
            rows.push_back(&r);
        }
    }
    constexpr double bar_w = 16.0, bar_gap = 4.0, group_gap = 26.0;
    constexpr double chart_h = 220.0, top = 40.0, left = 46.0;
    double group_w = 3.0 * bar_w + 2.0 * bar_gap;
    double width = left + static_cast<double>(rows.size()) * (group_w + group_gap) + 20.0;
    double height = top + chart_h + 70.0;

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(width) << "\" height=\""
        << fmt(height) << "\" viewBox=\"0 0 " << fmt(width) << " " << fmt(height) << "\">\n";
    svg << "<style>\n"
        << ".ba{fill:#1f77b4;}\n.bb{fill:#ff7f0e;}\n.bj{fill:#9467bd;}\n"
        << ".axis{stroke:#444444;stroke-width:1;}\n.grid{stroke:#dddddd;stroke-width:0.5;}\n"
        << "text{font-family:sans-serif;fill:#222222;}\n"
        << "</style>\n";
    svg << "<rect x=\"0\" y=\"0\" width=\"" << fmt(width) << "\" height=\"" << fmt(height)
        << "\" fill=\"#ffffff\"/>\n";
    svg << "<text x=\"" << fmt(left) << "\" y=\"18\" font-size=\"12\" font-weight=\"bold\">"
        << "kept fraction and overlap per layer</text>\n";

    for (int i = 0; i <= 4; ++i) {
        double v = 0.25 * i;
        double yy = top + chart_h * (1.0 - v);
        svg << "<line class=\"grid\" x1=\"" << fmt(left) << "\" y1=\"" << fmt(yy) << "\" x2=\""
            << fmt(width - 14.0) << "\" y2=\"" << fmt(yy) << "\"/>\n";
        svg << "<text x=\"" << fmt(left - 6.0) << "\" y=\"" << fmt(yy + 3.0)
            << "\" font-size=\"9\" text-anchor=\"end\">" << fmt3(v).substr(0, 4) << "</text>\n";
    }

    auto bar = [&](double bx, double value, const char* css, const std::string& scope,
                   const char* series) {
        double bh = chart_h * value;
        svg << "<rect class=\"" << css << "\" data-scope=\"" << xml_escape(scope)
            << "\" data-series=\"" << series << "\" data-value=\"" << fmt3(value) << "\" x=\""
            << fmt(bx) << "\" y=\"" << fmt(top + chart_h - bh) << "\" width=\"" << fmt(bar_w)
            << "\" height=\"" << fmt(bh) << "\"/>\n";
        svg << "<text x=\"" << fmt(bx + bar_w / 2.0) << "\" y=\"" << fmt(top + chart_h - bh - 3.0)
            << "\" font-size=\"7\" text-anchor=\"middle\">" << fmt3(value) << "</text>\n";
    };

    double gx = left + 8.0;
    for (const OverlapRow* r : rows) {
        bar(gx, r->sparsity_a, "ba", r->scope, "sparsity_a");
        bar(gx + bar_w + bar_gap, r->sparsity_b, "bb", r->scope, "sparsity_b");
        bar(gx + 2.0 * (bar_w + bar_gap), r->jaccard, "bj", r->scope, "jaccard");
        svg << "<text x=\"" << fmt(gx + group_w / 2.0) << "\" y=\"" << fmt(top + chart_h + 12.0)
            << "\" font-size=\"7\" text-anchor=\"middle\">" << xml_escape(r->scope)
            << "</text>\n";
        gx += group_w + group_gap;
    }
    svg << "<line class=\"axis\" x1=\"" << fmt(left) << "\" y1=\"" << fmt(top + chart_h)
        << "\" x2=\"" << fmt(width - 14.0) << "\" y2=\"" << fmt(top + chart_h) << "\"/>\n";

    double ly = top + chart_h + 30.0;
    const char* css[3] = {"ba", "bb", "bj"};
    const char* label[3] = {"kept a", "kept b", "jaccard"};
    double lx = left;
    for (int i = 0; i < 3; ++i) {
        svg << "<rect class=\"" << css[i] << "\" x=\"" << fmt(lx) << "\" y=\"" << fmt(ly)
            << "\" width=\"10\" height=\"10\"/>\n";
        svg << "<text x=\"" << fmt(lx + 14.0) << "\" y=\"" << fmt(ly + 9.0)
            << "\" font-size=\"10\">" << label[i] << "</text>\n";
        lx += 90.0;
    }
    svg << "</svg>\n";
    return svg.str();
}

}  // namespace masklab
