#include "masklab/subnetwork.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace masklab {

using json = nlohmann::ordered_json;

namespace {

const char kB64Alphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

// Bits pack LSB-first: entry (8j + i) lives in bit i of byte j.
std::vector<std::uint8_t> pack_bits(const std::vector<std::uint8_t>& bits) {
    std::vector<std::uint8_t> bytes((bits.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < bits.size(); ++i) {
        if (bits[i]) bytes[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    }
    return bytes;
}

std::vector<std::uint8_t> unpack_bits(const std::vector<std::uint8_t>& bytes, std::size_t count) {
    std::vector<std::uint8_t> bits(count, 0);
    for (std::size_t i = 0; i < count; ++i) {
        bits[i] = (bytes[i / 8] >> (i % 8)) & 1u;
    }
    return bits;
}

std::string b64_encode(const std::vector<std::uint8_t>& bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 3 <= bytes.size(); i += 3) {
        std::uint32_t v = (static_cast<std::uint32_t>(bytes[i]) << 16) |
                          (static_cast<std::uint32_t>(bytes[i + 1]) << 8) | bytes[i + 2];
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out.push_back(kB64Alphabet[(v >> 6) & 63]);
        out.push_back(kB64Alphabet[v & 63]);
    }
    std::size_t rem = bytes.size() - i;
    if (rem == 1) {
        std::uint32_t v = static_cast<std::uint32_t>(bytes[i]) << 16;
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out += "==";
    } else if (rem == 2) {
        std::uint32_t v = (static_cast<std::uint32_t>(bytes[i]) << 16) |
                          (static_cast<std::uint32_t>(bytes[i + 1]) << 8);
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out.push_back(kB64Alphabet[(v >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

std::vector<std::uint8_t> b64_decode(const std::string& text, const std::string& field) {
    auto value_of = [&](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    if (text.size() % 4 != 0) {
        throw std::runtime_error("subnetwork: field '" + field +
                                 "' is not valid base64 (length not a multiple of 4)");
    }
    std::vector<std::uint8_t> out;
    out.reserve(text.size() / 4 * 3);
    for (std::size_t i = 0; i < text.size(); i += 4) {
        int pad = 0;
        std::uint32_t v = 0;
        for (std::size_t j = 0; j < 4; ++j) {
            char c = text[i + j];
            if (c == '=') {
                if (i + 4 != text.size() || j < 2) {
                    throw std::runtime_error("subnetwork: field '" + field +
                                             "' has misplaced base64 padding");
                }
                ++pad;
                v <<= 6;
                continue;
            }
            if (pad > 0) {
                throw std::runtime_error("subnetwork: field '" + field +
                                         "' has data after base64 padding");
            }
            int d = value_of(c);
            if (d < 0) {
                throw std::runtime_error("subnetwork: field '" + field +
                                         "' contains invalid base64 character");
            }
            v = (v << 6) | static_cast<std::uint32_t>(d);
        }
        out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
        if (pad < 2) out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
        if (pad < 1) out.push_back(static_cast<std::uint8_t>(v & 0xff));
    }
    return out;
}

std::size_t shape_total(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

void check_compatible(const Subnetwork& a, const Subnetwork& b, const char* op) {
    if (a.fingerprint != b.fingerprint) {
        throw std::invalid_argument(std::string(op) + ": fingerprint mismatch (" + a.fingerprint +
                                    " vs " + b.fingerprint + ")");
    }
    if (a.granularity != b.granularity) {
        throw std::invalid_argument(std::string(op) + ": granularity mismatch (" +
                                    granularity_name(a.granularity) + " vs " +
                                    granularity_name(b.granularity) + ")");
    }
    if (a.layers.size() != b.layers.size()) {
        throw std::invalid_argument(std::string(op) + ": layer count mismatch");
    }
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
        if (a.layers[i].first != b.layers[i].first ||
            a.layers[i].second.shape != b.layers[i].second.shape) {
            throw std::invalid_argument(std::string(op) + ": layer '" + a.layers[i].first +
                                        "' differs between the two subnetworks");
        }
    }
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

}  // namespace

std::size_t LayerMask::kept() const {
    std::size_t k = 0;
    for (std::uint8_t b : bits) k += b;
    return k;
}

const LayerMask* Subnetwork::find(const std::string& layer_id) const {
    for (const auto& [id, mask] : layers) {
        if (id == layer_id) return &mask;
    }
    return nullptr;
}

Subnetwork make_subnetwork(const Model& model, Granularity granularity,
                           const std::vector<std::pair<std::string, Tensor>>& masks,
                           SubnetworkMeta meta) {
    Subnetwork s;
    s.fingerprint = model_fingerprint(model);
    s.granularity = granularity;
    if (model.arch == ModelArch::Transformer) {
        meta.n_layers = model.config.n_layers;
        meta.d_model = model.config.d_model;
        meta.n_heads = model.config.n_heads;
        meta.d_mlp = model.config.d_mlp;
    }
    s.meta = std::move(meta);

    auto ids = model.maskable_layer_ids();
    if (masks.size() != ids.size()) {
        throw std::invalid_argument("subnetwork: got " + std::to_string(masks.size()) +
                                    " masks for " + std::to_string(ids.size()) +
                                    " maskable layers");
    }
    for (const std::string& id : ids) {
        auto it = std::find_if(masks.begin(), masks.end(),
                               [&](const auto& kv) { return kv.first == id; });
        if (it == masks.end()) {
            throw std::invalid_argument("subnetwork: missing mask for layer '" + id + "'");
        }
        const Tensor& w = model.param(id + ".w");
        std::vector<std::size_t> expect = granularity == Granularity::Weight
                                              ? w.shape()
                                              : std::vector<std::size_t>{w.dim(0)};
        if (it->second.shape() != expect) {
            throw std::invalid_argument("subnetwork: mask for '" + id + "' has shape " +
                                        shape_str(it->second.shape()) + ", expected " +
                                        shape_str(expect));
        }
        LayerMask lm;
        lm.shape = expect;
        lm.bits.reserve(it->second.size());
        for (double v : it->second.data()) {
            if (v != 0.0 && v != 1.0) {
                throw std::invalid_argument("subnetwork: mask for '" + id +
                                            "' has non-binary entry " + std::to_string(v));
            }
            lm.bits.push_back(v != 0.0 ? 1 : 0);
        }
        s.layers.emplace_back(id, std::move(lm));
    }
    return s;
}

Subnetwork combine(const Subnetwork& a, const Subnetwork& b, CombineOp op) {
    check_compatible(a, b, "combine");
    Subnetwork out = a;
    const char* op_name = op == CombineOp::Intersect ? "intersect"
                          : op == CombineOp::Union   ? "union"
                                                     : "difference";
    out.meta.strategy = std::string(op_name) + "(" + a.meta.strategy + "," + b.meta.strategy + ")";
    out.meta.task = a.meta.task == b.meta.task ? a.meta.task : a.meta.task + "+" + b.meta.task;
    out.meta.config_json = "{}";
    for (std::size_t i = 0; i < out.layers.size(); ++i) {
        auto& bits = out.layers[i].second.bits;
        const auto& other = b.layers[i].second.bits;
        for (std::size_t j = 0; j < bits.size(); ++j) {
            switch (op) {
                case CombineOp::Intersect: bits[j] = bits[j] & other[j]; break;
                case CombineOp::Union: bits[j] = bits[j] | other[j]; break;
                case CombineOp::Difference: bits[j] = bits[j] & static_cast<std::uint8_t>(1 - other[j]); break;
            }
        }
    }
    return out;
}

Subnetwork complement(const Subnetwork& a) {
    Subnetwork out = a;
    out.meta.strategy = "complement(" + a.meta.strategy + ")";
    out.meta.config_json = "{}";
    for (auto& [id, mask] : out.layers) {
        for (auto& bit : mask.bits) bit = static_cast<std::uint8_t>(1 - bit);
    }
    return out;
}

SparsityReport sparsity(const Subnetwork& s) {
    SparsityReport r;
    for (const auto& [id, mask] : s.layers) {
        SparsityRow row;
        row.layer = id;
        row.kept = mask.kept();
        row.total = mask.total();
        row.kept_fraction = row.total ? static_cast<double>(row.kept) / row.total : 0.0;
        r.kept += row.kept;
        r.total += row.total;
        r.per_layer.push_back(std::move(row));
    }
    r.kept_fraction = r.total ? static_cast<double>(r.kept) / r.total : 0.0;
    r.pruned_fraction = 1.0 - r.kept_fraction;
    return r;
}

const OverlapRow& OverlapReport::total() const {
    if (rows.empty() || rows.back().scope != "TOTAL") {
        throw std::logic_error("overlap report: missing TOTAL row");
    }
    return rows.back();
}

const OverlapRow* OverlapReport::find(const std::string& scope) const {
    for (const auto& row : rows) {
        if (row.scope == scope) return &row;
    }
    return nullptr;
}

std::vector<std::size_t> head_entry_indices(const std::string& layer_id, const LayerMask& mask,
                                            Granularity granularity, std::size_t n_heads,
                                            std::size_t head) {
    auto ends_with = [&](const char* suffix) {
        std::string s(suffix);
        return layer_id.size() >= s.size() &&
               layer_id.compare(layer_id.size() - s.size(), s.size(), s) == 0;
    };
    if (n_heads == 0 || head >= n_heads) return {};
    std::vector<std::size_t> idx;
    if (ends_with(".attn.q") || ends_with(".attn.k") || ends_with(".attn.v")) {
        std::size_t out_dim = mask.shape[0];
        if (out_dim % n_heads != 0) return {};
        std::size_t dh = out_dim / n_heads;
        if (granularity == Granularity::Neuron) {
            for (std::size_t r = head * dh; r < (head + 1) * dh; ++r) idx.push_back(r);
        } else {
            std::size_t cols = mask.shape[1];
            for (std::size_t r = head * dh; r < (head + 1) * dh; ++r) {
                for (std::size_t c = 0; c < cols; ++c) idx.push_back(r * cols + c);
            }
        }
        return idx;
    }
    if (ends_with(".attn.o") && granularity == Granularity::Weight) {
        std::size_t rows = mask.shape[0], cols = mask.shape[1];
        if (cols % n_heads != 0) return {};
        std::size_t dh = cols / n_heads;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = head * dh; c < (head + 1) * dh; ++c) idx.push_back(r * cols + c);
        }
        return idx;
    }
    return {};
}

namespace {

OverlapRow count_overlap(const std::string& scope, const std::vector<std::uint8_t>& a,
                         const std::vector<std::uint8_t>& b,
                         const std::vector<std::size_t>* subset) {
    OverlapRow row;
    row.scope = scope;
    auto tally = [&](std::size_t j) {
        ++row.total;
        row.kept_a += a[j];
        row.kept_b += b[j];
        row.intersection += a[j] & b[j];
        row.union_count += a[j] | b[j];
    };
    if (subset) {
        for (std::size_t j : *subset) tally(j);
    } else {
        for (std::size_t j = 0; j < a.size(); ++j) tally(j);
    }
    row.jaccard = row.union_count
                      ? static_cast<double>(row.intersection) / static_cast<double>(row.union_count)
                      : 0.0;
    row.sparsity_a = row.total ? static_cast<double>(row.kept_a) / row.total : 0.0;
    row.sparsity_b = row.total ? static_cast<double>(row.kept_b) / row.total : 0.0;
    return row;
}

}  // namespace

OverlapReport overlap(const Subnetwork& a, const Subnetwork& b) {
    check_compatible(a, b, "overlap");
    OverlapReport report;
    report.fingerprint = a.fingerprint;
    report.granularity = a.granularity;

    OverlapRow total;
    total.scope = "TOTAL";
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
        const auto& [id, ma] = a.layers[i];
        const auto& mb = b.layers[i].second;
        OverlapRow row = count_overlap(id, ma.bits, mb.bits, nullptr);
        total.total += row.total;
        total.kept_a += row.kept_a;
        total.kept_b += row.kept_b;
        total.intersection += row.intersection;
        total.union_count += row.union_count;
        report.rows.push_back(std::move(row));
    }
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
        const auto& [id, ma] = a.layers[i];
        const auto& mb = b.layers[i].second;
        for (std::size_t h = 0; h < a.meta.n_heads; ++h) {
            auto idx = head_entry_indices(id, ma, a.granularity, a.meta.n_heads, h);
            if (idx.empty()) continue;
            report.rows.push_back(
                count_overlap(id + ".head" + std::to_string(h), ma.bits, mb.bits, &idx));
        }
    }
    total.jaccard = total.union_count ? static_cast<double>(total.intersection) /
                                            static_cast<double>(total.union_count)
                                      : 0.0;
    total.sparsity_a = total.total ? static_cast<double>(total.kept_a) / total.total : 0.0;
    total.sparsity_b = total.total ? static_cast<double>(total.kept_b) / total.total : 0.0;
    report.rows.push_back(std::move(total));
    return report;
}

std::string overlap_to_json(const OverlapReport& r) {
    json j;
    j["format"] = "overlap-report";
    j["fingerprint"] = r.fingerprint;
    j["granularity"] = granularity_name(r.granularity);
    json rows = json::array();
    for (const auto& row : r.rows) {
        json e;
        e["scope"] = row.scope;
        e["total"] = row.total;
        e["kept_a"] = row.kept_a;
        e["kept_b"] = row.kept_b;
        e["intersection"] = row.intersection;
        e["union"] = row.union_count;
        e["jaccard"] = row.jaccard;
        e["sparsity_a"] = row.sparsity_a;
        e["sparsity_b"] = row.sparsity_b;
        rows.push_back(std::move(e));
    }
    j["rows"] = std::move(rows);
    return j.dump(2) + "\n";
}

std::string overlap_to_csv(const OverlapReport& r) {
    std::ostringstream os;
    os << "scope,total,kept_a,kept_b,intersection,union,jaccard,sparsity_a,sparsity_b\n";
    for (const auto& row : r.rows) {
        os << row.scope << "," << row.total << "," << row.kept_a << "," << row.kept_b << ","
           << row.intersection << "," << row.union_count << "," << fmt_double(row.jaccard) << ","
           << fmt_double(row.sparsity_a) << "," << fmt_double(row.sparsity_b) << "\n";
    }
    return os.str();
}

void save_subnetwork(const Subnetwork& s, const std::string& path) {
    json j;
    j["format"] = "subnetwork";
    j["version"] = 1;
    j["fingerprint"] = s.fingerprint;
    j["granularity"] = granularity_name(s.granularity);
    j["strategy"] = s.meta.strategy;
    j["task"] = s.meta.task;
    json cfg;
    try {
        cfg = s.meta.config_json.empty() ? json::object() : json::parse(s.meta.config_json);
    } catch (const json::exception&) {
        cfg = s.meta.config_json;  // opaque string snapshot
    }
    j["config"] = std::move(cfg);
    json model;
    model["n_layers"] = s.meta.n_layers;
    model["d_model"] = s.meta.d_model;
    model["n_heads"] = s.meta.n_heads;
    model["d_mlp"] = s.meta.d_mlp;
    j["model"] = std::move(model);
    json layers = json::array();
    for (const auto& [id, mask] : s.layers) {
        json e;
        e["id"] = id;
        e["shape"] = mask.shape;
        e["kept"] = mask.kept();
        e["mask_b64"] = b64_encode(pack_bits(mask.bits));
        layers.push_back(std::move(e));
    }
    j["layers"] = std::move(layers);

    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("save_subnetwork: cannot open " + path);
    out << j.dump(2) << "\n";
    if (!out) throw std::runtime_error("save_subnetwork: short write to " + path);
}

Subnetwork load_subnetwork(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_subnetwork: cannot open " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw std::runtime_error("load_subnetwork: " + path + " is not valid JSON: " + e.what());
    }
    auto need = [&](const char* key) -> const json& {
        if (!j.contains(key)) {
            throw std::runtime_error("load_subnetwork: missing field '" + std::string(key) + "'");
        }
        return j[key];
    };
    if (need("format") != "subnetwork") {
        throw std::runtime_error("load_subnetwork: unrecognized format field");
    }
    if (need("version").get<int>() != 1) {
        throw std::runtime_error("load_subnetwork: unsupported version");
    }
    Subnetwork s;
    s.fingerprint = need("fingerprint").get<std::string>();
    if (s.fingerprint.empty()) {
        throw std::runtime_error("load_subnetwork: field 'fingerprint' is empty");
    }
    s.granularity = parse_granularity(need("granularity").get<std::string>());
    s.meta.strategy = need("strategy").get<std::string>();
    s.meta.task = need("task").get<std::string>();
    const json& cfg = need("config");
    s.meta.config_json = cfg.is_string() ? cfg.get<std::string>() : cfg.dump();
    const json& model = need("model");
    s.meta.n_layers = model.at("n_layers").get<std::size_t>();
    s.meta.d_model = model.at("d_model").get<std::size_t>();
    s.meta.n_heads = model.at("n_heads").get<std::size_t>();
    s.meta.d_mlp = model.at("d_mlp").get<std::size_t>();

    const json& layers = need("layers");
    if (!layers.is_array() || layers.empty()) {
        throw std::runtime_error("load_subnetwork: field 'layers' must be a non-empty array");
    }
    for (const json& e : layers) {
        LayerMask lm;
        std::string id;
        try {
            id = e.at("id").get<std::string>();
            lm.shape = e.at("shape").get<std::vector<std::size_t>>();
        } catch (const json::exception& ex) {
            throw std::runtime_error(std::string("load_subnetwork: bad layer entry: ") + ex.what());
        }
        std::size_t n = shape_total(lm.shape);
        auto bytes = b64_decode(e.at("mask_b64").get<std::string>(), id + ".mask_b64");
        if (bytes.size() != (n + 7) / 8) {
            throw std::runtime_error("load_subnetwork: layer '" + id + "' mask holds " +
                                     std::to_string(bytes.size()) + " bytes, expected " +
                                     std::to_string((n + 7) / 8));
        }
        lm.bits = unpack_bits(bytes, n);
        std::size_t kept_stored = e.at("kept").get<std::size_t>();
        if (kept_stored != lm.kept()) {
            throw std::runtime_error("load_subnetwork: layer '" + id + "' field 'kept' is " +
                                     std::to_string(kept_stored) + " but the mask keeps " +
                                     std::to_string(lm.kept()));
        }
        s.layers.emplace_back(std::move(id), std::move(lm));
    }
    return s;
}

}  // namespace masklab
