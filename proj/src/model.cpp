#include "masklab/model.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace masklab {

using json = nlohmann::ordered_json;

void TransformerConfig::validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_mlp < 1 || vocab_size < 1 ||
        max_seq_len < 1) {
        throw std::invalid_argument("transformer config: all sizes must be >= 1");
    }
    if (d_model % n_heads != 0) {
        throw std::invalid_argument("transformer config: d_model " + std::to_string(d_model) +
                                    " not divisible by n_heads " + std::to_string(n_heads));
    }
}

namespace {

struct ParamSpec {
    std::string name;
    std::vector<std::size_t> shape;
    enum class Init { Gaussian, Zero, One } init;
};

std::vector<ParamSpec> param_specs(ModelArch arch, const TransformerConfig& cfg,
                                   const std::vector<std::size_t>& widths) {
    using Init = ParamSpec::Init;
    std::vector<ParamSpec> specs;
    if (arch == ModelArch::Mlp) {
        if (widths.size() < 2) throw std::invalid_argument("mlp: need at least 2 widths");
        for (std::size_t w : widths) {
            if (w < 1) throw std::invalid_argument("mlp: widths must be >= 1");
        }
        for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
            std::string id = "mlp.fc" + std::to_string(i + 1);
            specs.push_back({id + ".w", {widths[i + 1], widths[i]}, Init::Gaussian});
            specs.push_back({id + ".b", {widths[i + 1]}, Init::Zero});
        }
        return specs;
    }
    cfg.validate();
    std::size_t d = cfg.d_model;
    specs.push_back({"embed.tok", {cfg.vocab_size, d}, Init::Gaussian});
    specs.push_back({"embed.pos", {cfg.max_seq_len, d}, Init::Gaussian});
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        specs.push_back({p + "ln1.gamma", {d}, Init::One});
        specs.push_back({p + "ln1.beta", {d}, Init::Zero});
        for (const char* s : {"q", "k", "v", "o"}) {
            specs.push_back({p + "attn." + s + ".w", {d, d}, Init::Gaussian});
            specs.push_back({p + "attn." + s + ".b", {d}, Init::Zero});
        }
        specs.push_back({p + "ln2.gamma", {d}, Init::One});
        specs.push_back({p + "ln2.beta", {d}, Init::Zero});
        specs.push_back({p + "mlp.fc1.w", {cfg.d_mlp, d}, Init::Gaussian});
        specs.push_back({p + "mlp.fc1.b", {cfg.d_mlp}, Init::Zero});
        specs.push_back({p + "mlp.fc2.w", {d, cfg.d_mlp}, Init::Gaussian});
        specs.push_back({p + "mlp.fc2.b", {d}, Init::Zero});
    }
    specs.push_back({"final_ln.gamma", {d}, Init::One});
    specs.push_back({"final_ln.beta", {d}, Init::Zero});
    specs.push_back({"unembed.w", {cfg.vocab_size, d}, Init::Gaussian});
    return specs;
}

Model build_from_specs(ModelArch arch, const TransformerConfig& cfg,
                       const std::vector<std::size_t>& widths, std::uint64_t seed) {
    Model m;
    m.arch = arch;
    m.config = cfg;
    m.widths = widths;
    Rng rng = Rng(seed).stream("init");
    for (const ParamSpec& s : param_specs(arch, cfg, widths)) {
        Tensor t;
        switch (s.init) {
            case ParamSpec::Init::Gaussian: {
                std::size_t n = 1;
                for (std::size_t dmm : s.shape) n *= dmm;
                std::vector<double> data(n);
                for (double& v : data) v = rng.gaussian(0.0, 0.02);
                t = Tensor::from_data(s.shape, std::move(data), true);
                break;
            }
            case ParamSpec::Init::Zero:
                t = Tensor::zeros(s.shape, true);
                break;
            case ParamSpec::Init::One:
                t = Tensor::full(s.shape, 1.0, true);
                break;
        }
        t.set_name(s.name);
        m.params.emplace_back(s.name, t);
    }
    return m;
}

std::pair<Tensor, Tensor> hooked_weights(const Model& m, const WeightHook& hook,
                                         const std::string& layer_id) {
    Tensor w = m.param(layer_id + ".w");
    Tensor b = m.param(layer_id + ".b");
    if (hook) return hook(layer_id, w, b);
    return {w, b};
}

}  // namespace

const Tensor& Model::param(const std::string& name) const {
    for (const auto& [n, t] : params) {
        if (n == name) return t;
    }
    throw std::out_of_range("model: no parameter named '" + name + "'");
}

bool Model::has_param(const std::string& name) const {
    for (const auto& [n, t] : params) {
        if (n == name) return true;
    }
    return false;
}

std::vector<std::string> Model::maskable_layer_ids() const {
    std::vector<std::string> ids;
    if (arch == ModelArch::Mlp) {
        for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
            ids.push_back("mlp.fc" + std::to_string(i + 1));
        }
        return ids;
    }
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        for (const char* s : {"q", "k", "v", "o"}) ids.push_back(p + "attn." + s);
        ids.push_back(p + "mlp.fc1");
        ids.push_back(p + "mlp.fc2");
    }
    return ids;
}

std::pair<Tensor, Tensor> Model::layer_weights(const std::string& layer_id) const {
    return {param(layer_id + ".w"), param(layer_id + ".b")};
}

void Model::freeze() {
    frozen = true;
    for (auto& [n, t] : params) {
        t.set_requires_grad(false);
        t.zero_grad();
    }
}

std::vector<double> Model::snapshot() const {
    std::vector<double> flat;
    for (const auto& [n, t] : params) {
        flat.insert(flat.end(), t.data().begin(), t.data().end());
    }
    return flat;
}

Model build_transformer(const TransformerConfig& config, std::uint64_t seed) {
    config.validate();
    return build_from_specs(ModelArch::Transformer, config, {}, seed);
}

Model build_mlp(const std::vector<std::size_t>& widths, std::uint64_t seed) {
    TransformerConfig unused;
    return build_from_specs(ModelArch::Mlp, unused, widths, seed);
}

ForwardTrace transformer_apply(const Model& m, const std::vector<std::vector<int>>& tokens,
                               const WeightHook& hook) {
    if (m.arch != ModelArch::Transformer) {
        throw std::invalid_argument("forward: model is not a transformer");
    }
    std::size_t batch = tokens.size();
    if (batch == 0) throw std::invalid_argument("forward: empty batch");
    std::size_t seq = tokens[0].size();
    if (seq == 0 || seq > m.config.max_seq_len) {
        throw std::invalid_argument("forward: sequence length " + std::to_string(seq) +
                                    " outside [1, " + std::to_string(m.config.max_seq_len) + "]");
    }
    std::vector<int> flat;
    flat.reserve(batch * seq);
    std::vector<int> pos;
    pos.reserve(batch * seq);
    for (const auto& row : tokens) {
        if (row.size() != seq) {
            throw std::invalid_argument("forward: ragged batch (rows must share one length)");
        }
        for (int id : row) {
            if (id < 0 || static_cast<std::size_t>(id) >= m.config.vocab_size) {
                throw std::out_of_range("forward: token id " + std::to_string(id) +
                                        " outside vocab of " +
                                        std::to_string(m.config.vocab_size));
            }
            flat.push_back(id);
        }
        for (std::size_t i = 0; i < seq; ++i) pos.push_back(static_cast<int>(i));
    }

    Tensor x = add(embedding(m.param("embed.tok"), flat), embedding(m.param("embed.pos"), pos));
    for (std::size_t l = 0; l < m.config.n_layers; ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        Tensor h = layer_norm(x, m.param(p + "ln1.gamma"), m.param(p + "ln1.beta"));
        auto [qw, qb] = hooked_weights(m, hook, p + "attn.q");
        auto [kw, kb] = hooked_weights(m, hook, p + "attn.k");
        auto [vw, vb] = hooked_weights(m, hook, p + "attn.v");
        auto [ow, ob] = hooked_weights(m, hook, p + "attn.o");
        Tensor q = linear(h, qw, qb);
        Tensor k = linear(h, kw, kb);
        Tensor v = linear(h, vw, vb);
        Tensor a = multihead_causal_attention(q, k, v, batch, seq, m.config.n_heads);
        x = add(x, linear(a, ow, ob));

        Tensor h2 = layer_norm(x, m.param(p + "ln2.gamma"), m.param(p + "ln2.beta"));
        auto [f1w, f1b] = hooked_weights(m, hook, p + "mlp.fc1");
        auto [f2w, f2b] = hooked_weights(m, hook, p + "mlp.fc2");
        Tensor f = linear(gelu(linear(h2, f1w, f1b)), f2w, f2b);
        x = add(x, f);
    }
    ForwardTrace out;
    out.hidden = layer_norm(x, m.param("final_ln.gamma"), m.param("final_ln.beta"));
    out.logits = linear(out.hidden, m.param("unembed.w"), Tensor());
    return out;
}

Tensor forward(const Model& m, const std::vector<std::vector<int>>& tokens,
               const WeightHook& hook) {
    Tensor logits = transformer_apply(m, tokens, hook).logits;
    return reshape(logits, {tokens.size(), tokens[0].size(), m.config.vocab_size});
}

Tensor mlp_apply(const Model& m, const Tensor& x, const WeightHook& hook) {
    if (m.arch != ModelArch::Mlp) throw std::invalid_argument("mlp_apply: model is not an MLP");
    Tensor h = x;
    std::size_t n_layers = m.widths.size() - 1;
    for (std::size_t i = 0; i < n_layers; ++i) {
        std::string id = "mlp.fc" + std::to_string(i + 1);
        auto [w, b] = hooked_weights(m, hook, id);
        h = linear(h, w, b);
        if (i + 1 < n_layers) h = gelu(h);
    }
    return h;
}

std::vector<HeadSlice> attention_head_slices(const Model& m, std::size_t layer) {
    if (m.arch != ModelArch::Transformer) {
        throw std::invalid_argument("attention_head_slices: model is not a transformer");
    }
    if (layer >= m.config.n_layers) {
        throw std::out_of_range("attention_head_slices: layer " + std::to_string(layer) +
                                " outside " + std::to_string(m.config.n_layers) + " layers");
    }
    std::size_t dh = m.config.d_head();
    std::vector<HeadSlice> slices;
    for (std::size_t h = 0; h < m.config.n_heads; ++h) {
        slices.push_back({h, h * dh, (h + 1) * dh});
    }
    return slices;
}

namespace {

std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

std::vector<unsigned char> blob_bytes(const Model& m) {
    std::size_t total = 0;
    for (const auto& [n, t] : m.params) total += t.size();
    std::vector<unsigned char> bytes(total * sizeof(double));
    std::size_t off = 0;
    for (const auto& [n, t] : m.params) {
        std::memcpy(bytes.data() + off, t.data().data(), t.size() * sizeof(double));
        off += t.size() * sizeof(double);
    }
    return bytes;
}

// Canonical identity string: architecture, parameter names/shapes, and the
// digest of the weight bytes. File paths deliberately excluded so a relocated
// checkpoint keeps its fingerprint.
std::string canonical_core(const Model& m, const std::string& weights_digest) {
    std::ostringstream os;
    if (m.arch == ModelArch::Transformer) {
        const auto& c = m.config;
        os << "arch=transformer;n_layers=" << c.n_layers << ";d_model=" << c.d_model
           << ";n_heads=" << c.n_heads << ";d_mlp=" << c.d_mlp << ";vocab_size=" << c.vocab_size
           << ";max_seq_len=" << c.max_seq_len << ";causal=" << (c.causal ? 1 : 0) << ";";
    } else {
        os << "arch=mlp;widths=";
        for (std::size_t i = 0; i < m.widths.size(); ++i) {
            if (i) os << ",";
            os << m.widths[i];
        }
        os << ";";
    }
    for (const auto& [n, t] : m.params) {
        os << n << ":" << shape_str(t.shape()) << ";";
    }
    os << "weights=" << weights_digest;
    return os.str();
}

json config_to_json(const Model& m) {
    json j;
    if (m.arch == ModelArch::Transformer) {
        const auto& c = m.config;
        j["n_layers"] = c.n_layers;
        j["d_model"] = c.d_model;
        j["n_heads"] = c.n_heads;
        j["d_mlp"] = c.d_mlp;
        j["vocab_size"] = c.vocab_size;
        j["max_seq_len"] = c.max_seq_len;
        j["causal"] = c.causal;
    } else {
        j["widths"] = m.widths;
    }
    return j;
}

std::string blob_path_for(const std::string& manifest_path) {
    if (manifest_path.size() > 5 && manifest_path.rfind(".json") == manifest_path.size() - 5) {
        return manifest_path.substr(0, manifest_path.size() - 5) + ".bin";
    }
    return manifest_path + ".bin";
}

std::string basename_of(const std::string& path) {
    std::size_t slash = path.find_last_of('/');
    return slash == std::string::npos ? path : path.substr(slash + 1);
}

std::string dirname_of(const std::string& path) {
    std::size_t slash = path.find_last_of('/');
    return slash == std::string::npos ? std::string() : path.substr(0, slash + 1);
}

}  // namespace

std::string model_fingerprint(const Model& m) {
    auto bytes = blob_bytes(m);
    std::string digest = hex64(fnv1a64(bytes.data(), bytes.size()));
    return hex64(fnv1a64(canonical_core(m, digest)));
}

std::string save_checkpoint(const Model& m, const std::string& path) {
    auto bytes = blob_bytes(m);
    std::string digest = hex64(fnv1a64(bytes.data(), bytes.size()));
    std::string fingerprint = hex64(fnv1a64(canonical_core(m, digest)));

    std::string blob_path = blob_path_for(path);
    {
        std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
        if (!blob) throw std::runtime_error("save_checkpoint: cannot open " + blob_path);
        blob.write(reinterpret_cast<const char*>(bytes.data()),
                   static_cast<std::streamsize>(bytes.size()));
        if (!blob) throw std::runtime_error("save_checkpoint: short write to " + blob_path);
    }

    json manifest;
    manifest["format"] = "model-checkpoint";
    manifest["version"] = 1;
    manifest["arch"] = m.arch == ModelArch::Transformer ? "transformer" : "mlp";
    manifest["config"] = config_to_json(m);
    json tensors = json::array();
    std::size_t off = 0;
    for (const auto& [n, t] : m.params) {
        json e;
        e["name"] = n;
        e["shape"] = t.shape();
        e["offset"] = off;
        tensors.push_back(e);
        off += t.size();
    }
    manifest["tensors"] = std::move(tensors);
    manifest["blob"] = basename_of(blob_path);
    manifest["blob_f64_count"] = off;
    manifest["weights_digest"] = digest;
    manifest["fingerprint"] = fingerprint;

    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    out << manifest.dump(2) << "\n";
    if (!out) throw std::runtime_error("save_checkpoint: short write to " + path);
    return fingerprint;
}

Model load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    json manifest;
    try {
        manifest = json::parse(in);
    } catch (const json::exception& e) {
        throw std::runtime_error("load_checkpoint: " + path + " is not valid JSON: " + e.what());
    }
    auto need = [&](const char* key) -> const json& {
        if (!manifest.contains(key)) {
            throw std::runtime_error("load_checkpoint: manifest missing field '" +
                                     std::string(key) + "'");
        }
        return manifest[key];
    };
    if (need("format") != "model-checkpoint") {
        throw std::runtime_error("load_checkpoint: unrecognized format field");
    }
    if (need("version").get<int>() != 1) {
        throw std::runtime_error("load_checkpoint: unsupported version");
    }

    Model m;
    std::string arch = need("arch").get<std::string>();
    const json& cfg = need("config");
    if (arch == "transformer") {
        m.arch = ModelArch::Transformer;
        m.config.n_layers = cfg.at("n_layers").get<std::size_t>();
        m.config.d_model = cfg.at("d_model").get<std::size_t>();
        m.config.n_heads = cfg.at("n_heads").get<std::size_t>();
        m.config.d_mlp = cfg.at("d_mlp").get<std::size_t>();
        m.config.vocab_size = cfg.at("vocab_size").get<std::size_t>();
        m.config.max_seq_len = cfg.at("max_seq_len").get<std::size_t>();
        m.config.causal = cfg.at("causal").get<bool>();
    } else if (arch == "mlp") {
        m.arch = ModelArch::Mlp;
        m.widths = cfg.at("widths").get<std::vector<std::size_t>>();
    } else {
        throw std::runtime_error("load_checkpoint: unknown arch '" + arch + "'");
    }

    auto specs = param_specs(m.arch, m.config, m.widths);
    const json& tensors = need("tensors");
    if (!tensors.is_array() || tensors.size() != specs.size()) {
        throw std::runtime_error("load_checkpoint: manifest field 'tensors' does not match the " +
                                 std::to_string(specs.size()) + " parameters of this arch");
    }

    std::string blob_path = dirname_of(path) + need("blob").get<std::string>();
    std::ifstream blob(blob_path, std::ios::binary);
    if (!blob) throw std::runtime_error("load_checkpoint: cannot open blob " + blob_path);
    blob.seekg(0, std::ios::end);
    std::size_t blob_bytes_len = static_cast<std::size_t>(blob.tellg());
    blob.seekg(0);
    std::size_t expect_count = need("blob_f64_count").get<std::size_t>();
    if (blob_bytes_len != expect_count * sizeof(double)) {
        throw std::runtime_error("load_checkpoint: blob " + blob_path + " holds " +
                                 std::to_string(blob_bytes_len) + " bytes, manifest expects " +
                                 std::to_string(expect_count * sizeof(double)));
    }

    std::size_t off = 0;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const json& e = tensors[i];
        if (e.at("name").get<std::string>() != specs[i].name) {
            throw std::runtime_error("load_checkpoint: tensor " + std::to_string(i) +
                                     " named '" + e.at("name").get<std::string>() +
                                     "', expected '" + specs[i].name + "'");
        }
        if (e.at("shape").get<std::vector<std::size_t>>() != specs[i].shape) {
            throw std::runtime_error("load_checkpoint: tensor '" + specs[i].name +
                                     "' has unexpected shape in manifest");
        }
        if (e.at("offset").get<std::size_t>() != off) {
            throw std::runtime_error("load_checkpoint: tensor '" + specs[i].name +
                                     "' has unexpected offset in manifest");
        }
        std::size_t n = 1;
        for (std::size_t d : specs[i].shape) n *= d;
        std::vector<double> data(n);
        blob.read(reinterpret_cast<char*>(data.data()),
                  static_cast<std::streamsize>(n * sizeof(double)));
        if (!blob) throw std::runtime_error("load_checkpoint: truncated blob " + blob_path);
        Tensor t = Tensor::from_data(specs[i].shape, std::move(data), true);
        t.set_name(specs[i].name);
        m.params.emplace_back(specs[i].name, t);
        off += n;
    }

    std::string digest_stored = need("weights_digest").get<std::string>();
    auto bytes = blob_bytes(m);
    std::string digest = hex64(fnv1a64(bytes.data(), bytes.size()));
    if (digest != digest_stored) {
        throw std::runtime_error("load_checkpoint: field 'weights_digest' " + digest_stored +
                                 " does not match blob contents " + digest);
    }
    std::string fp_stored = need("fingerprint").get<std::string>();
    std::string fp = hex64(fnv1a64(canonical_core(m, digest)));
    if (fp != fp_stored) {
        throw std::runtime_error("load_checkpoint: field 'fingerprint' " + fp_stored +
                                 " does not match recomputation " + fp);
    }
    return m;
}

}  // namespace masklab
