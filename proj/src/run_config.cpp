#include "masklab/run_config.hpp"

#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace masklab {

using json = nlohmann::ordered_json;

TransformerConfig RunConfig::resolved_model() const {
    TransformerConfig m = model;
    if (m.vocab_size == 0) m.vocab_size = static_cast<std::size_t>(task.modulus) + 4;
    if (m.max_seq_len == 0) m.max_seq_len = 5;
    return m;
}

std::string LoadedRunConfig::origin_of(const std::string& key) const {
    auto it = origin.find(key);
    return it == origin.end() ? "default" : it->second;
}

namespace {

// Walks one JSON object section, rejecting keys not in the handler table.
class Section {
  public:
    Section(const json& j, std::string path, const std::string& label,
            std::map<std::string, std::string>& origin)
        : j_(j), path_(std::move(path)), label_(label), origin_(origin) {
        if (!j_.is_object()) {
            throw std::runtime_error("config (" + label_ + "): '" + path_ +
                                     "' must be a JSON object");
        }
    }

    template <typename T>
    void field(const char* key, T& out) {
        known_.push_back(key);
        if (!j_.contains(key)) return;
        try {
            out = j_[key].get<T>();
        } catch (const json::exception&) {
            throw std::runtime_error("config (" + label_ + "): bad value for '" + dotted(key) +
                                     "'");
        }
        origin_[dotted(key)] = label_;
    }

    void field_enum(const char* key, std::string& out) { field(key, out); }

    const json* subsection(const char* key) {
        known_.push_back(key);
        if (!j_.contains(key)) return nullptr;
        origin_[dotted(key)] = label_;
        return &j_[key];
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            bool ok = false;
            for (const std::string& k : known_) {
                if (k == it.key()) {
                    ok = true;
                    break;
                }
            }
            if (!ok) {
                throw std::runtime_error("config (" + label_ + "): unknown key '" +
                                         dotted(it.key().c_str()) + "'");
            }
        }
    }

  private:
    std::string dotted(const std::string& key) const {
        return path_.empty() ? key : path_ + "." + key;
    }
    const json& j_;
    std::string path_;
    const std::string& label_;
    std::map<std::string, std::string>& origin_;
    std::vector<std::string> known_;
};

}  // namespace

LoadedRunConfig parse_run_config(const std::string& json_text, const std::string& origin_label) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw std::runtime_error("config (" + origin_label + "): not valid JSON: " + e.what());
    }
    LoadedRunConfig loaded;
    RunConfig& c = loaded.config;

    Section root(j, "", origin_label, loaded.origin);
    root.field("seed", c.seed);

    if (const json* jm = root.subsection("model")) {
        Section s(*jm, "model", origin_label, loaded.origin);
        s.field("n_layers", c.model.n_layers);
        s.field("d_model", c.model.d_model);
        s.field("n_heads", c.model.n_heads);
        s.field("d_mlp", c.model.d_mlp);
        s.field("vocab_size", c.model.vocab_size);
        s.field("max_seq_len", c.model.max_seq_len);
        s.field("causal", c.model.causal);
        s.finish();
    }
    if (const json* jt = root.subsection("task")) {
        Section s(*jt, "task", origin_label, loaded.origin);
        s.field("modulus", c.task.modulus);
        s.field("split_fraction", c.task.split_fraction);
        s.finish();
    }
    if (const json* jb = root.subsection("base_training")) {
        Section s(*jb, "base_training", origin_label, loaded.origin);
        s.field("epochs", c.base_training.epochs);
        s.field("batch_size", c.base_training.batch_size);
        s.field("learning_rate", c.base_training.learning_rate);
        s.field("target_train_accuracy", c.base_training.target_train_accuracy);
        s.field("eval_every", c.base_training.eval_every);
        s.finish();
    }
    if (const json* jd = root.subsection("discovery")) {
        Section s(*jd, "discovery", origin_label, loaded.origin);
        std::string strategy = strategy_name(c.discovery.mask.strategy);
        std::string granularity = granularity_name(c.discovery.mask.granularity);
        s.field_enum("strategy", strategy);
        s.field_enum("granularity", granularity);
        c.discovery.mask.strategy = parse_strategy(strategy);
        c.discovery.mask.granularity = parse_granularity(granularity);
        s.field("task", c.discovery.task);
        s.field("epochs", c.discovery.epochs);
        s.field("batch_size", c.discovery.batch_size);
        s.field("learning_rate", c.discovery.learning_rate);
        s.field("probe_mode", c.discovery.probe_mode);
        s.field("l0_lambda", c.discovery.mask.l0_lambda);
        s.field("prune_fraction", c.discovery.mask.prune_fraction);
        s.field("hc_gamma", c.discovery.mask.hc_gamma);
        s.field("hc_zeta", c.discovery.mask.hc_zeta);
        s.field("hc_beta", c.discovery.mask.hc_beta);
        s.field("hc_init_logalpha", c.discovery.mask.hc_init_logalpha);
        s.field("cs_beta_final", c.discovery.mask.cs_beta_final);
        s.field("cs_init_s", c.discovery.mask.cs_init_s);
        s.finish();
    }
    root.finish();
    return loaded;
}

LoadedRunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_run_config(text, "file");
}

std::string run_config_to_json(const RunConfig& c) {
    json j;
    j["seed"] = c.seed;
    json jm;
    jm["n_layers"] = c.model.n_layers;
    jm["d_model"] = c.model.d_model;
    jm["n_heads"] = c.model.n_heads;
    jm["d_mlp"] = c.model.d_mlp;
    jm["vocab_size"] = c.model.vocab_size;
    jm["max_seq_len"] = c.model.max_seq_len;
    jm["causal"] = c.model.causal;
    j["model"] = std::move(jm);
    json jt;
    jt["modulus"] = c.task.modulus;
    jt["split_fraction"] = c.task.split_fraction;
    j["task"] = std::move(jt);
    json jb;
    jb["epochs"] = c.base_training.epochs;
    jb["batch_size"] = c.base_training.batch_size;
    jb["learning_rate"] = c.base_training.learning_rate;
    jb["target_train_accuracy"] = c.base_training.target_train_accuracy;
    jb["eval_every"] = c.base_training.eval_every;
    j["base_training"] = std::move(jb);
    json jd;
    jd["strategy"] = strategy_name(c.discovery.mask.strategy);
    jd["granularity"] = granularity_name(c.discovery.mask.granularity);
    jd["task"] = c.discovery.task;
    jd["epochs"] = c.discovery.epochs;
    jd["batch_size"] = c.discovery.batch_size;
    jd["learning_rate"] = c.discovery.learning_rate;
    jd["probe_mode"] = c.discovery.probe_mode;
    jd["l0_lambda"] = c.discovery.mask.l0_lambda;
    jd["prune_fraction"] = c.discovery.mask.prune_fraction;
    jd["hc_gamma"] = c.discovery.mask.hc_gamma;
    jd["hc_zeta"] = c.discovery.mask.hc_zeta;
    jd["hc_beta"] = c.discovery.mask.hc_beta;
    jd["hc_init_logalpha"] = c.discovery.mask.hc_init_logalpha;
    jd["cs_beta_final"] = c.discovery.mask.cs_beta_final;
    jd["cs_init_s"] = c.discovery.mask.cs_init_s;
    j["discovery"] = std::move(jd);
    return j.dump(2) + "\n";
}

}  // namespace masklab
