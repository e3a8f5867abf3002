#include "masklab/discovery.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "masklab/optim.hpp"

namespace masklab {

using json = nlohmann::ordered_json;

void DiscoveryConfig::validate() const {
    mask.validate();
    if (epochs < 1) throw std::invalid_argument("discovery config: epochs must be >= 1");
    if (!(learning_rate > 0.0)) {
        throw std::invalid_argument("discovery config: learning_rate must be > 0");
    }
    if (task != "all") parse_task(task);  // throws on unknown selector
}

std::string eval_mode_name(EvalMode m) {
    switch (m) {
        case EvalMode::Full: return "full";
        case EvalMode::Subnet: return "subnet";
        case EvalMode::Complement: return "complement";
    }
    return "?";
}

EvalMode parse_eval_mode(const std::string& s) {
    if (s == "full") return EvalMode::Full;
    if (s == "subnet") return EvalMode::Subnet;
    if (s == "complement") return EvalMode::Complement;
    throw std::invalid_argument("unknown eval mode '" + s +
                                "' (expected full, subnet, or complement)");
}

namespace {

TaskDataset slice_for(const TaskDataset& data, const std::string& selector) {
    TaskDataset slice = selector == "all" ? data : filter_task(data, parse_task(selector));
    if (slice.size() == 0) {
        throw std::invalid_argument("discovery: task slice '" + selector + "' is empty");
    }
    return slice;
}

std::string config_snapshot(const DiscoveryConfig& c) {
    json j;
    j["strategy"] = strategy_name(c.mask.strategy);
    j["granularity"] = granularity_name(c.mask.granularity);
    j["task"] = c.task;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["learning_rate"] = c.learning_rate;
    j["seed"] = c.seed;
    j["probe_mode"] = c.probe_mode;
    j["l0_lambda"] = c.mask.l0_lambda;
    switch (c.mask.strategy) {
        case MaskStrategy::HardConcrete:
            j["hc_gamma"] = c.mask.hc_gamma;
            j["hc_zeta"] = c.mask.hc_zeta;
            j["hc_beta"] = c.mask.hc_beta;
            j["hc_init_logalpha"] = c.mask.hc_init_logalpha;
            break;
        case MaskStrategy::ContinuousSparsification:
            j["cs_beta_final"] = c.mask.cs_beta_final;
            j["cs_init_s"] = c.mask.cs_init_s;
            break;
        case MaskStrategy::Magnitude:
            j["prune_fraction"] = c.mask.prune_fraction;
            break;
    }
    return j.dump();
}

// Deterministic (sampling-free) keep probability per entry, for curve metrics.
double soft_keep_mean(const MaskedLayer& layer, const AnnealState& anneal) {
    const auto& p = layer.mask_params.data();
    const MaskConfig& cfg = layer.config;
    double acc = 0.0;
    if (cfg.strategy == MaskStrategy::HardConcrete) {
        double shift = -cfg.hc_beta * std::log(-cfg.hc_gamma / cfg.hc_zeta);
        for (double a : p) acc += 1.0 / (1.0 + std::exp(-(a + shift)));
    } else {
        double beta = anneal.current_beta();
        for (double s : p) acc += 1.0 / (1.0 + std::exp(-beta * s));
    }
    return acc / static_cast<double>(p.size());
}

void assert_unchanged(const Model& model, const std::vector<double>& before, const char* who) {
    std::vector<double> after = model.snapshot();
    if (after != before) {
        throw std::logic_error(std::string(who) +
                               ": base weights changed during mask optimization");
    }
}

DiscoveryResult run_discovery(const Model& model, const TaskDataset& data,
                              const DiscoveryConfig& config, bool probe) {
    config.validate();
    if (!model.frozen) {
        throw std::invalid_argument(
            "discover: model must be frozen first (base weights may not move)");
    }
    if (model.arch != ModelArch::Transformer) {
        throw std::invalid_argument("discover: model is not a transformer");
    }
    if (config.mask.strategy == MaskStrategy::Magnitude) {
        throw std::invalid_argument(
            "discover: magnitude is the non-iterative baseline; use baseline_discover");
    }
    if (probe != config.probe_mode) {
        throw std::invalid_argument(probe ? "probe_discover: config.probe_mode must be true"
                                          : "discover: config.probe_mode set; use probe_discover");
    }

    TaskDataset slice = slice_for(data, config.task);
    std::vector<double> weights_before = model.snapshot();

    auto ids = model.maskable_layer_ids();
    std::map<std::string, MaskedLayer> layers;
    std::vector<Tensor> mask_params;
    std::size_t total_entries = 0;
    for (const std::string& id : ids) {
        auto [w, b] = model.layer_weights(id);
        MaskedLayer layer = make_masked_layer(w, b, config.mask);
        total_entries += layer.mask_params.size();
        mask_params.push_back(layer.mask_params);
        layers.emplace(id, std::move(layer));
    }

    AdamConfig mask_opt_cfg;
    mask_opt_cfg.learning_rate = config.learning_rate;
    Adam mask_opt(mask_params, mask_opt_cfg);

    Rng seed_root(config.seed);
    Rng mask_rng = seed_root.stream("mask-sample");
    Rng batch_rng = seed_root.stream("batch-shuffle");

    // Probe head: fresh linear readout of the final hidden state.
    Tensor probe_w, probe_b;
    std::unique_ptr<Adam> probe_opt;
    if (probe) {
        Rng probe_rng = seed_root.stream("probe-init");
        std::size_t d = model.config.d_model, v = model.config.vocab_size;
        std::vector<double> pw(v * d);
        for (double& x : pw) x = probe_rng.gaussian(0.0, 0.02);
        probe_w = Tensor::from_data({v, d}, std::move(pw), true).set_name("probe.w");
        probe_b = Tensor::zeros({v}, true).set_name("probe.b");
        AdamConfig probe_cfg;  // defaults; masks tolerate big steps, the head does not
        probe_opt = std::make_unique<Adam>(std::vector<Tensor>{probe_w, probe_b}, probe_cfg);
    }

    std::size_t n = slice.size();
    std::size_t bs = config.batch_size == 0 ? n : std::min(config.batch_size, n);
    std::size_t steps_per_epoch = (n + bs - 1) / bs;
    AnnealState anneal;
    anneal.beta_final = config.mask.cs_beta_final;
    anneal.total = config.epochs * steps_per_epoch;

    WeightHook hook = [&](const std::string& id, const Tensor& w, const Tensor& b) {
        const MaskedLayer& layer = layers.at(id);
        Tensor mask = current_mask(layer, &anneal, &mask_rng);
        return apply_mask(w, b, mask, config.mask.granularity);
    };

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});

    DiscoveryResult result;
    double norm = 1.0 / static_cast<double>(total_entries);

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        if (bs < n) batch_rng.shuffle(order);
        double epoch_task_loss = 0.0;
        double last_l0 = 0.0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < n; start += bs) {
            std::size_t stop = std::min(start + bs, n);
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(stop));
            Batch batch = make_batch(slice, idx);

            Tape tape;
            ForwardTrace trace = transformer_apply(model, batch.tokens, hook);
            Tensor answers = probe ? linear(gather_rows(trace.hidden, batch.answer_rows), probe_w,
                                            probe_b)
                                   : gather_rows(trace.logits, batch.answer_rows);
            Tensor task_loss = softmax_cross_entropy(answers, batch.targets);

            Tensor penalty;
            for (const std::string& id : ids) {
                const MaskedLayer& layer = layers.at(id);
                Tensor term = config.mask.strategy == MaskStrategy::HardConcrete
                                  ? hc_expected_l0(layer.mask_params, config.mask)
                                  : sum(cs_soft_mask(layer.mask_params, anneal));
                penalty = penalty.defined() ? add(penalty, term) : term;
            }
            Tensor l0_norm = mul(penalty, norm);
            Tensor loss = add(task_loss, mul(l0_norm, config.mask.l0_lambda));

            double tl = task_loss.value();
            double l0 = l0_norm.value();
            if (!std::isfinite(loss.value())) {
                std::ostringstream os;
                os << "discover: non-finite loss at epoch " << epoch + 1 << " step " << steps + 1
                   << " (task_loss=" << tl << ", normalized_l0=" << l0 << "); aborting";
                throw std::runtime_error(os.str());
            }
            tape.backward(loss);
            mask_opt.step();
            mask_opt.zero_grad();
            if (probe_opt) {
                probe_opt->step();
                probe_opt->zero_grad();
            }
            anneal.advance();
            epoch_task_loss += tl;
            last_l0 = l0;
            ++steps;
        }

        CurvePoint point;
        point.epoch = epoch + 1;
        point.task_loss = epoch_task_loss / static_cast<double>(steps);
        point.l0_value = last_l0;
        double keep = 0.0;
        for (const std::string& id : ids) {
            const MaskedLayer& layer = layers.at(id);
            keep += soft_keep_mean(layer, anneal) *
                    static_cast<double>(layer.mask_params.size());
        }
        point.soft_sparsity = 1.0 - keep * norm;
        result.curve.push_back(point);
    }

    assert_unchanged(model, weights_before, "discover");

    std::vector<std::pair<std::string, Tensor>> final_masks;
    for (const std::string& id : ids) {
        MaskedLayer& layer = layers.at(id);
        layer.mode = MaskedLayer::Mode::Eval;
        Tensor hard = config.mask.strategy == MaskStrategy::HardConcrete
                          ? hc_eval_mask(layer.mask_params, config.mask)
                          : cs_final_mask(layer.mask_params);
        final_masks.emplace_back(id, hard);
    }

    SubnetworkMeta meta;
    meta.strategy = probe ? "probe+" + strategy_name(config.mask.strategy)
                          : strategy_name(config.mask.strategy);
    meta.task = config.task;
    meta.config_json = config_snapshot(config);
    result.subnetwork = make_subnetwork(model, config.mask.granularity, final_masks, meta);

    result.final_task_loss = result.curve.back().task_loss;
    result.final_l0 = result.curve.back().l0_value;

    if (probe) {
        // Hard-mask forward through the probe head.
        WeightHook hard_hook = [&](const std::string& id, const Tensor& w, const Tensor& b) {
            const LayerMask* lm = result.subnetwork.find(id);
            std::vector<double> mv(lm->bits.begin(), lm->bits.end());
            Tensor mask = Tensor::from_data(lm->shape, std::move(mv), false);
            return apply_mask(w, b, mask, config.mask.granularity);
        };
        Batch batch = make_batch(slice);
        ForwardTrace trace = transformer_apply(model, batch.tokens, hard_hook);
        Tensor answers = linear(gather_rows(trace.hidden, batch.answer_rows), probe_w, probe_b);
        std::size_t vocab = answers.dim(1);
        std::size_t correct = 0;
        for (std::size_t i = 0; i < batch.targets.size(); ++i) {
            const double* row = answers.data().data() + i * vocab;
            std::size_t best = 0;
            for (std::size_t j = 1; j < vocab; ++j) {
                if (row[j] > row[best]) best = j;
            }
            if (best == static_cast<std::size_t>(batch.targets[i])) ++correct;
        }
        result.train_eval.accuracy =
            static_cast<double>(correct) / static_cast<double>(batch.targets.size());
        result.train_eval.loss = softmax_cross_entropy(answers, batch.targets).value();
        result.train_eval.count = batch.targets.size();
    } else {
        result.train_eval = evaluate(model, &result.subnetwork, slice, EvalMode::Subnet);
    }
    assert_unchanged(model, weights_before, "discover");
    return result;
}

}  // namespace

DiscoveryResult discover(const Model& model, const TaskDataset& data,
                         const DiscoveryConfig& config) {
    return run_discovery(model, data, config, false);
}

DiscoveryResult probe_discover(const Model& model, const TaskDataset& data,
                               const DiscoveryConfig& config) {
    return run_discovery(model, data, config, true);
}

DiscoveryResult baseline_discover(const Model& model, const DiscoveryConfig& config) {
    config.validate();
    if (config.mask.strategy != MaskStrategy::Magnitude) {
        throw std::invalid_argument("baseline_discover: strategy must be magnitude");
    }
    if (!model.frozen) {
        throw std::invalid_argument(
            "baseline_discover: model must be frozen first (base weights may not move)");
    }
    std::vector<double> weights_before = model.snapshot();

    std::vector<std::pair<std::string, Tensor>> masks;
    for (const std::string& id : model.maskable_layer_ids()) {
        auto [w, b] = model.layer_weights(id);
        masks.emplace_back(
            id, magnitude_mask(w, config.mask.prune_fraction, config.mask.granularity));
    }
    SubnetworkMeta meta;
    meta.strategy = strategy_name(MaskStrategy::Magnitude);
    meta.task = config.task;
    meta.config_json = config_snapshot(config);

    DiscoveryResult result;
    result.subnetwork = make_subnetwork(model, config.mask.granularity, masks, meta);
    assert_unchanged(model, weights_before, "baseline_discover");
    return result;
}

EvalResult evaluate(const Model& model, const Subnetwork* subnet, const TaskDataset& data,
                    EvalMode mode) {
    if (mode != EvalMode::Full && !subnet) {
        throw std::invalid_argument("evaluate: " + eval_mode_name(mode) +
                                    " mode needs a subnetwork");
    }
    if (data.size() == 0) throw std::invalid_argument("evaluate: empty dataset");

    WeightHook hook;
    if (mode != EvalMode::Full) {
        std::string fp = model_fingerprint(model);
        if (subnet->fingerprint != fp) {
            throw std::invalid_argument("evaluate: subnetwork fingerprint " + subnet->fingerprint +
                                        " does not match model " + fp);
        }
        auto ids = model.maskable_layer_ids();
        for (const std::string& id : ids) {
            if (!subnet->find(id)) {
                throw std::invalid_argument("evaluate: subnetwork has no mask for layer '" + id +
                                            "'");
            }
        }
        bool flip = mode == EvalMode::Complement;
        Granularity g = subnet->granularity;
        hook = [subnet, flip, g](const std::string& id, const Tensor& w, const Tensor& b) {
            const LayerMask* lm = subnet->find(id);
            std::vector<double> mv(lm->bits.size());
            for (std::size_t i = 0; i < lm->bits.size(); ++i) {
                mv[i] = flip ? 1.0 - lm->bits[i] : lm->bits[i];
            }
            Tensor mask = Tensor::from_data(lm->shape, std::move(mv), false);
            return apply_mask(w, b, mask, g);
        };
    }

    Batch batch = make_batch(data);
    ForwardTrace trace = transformer_apply(model, batch.tokens, hook);
    Tensor answers = gather_rows(trace.logits, batch.answer_rows);
    EvalResult r;
    r.count = batch.targets.size();
    r.loss = softmax_cross_entropy(answers, batch.targets).value();
    std::size_t vocab = answers.dim(1);
    std::size_t correct = 0;
    const auto& lv = answers.data();
    for (std::size_t i = 0; i < batch.targets.size(); ++i) {
        const double* row = lv.data() + i * vocab;
        std::size_t best = 0;
        for (std::size_t j = 1; j < vocab; ++j) {
            if (row[j] > row[best]) best = j;
        }
        if (best == static_cast<std::size_t>(batch.targets[i])) ++correct;
    }
    r.accuracy = static_cast<double>(correct) / static_cast<double>(r.count);
    return r;
}

std::string curve_to_csv(const std::vector<CurvePoint>& curve) {
    std::ostringstream os;
    os << "epoch,task_loss,l0_value,soft_sparsity\n";
    char buf[160];
    for (const CurvePoint& p : curve) {
        std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g\n", p.epoch, p.task_loss, p.l0_value,
                      p.soft_sparsity);
        os << buf;
    }
    return os.str();
}

}  // namespace masklab
