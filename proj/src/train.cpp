#include "masklab/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "masklab/optim.hpp"
#include "masklab/rng.hpp"

namespace masklab {

namespace {

// Forward on the whole dataset (no tape), returning (accuracy, mean loss).
std::pair<double, double> eval_on(const Model& model, const TaskDataset& data) {
    if (data.size() == 0) return {0.0, 0.0};
    Batch batch = make_batch(data);
    ForwardTrace trace = transformer_apply(model, batch.tokens);
    Tensor answers = gather_rows(trace.logits, batch.answer_rows);
    double loss = softmax_cross_entropy(answers, batch.targets).value();
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
    return {static_cast<double>(correct) / static_cast<double>(batch.targets.size()), loss};
}

void restore(Model& model, const std::vector<double>& snapshot) {
    std::size_t off = 0;
    for (auto& [name, t] : model.params) {
        std::copy(snapshot.begin() + static_cast<std::ptrdiff_t>(off),
                  snapshot.begin() + static_cast<std::ptrdiff_t>(off + t.size()),
                  t.data().begin());
        off += t.size();
    }
}

}  // namespace

std::pair<double, double> accuracy_and_loss(const Model& model, const TaskDataset& data) {
    return eval_on(model, data);
}

BaseTrainResult train_base(Model& model, const TaskDataset& train, const TaskDataset& test,
                           const BaseTrainConfig& config) {
    if (model.arch != ModelArch::Transformer) {
        throw std::invalid_argument("train_base: model is not a transformer");
    }
    if (model.frozen) throw std::invalid_argument("train_base: model is frozen");
    if (config.epochs < 1) throw std::invalid_argument("train_base: epochs must be >= 1");
    if (train.size() == 0) throw std::invalid_argument("train_base: empty training set");

    std::vector<Tensor> params;
    for (auto& [name, t] : model.params) params.push_back(t);
    AdamConfig opt_cfg;
    opt_cfg.learning_rate = config.learning_rate;
    Adam opt(params, opt_cfg);

    Rng shuffle_rng = Rng(config.seed).stream("base-train");
    std::size_t n = train.size();
    std::size_t bs = config.batch_size == 0 ? n : std::min(config.batch_size, n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});

    BaseTrainResult result;
    std::vector<double> last_good = model.snapshot();

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        if (bs < n) shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t steps = 0;
        bool finite = true;
        for (std::size_t start = 0; start < n; start += bs) {
            std::size_t stop = std::min(start + bs, n);
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(stop));
            Batch batch = make_batch(train, idx);
            Tape tape;
            ForwardTrace trace = transformer_apply(model, batch.tokens);
            Tensor answers = gather_rows(trace.logits, batch.answer_rows);
            Tensor loss = softmax_cross_entropy(answers, batch.targets);
            double lv = loss.value();
            if (!std::isfinite(lv)) {
                finite = false;
                break;
            }
            tape.backward(loss);
            opt.step();
            opt.zero_grad();
            epoch_loss += lv;
            ++steps;
        }
        if (!finite) {
            restore(model, last_good);
            result.diverged = true;
            break;
        }
        last_good = model.snapshot();
        result.epochs_run = epoch + 1;

        TrainEpochStat stat;
        stat.epoch = epoch + 1;
        stat.loss = epoch_loss / static_cast<double>(steps);
        bool check = (epoch + 1) % std::max<std::size_t>(config.eval_every, 1) == 0 ||
                     epoch + 1 == config.epochs;
        if (check) {
            stat.train_accuracy = eval_on(model, train).first;
        }
        result.curve.push_back(stat);
        if (check && stat.train_accuracy >= config.target_train_accuracy) break;
    }

    auto [train_acc, train_loss] = eval_on(model, train);
    auto [test_acc, test_loss] = eval_on(model, test);
    result.final_train_accuracy = train_acc;
    result.final_train_loss = train_loss;
    result.final_test_accuracy = test_acc;
    result.final_test_loss = test_loss;
    result.train_accuracy_add = eval_on(model, filter_task(train, TaskKind::Add)).first;
    result.train_accuracy_mul = eval_on(model, filter_task(train, TaskKind::Mul)).first;
    result.test_accuracy_add = eval_on(model, filter_task(test, TaskKind::Add)).first;
    result.test_accuracy_mul = eval_on(model, filter_task(test, TaskKind::Mul)).first;
    return result;
}

}  // namespace masklab
