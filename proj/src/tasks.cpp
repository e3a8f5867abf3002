#include "masklab/tasks.hpp"

#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "masklab/rng.hpp"

namespace masklab {

std::string task_name(TaskKind t) { return t == TaskKind::Add ? "add" : "mul"; }

TaskKind parse_task(const std::string& s) {
    if (s == "add") return TaskKind::Add;
    if (s == "mul") return TaskKind::Mul;
    throw std::invalid_argument("unknown task '" + s + "' (expected add or mul)");
}

namespace {

Example make_example(int modulus, TaskKind task, int a, int b) {
    Example e;
    e.task = task;
    e.a = a;
    e.b = b;
    int op_token = task == TaskKind::Add ? modulus : modulus + 1;
    int bos = modulus + 3, equals = modulus + 2;
    e.tokens = {bos, a, op_token, b, equals};
    e.answer_pos = 4;
    long long r = task == TaskKind::Add ? static_cast<long long>(a) + b
                                        : static_cast<long long>(a) * b;
    e.answer = static_cast<int>(r % modulus);
    return e;
}

}  // namespace

std::pair<TaskDataset, TaskDataset> generate_tasks(int modulus, std::uint64_t seed,
                                                   double split_fraction) {
    if (modulus < 2) throw std::invalid_argument("generate_tasks: modulus must be >= 2");
    if (!(split_fraction > 0.0 && split_fraction < 1.0)) {
        throw std::invalid_argument("generate_tasks: split_fraction must lie in (0, 1)");
    }
    std::vector<Example> pool;
    pool.reserve(2 * static_cast<std::size_t>(modulus) * modulus);
    for (TaskKind task : {TaskKind::Add, TaskKind::Mul}) {
        for (int a = 0; a < modulus; ++a) {
            for (int b = 0; b < modulus; ++b) pool.push_back(make_example(modulus, task, a, b));
        }
    }
    Rng rng = Rng(seed).stream("data-split");
    rng.shuffle(pool);
    auto n_train = static_cast<std::size_t>(split_fraction * static_cast<double>(pool.size()));
    if (n_train == 0 || n_train == pool.size()) {
        throw std::invalid_argument("generate_tasks: split leaves an empty side");
    }
    TaskDataset train, test;
    train.modulus = test.modulus = modulus;
    train.examples.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_train));
    test.examples.assign(pool.begin() + static_cast<std::ptrdiff_t>(n_train), pool.end());
    return {std::move(train), std::move(test)};
}

TaskDataset filter_task(const TaskDataset& d, TaskKind task) {
    TaskDataset out;
    out.modulus = d.modulus;
    for (const Example& e : d.examples) {
        if (e.task == task) out.examples.push_back(e);
    }
    return out;
}

Batch make_batch(const TaskDataset& d, const std::vector<std::size_t>& indices) {
    Batch batch;
    std::vector<std::size_t> all;
    const std::vector<std::size_t>* use = &indices;
    if (indices.empty()) {
        all.resize(d.size());
        std::iota(all.begin(), all.end(), std::size_t{0});
        use = &all;
    }
    std::size_t seq = d.seq_len();
    for (std::size_t row = 0; row < use->size(); ++row) {
        std::size_t i = (*use)[row];
        if (i >= d.size()) throw std::out_of_range("make_batch: example index out of range");
        const Example& e = d.examples[i];
        batch.tokens.push_back(e.tokens);
        batch.targets.push_back(e.answer);
        batch.answer_rows.push_back(row * seq + e.answer_pos);
    }
    return batch;
}

void save_dataset_csv(const TaskDataset& train, const TaskDataset& test,
                      const std::string& path) {
    if (train.modulus != test.modulus) {
        throw std::invalid_argument("save_dataset_csv: splits disagree on modulus");
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("save_dataset_csv: cannot open " + path);
    out << "# modulus=" << train.modulus << "\n";
    out << "a,op,b,answer,split\n";
    auto dump = [&](const TaskDataset& d, const char* split) {
        for (const Example& e : d.examples) {
            out << e.a << "," << (e.task == TaskKind::Add ? "+" : "x") << "," << e.b << ","
                << e.answer << "," << split << "\n";
        }
    };
    dump(train, "train");
    dump(test, "test");
    if (!out) throw std::runtime_error("save_dataset_csv: short write to " + path);
}

std::pair<TaskDataset, TaskDataset> load_dataset_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_dataset_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line.rfind("# modulus=", 0) != 0) {
        throw std::runtime_error("load_dataset_csv: missing '# modulus=' header in " + path);
    }
    int modulus = std::stoi(line.substr(10));
    if (modulus < 2) throw std::runtime_error("load_dataset_csv: bad modulus in header");
    if (!std::getline(in, line) || line != "a,op,b,answer,split") {
        throw std::runtime_error("load_dataset_csv: missing column header in " + path);
    }
    TaskDataset train, test;
    train.modulus = test.modulus = modulus;
    std::size_t line_no = 2;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string a_s, op_s, b_s, ans_s, split_s;
        if (!std::getline(row, a_s, ',') || !std::getline(row, op_s, ',') ||
            !std::getline(row, b_s, ',') || !std::getline(row, ans_s, ',') ||
            !std::getline(row, split_s)) {
            throw std::runtime_error("load_dataset_csv: malformed row at line " +
                                     std::to_string(line_no));
        }
        TaskKind task;
        if (op_s == "+") {
            task = TaskKind::Add;
        } else if (op_s == "x") {
            task = TaskKind::Mul;
        } else {
            throw std::runtime_error("load_dataset_csv: unknown op '" + op_s + "' at line " +
                                     std::to_string(line_no));
        }
        Example e = make_example(modulus, task, std::stoi(a_s), std::stoi(b_s));
        if (e.answer != std::stoi(ans_s)) {
            throw std::runtime_error("load_dataset_csv: answer column disagrees with (a op b) mod " +
                                     std::to_string(modulus) + " at line " +
                                     std::to_string(line_no));
        }
        if (split_s == "train") {
            train.examples.push_back(std::move(e));
        } else if (split_s == "test") {
            test.examples.push_back(std::move(e));
        } else {
            throw std::runtime_error("load_dataset_csv: unknown split '" + split_s +
                                     "' at line " + std::to_string(line_no));
        }
    }
    return {std::move(train), std::move(test)};
}

}  // namespace masklab
