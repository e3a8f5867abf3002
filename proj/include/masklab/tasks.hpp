#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace masklab {

enum class TaskKind { Add, Mul };

std::string task_name(TaskKind t);       // "add" / "mul"
TaskKind parse_task(const std::string&); // throws on unknown name

/// One prompt [BOS, a, op, b, '=']; the model predicts the answer token at
/// the '=' position.
struct Example {
    std::vector<int> tokens;
    std::size_t answer_pos = 0;
    int answer = 0;
    TaskKind task = TaskKind::Add;
    int a = 0;
    int b = 0;
};

/// Modular-arithmetic prompts over Z_p. Vocabulary: digits 0..p-1, then
/// '+' = p, 'x' = p+1, '=' = p+2, BOS = p+3.
struct TaskDataset {
    int modulus = 0;
    std::vector<Example> examples;

    std::size_t size() const { return examples.size(); }
    std::size_t vocab_size() const { return static_cast<std::size_t>(modulus) + 4; }
    std::size_t seq_len() const { return 5; }
    int plus_token() const { return modulus; }
    int times_token() const { return modulus + 1; }
    int equals_token() const { return modulus + 2; }
    int bos_token() const { return modulus + 3; }
};

/// Enumerates all p^2 (a, b) pairs for both operations (2*p^2 examples),
/// shuffles with the seed, and splits train/test disjointly on (a, op, b).
/// split_fraction is the train share and must lie in (0, 1).
std::pair<TaskDataset, TaskDataset> generate_tasks(int modulus, std::uint64_t seed,
                                                   double split_fraction = 0.9);

/// Examples of one operation only; modulus and vocabulary unchanged.
TaskDataset filter_task(const TaskDataset& d, TaskKind task);

struct Batch {
    std::vector<std::vector<int>> tokens;   // rows share length 5
    std::vector<int> targets;               // answer token per row
    std::vector<std::size_t> answer_rows;   // flat row of each answer position
};

/// Assembles the rows at `indices` (all of the dataset when empty).
Batch make_batch(const TaskDataset& d, const std::vector<std::size_t>& indices = {});

/// Inspection dump: '# modulus=p' header line, then CSV rows
/// a,op,b,answer,split over both splits.
void save_dataset_csv(const TaskDataset& train, const TaskDataset& test,
                      const std::string& path);
std::pair<TaskDataset, TaskDataset> load_dataset_csv(const std::string& path);

}  // namespace masklab
