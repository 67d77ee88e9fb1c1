// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace tina {

/// One class in the universe vocabulary. Descriptions must not contain the
/// class name verbatim so description prompting cannot leak the entity.
struct ClassEntry {
    int id = 0;
    std::string name;
    std::string description; // may be empty
    int superclass = -1;     // -1 means unannotated
};

struct Vocabulary {
    std::vector<ClassEntry> classes;

    int size() const { return static_cast<int>(classes.size()); }
    const ClassEntry& at(int id) const;
    bool has_superclasses() const;
    bool has_descriptions() const;
    int superclass_count() const;

    void validate() const;

    static Vocabulary load(const std::string& path);
    void save(const std::string& path) const;
};

enum class PromptMode { name, description, image };

std::string to_string(PromptMode m);
PromptMode prompt_mode_from_string(const std::string& s);

/// An ordered class subset; row i of a personalized classifier answers for
/// class_ids[i].
struct TaskSpec {
    std::vector<int> class_ids;
    PromptMode prompt_mode = PromptMode::name;
    std::string task_id;

    int num_classes() const { return static_cast<int>(class_ids.size()); }
    std::vector<int> sorted_ids() const;
};

struct TaskSplit {
    std::vector<TaskSpec> train_tasks;
    std::vector<TaskSpec> id_test_tasks;  // subset of train_tasks (held-out images)
    std::vector<TaskSpec> ood_test_tasks; // class-set disjoint from every train task

    void save(const std::string& path) const;
    static TaskSplit load(const std::string& path);
};

enum class SampleStrategy { uniform, superclass_mix };

// `count` ordered tasks of c distinct classes. uniform balances per-class
// frequency by round-robin over reshuffled class pools; superclass_mix draws
// three task kinds (all-distinct superclasses / partially shared / exactly two
// superclasses) in a 3:2:1 ratio.
std::vector<TaskSpec> sample_tasks(const Vocabulary& vocab, int count, int c,
                                   SampleStrategy strategy, uint64_t seed,
                                   PromptMode mode = PromptMode::name,
                                   const std::string& id_prefix = "t");

// Classify which superclass-mix kind a task belongs to: 0 = all-distinct,
// 1 = partial share, 2 = exactly two superclasses.
int superclass_mix_kind(const Vocabulary& vocab, const TaskSpec& task);

// id_test reuses the train tasks (same tasks, held-out images); OOD tasks are
// sampled fresh with class sets disjoint from every train task and each other.
TaskSplit build_splits(const Vocabulary& vocab, std::vector<TaskSpec> train_tasks,
                       int ood_count, uint64_t seed);

// Ordered prompt strings for a task (name or description mode).
std::vector<std::string> render_prompt(const TaskSpec& task, const Vocabulary& vocab);

// Split class ids into two near-equal shards, forcing each pair in
// `pairs_to_separate` onto opposite sides.
std::pair<std::vector<int>, std::vector<int>> split_shards(
    const Vocabulary& vocab, const std::vector<std::pair<int, int>>& pairs_to_separate,
    uint64_t seed);

// exact for results < 2^53; saturates to +inf beyond
double combination_count(int n, int k);

} // namespace tina
