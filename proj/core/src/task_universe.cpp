// SPDX-License-Identifier: Apache-2.0
#include "tina/task_universe.hpp"

#include "tina/common.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <limits>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

namespace tina {

using ordered_json = nlohmann::ordered_json;

const ClassEntry& Vocabulary::at(int id) const {
    if (id < 0 || id >= size()) {
        throw std::out_of_range("class id " + std::to_string(id) + " outside vocabulary of " +
                                std::to_string(size()));
    }
    return classes[static_cast<size_t>(id)];
}

bool Vocabulary::has_superclasses() const {
    return !classes.empty() &&
           std::all_of(classes.begin(), classes.end(), [](const ClassEntry& c) { return c.superclass >= 0; });
}

bool Vocabulary::has_descriptions() const {
    return !classes.empty() &&
           std::all_of(classes.begin(), classes.end(), [](const ClassEntry& c) { return !c.description.empty(); });
}

int Vocabulary::superclass_count() const {
    std::set<int> s;
    for (const auto& c : classes)
        if (c.superclass >= 0) s.insert(c.superclass);
    return static_cast<int>(s.size());
}

namespace {

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

} // namespace

void Vocabulary::validate() const {
    std::set<std::string> names;
    for (size_t i = 0; i < classes.size(); ++i) {
        const ClassEntry& c = classes[i];
        if (c.id != static_cast<int>(i)) {
            throw std::invalid_argument("class ids must be contiguous from 0; found id " +
                                        std::to_string(c.id) + " at position " + std::to_string(i));
        }
        if (c.name.empty()) throw std::invalid_argument("class " + std::to_string(i) + " has empty name");
        if (!names.insert(c.name).second) {
            throw std::invalid_argument("duplicate class name: " + c.name);
        }
        if (!c.description.empty() && lower(c.description).find(lower(c.name)) != std::string::npos) {
            throw std::invalid_argument("description of class '" + c.name +
                                        "' contains the name verbatim");
        }
    }
}

Vocabulary Vocabulary::load(const std::string& path) {
    ordered_json j;
    try {
        j = ordered_json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("vocabulary parse error in " + path + ": " + e.what());
    }
    Vocabulary v;
    if (j.is_array()) {
        for (const auto& item : j) {
            ClassEntry c;
            c.name = item.at("name").get<std::string>();
            c.description = item.value("description", std::string{});
            c.superclass = item.value("superclass", -1);
            c.id = static_cast<int>(v.classes.size()); // reindexed 0..n-1
            v.classes.push_back(std::move(c));
        }
    } else if (j.is_object()) {
        // name -> description map, ids assigned in order of appearance
        for (auto it = j.begin(); it != j.end(); ++it) {
            ClassEntry c;
            c.name = it.key();
            c.description = it.value().get<std::string>();
            c.id = static_cast<int>(v.classes.size());
            v.classes.push_back(std::move(c));
        }
    } else {
        throw std::runtime_error("vocabulary file must be a JSON array or object: " + path);
    }
    v.validate();
    return v;
}

void Vocabulary::save(const std::string& path) const {
    ordered_json arr = ordered_json::array();
    for (const auto& c : classes) {
        ordered_json item;
        item["id"] = c.id;
        item["name"] = c.name;
        if (!c.description.empty()) item["description"] = c.description;
        if (c.superclass >= 0) item["superclass"] = c.superclass;
        arr.push_back(item);
    }
    write_text_file(path, arr.dump(2) + "\n");
}

std::string to_string(PromptMode m) {
    switch (m) {
        case PromptMode::name: return "name";
        case PromptMode::description: return "description";
        case PromptMode::image: return "image";
    }
    return "name";
}

PromptMode prompt_mode_from_string(const std::string& s) {
    if (s == "name") return PromptMode::name;
    if (s == "description") return PromptMode::description;
    if (s == "image") return PromptMode::image;
    throw std::invalid_argument("unknown prompt mode: " + s);
}

std::vector<int> TaskSpec::sorted_ids() const {
    std::vector<int> s = class_ids;
    std::sort(s.begin(), s.end());
    return s;
}

namespace {

void check_task_args(const Vocabulary& vocab, int count, int c) {
    if (count < 0) throw std::invalid_argument("task count must be >= 0");
    if (c < 1) throw std::invalid_argument("classes per task must be >= 1");
    if (c > vocab.size()) {
        throw std::invalid_argument("classes per task (" + std::to_string(c) +
                                    ") exceeds vocabulary size (" + std::to_string(vocab.size()) + ")");
    }
}

// frequency-balanced sampler: classes come from reshuffled full-vocabulary
// pools, so per-class appearance counts stay within a cycle of each other
class BalancedPool {
public:
    BalancedPool(int n_classes, Rng& rng) : n_(n_classes), rng_(rng) {}

    std::vector<int> draw_task(int c) {
        std::vector<int> task;
        std::vector<int> skipped;
        task.reserve(static_cast<size_t>(c));
        while (static_cast<int>(task.size()) < c) {
            if (pool_.empty()) refill();
            int x = pool_.back();
            pool_.pop_back();
            if (std::find(task.begin(), task.end(), x) != task.end()) {
                skipped.push_back(x);
            } else {
                task.push_back(x);
            }
        }
        // skipped ids return to the top so their turn is not lost
        for (auto it = skipped.rbegin(); it != skipped.rend(); ++it) pool_.push_back(*it);
        return task;
    }

private:
    void refill() {
        std::vector<int> cycle(static_cast<size_t>(n_));
        for (int i = 0; i < n_; ++i) cycle[static_cast<size_t>(i)] = i;
        rng_.shuffle(cycle);
        pool_.insert(pool_.begin(), cycle.begin(), cycle.end());
    }

    int n_;
    Rng& rng_;
    std::vector<int> pool_;
};

std::map<int, std::vector<int>> group_by_superclass(const Vocabulary& vocab) {
    std::map<int, std::vector<int>> groups;
    for (const auto& c : vocab.classes) groups[c.superclass].push_back(c.id);
    return groups;
}

std::vector<int> draw_all_distinct_supers(const Vocabulary& vocab,
                                          const std::map<int, std::vector<int>>& groups, int c, Rng& rng) {
    if (static_cast<int>(groups.size()) < c) {
        throw std::invalid_argument("superclass_mix: need at least " + std::to_string(c) +
                                    " superclasses for all-distinct tasks, have " +
                                    std::to_string(groups.size()));
    }
    std::vector<int> supers;
    supers.reserve(groups.size());
    for (const auto& [sid, members] : groups) {
        (void)members;
        supers.push_back(sid);
    }
    rng.shuffle(supers);
    std::vector<int> task;
    for (int i = 0; i < c; ++i) {
        const auto& members = groups.at(supers[static_cast<size_t>(i)]);
        task.push_back(members[static_cast<size_t>(rng.below(members.size()))]);
    }
    (void)vocab;
    return task;
}

std::vector<int> draw_two_supers(const std::map<int, std::vector<int>>& groups, int c, Rng& rng) {
    if (c < 2) throw std::invalid_argument("superclass_mix: two-superclass tasks need c >= 2");
    std::vector<int> supers;
    for (const auto& [sid, members] : groups) {
        (void)members;
        supers.push_back(sid);
    }
    // random feasible pair (combined size >= c)
    for (int attempt = 0; attempt < 1000; ++attempt) {
        size_t a = static_cast<size_t>(rng.below(supers.size()));
        size_t b = static_cast<size_t>(rng.below(supers.size()));
        if (a == b) continue;
        const auto& ma = groups.at(supers[a]);
        const auto& mb = groups.at(supers[b]);
        if (static_cast<int>(ma.size() + mb.size()) < c) continue;
        // both superclasses must be represented
        int na_min = std::max(1, c - static_cast<int>(mb.size()));
        int na_max = std::min(static_cast<int>(ma.size()), c - 1);
        if (na_min > na_max) continue;
        int na = na_min + static_cast<int>(rng.below(static_cast<uint64_t>(na_max - na_min + 1)));
        std::vector<int> pa = ma, pb = mb;
        rng.shuffle(pa);
        rng.shuffle(pb);
        std::vector<int> task(pa.begin(), pa.begin() + na);
        task.insert(task.end(), pb.begin(), pb.begin() + (c - na));
        rng.shuffle(task);
        return task;
    }
    throw std::invalid_argument("superclass_mix: no superclass pair can cover " + std::to_string(c) +
                                " classes");
}

std::vector<int> draw_partial_share(const Vocabulary& vocab,
                                    const std::map<int, std::vector<int>>& groups, int c, Rng& rng) {
    // at least one shared superclass, but neither all-distinct nor exactly two
    if (c < 4) {
        throw std::invalid_argument("superclass_mix: partial-share tasks need c >= 4 to be "
                                    "distinguishable from the other two kinds");
    }
    std::vector<int> big_supers;
    for (const auto& [sid, members] : groups) {
        if (members.size() >= 2) big_supers.push_back(sid);
    }
    if (big_supers.empty()) {
        throw std::invalid_argument("superclass_mix: no superclass has two classes to share");
    }
    for (int attempt = 0; attempt < 1000; ++attempt) {
        int sid = big_supers[static_cast<size_t>(rng.below(big_supers.size()))];
        std::vector<int> members = groups.at(sid);
        rng.shuffle(members);
        std::vector<int> task(members.begin(), members.begin() + 2);
        std::vector<int> rest;
        for (const auto& cls : vocab.classes) {
            if (std::find(task.begin(), task.end(), cls.id) == task.end()) rest.push_back(cls.id);
        }
        rng.shuffle(rest);
        task.insert(task.end(), rest.begin(), rest.begin() + (c - 2));
        std::set<int> distinct;
        for (int id : task) distinct.insert(vocab.at(id).superclass);
        int d = static_cast<int>(distinct.size());
        if (d > 2 && d < c) {
            rng.shuffle(task);
            return task;
        }
    }
    throw std::invalid_argument("superclass_mix: could not draw a partial-share task");
}

} // namespace

int superclass_mix_kind(const Vocabulary& vocab, const TaskSpec& task) {
    std::set<int> distinct;
    for (int id : task.class_ids) distinct.insert(vocab.at(id).superclass);
    int d = static_cast<int>(distinct.size());
    if (d == task.num_classes()) return 0;
    if (d == 2) return 2;
    return 1;
}

std::vector<TaskSpec> sample_tasks(const Vocabulary& vocab, int count, int c,
                                   SampleStrategy strategy, uint64_t seed, PromptMode mode,
                                   const std::string& id_prefix) {
    vocab.validate();
    check_task_args(vocab, count, c);

    Rng rng(seed);
    std::vector<std::vector<int>> drawn;
    drawn.reserve(static_cast<size_t>(count));

    if (strategy == SampleStrategy::uniform) {
        BalancedPool pool(vocab.size(), rng);
        for (int i = 0; i < count; ++i) drawn.push_back(pool.draw_task(c));
    } else {
        if (!vocab.has_superclasses()) {
            throw std::invalid_argument("superclass_mix requires superclass annotations on every class");
        }
        auto groups = group_by_superclass(vocab);
        // 3:2:1 split of `count` over the three kinds; remainder goes to the
        // largest bucket
        int n_two = count / 6;
        int n_partial = count * 2 / 6;
        int n_distinct = count - n_partial - n_two;
        for (int i = 0; i < n_distinct; ++i) drawn.push_back(draw_all_distinct_supers(vocab, groups, c, rng));
        for (int i = 0; i < n_partial; ++i) drawn.push_back(draw_partial_share(vocab, groups, c, rng));
        for (int i = 0; i < n_two; ++i) drawn.push_back(draw_two_supers(groups, c, rng));
        rng.shuffle(drawn);
    }

    std::vector<TaskSpec> tasks;
    tasks.reserve(drawn.size());
    char buf[32];
    for (size_t i = 0; i < drawn.size(); ++i) {
        TaskSpec t;
        t.class_ids = std::move(drawn[i]);
        t.prompt_mode = mode;
        std::snprintf(buf, sizeof(buf), "%s%05zu", id_prefix.c_str(), i);
        t.task_id = buf;
        tasks.push_back(std::move(t));
    }
    return tasks;
}

double combination_count(int n, int k) {
    if (k < 0 || k > n) return 0.0;
    k = std::min(k, n - k);
    double r = 1.0;
    for (int i = 1; i <= k; ++i) {
        r *= static_cast<double>(n - k + i);
        r /= static_cast<double>(i);
        if (r > 1e300) return std::numeric_limits<double>::infinity();
    }
    return r;
}

TaskSplit build_splits(const Vocabulary& vocab, std::vector<TaskSpec> train_tasks, int ood_count,
                       uint64_t seed) {
    if (ood_count < 0) throw std::invalid_argument("ood_count must be >= 0");
    TaskSplit split;
    split.train_tasks = std::move(train_tasks);
    split.id_test_tasks = split.train_tasks;

    if (ood_count == 0) return split;
    if (split.train_tasks.empty()) {
        throw std::invalid_argument("cannot derive OOD tasks without train tasks (class count unknown)");
    }

    std::set<std::vector<int>> taken;
    for (const auto& t : split.train_tasks) taken.insert(t.sorted_ids());

    int c = split.train_tasks.front().num_classes();
    double total = combination_count(vocab.size(), c);
    if (static_cast<double>(taken.size()) + ood_count > total) {
        throw std::invalid_argument("vocabulary too small: cannot draw " + std::to_string(ood_count) +
                                    " OOD combinations disjoint from training");
    }

    Rng rng(mix64(seed) ^ 0x00dull);
    BalancedPool pool(vocab.size(), rng);
    PromptMode mode = split.train_tasks.front().prompt_mode;
    long long attempts = 0;
    const long long max_attempts = 2000ll * ood_count + 10000;
    char buf[32];
    while (static_cast<int>(split.ood_test_tasks.size()) < ood_count) {
        if (++attempts > max_attempts) {
            throw std::runtime_error("OOD sampling exhausted attempt budget; vocabulary too small "
                                     "for disjoint combinations");
        }
        std::vector<int> ids = pool.draw_task(c);
        std::vector<int> key = ids;
        std::sort(key.begin(), key.end());
        if (taken.count(key)) continue;
        taken.insert(key);
        TaskSpec t;
        t.class_ids = std::move(ids);
        t.prompt_mode = mode;
        std::snprintf(buf, sizeof(buf), "ood%05zu", split.ood_test_tasks.size());
        t.task_id = buf;
        split.ood_test_tasks.push_back(std::move(t));
    }
    return split;
}

std::vector<std::string> render_prompt(const TaskSpec& task, const Vocabulary& vocab) {
    if (task.prompt_mode == PromptMode::image) {
        throw std::invalid_argument("render_prompt handles text modes only; image prompts are encoded "
                                    "directly from pixels");
    }
    std::vector<std::string> out;
    out.reserve(task.class_ids.size());
    for (int id : task.class_ids) {
        const ClassEntry& c = vocab.at(id);
        if (task.prompt_mode == PromptMode::name) {
            out.push_back(c.name);
        } else {
            if (c.description.empty()) {
                throw std::invalid_argument("class '" + c.name + "' has no description for "
                                            "description-mode prompting");
            }
            out.push_back(c.description);
        }
    }
    return out;
}

std::pair<std::vector<int>, std::vector<int>> split_shards(
    const Vocabulary& vocab, const std::vector<std::pair<int, int>>& pairs_to_separate, uint64_t seed) {
    std::vector<int> a, b;
    std::set<int> placed;
    Rng rng(mix64(seed) ^ 0x5badull);
    for (auto [x, y] : pairs_to_separate) {
        vocab.at(x);
        vocab.at(y);
        if (placed.count(x) || placed.count(y)) {
            throw std::invalid_argument("pairs_to_separate mentions a class twice");
        }
        bool flip = rng.below(2) == 1;
        a.push_back(flip ? y : x);
        b.push_back(flip ? x : y);
        placed.insert(x);
        placed.insert(y);
    }
    std::vector<int> rest;
    for (const auto& c : vocab.classes)
        if (!placed.count(c.id)) rest.push_back(c.id);
    rng.shuffle(rest);
    for (int id : rest) {
        if (a.size() <= b.size()) {
            a.push_back(id);
        } else {
            b.push_back(id);
        }
    }
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    return {a, b};
}

namespace {

ordered_json task_to_json(const TaskSpec& t) {
    ordered_json j;
    j["task_id"] = t.task_id;
    j["class_ids"] = t.class_ids;
    j["prompt_mode"] = to_string(t.prompt_mode);
    return j;
}

TaskSpec task_from_json(const ordered_json& j) {
    TaskSpec t;
    t.task_id = j.at("task_id").get<std::string>();
    t.class_ids = j.at("class_ids").get<std::vector<int>>();
    t.prompt_mode = prompt_mode_from_string(j.value("prompt_mode", "name"));
    return t;
}

} // namespace

void TaskSplit::save(const std::string& path) const {
    ordered_json j;
    for (const char* key : {"train", "id_test", "ood_test"}) j[key] = ordered_json::array();
    for (const auto& t : train_tasks) j["train"].push_back(task_to_json(t));
    for (const auto& t : id_test_tasks) j["id_test"].push_back(task_to_json(t));
    for (const auto& t : ood_test_tasks) j["ood_test"].push_back(task_to_json(t));
    write_text_file(path, j.dump(2) + "\n");
}

TaskSplit TaskSplit::load(const std::string& path) {
    ordered_json j = ordered_json::parse(read_text_file(path));
    TaskSplit s;
    for (const auto& t : j.at("train")) s.train_tasks.push_back(task_from_json(t));
    for (const auto& t : j.at("id_test")) s.id_test_tasks.push_back(task_from_json(t));
    for (const auto& t : j.at("ood_test")) s.ood_test_tasks.push_back(task_from_json(t));
    return s;
}

} // namespace tina
