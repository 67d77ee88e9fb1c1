// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "tina/common.hpp"
#include "tina/synthetic.hpp"
#include "tina/task_universe.hpp"

#include <string>
#include <vector>

namespace tina {

struct NamedTensor {
    std::string name;
    std::vector<int> dims;
    std::vector<double> v;

    size_t numel() const {
        size_t n = 1;
        for (int d : dims) n *= static_cast<size_t>(d);
        return n;
    }
};

struct NamedParams {
    std::vector<NamedTensor> tensors;

    NamedTensor& at(const std::string& name);
    const NamedTensor& at(const std::string& name) const;
    bool has(const std::string& name) const;
    size_t numel() const;
    NamedParams zeros_like() const;
    void fill_zero();
};

struct LayerDef {
    std::string name;
    std::vector<int> dims;
    bool generated = true;
};

/// Architecture metadata for personalized models. `head_width` is the maximal
/// number of classifier rows a generated head carries (c_max); the generic
/// model instantiates the same trunk with a |Y|-way head instead.
struct ArchSpec {
    std::string arch_id; // toy_mlp | small_cnn | resnet20_head
    int input_c = 1, input_h = 8, input_w = 8;
    int hidden = 8;          // mlp hidden width / cnn base channels / resnet stem width
    int blocks_per_stage = 3; // resnet20_head only
    int head_width = 5;
    bool head_bias = true;

    int input_dim() const { return input_c * input_h * input_w; }
    int feature_dim() const; // classifier input width

    // every parameter tensor, in declaration order, for a model with
    // `head_rows` classifier rows; `generated` marks the diffusion subset
    std::vector<LayerDef> layer_defs(int head_rows) const;
    size_t generated_param_count() const; // at head_rows == head_width
    bool head_only_generated() const { return arch_id == "resnet20_head"; }

    static ArchSpec toy_mlp(int in_dim, int hidden, int head_width, bool head_bias = true);
    static ArchSpec small_cnn(int in_c, int in_h, int in_w, int base, int head_width,
                              bool head_bias = true);
    static ArchSpec resnet20_head(int in_c, int in_h, int in_w, int stem_width, int blocks_per_stage,
                                  int head_width, bool head_bias = false);

    std::string to_json() const;
    static ArchSpec from_json(const std::string& s);
};

/// A concrete classifier network: trunk + linear head with `head_rows` rows.
class Network {
public:
    Network(const ArchSpec& spec, int head_rows);

    void init_params(Rng& rng);

    std::vector<double> logits(const std::vector<double>& x) const;

    // mean cross-entropy over the index subset; accumulates gradients into g
    // (all layers, or the head only). Returns the loss.
    double ce_backward(const std::vector<const std::vector<double>*>& xs, const std::vector<int>& ys,
                       const std::vector<size_t>& idx, NamedParams& g, bool head_only) const;

    double ce_loss(const std::vector<const std::vector<double>*>& xs, const std::vector<int>& ys) const;

    const ArchSpec& spec() const { return spec_; }
    int head_rows() const { return head_rows_; }

    NamedParams params;

private:
    ArchSpec spec_;
    int head_rows_;
};

/// Labeled image views; labels are already in model-output space.
struct TaskData {
    std::vector<const std::vector<double>*> xs;
    std::vector<int> ys;

    size_t size() const { return xs.size(); }
};

// task-restricted data with labels remapped to 0..c-1 in task order
TaskData task_train_data(const ImageSet& images, const TaskSpec& task);
TaskData task_test_data(const ImageSet& images, const TaskSpec& task);
// full-vocabulary data with global class ids as labels
TaskData full_train_data(const ImageSet& images);
TaskData full_test_data(const ImageSet& images);
// restricted to a class pool, keeping global labels
TaskData pool_train_data(const ImageSet& images, const std::vector<int>& class_pool);
std::vector<int> classes_with_train_data(const ImageSet& images);

struct SgdConfig {
    double lr = 0.05;
    double momentum = 0.9;
    int batch = 16;
    int epochs = 10;
};

// plain SGD-with-momentum; deterministic under seed
void sgd_train(Network& net, const TaskData& data, const SgdConfig& cfg, uint64_t seed,
               bool head_only);

// fraction of argmax-correct predictions; throws on an empty testset
double eval_accuracy(const Network& net, const TaskData& test);
// argmax restricted to rows where row_mask is true (labels must index those rows)
double eval_accuracy_masked(const Network& net, const TaskData& test,
                            const std::vector<bool>& row_mask);

} // namespace tina
