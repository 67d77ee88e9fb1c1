// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "tina/nets.hpp"
#include "tina/pmodel_factory.hpp"
#include "tina/prompt_encoder.hpp"

#include <vector>

namespace tina {

// Personalized head assembled from the generic classifier's rows in task
// order (the compact form).
Network classifier_select(const Network& generic, const TaskSpec& task);

// Variant keeping the full-width head with non-task rows zeroed; equivalent to
// the compact form when evaluation is restricted to the task's rows.
Network classifier_select_zeroed(const Network& generic, const TaskSpec& task);

/// Expert models plus the prompt-conditioned mixer producing their
/// aggregation weights.
struct TaperState {
    ArchSpec arch;
    std::vector<Network> experts; // full-vocabulary heads
    std::vector<int> covered_classes;

    int n_experts = 0;
    int cond_dim = 0;
    int mix_hidden = 0;
    std::vector<double> mix_w1, mix_b1, mix_w2, mix_b2;

    // softmax aggregation weights for one prompt embedding
    std::vector<double> mixer_weights(const std::vector<double>& prompt_embed) const;
    uint64_t mixer_fingerprint() const;
    bool covers(int class_id) const;
};

struct TaperConfig {
    int n_experts = 2;
    int epochs_expert = 5;
    int epochs_mixer = 5;
    int mix_hidden = 32;
    double mixer_lr = 0.1;
    int images_per_step = 16; // minibatch drawn from a task during mixer training
};

// TAPER averages the class embeddings into a single conditioning vector.
std::vector<double> mean_prompt_embedding(const TaskSpec& task, const Vocabulary& vocab,
                                          const Encoder& encoder);

// Stages 2-3: shard the available classes, finetune one expert per shard from
// the generic model, then train the mixer on the train tasks' cross-entropy
// through the merged model. The mixer is frozen afterwards.
TaperState taper_fit(const Network& generic, const ImageSet& images,
                     const std::vector<TaskSpec>& train_tasks, const Vocabulary& vocab,
                     const Encoder& encoder, const TaperConfig& cfg, const SgdConfig& sgd,
                     uint64_t seed);

// theta = sum_e weights[e] * expert_e over the full parameter set
NamedParams taper_merge(const TaperState& state, const std::vector<double>& weights);

struct TaperGenerated {
    Network task_model; // compact head in task order; uncovered classes zeroed
    std::vector<double> weights;
    bool applicable = true; // false when every task class is uncovered
};

TaperGenerated taper_generate_task(const TaperState& state, const TaskSpec& task,
                                   const std::vector<double>& prompt_embed);

} // namespace tina
