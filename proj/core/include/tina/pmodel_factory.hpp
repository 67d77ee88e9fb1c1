// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "tina/nets.hpp"
#include "tina/param_codec.hpp"
#include "tina/task_universe.hpp"

#include <string>
#include <vector>

namespace tina {

/// One (task description, p-Model) training pair for the diffusion model.
/// theta holds the flattened generated subset at float32 precision, rows
/// ordered to match task.class_ids.
struct PModelRecord {
    TaskSpec task;
    FlatParams theta;
    std::string arch_id;
    double metric = 0.0; // held-in test accuracy
    uint64_t seed = 0;
    int epochs = 0;
};

struct PModelDataset {
    ArchSpec arch;
    std::vector<PModelRecord> records;

    void save(const std::string& dir) const; // manifest.json + params.bin
    static PModelDataset load(const std::string& dir);
};

struct FactoryConfig {
    int generic_epochs = 30;
    int finetune_epochs = 10;
    SgdConfig sgd; // lr/momentum/batch shared by both stages
};

// Stage 1: |Y|-way generic model on the full dataset. Every class must have
// training images.
Network train_generic(const ImageSet& images, const ArchSpec& arch, int epochs, uint64_t seed,
                      const SgdConfig& sgd);

// Same, restricted to a class pool (sub-universe training); the head still
// spans the full vocabulary.
Network train_generic_pool(const ImageSet& images, const ArchSpec& arch,
                           const std::vector<int>& pool, int epochs, uint64_t seed,
                           const SgdConfig& sgd);

// Stage 2: finetune the generic model on one task. Labels are remapped to
// 0..c-1 in task order; for head-only archs the trunk stays frozen.
PModelRecord finetune_pmodel(const Network& generic, const TaskSpec& task, const ImageSet& images,
                             int epochs, uint64_t seed, const SgdConfig& sgd);

// One record per train task, finetuned in parallel, persisted under dir.
PModelDataset build_pmodel_dataset(const Network& generic, const TaskSplit& split,
                                   const ImageSet& images, int epochs, uint64_t seed,
                                   const SgdConfig& sgd, const std::string& dir);

// p-Model assembly: the generated subset comes from theta, everything else
// (head-only archs) from the generic model. theta may carry more rows than the
// task uses (classification sequence padding).
Network assemble_pmodel(const ArchSpec& arch, const Network& generic, const FlatParams& theta);

// accuracy of generated/finetuned parameters on a task's held-out images;
// argmax restricted to the first task-c rows when theta is padded
double eval_theta_accuracy(const ArchSpec& arch, const Network& generic, const FlatParams& theta,
                           const TaskSpec& task, const ImageSet& images);

// the generic model's own accuracy on a task (argmax over the full vocabulary)
double eval_generic_on_task(const Network& generic, const TaskSpec& task, const ImageSet& images);

} // namespace tina
