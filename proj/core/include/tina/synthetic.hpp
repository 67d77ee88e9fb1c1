// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "tina/common.hpp"
#include "tina/task_universe.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace tina {

/// Images for one universe, grouped by class. Train images feed generic-model
/// training and p-Model finetuning; test images are held out for evaluation.
struct ImageSet {
    int dim = 0;
    std::vector<std::vector<std::vector<double>>> train_by_class;
    std::vector<std::vector<std::vector<double>>> test_by_class;

    int num_classes() const { return static_cast<int>(train_by_class.size()); }
};

struct ToyConfig {
    int n_classes = 12;
    int image_hw = 8;          // images are image_hw x image_hw, single channel
    double proto_scale = 1.0;  // norm of each class prototype
    double pair_delta = 0.45;  // perturbation between the two members of a similar pair
    double noise_sigma = 0.60; // per-pixel gaussian noise around the prototype
    int train_per_class = 40;
    int test_per_class = 40;
    uint64_t seed = 1;
};

/// Synthetic desk-scale universe: Gaussian-blob classes arranged as similar
/// pairs (for unseen-class transfer) with superclass annotations sized so the
/// 3:2:1 superclass-mix sampler is realizable at c = 5.
struct ToyUniverse {
    ToyConfig config;
    Vocabulary vocab;
    std::vector<std::vector<double>> prototypes;     // [class][dim]
    std::vector<std::pair<int, int>> similar_pairs;  // visually-close class pairs
    ImageSet images;

    int image_dim() const { return config.image_hw * config.image_hw; }

    // fresh image of a class, outside the fixed train/test pools
    std::vector<double> sample_image(int class_id, Rng& rng) const;
};

ToyUniverse make_toy_universe(const ToyConfig& cfg);

// Aligned embedding table for the toy universe: every class's name, its
// description, and its images map near a shared anchor (a fixed random
// projection of the class prototype), mimicking the alignment a pretrained
// vision-language encoder provides. Written as JSON for the table encoder.
void write_toy_encoder_table(const ToyUniverse& u, int embed_dim, uint64_t seed,
                             const std::string& path);

} // namespace tina
