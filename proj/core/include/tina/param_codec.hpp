// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "tina/common.hpp"
#include "tina/nets.hpp"

#include <string>
#include <utility>
#include <vector>

namespace tina {

struct LayoutEntry {
    std::string name;
    std::vector<int> dims;
    size_t offset = 0;
    size_t length = 0;
};

/// Where the classifier lives inside a flat vector: row i (and bias i) of the
/// head correspond to prompt position i.
struct ClassifierLayout {
    int rows = 0;
    int row_len = 0;
    size_t weight_offset = 0;
    long long bias_offset = -1; // -1: no bias in the generated subset

    size_t row_offset(int i) const { return weight_offset + static_cast<size_t>(i) * row_len; }
};

/// Flattened generated-subset parameters of one p-Model.
struct FlatParams {
    std::vector<double> values;
    std::vector<LayoutEntry> layout;
    ClassifierLayout classifier;

    size_t size() const { return values.size(); }
};

struct TokenMeta {
    std::string layer;
    int chunk_index = 0;
    int valid_len = 0; // <= chunk_size; trailing slots are zero padding
};

/// Per-layer chunked parameter tokens: a layer of N values becomes
/// ceil(N/M) tokens of width M, the final one zero-padded.
struct TokenSeq {
    std::vector<std::vector<double>> tokens;
    std::vector<TokenMeta> meta;
    int chunk_size = 0;
    std::vector<LayoutEntry> layout; // carried so detokenize is self-contained
    ClassifierLayout classifier;

    size_t count() const { return tokens.size(); }
};

// Flatten the generated subset of `p` in arch declaration order. Head row
// count is taken from the tensors themselves (a p-Model may carry fewer rows
// than head_width before padding).
FlatParams flatten(const NamedParams& p, const ArchSpec& arch);

// Bit-exact inverse of flatten; returns the generated tensors.
NamedParams unflatten(const FlatParams& f, const ArchSpec& arch);

// All-zero FlatParams with the layout of `arch` at `head_rows` rows.
FlatParams zero_flat(const ArchSpec& arch, int head_rows);

TokenSeq tokenize(const FlatParams& f, int chunk_size);
FlatParams detokenize(const TokenSeq& seq);

std::vector<int> random_permutation(int n, Rng& rng);

// permutation applied in place: position i takes row/bias perm[i]
void apply_classifier_permutation(FlatParams& theta, const std::vector<int>& perm);

// Jointly permute prompt order and classifier rows (the paper's classifier
// augmentation); the permutation is drawn from `seed`.
std::pair<FlatParams, std::vector<std::string>> classifier_augment(const FlatParams& theta,
                                                                   const std::vector<std::string>& prompt,
                                                                   uint64_t seed);

struct PaddedTask {
    FlatParams theta;                // head extended to c_max rows, new rows zero
    std::vector<std::string> prompt; // length c_max, "<->" at padded positions
    std::vector<bool> mask;          // true at real class positions
};

inline constexpr const char* kPadToken = "<->";

// Extend a c-way task to c_max: pad the prompt with "<->" tokens and zero the
// classifier rows/biases at positions c..c_max-1.
PaddedTask pad_task(const FlatParams& theta, const std::vector<std::string>& prompt, int c_max);

// Hidden-unit permutation that preserves the network function (ablation-only
// augmentation). Requires the generated subset to contain a hidden layer.
FlatParams permute_neurons(const FlatParams& theta, const ArchSpec& arch, uint64_t seed);
FlatParams permute_neurons_with(const FlatParams& theta, const ArchSpec& arch,
                                const std::vector<std::vector<int>>& perms);

} // namespace tina
