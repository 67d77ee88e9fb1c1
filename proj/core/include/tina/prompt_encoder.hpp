// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "tina/common.hpp"
#include "tina/param_codec.hpp"
#include "tina/task_universe.hpp"

#include <memory>
#include <string>
#include <vector>

namespace tina {

/// Ordered per-class condition embeddings, padded to c_max. Position i
/// conditions classifier row i.
struct PromptSeq {
    std::vector<std::vector<double>> tokens;
    std::vector<bool> mask; // true at real class positions
    int dim = 0;

    int length() const { return static_cast<int>(tokens.size()); }
};

/// Frozen prompt encoder. Implementations are immutable after construction;
/// fingerprint() hashes the internal state so tests can assert frozenness.
class Encoder {
public:
    virtual ~Encoder() = default;

    virtual std::vector<double> encode_text(const std::string& s) const = 0;
    virtual std::vector<double> encode_image(const std::vector<double>& image) const = 0;
    virtual int dim() const = 0;
    virtual std::string kind() const = 0;
    virtual uint64_t fingerprint() const = 0;

    std::vector<double> pad_embedding() const { return encode_text(kPadToken); }
};

/// Seeded hash-derived unit vectors; distinct strings land on independent
/// random directions. Ships as the default so everything runs offline.
class StubEncoder final : public Encoder {
public:
    StubEncoder(int dim, uint64_t seed);

    std::vector<double> encode_text(const std::string& s) const override;
    std::vector<double> encode_image(const std::vector<double>& image) const override;
    int dim() const override { return dim_; }
    std::string kind() const override { return "stub"; }
    uint64_t fingerprint() const override;

private:
    int dim_;
    uint64_t seed_;
};

/// Embedding table exported by a pretrained (or toy-aligned) encoder: exact
/// vectors for known strings plus a linear projection for raw images sharing
/// the same space.
class TableEncoder final : public Encoder {
public:
    explicit TableEncoder(const std::string& path);

    std::vector<double> encode_text(const std::string& s) const override;
    std::vector<double> encode_image(const std::vector<double>& image) const override;
    int dim() const override { return dim_; }
    std::string kind() const override { return "table"; }
    uint64_t fingerprint() const override;

private:
    int dim_ = 0;
    std::vector<std::pair<std::string, std::vector<double>>> entries_;
    std::vector<std::vector<double>> image_proj_;
};

// kind: "stub" | "table"; table_path required for "table"
std::unique_ptr<Encoder> make_encoder(const std::string& kind, int dim, uint64_t seed,
                                      const std::string& table_path);

// One embedding token per class in task order, padded to c_max with the
// reserved pad embedding. Image mode requires exactly one image per class.
// merge_to_one reproduces the averaged-embedding ablation: the mean of the
// real tokens replaces every real position, destroying order information.
PromptSeq encode_prompt(const TaskSpec& task, const Vocabulary& vocab, const Encoder& encoder,
                        int c_max, const std::vector<std::vector<double>>* images = nullptr,
                        bool merge_to_one = false);

// Encode an explicit list of prompt strings (used by the training loop after
// classifier augmentation reordered them).
PromptSeq encode_prompt_strings(const std::vector<std::string>& prompts, const Encoder& encoder,
                                int c_max, bool merge_to_one = false);

} // namespace tina
