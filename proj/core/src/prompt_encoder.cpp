// SPDX-License-Identifier: Apache-2.0
#include "tina/prompt_encoder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace tina {

namespace {

void normalize(std::vector<double>& v) {
    double n = 0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n > 0) {
        for (double& x : v) x /= n;
    }
}

} // namespace

StubEncoder::StubEncoder(int dim, uint64_t seed) : dim_(dim), seed_(seed) {
    if (dim < 1) throw std::invalid_argument("encoder dim must be >= 1");
}

std::vector<double> StubEncoder::encode_text(const std::string& s) const {
    Rng rng(mix64(seed_) ^ fnv1a(s));
    std::vector<double> v(static_cast<size_t>(dim_));
    rng.fill_gaussian(v);
    normalize(v);
    return v;
}

std::vector<double> StubEncoder::encode_image(const std::vector<double>& image) const {
    // hash the f32-rounded pixels so the embedding is stable across precision
    std::vector<unsigned char> bytes;
    append_f32(bytes, image);
    Rng rng(mix64(seed_ ^ 0x1335ull) ^ fnv1a(bytes.data(), bytes.size()));
    std::vector<double> v(static_cast<size_t>(dim_));
    rng.fill_gaussian(v);
    normalize(v);
    return v;
}

uint64_t StubEncoder::fingerprint() const { return mix64(seed_ ^ (static_cast<uint64_t>(dim_) << 32)); }

TableEncoder::TableEncoder(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("encoder table parse error in " + path + ": " + e.what());
    }
    dim_ = j.at("dim").get<int>();
    for (auto it = j.at("entries").begin(); it != j.at("entries").end(); ++it) {
        auto vec = it.value().get<std::vector<double>>();
        if (static_cast<int>(vec.size()) != dim_) {
            throw std::runtime_error("table entry '" + it.key() + "' has wrong dimension");
        }
        entries_.emplace_back(it.key(), std::move(vec));
    }
    std::sort(entries_.begin(), entries_.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    if (j.contains("image_proj")) {
        image_proj_ = j.at("image_proj").get<std::vector<std::vector<double>>>();
        if (static_cast<int>(image_proj_.size()) != dim_) {
            throw std::runtime_error("image projection row count != dim");
        }
    }
}

std::vector<double> TableEncoder::encode_text(const std::string& s) const {
    auto it = std::lower_bound(entries_.begin(), entries_.end(), s,
                               [](const auto& e, const std::string& key) { return e.first < key; });
    if (it == entries_.end() || it->first != s) {
        throw std::invalid_argument("string not in encoder table: '" + s + "'");
    }
    return it->second;
}

std::vector<double> TableEncoder::encode_image(const std::vector<double>& image) const {
    if (image_proj_.empty()) {
        throw std::invalid_argument("encoder table has no image projection; image prompts unsupported");
    }
    if (image.size() != image_proj_.front().size()) {
        throw std::invalid_argument("image size does not match encoder projection");
    }
    std::vector<double> v(static_cast<size_t>(dim_));
    for (int o = 0; o < dim_; ++o) {
        double s = 0;
        const auto& row = image_proj_[static_cast<size_t>(o)];
        for (size_t i = 0; i < image.size(); ++i) s += row[i] * image[i];
        v[static_cast<size_t>(o)] = s;
    }
    normalize(v);
    return v;
}

uint64_t TableEncoder::fingerprint() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [key, vec] : entries_) {
        h = mix64(h ^ fnv1a(key));
        std::vector<unsigned char> bytes;
        append_f32(bytes, vec);
        h = mix64(h ^ fnv1a(bytes.data(), bytes.size()));
    }
    for (const auto& row : image_proj_) {
        std::vector<unsigned char> bytes;
        append_f32(bytes, row);
        h = mix64(h ^ fnv1a(bytes.data(), bytes.size()));
    }
    return h;
}

std::unique_ptr<Encoder> make_encoder(const std::string& kind, int dim, uint64_t seed,
                                      const std::string& table_path) {
    if (kind == "stub") return std::make_unique<StubEncoder>(dim, seed);
    if (kind == "table") {
        if (table_path.empty()) throw std::invalid_argument("table encoder needs a table path");
        return std::make_unique<TableEncoder>(table_path);
    }
    throw std::invalid_argument("unknown encoder kind: " + kind);
}

PromptSeq encode_prompt_strings(const std::vector<std::string>& prompts, const Encoder& encoder,
                                int c_max, bool merge_to_one) {
    int c = static_cast<int>(prompts.size());
    if (c < 1 || c > c_max) {
        throw std::invalid_argument("prompt has " + std::to_string(c) + " entries, expected 1.." +
                                    std::to_string(c_max));
    }
    PromptSeq seq;
    seq.dim = encoder.dim();
    for (const auto& s : prompts) seq.tokens.push_back(encoder.encode_text(s));
    seq.mask.assign(static_cast<size_t>(c), true);
    if (merge_to_one) {
        std::vector<double> mean(static_cast<size_t>(seq.dim), 0.0);
        for (const auto& t : seq.tokens)
            for (size_t i = 0; i < mean.size(); ++i) mean[i] += t[i];
        for (double& x : mean) x /= static_cast<double>(c);
        for (auto& t : seq.tokens) t = mean;
    }
    auto pad = encoder.pad_embedding();
    while (seq.length() < c_max) {
        seq.tokens.push_back(pad);
        seq.mask.push_back(false);
    }
    return seq;
}

PromptSeq encode_prompt(const TaskSpec& task, const Vocabulary& vocab, const Encoder& encoder,
                        int c_max, const std::vector<std::vector<double>>* images,
                        bool merge_to_one) {
    if (task.prompt_mode == PromptMode::image) {
        if (images == nullptr || static_cast<int>(images->size()) != task.num_classes()) {
            throw std::invalid_argument("image prompting needs exactly one image per class");
        }
        int c = task.num_classes();
        if (c < 1 || c > c_max) throw std::invalid_argument("task class count outside 1..c_max");
        PromptSeq seq;
        seq.dim = encoder.dim();
        for (const auto& img : *images) seq.tokens.push_back(encoder.encode_image(img));
        seq.mask.assign(static_cast<size_t>(c), true);
        if (merge_to_one) {
            std::vector<double> mean(static_cast<size_t>(seq.dim), 0.0);
            for (const auto& t : seq.tokens)
                for (size_t i = 0; i < mean.size(); ++i) mean[i] += t[i];
            for (double& x : mean) x /= static_cast<double>(c);
            for (auto& t : seq.tokens) t = mean;
        }
        auto pad = encoder.pad_embedding();
        while (seq.length() < c_max) {
            seq.tokens.push_back(pad);
            seq.mask.push_back(false);
        }
        return seq;
    }
    return encode_prompt_strings(render_prompt(task, vocab), encoder, c_max, merge_to_one);
}

} // namespace tina
