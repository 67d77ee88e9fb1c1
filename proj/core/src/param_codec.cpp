// SPDX-License-Identifier: Apache-2.0
#include "tina/param_codec.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>
#include <stdexcept>

namespace tina {

namespace {

size_t numel_of(const std::vector<int>& dims) {
    size_t n = 1;
    for (int d : dims) n *= static_cast<size_t>(d);
    return n;
}

ClassifierLayout make_classifier_layout(const std::vector<LayoutEntry>& layout, bool head_bias) {
    ClassifierLayout cl;
    for (const auto& e : layout) {
        if (e.name == "head.weight") {
            cl.rows = e.dims.at(0);
            cl.row_len = e.dims.at(1);
            cl.weight_offset = e.offset;
        } else if (e.name == "head.bias") {
            cl.bias_offset = static_cast<long long>(e.offset);
        }
    }
    if (cl.rows == 0) throw std::invalid_argument("generated subset has no head.weight layer");
    if (head_bias && cl.bias_offset < 0) {
        throw std::invalid_argument("arch declares a head bias but none was flattened");
    }
    return cl;
}

} // namespace

FlatParams flatten(const NamedParams& p, const ArchSpec& arch) {
    int head_rows = p.at("head.weight").dims.at(0);
    auto defs = arch.layer_defs(head_rows);

    FlatParams f;
    size_t offset = 0;
    for (const auto& d : defs) {
        if (!d.generated) continue;
        const NamedTensor& t = p.at(d.name);
        if (t.dims != d.dims) {
            throw std::invalid_argument("tensor " + d.name + " shape mismatch against arch " +
                                        arch.arch_id);
        }
        LayoutEntry e;
        e.name = d.name;
        e.dims = d.dims;
        e.offset = offset;
        e.length = t.v.size();
        f.layout.push_back(std::move(e));
        f.values.insert(f.values.end(), t.v.begin(), t.v.end());
        offset += t.v.size();
    }
    f.classifier = make_classifier_layout(f.layout, arch.head_bias);
    return f;
}

NamedParams unflatten(const FlatParams& f, const ArchSpec& arch) {
    if (f.layout.empty()) throw std::invalid_argument("unflatten: empty layout");
    size_t total = 0;
    for (const auto& e : f.layout) total += e.length;
    if (total != f.values.size()) {
        throw std::invalid_argument("unflatten: layout covers " + std::to_string(total) +
                                    " values but vector has " + std::to_string(f.values.size()));
    }
    int head_rows = f.classifier.rows;
    auto defs = arch.layer_defs(head_rows);

    NamedParams p;
    size_t li = 0;
    for (const auto& d : defs) {
        if (!d.generated) continue;
        if (li >= f.layout.size()) throw std::invalid_argument("unflatten: missing layer " + d.name);
        const LayoutEntry& e = f.layout[li++];
        if (e.name != d.name || e.dims != d.dims) {
            throw std::invalid_argument("unflatten: layout entry " + e.name + " does not match arch layer " +
                                        d.name);
        }
        NamedTensor t;
        t.name = e.name;
        t.dims = e.dims;
        t.v.assign(f.values.begin() + static_cast<long>(e.offset),
                   f.values.begin() + static_cast<long>(e.offset + e.length));
        p.tensors.push_back(std::move(t));
    }
    if (li != f.layout.size()) throw std::invalid_argument("unflatten: extra layout entries");
    return p;
}

FlatParams zero_flat(const ArchSpec& arch, int head_rows) {
    NamedParams p;
    for (const auto& d : arch.layer_defs(head_rows)) {
        if (!d.generated) continue;
        NamedTensor t;
        t.name = d.name;
        t.dims = d.dims;
        t.v.assign(numel_of(d.dims), 0.0);
        p.tensors.push_back(std::move(t));
    }
    return flatten(p, arch);
}

TokenSeq tokenize(const FlatParams& f, int chunk_size) {
    if (chunk_size < 1) throw std::invalid_argument("chunk size must be >= 1");
    TokenSeq seq;
    seq.chunk_size = chunk_size;
    seq.layout = f.layout;
    seq.classifier = f.classifier;
    size_t m = static_cast<size_t>(chunk_size);
    for (const auto& e : f.layout) {
        size_t n_chunks = (e.length + m - 1) / m; // ceil(N/M), no chunk spans two layers
        for (size_t ci = 0; ci < n_chunks; ++ci) {
            size_t begin = e.offset + ci * m;
            size_t valid = std::min(m, e.offset + e.length - begin);
            std::vector<double> tok(m, 0.0);
            std::copy(f.values.begin() + static_cast<long>(begin),
                      f.values.begin() + static_cast<long>(begin + valid), tok.begin());
            seq.tokens.push_back(std::move(tok));
            seq.meta.push_back({e.name, static_cast<int>(ci), static_cast<int>(valid)});
        }
    }
    return seq;
}

FlatParams detokenize(const TokenSeq& seq) {
    if (seq.chunk_size < 1) throw std::invalid_argument("detokenize: invalid chunk size");
    if (seq.tokens.size() != seq.meta.size()) {
        throw std::invalid_argument("detokenize: token/meta count mismatch");
    }
    FlatParams f;
    f.layout = seq.layout;
    f.classifier = seq.classifier;
    size_t ti = 0;
    size_t m = static_cast<size_t>(seq.chunk_size);
    for (const auto& e : seq.layout) {
        size_t n_chunks = (e.length + m - 1) / m;
        size_t written = 0;
        for (size_t ci = 0; ci < n_chunks; ++ci, ++ti) {
            if (ti >= seq.tokens.size()) throw std::invalid_argument("detokenize: missing tokens");
            const TokenMeta& meta = seq.meta[ti];
            if (meta.layer != e.name || meta.chunk_index != static_cast<int>(ci)) {
                throw std::invalid_argument("detokenize: token meta out of order at " + e.name);
            }
            size_t expect = std::min(m, e.length - written);
            if (meta.valid_len != static_cast<int>(expect)) {
                throw std::invalid_argument("detokenize: corrupted valid length for " + e.name +
                                            " chunk " + std::to_string(ci));
            }
            const auto& tok = seq.tokens[ti];
            if (tok.size() != m) throw std::invalid_argument("detokenize: token width mismatch");
            f.values.insert(f.values.end(), tok.begin(), tok.begin() + static_cast<long>(expect));
            written += expect;
        }
    }
    if (ti != seq.tokens.size()) throw std::invalid_argument("detokenize: extra tokens");
    return f;
}

std::vector<int> random_permutation(int n, Rng& rng) {
    std::vector<int> perm(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    return perm;
}

void apply_classifier_permutation(FlatParams& theta, const std::vector<int>& perm) {
    const ClassifierLayout& cl = theta.classifier;
    if (static_cast<int>(perm.size()) != cl.rows) {
        throw std::invalid_argument("permutation size " + std::to_string(perm.size()) +
                                    " != classifier rows " + std::to_string(cl.rows));
    }
    std::vector<double> rows(static_cast<size_t>(cl.rows) * cl.row_len);
    std::vector<double> biases;
    if (cl.bias_offset >= 0) biases.resize(static_cast<size_t>(cl.rows));
    for (int i = 0; i < cl.rows; ++i) {
        int src = perm[static_cast<size_t>(i)];
        if (src < 0 || src >= cl.rows) throw std::invalid_argument("invalid permutation entry");
        std::memcpy(rows.data() + static_cast<size_t>(i) * cl.row_len,
                    theta.values.data() + cl.row_offset(src), sizeof(double) * static_cast<size_t>(cl.row_len));
        if (cl.bias_offset >= 0) {
            biases[static_cast<size_t>(i)] = theta.values[static_cast<size_t>(cl.bias_offset) + static_cast<size_t>(src)];
        }
    }
    std::memcpy(theta.values.data() + cl.weight_offset, rows.data(), sizeof(double) * rows.size());
    if (cl.bias_offset >= 0) {
        std::memcpy(theta.values.data() + static_cast<size_t>(cl.bias_offset), biases.data(),
                    sizeof(double) * biases.size());
    }
}

std::pair<FlatParams, std::vector<std::string>> classifier_augment(const FlatParams& theta,
                                                                   const std::vector<std::string>& prompt,
                                                                   uint64_t seed) {
    if (static_cast<int>(prompt.size()) != theta.classifier.rows) {
        throw std::invalid_argument("prompt length " + std::to_string(prompt.size()) +
                                    " != classifier rows " + std::to_string(theta.classifier.rows));
    }
    Rng rng = Rng(seed).fork(0xa46);
    auto perm = random_permutation(theta.classifier.rows, rng);
    FlatParams out = theta;
    apply_classifier_permutation(out, perm);
    std::vector<std::string> p(prompt.size());
    for (size_t i = 0; i < p.size(); ++i) p[i] = prompt[static_cast<size_t>(perm[i])];
    return {std::move(out), std::move(p)};
}

PaddedTask pad_task(const FlatParams& theta, const std::vector<std::string>& prompt, int c_max) {
    const ClassifierLayout& cl = theta.classifier;
    int c = cl.rows;
    if (static_cast<int>(prompt.size()) != c) {
        throw std::invalid_argument("prompt length does not match classifier rows");
    }
    if (c > c_max) {
        throw std::invalid_argument("task has " + std::to_string(c) + " classes, above c_max " +
                                    std::to_string(c_max));
    }
    PaddedTask out;
    out.prompt = prompt;
    out.prompt.resize(static_cast<size_t>(c_max), kPadToken);
    out.mask.assign(static_cast<size_t>(c_max), false);
    for (int i = 0; i < c; ++i) out.mask[static_cast<size_t>(i)] = true;

    FlatParams& t = out.theta;
    size_t offset = 0;
    for (const auto& e : theta.layout) {
        LayoutEntry ne = e;
        ne.offset = offset;
        if (e.name == "head.weight") {
            ne.dims = {c_max, cl.row_len};
            ne.length = static_cast<size_t>(c_max) * cl.row_len;
            std::vector<double> vals(ne.length, 0.0);
            std::memcpy(vals.data(), theta.values.data() + e.offset, sizeof(double) * e.length);
            t.values.insert(t.values.end(), vals.begin(), vals.end());
        } else if (e.name == "head.bias") {
            ne.dims = {c_max};
            ne.length = static_cast<size_t>(c_max);
            std::vector<double> vals(ne.length, 0.0);
            std::memcpy(vals.data(), theta.values.data() + e.offset, sizeof(double) * e.length);
            t.values.insert(t.values.end(), vals.begin(), vals.end());
        } else {
            t.values.insert(t.values.end(), theta.values.begin() + static_cast<long>(e.offset),
                            theta.values.begin() + static_cast<long>(e.offset + e.length));
        }
        offset += ne.length;
        t.layout.push_back(std::move(ne));
    }
    t.classifier = make_classifier_layout(t.layout, cl.bias_offset >= 0);
    return out;
}

namespace {

struct EntryRef {
    LayoutEntry* entry;
    double* data;
};

EntryRef find_entry(FlatParams& f, const std::string& name) {
    for (auto& e : f.layout) {
        if (e.name == name) return {&e, f.values.data() + e.offset};
    }
    throw std::invalid_argument("layer " + name + " not present in flat parameters");
}

// permute the output channels of a producing layer and the matching input
// channels of the consuming layer
void permute_rows(double* w, int rows, int cols, const std::vector<int>& perm) {
    std::vector<double> tmp(static_cast<size_t>(rows) * cols);
    for (int r = 0; r < rows; ++r) {
        std::memcpy(tmp.data() + static_cast<size_t>(r) * cols,
                    w + static_cast<size_t>(perm[static_cast<size_t>(r)]) * cols,
                    sizeof(double) * static_cast<size_t>(cols));
    }
    std::memcpy(w, tmp.data(), sizeof(double) * tmp.size());
}

void permute_vec(double* v, int n, const std::vector<int>& perm) {
    std::vector<double> tmp(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) tmp[static_cast<size_t>(i)] = v[perm[static_cast<size_t>(i)]];
    std::memcpy(v, tmp.data(), sizeof(double) * tmp.size());
}

// weight [rows, in_ch, k, k] (or [rows, in_ch]): permute the in_ch axis
void permute_in_channels(double* w, int rows, int in_ch, int spatial, const std::vector<int>& perm) {
    std::vector<double> tmp(static_cast<size_t>(in_ch) * spatial);
    for (int r = 0; r < rows; ++r) {
        double* wr = w + static_cast<size_t>(r) * in_ch * spatial;
        for (int c = 0; c < in_ch; ++c) {
            std::memcpy(tmp.data() + static_cast<size_t>(c) * spatial,
                        wr + static_cast<size_t>(perm[static_cast<size_t>(c)]) * spatial,
                        sizeof(double) * static_cast<size_t>(spatial));
        }
        std::memcpy(wr, tmp.data(), sizeof(double) * tmp.size());
    }
}

} // namespace

FlatParams permute_neurons_with(const FlatParams& theta, const ArchSpec& arch,
                                const std::vector<std::vector<int>>& perms) {
    FlatParams out = theta;
    if (arch.arch_id == "toy_mlp") {
        if (perms.size() != 1) throw std::invalid_argument("toy_mlp takes one hidden permutation");
        const auto& perm = perms[0];
        if (static_cast<int>(perm.size()) != arch.hidden) {
            throw std::invalid_argument("hidden permutation size mismatch");
        }
        auto fc1w = find_entry(out, "fc1.weight");
        permute_rows(fc1w.data, arch.hidden, arch.input_dim(), perm);
        auto fc1b = find_entry(out, "fc1.bias");
        permute_vec(fc1b.data, arch.hidden, perm);
        auto hw = find_entry(out, "head.weight");
        permute_in_channels(hw.data, hw.entry->dims.at(0), arch.hidden, 1, perm);
        return out;
    }
    if (arch.arch_id == "small_cnn") {
        if (perms.size() != 2) throw std::invalid_argument("small_cnn takes two channel permutations");
        int f1 = arch.hidden, f2 = 2 * arch.hidden;
        if (static_cast<int>(perms[0].size()) != f1 || static_cast<int>(perms[1].size()) != f2) {
            throw std::invalid_argument("channel permutation size mismatch");
        }
        auto c1w = find_entry(out, "conv1.weight");
        permute_rows(c1w.data, f1, arch.input_c * 9, perms[0]);
        auto c1b = find_entry(out, "conv1.bias");
        permute_vec(c1b.data, f1, perms[0]);
        auto c2w = find_entry(out, "conv2.weight");
        permute_in_channels(c2w.data, f2, f1, 9, perms[0]);
        permute_rows(c2w.data, f2, f1 * 9, perms[1]);
        auto c2b = find_entry(out, "conv2.bias");
        permute_vec(c2b.data, f2, perms[1]);
        auto hw = find_entry(out, "head.weight");
        permute_in_channels(hw.data, hw.entry->dims.at(0), f2, 1, perms[1]);
        return out;
    }
    throw std::invalid_argument("arch " + arch.arch_id +
                                " has no hidden layers in its generated subset to permute");
}

FlatParams permute_neurons(const FlatParams& theta, const ArchSpec& arch, uint64_t seed) {
    Rng rng = Rng(seed).fork(0x9e4);
    std::vector<std::vector<int>> perms;
    if (arch.arch_id == "toy_mlp") {
        perms.push_back(random_permutation(arch.hidden, rng));
    } else if (arch.arch_id == "small_cnn") {
        perms.push_back(random_permutation(arch.hidden, rng));
        perms.push_back(random_permutation(2 * arch.hidden, rng));
    } else {
        throw std::invalid_argument("arch " + arch.arch_id +
                                    " has no hidden layers in its generated subset to permute");
    }
    return permute_neurons_with(theta, arch, perms);
}

} // namespace tina
