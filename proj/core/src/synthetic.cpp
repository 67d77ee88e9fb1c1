// SPDX-License-Identifier: Apache-2.0
#include "tina/synthetic.hpp"

#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace tina {

namespace {

// twelve classes as six visually-similar pairs
const char* kToyNames[12] = {"ember", "flare", "coral", "reef",  "dune",  "mesa",
                             "moss",  "fern",  "slate", "flint", "plume", "wisp"};

const char* kToyDescriptions[12] = {
    "a warm glowing patch that fades toward the edges",
    "a bright burst with a hot concentrated core",
    "a branching rosy texture with fine speckles",
    "a ridged underwater formation with scattered bright spots",
    "a smooth sandy gradient rising to one side",
    "a flat-topped elevated region with steep falloff",
    "a soft green carpet of low dense texture",
    "a feathery spread of thin curved fronds",
    "a cold gray plane with faint layered bands",
    "a hard dark chip with sharp contrast edges",
    "a drifting soft column of pale haze",
    "a thin trailing streak that dissolves quickly",
};

// superclass sizes 3,3,2,2,2 so the 3:2:1 mix sampler is realizable at c=5
const int kToySuperclass[12] = {0, 0, 0, 1, 1, 1, 2, 2, 3, 3, 4, 4};

double squared_norm_local(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x * x;
    return s;
}

std::vector<double> unit_gaussian(int dim, Rng& rng) {
    std::vector<double> v(static_cast<size_t>(dim));
    rng.fill_gaussian(v);
    double n = std::sqrt(squared_norm_local(v));
    for (double& x : v) x /= n;
    return v;
}

} // namespace

std::vector<double> ToyUniverse::sample_image(int class_id, Rng& rng) const {
    const auto& proto = prototypes.at(static_cast<size_t>(class_id));
    std::vector<double> img(proto.size());
    for (size_t i = 0; i < img.size(); ++i) img[i] = proto[i] + config.noise_sigma * rng.gaussian();
    return img;
}

ToyUniverse make_toy_universe(const ToyConfig& cfg) {
    if (cfg.n_classes != 12) {
        throw std::invalid_argument("toy universe is defined for exactly 12 classes");
    }
    ToyUniverse u;
    u.config = cfg;
    int dim = cfg.image_hw * cfg.image_hw;

    for (int i = 0; i < 12; ++i) {
        ClassEntry c;
        c.id = i;
        c.name = kToyNames[i];
        c.description = kToyDescriptions[i];
        c.superclass = kToySuperclass[i];
        u.vocab.classes.push_back(std::move(c));
    }
    u.vocab.validate();

    Rng proto_rng = Rng(cfg.seed).fork(0x707);
    u.prototypes.resize(12);
    for (int p = 0; p < 6; ++p) {
        auto base = unit_gaussian(dim, proto_rng);
        auto delta = unit_gaussian(dim, proto_rng);
        std::vector<double> second(static_cast<size_t>(dim));
        for (int i = 0; i < dim; ++i) second[static_cast<size_t>(i)] = base[static_cast<size_t>(i)] + cfg.pair_delta * delta[static_cast<size_t>(i)];
        double n = std::sqrt(squared_norm_local(second));
        for (double& x : second) x /= n;
        for (int i = 0; i < dim; ++i) {
            u.prototypes[static_cast<size_t>(2 * p)].push_back(cfg.proto_scale * base[static_cast<size_t>(i)]);
            u.prototypes[static_cast<size_t>(2 * p + 1)].push_back(cfg.proto_scale * second[static_cast<size_t>(i)]);
        }
        u.similar_pairs.emplace_back(2 * p, 2 * p + 1);
    }

    u.images.dim = dim;
    u.images.train_by_class.resize(12);
    u.images.test_by_class.resize(12);
    for (int k = 0; k < 12; ++k) {
        Rng train_rng = Rng(cfg.seed).fork(0x1000 + static_cast<uint64_t>(k));
        Rng test_rng = Rng(cfg.seed).fork(0x2000 + static_cast<uint64_t>(k));
        for (int i = 0; i < cfg.train_per_class; ++i) {
            u.images.train_by_class[static_cast<size_t>(k)].push_back(u.sample_image(k, train_rng));
        }
        for (int i = 0; i < cfg.test_per_class; ++i) {
            u.images.test_by_class[static_cast<size_t>(k)].push_back(u.sample_image(k, test_rng));
        }
    }
    return u;
}

void write_toy_encoder_table(const ToyUniverse& u, int embed_dim, uint64_t seed,
                             const std::string& path) {
    int dim = u.image_dim();
    Rng rng = Rng(seed).fork(0xe0c0);
    // shared random projection: the "pretrained" alignment between pixels and text
    std::vector<std::vector<double>> proj(static_cast<size_t>(embed_dim));
    double inv = 1.0 / std::sqrt(static_cast<double>(dim));
    for (auto& row : proj) {
        row.resize(static_cast<size_t>(dim));
        for (double& x : row) x = inv * rng.gaussian();
    }

    auto project = [&](const std::vector<double>& x) {
        std::vector<double> e(static_cast<size_t>(embed_dim));
        for (int o = 0; o < embed_dim; ++o) {
            double s = 0;
            for (int i = 0; i < dim; ++i) s += proj[static_cast<size_t>(o)][static_cast<size_t>(i)] * x[static_cast<size_t>(i)];
            e[static_cast<size_t>(o)] = s;
        }
        return e;
    };
    auto normalize = [](std::vector<double> v) {
        double n = std::sqrt(squared_norm_local(v));
        if (n > 0) {
            for (double& x : v) x /= n;
        }
        return v;
    };
    auto jitter = [&](const std::string& s, double scale, std::vector<double>& v) {
        Rng jr(mix64(fnv1a(s)) ^ seed);
        for (double& x : v) x += scale * jr.gaussian();
    };

    nlohmann::json j;
    j["dim"] = embed_dim;
    j["image_proj"] = proj;
    nlohmann::json entries;
    for (const auto& c : u.vocab.classes) {
        auto anchor = project(u.prototypes[static_cast<size_t>(c.id)]);
        auto name_vec = anchor;
        jitter(c.name, 0.05, name_vec);
        auto desc_vec = anchor;
        jitter(c.description, 0.15, desc_vec);
        entries[c.name] = normalize(std::move(name_vec));
        entries[c.description] = normalize(std::move(desc_vec));
    }
    // reserved pad token
    {
        std::vector<double> pad(static_cast<size_t>(embed_dim));
        Rng pr(mix64(seed) ^ 0x9ad);
        pr.fill_gaussian(pad);
        entries["<->"] = normalize(std::move(pad));
    }
    j["entries"] = std::move(entries);
    write_text_file(path, j.dump() + "\n");
}

} // namespace tina
