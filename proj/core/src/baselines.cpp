// SPDX-License-Identifier: Apache-2.0
#include "tina/baselines.hpp"

#include "tina/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace tina {

namespace {

void copy_trunk(const Network& src, Network& dst) {
    for (auto& t : dst.params.tensors) {
        if (t.name.rfind("head.", 0) == 0) continue;
        t.v = src.params.at(t.name).v;
    }
}

void check_task_classes(const Network& generic, const TaskSpec& task) {
    for (int id : task.class_ids) {
        if (id < 0 || id >= generic.head_rows()) {
            throw std::invalid_argument("unknown class id " + std::to_string(id) +
                                        " for a head of " + std::to_string(generic.head_rows()));
        }
    }
}

} // namespace

Network classifier_select(const Network& generic, const TaskSpec& task) {
    check_task_classes(generic, task);
    const ArchSpec& arch = generic.spec();
    int c = task.num_classes();
    Network net(arch, c);
    copy_trunk(generic, net);
    int fd = arch.feature_dim();
    const auto& gw = generic.params.at("head.weight");
    auto& hw = net.params.at("head.weight");
    for (int i = 0; i < c; ++i) {
        std::copy_n(gw.v.begin() + static_cast<long>(task.class_ids[static_cast<size_t>(i)]) * fd, fd,
                    hw.v.begin() + static_cast<long>(i) * fd);
    }
    if (arch.head_bias) {
        const auto& gb = generic.params.at("head.bias");
        auto& hb = net.params.at("head.bias");
        for (int i = 0; i < c; ++i) hb.v[static_cast<size_t>(i)] = gb.v[static_cast<size_t>(task.class_ids[static_cast<size_t>(i)])];
    }
    return net;
}

Network classifier_select_zeroed(const Network& generic, const TaskSpec& task) {
    check_task_classes(generic, task);
    Network net(generic.spec(), generic.head_rows());
    copy_trunk(generic, net);
    std::set<int> keep(task.class_ids.begin(), task.class_ids.end());
    int fd = generic.spec().feature_dim();
    const auto& gw = generic.params.at("head.weight");
    auto& hw = net.params.at("head.weight");
    for (int r = 0; r < generic.head_rows(); ++r) {
        if (keep.count(r)) {
            std::copy_n(gw.v.begin() + static_cast<long>(r) * fd, fd, hw.v.begin() + static_cast<long>(r) * fd);
        }
    }
    if (generic.spec().head_bias) {
        const auto& gb = generic.params.at("head.bias");
        auto& hb = net.params.at("head.bias");
        for (int r = 0; r < generic.head_rows(); ++r) {
            if (keep.count(r)) hb.v[static_cast<size_t>(r)] = gb.v[static_cast<size_t>(r)];
        }
    }
    return net;
}

std::vector<double> mean_prompt_embedding(const TaskSpec& task, const Vocabulary& vocab,
                                          const Encoder& encoder) {
    auto prompts = render_prompt(task, vocab);
    std::vector<double> mean(static_cast<size_t>(encoder.dim()), 0.0);
    for (const auto& s : prompts) {
        auto e = encoder.encode_text(s);
        for (size_t i = 0; i < mean.size(); ++i) mean[i] += e[i];
    }
    for (double& x : mean) x /= static_cast<double>(prompts.size());
    return mean;
}

std::vector<double> TaperState::mixer_weights(const std::vector<double>& prompt_embed) const {
    if (static_cast<int>(prompt_embed.size()) != cond_dim) {
        throw std::invalid_argument("prompt embedding dim mismatch");
    }
    std::vector<double> h(static_cast<size_t>(mix_hidden));
    for (int i = 0; i < mix_hidden; ++i) {
        h[static_cast<size_t>(i)] = std::max(0.0, dot(prompt_embed.data(), mix_w1.data() + static_cast<size_t>(i) * cond_dim,
                                                      static_cast<size_t>(cond_dim)) +
                                                      mix_b1[static_cast<size_t>(i)]);
    }
    std::vector<double> z(static_cast<size_t>(n_experts));
    for (int e = 0; e < n_experts; ++e) {
        z[static_cast<size_t>(e)] =
            dot(h.data(), mix_w2.data() + static_cast<size_t>(e) * mix_hidden, static_cast<size_t>(mix_hidden)) + mix_b2[static_cast<size_t>(e)];
    }
    softmax_inplace(z.data(), z.size());
    return z;
}

uint64_t TaperState::mixer_fingerprint() const {
    uint64_t h = 0x9e3779b97f4a7c15ull;
    auto mixin = [&](const std::vector<double>& v) {
        std::vector<unsigned char> bytes;
        append_f32(bytes, v);
        h = mix64(h ^ fnv1a(bytes.data(), bytes.size()));
    };
    mixin(mix_w1);
    mixin(mix_b1);
    mixin(mix_w2);
    mixin(mix_b2);
    return h;
}

bool TaperState::covers(int class_id) const {
    return std::find(covered_classes.begin(), covered_classes.end(), class_id) != covered_classes.end();
}

NamedParams taper_merge(const TaperState& state, const std::vector<double>& weights) {
    if (static_cast<int>(weights.size()) != state.n_experts) {
        throw std::invalid_argument("need one aggregation weight per expert");
    }
    NamedParams merged = state.experts.front().params.zeros_like();
    for (int e = 0; e < state.n_experts; ++e) {
        double we = weights[static_cast<size_t>(e)];
        const NamedParams& ep = state.experts[static_cast<size_t>(e)].params;
        for (size_t t = 0; t < merged.tensors.size(); ++t) {
            axpy(we, ep.tensors[t].v.data(), merged.tensors[t].v.data(), merged.tensors[t].v.size());
        }
    }
    return merged;
}

TaperState taper_fit(const Network& generic, const ImageSet& images,
                     const std::vector<TaskSpec>& train_tasks, const Vocabulary& vocab,
                     const Encoder& encoder, const TaperConfig& cfg, const SgdConfig& sgd,
                     uint64_t seed) {
    TaperState st;
    st.arch = generic.spec();
    st.n_experts = cfg.n_experts;
    st.cond_dim = encoder.dim();
    st.mix_hidden = cfg.mix_hidden;
    st.covered_classes = classes_with_train_data(images);

    if (cfg.n_experts < 1) throw std::invalid_argument("need at least one expert");
    if (cfg.n_experts > static_cast<int>(st.covered_classes.size())) {
        throw std::invalid_argument("more experts than classes to shard");
    }

    // contiguous shards of a seeded shuffle of the available classes
    Rng rng = Rng(seed).fork(0x7a9);
    std::vector<int> order = st.covered_classes;
    rng.shuffle(order);
    std::vector<std::vector<int>> shards(static_cast<size_t>(cfg.n_experts));
    for (size_t i = 0; i < order.size(); ++i) {
        shards[i * static_cast<size_t>(cfg.n_experts) / order.size()].push_back(order[i]);
    }

    for (int e = 0; e < cfg.n_experts; ++e) {
        Network expert = generic;
        if (cfg.epochs_expert > 0) {
            SgdConfig c = sgd;
            c.epochs = cfg.epochs_expert;
            sgd_train(expert, pool_train_data(images, shards[static_cast<size_t>(e)]), c,
                      mix64(seed) ^ (0xee00ull + static_cast<uint64_t>(e)), /*head_only=*/false);
        }
        st.experts.push_back(std::move(expert));
    }

    // mixer init
    Rng mrng = Rng(seed).fork(0x31c);
    st.mix_w1.resize(static_cast<size_t>(cfg.mix_hidden) * st.cond_dim);
    st.mix_b1.assign(static_cast<size_t>(cfg.mix_hidden), 0.0);
    st.mix_w2.resize(static_cast<size_t>(cfg.n_experts) * cfg.mix_hidden);
    st.mix_b2.assign(static_cast<size_t>(cfg.n_experts), 0.0);
    double s1 = 1.0 / std::sqrt(static_cast<double>(st.cond_dim));
    double s2 = 1.0 / std::sqrt(static_cast<double>(cfg.mix_hidden));
    for (double& x : st.mix_w1) x = s1 * mrng.gaussian();
    for (double& x : st.mix_w2) x = s2 * mrng.gaussian();

    if (cfg.epochs_mixer == 0 || train_tasks.empty()) return st;

    // stage 3: train the mixer through the merged model's task loss
    std::vector<size_t> order_t(train_tasks.size());
    for (size_t i = 0; i < order_t.size(); ++i) order_t[i] = i;

    for (int epoch = 0; epoch < cfg.epochs_mixer; ++epoch) {
        mrng.shuffle(order_t);
        for (size_t ti : order_t) {
            const TaskSpec& task = train_tasks[ti];
            auto embed = mean_prompt_embedding(task, vocab, encoder);

            // forward mixer (keep pre-activations for backprop)
            std::vector<double> h_pre(static_cast<size_t>(cfg.mix_hidden));
            std::vector<double> h(static_cast<size_t>(cfg.mix_hidden));
            for (int i = 0; i < cfg.mix_hidden; ++i) {
                h_pre[static_cast<size_t>(i)] =
                    dot(embed.data(), st.mix_w1.data() + static_cast<size_t>(i) * st.cond_dim,
                        static_cast<size_t>(st.cond_dim)) +
                    st.mix_b1[static_cast<size_t>(i)];
                h[static_cast<size_t>(i)] = std::max(0.0, h_pre[static_cast<size_t>(i)]);
            }
            std::vector<double> weights(static_cast<size_t>(cfg.n_experts));
            for (int e = 0; e < cfg.n_experts; ++e) {
                weights[static_cast<size_t>(e)] =
                    dot(h.data(), st.mix_w2.data() + static_cast<size_t>(e) * cfg.mix_hidden,
                        static_cast<size_t>(cfg.mix_hidden)) +
                    st.mix_b2[static_cast<size_t>(e)];
            }
            softmax_inplace(weights.data(), weights.size());

            // merged task model (compact head in task order)
            NamedParams merged = taper_merge(st, weights);
            Network full(st.arch, st.experts.front().head_rows());
            full.params = std::move(merged);
            Network task_net = classifier_select(full, task);

            // minibatch CE gradient w.r.t. the merged task model
            TaskData data = task_train_data(images, task);
            std::vector<size_t> idx;
            for (int k = 0; k < cfg.images_per_step; ++k) {
                idx.push_back(static_cast<size_t>(mrng.below(data.xs.size())));
            }
            NamedParams grad = task_net.params.zeros_like();
            task_net.ce_backward(data.xs, data.ys, idx, grad, /*head_only=*/false);

            // dL/dw_e = <dL/dtheta_task, expert_e restricted to the task model>
            std::vector<double> dw(static_cast<size_t>(cfg.n_experts), 0.0);
            int fd = st.arch.feature_dim();
            for (int e = 0; e < cfg.n_experts; ++e) {
                const NamedParams& ep = st.experts[static_cast<size_t>(e)].params;
                double acc = 0;
                for (const auto& gt : grad.tensors) {
                    if (gt.name == "head.weight") {
                        const auto& ew = ep.at("head.weight");
                        for (int i = 0; i < task.num_classes(); ++i) {
                            acc += dot(gt.v.data() + static_cast<size_t>(i) * fd,
                                       ew.v.data() + static_cast<size_t>(task.class_ids[static_cast<size_t>(i)]) * fd,
                                       static_cast<size_t>(fd));
                        }
                    } else if (gt.name == "head.bias") {
                        const auto& eb = ep.at("head.bias");
                        for (int i = 0; i < task.num_classes(); ++i) {
                            acc += gt.v[static_cast<size_t>(i)] * eb.v[static_cast<size_t>(task.class_ids[static_cast<size_t>(i)])];
                        }
                    } else {
                        acc += dot(gt.v.data(), ep.at(gt.name).v.data(), gt.v.size());
                    }
                }
                dw[static_cast<size_t>(e)] = acc;
            }

            // softmax backward
            double wd = 0;
            for (int e = 0; e < cfg.n_experts; ++e) wd += dw[static_cast<size_t>(e)] * weights[static_cast<size_t>(e)];
            std::vector<double> dz(static_cast<size_t>(cfg.n_experts));
            for (int e = 0; e < cfg.n_experts; ++e) {
                dz[static_cast<size_t>(e)] = weights[static_cast<size_t>(e)] * (dw[static_cast<size_t>(e)] - wd);
            }

            // mlp backward + sgd update
            std::vector<double> dh(static_cast<size_t>(cfg.mix_hidden), 0.0);
            for (int e = 0; e < cfg.n_experts; ++e) {
                double ge = dz[static_cast<size_t>(e)];
                for (int i = 0; i < cfg.mix_hidden; ++i) {
                    dh[static_cast<size_t>(i)] += ge * st.mix_w2[static_cast<size_t>(e) * cfg.mix_hidden + static_cast<size_t>(i)];
                    st.mix_w2[static_cast<size_t>(e) * cfg.mix_hidden + static_cast<size_t>(i)] -=
                        cfg.mixer_lr * ge * h[static_cast<size_t>(i)];
                }
                st.mix_b2[static_cast<size_t>(e)] -= cfg.mixer_lr * ge;
            }
            for (int i = 0; i < cfg.mix_hidden; ++i) {
                if (h_pre[static_cast<size_t>(i)] <= 0.0) continue;
                double gi = dh[static_cast<size_t>(i)];
                for (int k2 = 0; k2 < st.cond_dim; ++k2) {
                    st.mix_w1[static_cast<size_t>(i) * st.cond_dim + static_cast<size_t>(k2)] -=
                        cfg.mixer_lr * gi * embed[static_cast<size_t>(k2)];
                }
                st.mix_b1[static_cast<size_t>(i)] -= cfg.mixer_lr * gi;
            }
        }
    }
    return st;
}

TaperGenerated taper_generate_task(const TaperState& state, const TaskSpec& task,
                                   const std::vector<double>& prompt_embed) {
    auto weights = state.mixer_weights(prompt_embed);
    NamedParams merged = taper_merge(state, weights);
    Network full(state.arch, state.experts.front().head_rows());
    full.params = std::move(merged);

    bool any_covered = false;
    for (int id : task.class_ids) any_covered = any_covered || state.covers(id);

    Network task_net(state.arch, task.num_classes());
    copy_trunk(full, task_net);
    int fd = state.arch.feature_dim();
    const auto& gw = full.params.at("head.weight");
    auto& hw = task_net.params.at("head.weight");
    for (int i = 0; i < task.num_classes(); ++i) {
        int src = task.class_ids[static_cast<size_t>(i)];
        if (!state.covers(src)) continue; // uncovered classes keep zero rows
        std::copy_n(gw.v.begin() + static_cast<long>(src) * fd, fd, hw.v.begin() + static_cast<long>(i) * fd);
    }
    if (state.arch.head_bias) {
        const auto& gb = full.params.at("head.bias");
        auto& hb = task_net.params.at("head.bias");
        for (int i = 0; i < task.num_classes(); ++i) {
            int src = task.class_ids[static_cast<size_t>(i)];
            if (state.covers(src)) hb.v[static_cast<size_t>(i)] = gb.v[static_cast<size_t>(src)];
        }
    }
    return TaperGenerated{std::move(task_net), std::move(weights), any_covered};
}

} // namespace tina
