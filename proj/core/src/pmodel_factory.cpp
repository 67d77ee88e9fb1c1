// SPDX-License-Identifier: Apache-2.0
#include "tina/pmodel_factory.hpp"

#include "tina/linalg.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace tina {

Network train_generic(const ImageSet& images, const ArchSpec& arch, int epochs, uint64_t seed,
                      const SgdConfig& sgd) {
    for (int k = 0; k < images.num_classes(); ++k) {
        if (images.train_by_class[static_cast<size_t>(k)].empty()) {
            throw std::invalid_argument("class " + std::to_string(k) + " missing from training data");
        }
    }
    std::vector<int> all(static_cast<size_t>(images.num_classes()));
    for (int i = 0; i < images.num_classes(); ++i) all[static_cast<size_t>(i)] = i;
    return train_generic_pool(images, arch, all, epochs, seed, sgd);
}

Network train_generic_pool(const ImageSet& images, const ArchSpec& arch,
                           const std::vector<int>& pool, int epochs, uint64_t seed,
                           const SgdConfig& sgd) {
    if (pool.empty()) throw std::invalid_argument("class pool is empty");
    Network net(arch, images.num_classes());
    Rng rng = Rng(seed).fork(0x6e1);
    net.init_params(rng);
    if (epochs == 0) return net;

    SgdConfig cfg = sgd;
    cfg.epochs = epochs;
    sgd_train(net, pool_train_data(images, pool), cfg, seed, /*head_only=*/false);
    return net;
}

PModelRecord finetune_pmodel(const Network& generic, const TaskSpec& task, const ImageSet& images,
                             int epochs, uint64_t seed, const SgdConfig& sgd) {
    const ArchSpec& arch = generic.spec();
    int c = task.num_classes();
    if (c < 1) throw std::invalid_argument("task has no classes");
    for (int id : task.class_ids) {
        if (id < 0 || id >= generic.head_rows()) {
            throw std::invalid_argument("task class " + std::to_string(id) +
                                        " not covered by the generic model");
        }
        if (images.train_by_class[static_cast<size_t>(id)].empty()) {
            throw std::invalid_argument("class " + std::to_string(id) + " has no finetuning images");
        }
    }

    // trunk from the generic model; head rows selected in task order
    Network net(arch, c);
    int fd = arch.feature_dim();
    for (auto& t : net.params.tensors) {
        if (t.name == "head.weight") {
            const auto& gw = generic.params.at("head.weight");
            for (int i = 0; i < c; ++i) {
                int src = task.class_ids[static_cast<size_t>(i)];
                std::copy_n(gw.v.begin() + static_cast<long>(src) * fd, fd,
                            t.v.begin() + static_cast<long>(i) * fd);
            }
        } else if (t.name == "head.bias") {
            const auto& gb = generic.params.at("head.bias");
            for (int i = 0; i < c; ++i) t.v[static_cast<size_t>(i)] = gb.v[static_cast<size_t>(task.class_ids[static_cast<size_t>(i)])];
        } else {
            t.v = generic.params.at(t.name).v;
        }
    }

    if (epochs > 0) {
        SgdConfig cfg = sgd;
        cfg.epochs = epochs;
        sgd_train(net, task_train_data(images, task), cfg, mix64(seed) ^ fnv1a(task.task_id),
                  arch.head_only_generated());
    }

    PModelRecord rec;
    rec.task = task;
    rec.theta = flatten(net.params, arch);
    rec.theta.values = to_f32_precision(rec.theta.values); // match on-disk precision
    rec.arch_id = arch.arch_id;
    rec.seed = seed;
    rec.epochs = epochs;
    rec.metric = eval_accuracy(net, task_test_data(images, task));
    return rec;
}

Network assemble_pmodel(const ArchSpec& arch, const Network& generic, const FlatParams& theta) {
    NamedParams gen = unflatten(theta, arch);
    int rows = theta.classifier.rows;
    Network net(arch, rows);
    for (auto& t : net.params.tensors) {
        if (gen.has(t.name)) {
            t.v = gen.at(t.name).v;
        } else {
            t.v = generic.params.at(t.name).v; // frozen trunk
        }
    }
    return net;
}

double eval_theta_accuracy(const ArchSpec& arch, const Network& generic, const FlatParams& theta,
                           const TaskSpec& task, const ImageSet& images) {
    Network net = assemble_pmodel(arch, generic, theta);
    int c = task.num_classes();
    if (net.head_rows() < c) throw std::invalid_argument("theta carries fewer rows than the task needs");
    std::vector<bool> mask(static_cast<size_t>(net.head_rows()), false);
    for (int i = 0; i < c; ++i) mask[static_cast<size_t>(i)] = true;
    return eval_accuracy_masked(net, task_test_data(images, task), mask);
}

double eval_generic_on_task(const Network& generic, const TaskSpec& task, const ImageSet& images) {
    TaskData d;
    for (int cid : task.class_ids) {
        const auto& imgs = images.test_by_class.at(static_cast<size_t>(cid));
        if (imgs.empty()) throw std::invalid_argument("empty testset for class " + std::to_string(cid));
        for (const auto& img : imgs) {
            d.xs.push_back(&img);
            d.ys.push_back(cid); // global label: the generic model answers over all classes
        }
    }
    return eval_accuracy(generic, d);
}

// ---------------------------------------------------------------------------
// dataset persistence: manifest.json + params.bin (concatenated float32)
// ---------------------------------------------------------------------------

void PModelDataset::save(const std::string& dir) const {
    fs::create_directories(dir);
    fs::path manifest_path = fs::path(dir) / "manifest.json";
    fs::path blob_path = fs::path(dir) / "params.bin";
    try {
        ordered_json j;
        j["arch"] = ordered_json::parse(arch.to_json());
        j["count"] = records.size();
        ordered_json recs = ordered_json::array();
        std::vector<unsigned char> blob;
        size_t offset = 0;
        for (const auto& r : records) {
            ordered_json e;
            e["task_id"] = r.task.task_id;
            e["class_ids"] = r.task.class_ids;
            e["prompt_mode"] = to_string(r.task.prompt_mode);
            e["arch_id"] = r.arch_id;
            e["offset"] = offset;
            e["length"] = r.theta.size();
            e["accuracy"] = r.metric;
            e["seed"] = r.seed;
            e["epochs"] = r.epochs;
            e["head_rows"] = r.theta.classifier.rows;
            recs.push_back(std::move(e));
            append_f32(blob, r.theta.values);
            offset += r.theta.size();
        }
        j["records"] = std::move(recs);
        write_text_file(manifest_path.string(), j.dump(2) + "\n");
        std::ofstream os(blob_path, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot open " + blob_path.string());
        os.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
        if (!os) throw std::runtime_error("write failed: " + blob_path.string());
    } catch (...) {
        // never leave a half-written dataset behind
        std::error_code ec;
        fs::remove(manifest_path, ec);
        fs::remove(blob_path, ec);
        throw;
    }
}

PModelDataset PModelDataset::load(const std::string& dir) {
    ordered_json j = ordered_json::parse(read_text_file((fs::path(dir) / "manifest.json").string()));
    PModelDataset ds;
    ds.arch = ArchSpec::from_json(j.at("arch").dump());
    auto blob = read_f32_blob((fs::path(dir) / "params.bin").string());
    for (const auto& e : j.at("records")) {
        PModelRecord r;
        r.task.task_id = e.at("task_id").get<std::string>();
        r.task.class_ids = e.at("class_ids").get<std::vector<int>>();
        r.task.prompt_mode = prompt_mode_from_string(e.value("prompt_mode", "name"));
        r.arch_id = e.at("arch_id").get<std::string>();
        r.metric = e.at("accuracy").get<double>();
        r.seed = e.at("seed").get<uint64_t>();
        r.epochs = e.at("epochs").get<int>();
        size_t offset = e.at("offset").get<size_t>();
        size_t length = e.at("length").get<size_t>();
        if (offset + length > blob.size()) {
            throw std::runtime_error("manifest record overruns params.bin");
        }
        int head_rows = e.at("head_rows").get<int>();
        r.theta = zero_flat(ds.arch, head_rows);
        if (r.theta.size() != length) {
            throw std::runtime_error("record length disagrees with arch layout");
        }
        std::copy_n(blob.begin() + static_cast<long>(offset), length, r.theta.values.begin());
        ds.records.push_back(std::move(r));
    }
    return ds;
}

PModelDataset build_pmodel_dataset(const Network& generic, const TaskSplit& split,
                                   const ImageSet& images, int epochs, uint64_t seed,
                                   const SgdConfig& sgd, const std::string& dir) {
    PModelDataset ds;
    ds.arch = generic.spec();
    ds.records.resize(split.train_tasks.size());

    // per-task finetuning is independent; outputs land at fixed indices so the
    // written dataset is identical regardless of scheduling
    std::exception_ptr first_error;
#pragma omp parallel for schedule(dynamic)
    for (long long i = 0; i < static_cast<long long>(split.train_tasks.size()); ++i) {
        try {
            const TaskSpec& task = split.train_tasks[static_cast<size_t>(i)];
            ds.records[static_cast<size_t>(i)] = finetune_pmodel(generic, task, images, epochs, seed, sgd);
        } catch (...) {
#pragma omp critical
            if (!first_error) first_error = std::current_exception();
        }
    }
    if (first_error) std::rethrow_exception(first_error);

    ds.save(dir);
    return ds;
}

} // namespace tina
