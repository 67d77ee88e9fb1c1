// SPDX-License-Identifier: Apache-2.0
#include "tina/nets.hpp"

#include "tina/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace tina {

NamedTensor& NamedParams::at(const std::string& name) {
    for (auto& t : tensors)
        if (t.name == name) return t;
    throw std::out_of_range("no tensor named " + name);
}

const NamedTensor& NamedParams::at(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return t;
    throw std::out_of_range("no tensor named " + name);
}

bool NamedParams::has(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return true;
    return false;
}

size_t NamedParams::numel() const {
    size_t n = 0;
    for (const auto& t : tensors) n += t.v.size();
    return n;
}

NamedParams NamedParams::zeros_like() const {
    NamedParams g = *this;
    g.fill_zero();
    return g;
}

void NamedParams::fill_zero() {
    for (auto& t : tensors) std::fill(t.v.begin(), t.v.end(), 0.0);
}

// ---------------------------------------------------------------------------
// ArchSpec
// ---------------------------------------------------------------------------

int ArchSpec::feature_dim() const {
    if (arch_id == "toy_mlp") return hidden;
    if (arch_id == "small_cnn") return 2 * hidden;
    if (arch_id == "resnet20_head") return 4 * hidden;
    throw std::invalid_argument("unknown arch_id: " + arch_id);
}

std::vector<LayerDef> ArchSpec::layer_defs(int head_rows) const {
    std::vector<LayerDef> defs;
    bool gen_all = !head_only_generated();
    if (arch_id == "toy_mlp") {
        defs.push_back({"fc1.weight", {hidden, input_dim()}, gen_all});
        defs.push_back({"fc1.bias", {hidden}, gen_all});
    } else if (arch_id == "small_cnn") {
        defs.push_back({"conv1.weight", {hidden, input_c, 3, 3}, gen_all});
        defs.push_back({"conv1.bias", {hidden}, gen_all});
        defs.push_back({"conv2.weight", {2 * hidden, hidden, 3, 3}, gen_all});
        defs.push_back({"conv2.bias", {2 * hidden}, gen_all});
    } else if (arch_id == "resnet20_head") {
        defs.push_back({"stem.weight", {hidden, input_c, 3, 3}, false});
        defs.push_back({"stem.bias", {hidden}, false});
        for (int s = 0; s < 3; ++s) {
            int in_w = hidden << (s == 0 ? 0 : s - 1);
            int out_w = hidden << s;
            for (int b = 0; b < blocks_per_stage; ++b) {
                std::string p = "s" + std::to_string(s) + ".b" + std::to_string(b) + ".";
                int bin = (b == 0) ? in_w : out_w;
                defs.push_back({p + "conv1.weight", {out_w, bin, 3, 3}, false});
                defs.push_back({p + "conv1.bias", {out_w}, false});
                defs.push_back({p + "conv2.weight", {out_w, out_w, 3, 3}, false});
                defs.push_back({p + "conv2.bias", {out_w}, false});
                if (b == 0 && s > 0) {
                    defs.push_back({p + "proj.weight", {out_w, bin, 1, 1}, false});
                    defs.push_back({p + "proj.bias", {out_w}, false});
                }
            }
        }
    } else {
        throw std::invalid_argument("unknown arch_id: " + arch_id);
    }
    defs.push_back({"head.weight", {head_rows, feature_dim()}, true});
    if (head_bias) defs.push_back({"head.bias", {head_rows}, true});
    return defs;
}

size_t ArchSpec::generated_param_count() const {
    size_t n = 0;
    for (const auto& d : layer_defs(head_width)) {
        if (d.generated) {
            size_t m = 1;
            for (int x : d.dims) m *= static_cast<size_t>(x);
            n += m;
        }
    }
    return n;
}

ArchSpec ArchSpec::toy_mlp(int in_dim, int hidden, int head_width, bool head_bias) {
    ArchSpec a;
    a.arch_id = "toy_mlp";
    a.input_c = 1;
    a.input_h = 1;
    a.input_w = in_dim;
    a.hidden = hidden;
    a.head_width = head_width;
    a.head_bias = head_bias;
    return a;
}

ArchSpec ArchSpec::small_cnn(int in_c, int in_h, int in_w, int base, int head_width, bool head_bias) {
    if (in_h % 2 != 0 || in_w % 2 != 0) {
        throw std::invalid_argument("small_cnn needs even spatial dims for pooling");
    }
    ArchSpec a;
    a.arch_id = "small_cnn";
    a.input_c = in_c;
    a.input_h = in_h;
    a.input_w = in_w;
    a.hidden = base;
    a.head_width = head_width;
    a.head_bias = head_bias;
    return a;
}

ArchSpec ArchSpec::resnet20_head(int in_c, int in_h, int in_w, int stem_width, int blocks_per_stage,
                                 int head_width, bool head_bias) {
    ArchSpec a;
    a.arch_id = "resnet20_head";
    a.input_c = in_c;
    a.input_h = in_h;
    a.input_w = in_w;
    a.hidden = stem_width;
    a.blocks_per_stage = blocks_per_stage;
    a.head_width = head_width;
    a.head_bias = head_bias;
    return a;
}

std::string ArchSpec::to_json() const {
    nlohmann::json j;
    j["arch_id"] = arch_id;
    j["input_c"] = input_c;
    j["input_h"] = input_h;
    j["input_w"] = input_w;
    j["hidden"] = hidden;
    j["blocks_per_stage"] = blocks_per_stage;
    j["head_width"] = head_width;
    j["head_bias"] = head_bias;
    return j.dump();
}

ArchSpec ArchSpec::from_json(const std::string& s) {
    nlohmann::json j = nlohmann::json::parse(s);
    ArchSpec a;
    a.arch_id = j.at("arch_id").get<std::string>();
    a.input_c = j.at("input_c").get<int>();
    a.input_h = j.at("input_h").get<int>();
    a.input_w = j.at("input_w").get<int>();
    a.hidden = j.at("hidden").get<int>();
    a.blocks_per_stage = j.at("blocks_per_stage").get<int>();
    a.head_width = j.at("head_width").get<int>();
    a.head_bias = j.at("head_bias").get<bool>();
    if (a.arch_id != "toy_mlp" && a.arch_id != "small_cnn" && a.arch_id != "resnet20_head") {
        throw std::invalid_argument("unknown arch_id: " + a.arch_id);
    }
    return a;
}

// ---------------------------------------------------------------------------
// conv / pool primitives (pad-1 3x3, 1x1 projection, 2x2 mean pool)
// ---------------------------------------------------------------------------

namespace {

inline int conv_out(int n, int stride) { return (n - 1) / stride + 1; }

void conv3x3_fwd(const double* in, int C, int H, int W, const double* w, const double* b, int F,
                 int stride, double* out) {
    int OH = conv_out(H, stride), OW = conv_out(W, stride);
    for (int f = 0; f < F; ++f) {
        for (int oy = 0; oy < OH; ++oy) {
            for (int ox = 0; ox < OW; ++ox) {
                double s = b ? b[f] : 0.0;
                int iy0 = oy * stride - 1, ix0 = ox * stride - 1;
                for (int c = 0; c < C; ++c) {
                    const double* inc = in + (c * H) * W;
                    const double* wf = w + ((f * C + c) * 3) * 3;
                    for (int ky = 0; ky < 3; ++ky) {
                        int iy = iy0 + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            int ix = ix0 + kx;
                            if (ix < 0 || ix >= W) continue;
                            s += wf[ky * 3 + kx] * inc[iy * W + ix];
                        }
                    }
                }
                out[(f * OH + oy) * OW + ox] = s;
            }
        }
    }
}

void conv3x3_bwd(const double* in, int C, int H, int W, const double* w, int F, int stride,
                 const double* dout, double* din, double* dw, double* db) {
    int OH = conv_out(H, stride), OW = conv_out(W, stride);
    for (int f = 0; f < F; ++f) {
        for (int oy = 0; oy < OH; ++oy) {
            for (int ox = 0; ox < OW; ++ox) {
                double g = dout[(f * OH + oy) * OW + ox];
                if (db) db[f] += g;
                int iy0 = oy * stride - 1, ix0 = ox * stride - 1;
                for (int c = 0; c < C; ++c) {
                    const double* inc = in + (c * H) * W;
                    double* dinc = din ? din + (c * H) * W : nullptr;
                    const double* wf = w + ((f * C + c) * 3) * 3;
                    double* dwf = dw ? dw + ((f * C + c) * 3) * 3 : nullptr;
                    for (int ky = 0; ky < 3; ++ky) {
                        int iy = iy0 + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            int ix = ix0 + kx;
                            if (ix < 0 || ix >= W) continue;
                            if (dwf) dwf[ky * 3 + kx] += g * inc[iy * W + ix];
                            if (dinc) dinc[iy * W + ix] += g * wf[ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
}

void conv1x1_fwd(const double* in, int C, int H, int W, const double* w, const double* b, int F,
                 int stride, double* out) {
    int OH = conv_out(H, stride), OW = conv_out(W, stride);
    for (int f = 0; f < F; ++f) {
        for (int oy = 0; oy < OH; ++oy) {
            for (int ox = 0; ox < OW; ++ox) {
                double s = b ? b[f] : 0.0;
                int iy = oy * stride, ix = ox * stride;
                for (int c = 0; c < C; ++c) s += w[f * C + c] * in[(c * H + iy) * W + ix];
                out[(f * OH + oy) * OW + ox] = s;
            }
        }
    }
}

void conv1x1_bwd(const double* in, int C, int H, int W, const double* w, int F, int stride,
                 const double* dout, double* din, double* dw, double* db) {
    int OH = conv_out(H, stride), OW = conv_out(W, stride);
    for (int f = 0; f < F; ++f) {
        for (int oy = 0; oy < OH; ++oy) {
            for (int ox = 0; ox < OW; ++ox) {
                double g = dout[(f * OH + oy) * OW + ox];
                if (db) db[f] += g;
                int iy = oy * stride, ix = ox * stride;
                for (int c = 0; c < C; ++c) {
                    if (dw) dw[f * C + c] += g * in[(c * H + iy) * W + ix];
                    if (din) din[(c * H + iy) * W + ix] += g * w[f * C + c];
                }
            }
        }
    }
}

void avgpool2_fwd(const double* in, int C, int H, int W, double* out) {
    int OH = H / 2, OW = W / 2;
    for (int c = 0; c < C; ++c) {
        for (int oy = 0; oy < OH; ++oy) {
            for (int ox = 0; ox < OW; ++ox) {
                const double* p = in + (c * H + 2 * oy) * W + 2 * ox;
                out[(c * OH + oy) * OW + ox] = 0.25 * (p[0] + p[1] + p[W] + p[W + 1]);
            }
        }
    }
}

void avgpool2_bwd(int C, int H, int W, const double* dout, double* din) {
    int OH = H / 2, OW = W / 2;
    for (int c = 0; c < C; ++c) {
        for (int oy = 0; oy < OH; ++oy) {
            for (int ox = 0; ox < OW; ++ox) {
                double g = 0.25 * dout[(c * OH + oy) * OW + ox];
                double* p = din + (c * H + 2 * oy) * W + 2 * ox;
                p[0] += g;
                p[1] += g;
                p[W] += g;
                p[W + 1] += g;
            }
        }
    }
}

void relu_fwd(double* v, size_t n) {
    for (size_t i = 0; i < n; ++i) v[i] = std::max(v[i], 0.0);
}

// din scaled by the relu mask of the (post-activation) output
void relu_bwd(const double* post, double* d, size_t n) {
    for (size_t i = 0; i < n; ++i)
        if (post[i] <= 0.0) d[i] = 0.0;
}

void gmp_fwd(const double* in, int C, int HW, double* out) {
    double inv = 1.0 / HW;
    for (int c = 0; c < C; ++c) {
        double s = 0;
        for (int i = 0; i < HW; ++i) s += in[c * HW + i];
        out[c] = s * inv;
    }
}

void gmp_bwd(int C, int HW, const double* dout, double* din) {
    double inv = 1.0 / HW;
    for (int c = 0; c < C; ++c) {
        double g = dout[c] * inv;
        for (int i = 0; i < HW; ++i) din[c * HW + i] += g;
    }
}

} // namespace

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

Network::Network(const ArchSpec& spec, int head_rows) : spec_(spec), head_rows_(head_rows) {
    if (head_rows < 1) throw std::invalid_argument("head_rows must be >= 1");
    for (const auto& d : spec.layer_defs(head_rows)) {
        NamedTensor t;
        t.name = d.name;
        t.dims = d.dims;
        t.v.assign(t.numel(), 0.0);
        params.tensors.push_back(std::move(t));
    }
}

void Network::init_params(Rng& rng) {
    for (auto& t : params.tensors) {
        bool is_bias = t.dims.size() == 1;
        if (is_bias) {
            std::fill(t.v.begin(), t.v.end(), 0.0);
            continue;
        }
        size_t fan_in = 1;
        for (size_t i = 1; i < t.dims.size(); ++i) fan_in *= static_cast<size_t>(t.dims[i]);
        bool is_head = t.name.rfind("head.", 0) == 0;
        double std = is_head ? std::sqrt(1.0 / static_cast<double>(fan_in))
                             : std::sqrt(2.0 / static_cast<double>(fan_in));
        for (double& x : t.v) x = std * rng.gaussian();
    }
}

namespace {

// activation tape for one sample; grown lazily and reused across the batch
struct Tape {
    std::vector<std::vector<double>> acts;
    size_t used = 0;

    std::vector<double>& push(size_t n) {
        if (used == acts.size()) acts.emplace_back();
        auto& v = acts[used++];
        v.assign(n, 0.0);
        return v;
    }
    void reset() { used = 0; }
};

} // namespace

// forward + (optional) backward for one sample; returns logits.
// When g != nullptr, dlogits must hold the gradient to push back.
static std::vector<double> run_net(const Network& net, const std::vector<double>& x,
                                   NamedParams* g, const double* dlogits, bool head_only,
                                   Tape& tape) {
    const ArchSpec& spec = net.spec();
    const NamedParams& P = net.params;
    const int rows = net.head_rows();
    tape.reset();

    auto head_forward = [&](const std::vector<double>& feat) {
        const auto& hw = P.at("head.weight");
        std::vector<double> logits(static_cast<size_t>(rows));
        const double* bias = P.has("head.bias") ? P.at("head.bias").v.data() : nullptr;
        int fd = spec.feature_dim();
        for (int r = 0; r < rows; ++r) {
            logits[static_cast<size_t>(r)] =
                dot(feat.data(), hw.v.data() + static_cast<size_t>(r) * fd, static_cast<size_t>(fd)) +
                (bias ? bias[r] : 0.0);
        }
        return logits;
    };
    auto head_backward = [&](const std::vector<double>& feat, std::vector<double>& dfeat) {
        const auto& hw = P.at("head.weight");
        auto& dhw = g->at("head.weight");
        double* dhb = g->has("head.bias") ? g->at("head.bias").v.data() : nullptr;
        int fd = spec.feature_dim();
        for (int r = 0; r < rows; ++r) {
            double gr = dlogits[r];
            if (dhb) dhb[r] += gr;
            axpy(gr, feat.data(), dhw.v.data() + static_cast<size_t>(r) * fd, static_cast<size_t>(fd));
            axpy(gr, hw.v.data() + static_cast<size_t>(r) * fd, dfeat.data(), static_cast<size_t>(fd));
        }
    };

    if (spec.arch_id == "toy_mlp") {
        const auto& w1 = P.at("fc1.weight");
        const auto& b1 = P.at("fc1.bias");
        int hid = spec.hidden, in = spec.input_dim();
        auto& a1 = tape.push(static_cast<size_t>(hid));
        for (int h = 0; h < hid; ++h) {
            a1[static_cast<size_t>(h)] =
                dot(x.data(), w1.v.data() + static_cast<size_t>(h) * in, static_cast<size_t>(in)) + b1.v[static_cast<size_t>(h)];
        }
        relu_fwd(a1.data(), a1.size());
        auto logits = head_forward(a1);
        if (g) {
            std::vector<double> da1(a1.size(), 0.0);
            head_backward(a1, da1);
            if (!head_only) {
                relu_bwd(a1.data(), da1.data(), da1.size());
                auto& dw1 = g->at("fc1.weight");
                auto& db1 = g->at("fc1.bias");
                for (int h = 0; h < hid; ++h) {
                    double gh = da1[static_cast<size_t>(h)];
                    if (gh == 0.0) continue;
                    db1.v[static_cast<size_t>(h)] += gh;
                    axpy(gh, x.data(), dw1.v.data() + static_cast<size_t>(h) * in, static_cast<size_t>(in));
                }
            }
        }
        return logits;
    }

    if (spec.arch_id == "small_cnn") {
        int C = spec.input_c, H = spec.input_h, W = spec.input_w;
        int F1 = spec.hidden, F2 = 2 * spec.hidden;
        int PH = H / 2, PW = W / 2;
        auto& r1 = tape.push(static_cast<size_t>(F1 * H * W));
        conv3x3_fwd(x.data(), C, H, W, P.at("conv1.weight").v.data(), P.at("conv1.bias").v.data(), F1, 1,
                    r1.data());
        relu_fwd(r1.data(), r1.size());
        auto& p1 = tape.push(static_cast<size_t>(F1 * PH * PW));
        avgpool2_fwd(r1.data(), F1, H, W, p1.data());
        auto& r2 = tape.push(static_cast<size_t>(F2 * PH * PW));
        conv3x3_fwd(p1.data(), F1, PH, PW, P.at("conv2.weight").v.data(), P.at("conv2.bias").v.data(), F2,
                    1, r2.data());
        relu_fwd(r2.data(), r2.size());
        auto& feat = tape.push(static_cast<size_t>(F2));
        gmp_fwd(r2.data(), F2, PH * PW, feat.data());
        auto logits = head_forward(feat);
        if (g) {
            std::vector<double> dfeat(feat.size(), 0.0);
            head_backward(feat, dfeat);
            if (!head_only) {
                std::vector<double> dr2(r2.size(), 0.0);
                gmp_bwd(F2, PH * PW, dfeat.data(), dr2.data());
                relu_bwd(r2.data(), dr2.data(), dr2.size());
                std::vector<double> dp1(p1.size(), 0.0);
                conv3x3_bwd(p1.data(), F1, PH, PW, P.at("conv2.weight").v.data(), F2, 1, dr2.data(),
                            dp1.data(), g->at("conv2.weight").v.data(), g->at("conv2.bias").v.data());
                std::vector<double> dr1(r1.size(), 0.0);
                avgpool2_bwd(F1, H, W, dp1.data(), dr1.data());
                relu_bwd(r1.data(), dr1.data(), dr1.size());
                conv3x3_bwd(x.data(), C, H, W, P.at("conv1.weight").v.data(), F1, 1, dr1.data(), nullptr,
                            g->at("conv1.weight").v.data(), g->at("conv1.bias").v.data());
            }
        }
        return logits;
    }

    if (spec.arch_id == "resnet20_head") {
        int C = spec.input_c, H = spec.input_h, W = spec.input_w;
        struct BlockCache {
            std::vector<double>*in, *h1, *out;
            int in_c, in_h, in_w, out_c, out_h, out_w, stride;
            std::string prefix;
            bool has_proj;
        };
        std::vector<BlockCache> blocks;

        auto& stem = tape.push(static_cast<size_t>(spec.hidden * H * W));
        conv3x3_fwd(x.data(), C, H, W, P.at("stem.weight").v.data(), P.at("stem.bias").v.data(),
                    spec.hidden, 1, stem.data());
        relu_fwd(stem.data(), stem.size());

        std::vector<double>* cur = &stem;
        int cc = spec.hidden, ch = H, cw = W;
        for (int s = 0; s < 3; ++s) {
            int out_w = spec.hidden << s;
            for (int b = 0; b < spec.blocks_per_stage; ++b) {
                BlockCache bc;
                bc.prefix = "s" + std::to_string(s) + ".b" + std::to_string(b) + ".";
                bc.stride = (b == 0 && s > 0) ? 2 : 1;
                bc.has_proj = (b == 0 && s > 0);
                bc.in = cur;
                bc.in_c = cc;
                bc.in_h = ch;
                bc.in_w = cw;
                bc.out_c = out_w;
                bc.out_h = conv_out(ch, bc.stride);
                bc.out_w = conv_out(cw, bc.stride);
                size_t on = static_cast<size_t>(bc.out_c * bc.out_h * bc.out_w);

                auto& h1 = tape.push(on);
                conv3x3_fwd(cur->data(), cc, ch, cw, P.at(bc.prefix + "conv1.weight").v.data(),
                            P.at(bc.prefix + "conv1.bias").v.data(), out_w, bc.stride, h1.data());
                relu_fwd(h1.data(), h1.size());
                auto& out = tape.push(on);
                conv3x3_fwd(h1.data(), out_w, bc.out_h, bc.out_w, P.at(bc.prefix + "conv2.weight").v.data(),
                            P.at(bc.prefix + "conv2.bias").v.data(), out_w, 1, out.data());
                if (bc.has_proj) {
                    std::vector<double> skip(on, 0.0);
                    conv1x1_fwd(cur->data(), cc, ch, cw, P.at(bc.prefix + "proj.weight").v.data(),
                                P.at(bc.prefix + "proj.bias").v.data(), out_w, bc.stride, skip.data());
                    for (size_t i = 0; i < on; ++i) out[i] += skip[i];
                } else {
                    for (size_t i = 0; i < on; ++i) out[i] += (*cur)[i];
                }
                relu_fwd(out.data(), out.size());
                bc.h1 = &h1;
                bc.out = &out;
                blocks.push_back(bc);
                cur = &out;
                cc = bc.out_c;
                ch = bc.out_h;
                cw = bc.out_w;
            }
        }
        auto& feat = tape.push(static_cast<size_t>(cc));
        gmp_fwd(cur->data(), cc, ch * cw, feat.data());
        auto logits = head_forward(feat);

        if (g) {
            std::vector<double> dfeat(feat.size(), 0.0);
            head_backward(feat, dfeat);
            if (!head_only) {
                std::vector<double> dcur(cur->size(), 0.0);
                gmp_bwd(cc, ch * cw, dfeat.data(), dcur.data());
                for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) {
                    const BlockCache& bc = *it;
                    relu_bwd(bc.out->data(), dcur.data(), dcur.size());
                    std::vector<double> din(static_cast<size_t>(bc.in_c * bc.in_h * bc.in_w), 0.0);
                    // skip branch
                    if (bc.has_proj) {
                        conv1x1_bwd(bc.in->data(), bc.in_c, bc.in_h, bc.in_w,
                                    P.at(bc.prefix + "proj.weight").v.data(), bc.out_c, bc.stride,
                                    dcur.data(), din.data(), g->at(bc.prefix + "proj.weight").v.data(),
                                    g->at(bc.prefix + "proj.bias").v.data());
                    } else {
                        for (size_t i = 0; i < din.size(); ++i) din[i] += dcur[i];
                    }
                    // main branch
                    std::vector<double> dh1(bc.h1->size(), 0.0);
                    conv3x3_bwd(bc.h1->data(), bc.out_c, bc.out_h, bc.out_w,
                                P.at(bc.prefix + "conv2.weight").v.data(), bc.out_c, 1, dcur.data(),
                                dh1.data(), g->at(bc.prefix + "conv2.weight").v.data(),
                                g->at(bc.prefix + "conv2.bias").v.data());
                    relu_bwd(bc.h1->data(), dh1.data(), dh1.size());
                    conv3x3_bwd(bc.in->data(), bc.in_c, bc.in_h, bc.in_w,
                                P.at(bc.prefix + "conv1.weight").v.data(), bc.out_c, bc.stride, dh1.data(),
                                din.data(), g->at(bc.prefix + "conv1.weight").v.data(),
                                g->at(bc.prefix + "conv1.bias").v.data());
                    dcur = std::move(din);
                }
                relu_bwd(stem.data(), dcur.data(), dcur.size());
                conv3x3_bwd(x.data(), C, H, W, P.at("stem.weight").v.data(), spec.hidden, 1, dcur.data(),
                            nullptr, g->at("stem.weight").v.data(), g->at("stem.bias").v.data());
            }
        }
        return logits;
    }

    throw std::invalid_argument("unknown arch_id: " + spec.arch_id);
}

std::vector<double> Network::logits(const std::vector<double>& x) const {
    if (static_cast<int>(x.size()) != spec_.input_dim()) {
        throw std::invalid_argument("input size " + std::to_string(x.size()) + " != arch input dim " +
                                    std::to_string(spec_.input_dim()));
    }
    Tape tape;
    return run_net(*this, x, nullptr, nullptr, false, tape);
}

namespace {

double softmax_ce(std::vector<double>& logits, int label, std::vector<double>& dlogits, double scale) {
    softmax_inplace(logits.data(), logits.size());
    double p = std::max(logits[static_cast<size_t>(label)], 1e-300);
    for (size_t i = 0; i < logits.size(); ++i) dlogits[i] = logits[i] * scale;
    dlogits[static_cast<size_t>(label)] -= scale;
    return -std::log(p);
}

} // namespace

double Network::ce_backward(const std::vector<const std::vector<double>*>& xs,
                            const std::vector<int>& ys, const std::vector<size_t>& idx, NamedParams& g,
                            bool head_only) const {
    if (idx.empty()) throw std::invalid_argument("empty batch");
    double total = 0.0;
    double scale = 1.0 / static_cast<double>(idx.size());
    Tape tape;
    std::vector<double> dlogits(static_cast<size_t>(head_rows_));
    for (size_t i : idx) {
        const auto& x = *xs.at(i);
        int y = ys.at(i);
        if (y < 0 || y >= head_rows_) throw std::invalid_argument("label out of range");
        // two passes: run_net computes backward in one pass, so compute logits
        // first (cheap for these nets), derive dlogits, then run with grads
        Tape t2;
        auto logits = run_net(*this, x, nullptr, nullptr, head_only, t2);
        total += softmax_ce(logits, y, dlogits, scale) * scale;
        run_net(*this, x, &g, dlogits.data(), head_only, tape);
    }
    return total;
}

double Network::ce_loss(const std::vector<const std::vector<double>*>& xs,
                        const std::vector<int>& ys) const {
    if (xs.empty()) throw std::invalid_argument("empty dataset");
    double total = 0.0;
    Tape tape;
    for (size_t i = 0; i < xs.size(); ++i) {
        auto logits = run_net(*this, *xs[i], nullptr, nullptr, false, tape);
        softmax_inplace(logits.data(), logits.size());
        total += -std::log(std::max(logits[static_cast<size_t>(ys[i])], 1e-300));
    }
    return total / static_cast<double>(xs.size());
}

// ---------------------------------------------------------------------------
// datasets
// ---------------------------------------------------------------------------

namespace {

TaskData collect(const std::vector<std::vector<std::vector<double>>>& by_class,
                 const std::vector<int>& class_ids, bool remap) {
    TaskData d;
    for (size_t pos = 0; pos < class_ids.size(); ++pos) {
        int cid = class_ids[pos];
        if (cid < 0 || cid >= static_cast<int>(by_class.size())) {
            throw std::out_of_range("class id " + std::to_string(cid) + " outside image set");
        }
        const auto& imgs = by_class[static_cast<size_t>(cid)];
        if (imgs.empty()) throw std::invalid_argument("class " + std::to_string(cid) + " has no images");
        for (const auto& img : imgs) {
            d.xs.push_back(&img);
            d.ys.push_back(remap ? static_cast<int>(pos) : cid);
        }
    }
    return d;
}

} // namespace

TaskData task_train_data(const ImageSet& images, const TaskSpec& task) {
    return collect(images.train_by_class, task.class_ids, true);
}

TaskData task_test_data(const ImageSet& images, const TaskSpec& task) {
    return collect(images.test_by_class, task.class_ids, true);
}

TaskData full_train_data(const ImageSet& images) {
    std::vector<int> all(static_cast<size_t>(images.num_classes()));
    for (int i = 0; i < images.num_classes(); ++i) all[static_cast<size_t>(i)] = i;
    return collect(images.train_by_class, all, false);
}

TaskData full_test_data(const ImageSet& images) {
    std::vector<int> all(static_cast<size_t>(images.num_classes()));
    for (int i = 0; i < images.num_classes(); ++i) all[static_cast<size_t>(i)] = i;
    return collect(images.test_by_class, all, false);
}

TaskData pool_train_data(const ImageSet& images, const std::vector<int>& class_pool) {
    return collect(images.train_by_class, class_pool, false);
}

std::vector<int> classes_with_train_data(const ImageSet& images) {
    std::vector<int> pool;
    for (int k = 0; k < images.num_classes(); ++k) {
        if (!images.train_by_class[static_cast<size_t>(k)].empty()) pool.push_back(k);
    }
    return pool;
}

void sgd_train(Network& net, const TaskData& data, const SgdConfig& cfg, uint64_t seed,
               bool head_only) {
    if (cfg.epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (cfg.epochs == 0) return;
    if (data.xs.empty()) throw std::invalid_argument("cannot train on empty data");

    Rng rng = Rng(seed).fork(0x56d);
    NamedParams grad = net.params.zeros_like();
    NamedParams vel = net.params.zeros_like();

    std::vector<size_t> order(data.xs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch)) {
            size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch));
            std::vector<size_t> idx(order.begin() + static_cast<long>(start),
                                    order.begin() + static_cast<long>(end));
            grad.fill_zero();
            net.ce_backward(data.xs, data.ys, idx, grad, head_only);
            for (size_t t = 0; t < net.params.tensors.size(); ++t) {
                auto& p = net.params.tensors[t].v;
                auto& v = vel.tensors[t].v;
                auto& gr = grad.tensors[t].v;
                if (head_only && net.params.tensors[t].name.rfind("head.", 0) != 0) continue;
                for (size_t i = 0; i < p.size(); ++i) {
                    v[i] = cfg.momentum * v[i] + gr[i];
                    p[i] -= cfg.lr * v[i];
                }
            }
        }
    }
}

double eval_accuracy(const Network& net, const TaskData& test) {
    std::vector<bool> mask(static_cast<size_t>(net.head_rows()), true);
    return eval_accuracy_masked(net, test, mask);
}

double eval_accuracy_masked(const Network& net, const TaskData& test,
                            const std::vector<bool>& row_mask) {
    if (test.xs.empty()) throw std::invalid_argument("empty testset");
    if (row_mask.size() != static_cast<size_t>(net.head_rows())) {
        throw std::invalid_argument("row mask size mismatch");
    }
    size_t correct = 0;
    Tape tape;
    for (size_t i = 0; i < test.xs.size(); ++i) {
        auto logits = run_net(net, *test.xs[i], nullptr, nullptr, false, tape);
        int best = -1;
        double bv = 0;
        for (size_t r = 0; r < logits.size(); ++r) {
            if (!row_mask[r]) continue;
            if (best < 0 || logits[r] > bv) {
                best = static_cast<int>(r);
                bv = logits[r];
            }
        }
        if (best == test.ys[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(test.xs.size());
}

} // namespace tina
