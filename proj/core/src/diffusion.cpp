// SPDX-License-Identifier: Apache-2.0
#include "tina/diffusion.hpp"

#include "tina/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace tina {

// ---------------------------------------------------------------------------
// schedule and forward process
// ---------------------------------------------------------------------------

double NoiseSchedule::beta(int j) const {
    if (j < 1 || j > J()) throw std::out_of_range("diffusion step " + std::to_string(j) + " outside 1.." + std::to_string(J()));
    return betas[static_cast<size_t>(j - 1)];
}

double NoiseSchedule::alpha_bar(int j) const {
    if (j == 0) return 1.0;
    if (j < 0 || j > J()) throw std::out_of_range("diffusion step " + std::to_string(j) + " outside 0.." + std::to_string(J()));
    return alpha_bars[static_cast<size_t>(j - 1)];
}

NoiseSchedule NoiseSchedule::linear(int J, double beta_start, double beta_end) {
    if (J < 1) throw std::invalid_argument("schedule length must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
        throw std::invalid_argument("need 0 < beta_start <= beta_end < 1");
    }
    NoiseSchedule s;
    s.betas.resize(static_cast<size_t>(J));
    s.alpha_bars.resize(static_cast<size_t>(J));
    double cum = 1.0;
    for (int j = 0; j < J; ++j) {
        double b = (J == 1) ? beta_start
                            : beta_start + (beta_end - beta_start) * static_cast<double>(j) /
                                               static_cast<double>(J - 1);
        s.betas[static_cast<size_t>(j)] = b;
        cum *= 1.0 - b;
        s.alpha_bars[static_cast<size_t>(j)] = cum;
    }
    return s;
}

std::vector<double> forward_noise(const std::vector<double>& theta, int j, const NoiseSchedule& s,
                                  Rng& rng) {
    double ab = s.alpha_bar(j); // validates j
    double mean_scale = std::sqrt(ab);
    double noise_scale = std::sqrt(1.0 - ab);
    std::vector<double> out(theta.size());
    for (size_t i = 0; i < theta.size(); ++i) {
        out[i] = mean_scale * theta[i] + noise_scale * rng.gaussian();
    }
    return out;
}

std::vector<double> timestep_embed(int j, int dim) {
    if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("timestep embedding dim must be even");
    std::vector<double> v(static_cast<size_t>(dim));
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
        double arg = static_cast<double>(j) * freq;
        v[static_cast<size_t>(2 * i)] = std::sin(arg);
        v[static_cast<size_t>(2 * i + 1)] = std::cos(arg);
    }
    return v;
}

// ---------------------------------------------------------------------------
// DiT configuration
// ---------------------------------------------------------------------------

DiTConfig DiTConfig::paper_scale() {
    DiTConfig c;
    c.hidden = 2048;
    c.layers = 12;
    c.heads = 16;
    c.chunk = 576;
    c.c_max = 10;
    c.cond_dim = 512;
    return c;
}

DiTConfig DiTConfig::toy() {
    DiTConfig c;
    c.hidden = 128;
    c.layers = 4;
    c.heads = 4;
    c.chunk = 64;
    c.c_max = 5;
    c.cond_dim = 64;
    return c;
}

std::string DiTConfig::to_json() const {
    nlohmann::json j;
    j["hidden"] = hidden;
    j["layers"] = layers;
    j["heads"] = heads;
    j["chunk"] = chunk;
    j["c_max"] = c_max;
    j["cond_dim"] = cond_dim;
    j["mlp_ratio"] = mlp_ratio;
    j["mask_padded_conditions"] = mask_padded_conditions;
    return j.dump();
}

DiTConfig DiTConfig::from_json(const std::string& s) {
    nlohmann::json j = nlohmann::json::parse(s);
    DiTConfig c;
    c.hidden = j.at("hidden").get<int>();
    c.layers = j.at("layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.chunk = j.at("chunk").get<int>();
    c.c_max = j.at("c_max").get<int>();
    c.cond_dim = j.at("cond_dim").get<int>();
    c.mlp_ratio = j.at("mlp_ratio").get<int>();
    c.mask_padded_conditions = j.at("mask_padded_conditions").get<bool>();
    return c;
}

// ---------------------------------------------------------------------------
// parameter registry
// ---------------------------------------------------------------------------

struct DiT::Offsets {
    size_t time_w1 = 0, time_b1 = 0, time_w2 = 0, time_b2 = 0;
    size_t pos = 0;
    std::vector<size_t> cond_w, cond_b, par_w, par_b, out_w, out_b;
    struct Block {
        size_t ln1_g, ln1_b, qkv_w, qkv_b, att_w, att_b;
        size_t ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
    };
    std::vector<Block> blocks;
    size_t lnf_g = 0, lnf_b = 0;
    size_t total = 0;
};

DiT::DiT(const DiTConfig& cfg, const TokenSeq& token_template)
    : cfg_(cfg), template_(token_template) {
    if (cfg.hidden % cfg.heads != 0) throw std::invalid_argument("hidden must divide into heads");
    if (cfg.hidden % 2 != 0) throw std::invalid_argument("hidden must be even for the timestep embedding");
    if (template_.chunk_size != cfg.chunk) {
        throw std::invalid_argument("token template chunk size != model chunk size");
    }
    P_ = static_cast<int>(template_.count());
    if (P_ < 1) throw std::invalid_argument("token template is empty");
    S_ = 1 + cfg.c_max + P_;
    head_dim_ = cfg.hidden / cfg.heads;

    off_ = std::make_unique<Offsets>();
    size_t H = static_cast<size_t>(cfg.hidden);
    size_t M = static_cast<size_t>(cfg.chunk);
    size_t De = static_cast<size_t>(cfg.cond_dim);
    size_t RH = H * static_cast<size_t>(cfg.mlp_ratio);
    size_t at = 0;
    auto take = [&](size_t n) {
        size_t o = at;
        at += n;
        return o;
    };
    off_->time_w1 = take(H * H);
    off_->time_b1 = take(H);
    off_->time_w2 = take(H * H);
    off_->time_b2 = take(H);
    off_->pos = take(static_cast<size_t>(S_) * H);
    for (int i = 0; i < cfg.c_max; ++i) {
        off_->cond_w.push_back(take(H * De));
        off_->cond_b.push_back(take(H));
    }
    for (int p = 0; p < P_; ++p) {
        off_->par_w.push_back(take(H * M));
        off_->par_b.push_back(take(H));
    }
    for (int l = 0; l < cfg.layers; ++l) {
        Offsets::Block b;
        b.ln1_g = take(H);
        b.ln1_b = take(H);
        b.qkv_w = take(3 * H * H);
        b.qkv_b = take(3 * H);
        b.att_w = take(H * H);
        b.att_b = take(H);
        b.ln2_g = take(H);
        b.ln2_b = take(H);
        b.fc1_w = take(RH * H);
        b.fc1_b = take(RH);
        b.fc2_w = take(H * RH);
        b.fc2_b = take(H);
        off_->blocks.push_back(b);
    }
    off_->lnf_g = take(H);
    off_->lnf_b = take(H);
    for (int p = 0; p < P_; ++p) {
        off_->out_w.push_back(take(M * H));
        off_->out_b.push_back(take(M));
    }
    off_->total = at;
    w_.assign(at, 0.0);
    g_.assign(at, 0.0);
}

void DiT::init_params(Rng& rng) {
    size_t H = static_cast<size_t>(cfg_.hidden);
    size_t M = static_cast<size_t>(cfg_.chunk);
    size_t De = static_cast<size_t>(cfg_.cond_dim);
    size_t RH = H * static_cast<size_t>(cfg_.mlp_ratio);
    double res_scale = 1.0 / std::sqrt(2.0 * cfg_.layers);

    auto fill = [&](size_t off, size_t n, double std) {
        for (size_t i = 0; i < n; ++i) w_[off + i] = std * rng.gaussian();
    };
    auto ones = [&](size_t off, size_t n) {
        for (size_t i = 0; i < n; ++i) w_[off + i] = 1.0;
    };

    std::fill(w_.begin(), w_.end(), 0.0);
    fill(off_->time_w1, H * H, 1.0 / std::sqrt(static_cast<double>(H)));
    fill(off_->time_w2, H * H, 1.0 / std::sqrt(static_cast<double>(H)));
    fill(off_->pos, static_cast<size_t>(S_) * H, 0.02);
    for (int i = 0; i < cfg_.c_max; ++i) fill(off_->cond_w[static_cast<size_t>(i)], H * De, 1.0 / std::sqrt(static_cast<double>(De)));
    for (int p = 0; p < P_; ++p) fill(off_->par_w[static_cast<size_t>(p)], H * M, 1.0 / std::sqrt(static_cast<double>(M)));
    for (auto& b : off_->blocks) {
        ones(b.ln1_g, H);
        ones(b.ln2_g, H);
        fill(b.qkv_w, 3 * H * H, 1.0 / std::sqrt(static_cast<double>(H)));
        fill(b.att_w, H * H, res_scale / std::sqrt(static_cast<double>(H)));
        fill(b.fc1_w, RH * H, 1.0 / std::sqrt(static_cast<double>(H)));
        fill(b.fc2_w, H * RH, res_scale / std::sqrt(static_cast<double>(RH)));
    }
    ones(off_->lnf_g, H);
    // output heads stay zero so the initial prediction is the zero signal
}

void DiT::zero_grads() { std::fill(g_.begin(), g_.end(), 0.0); }

// ---------------------------------------------------------------------------
// forward / backward
// ---------------------------------------------------------------------------

namespace {

constexpr double kLnEps = 1e-5;

// row-wise layernorm over H; caches normalized rows and reciprocal stds
void layernorm_fwd(const double* x, size_t rows, size_t H, const double* gain, const double* bias,
                   double* y, double* xhat, double* rstd) {
#pragma omp parallel for schedule(static)
    for (long long rr = 0; rr < static_cast<long long>(rows); ++rr) {
        auto r = static_cast<size_t>(rr);
        const double* xr = x + r * H;
        double mu = 0;
        for (size_t i = 0; i < H; ++i) mu += xr[i];
        mu /= static_cast<double>(H);
        double var = 0;
        for (size_t i = 0; i < H; ++i) {
            double d = xr[i] - mu;
            var += d * d;
        }
        var /= static_cast<double>(H);
        double rs = 1.0 / std::sqrt(var + kLnEps);
        rstd[r] = rs;
        double* xh = xhat + r * H;
        double* yr = y + r * H;
        for (size_t i = 0; i < H; ++i) {
            xh[i] = (xr[i] - mu) * rs;
            yr[i] = gain[i] * xh[i] + bias[i];
        }
    }
}

// dx += backprop(dy); dgain/dbias accumulated column-wise
void layernorm_bwd(const double* dy, const double* xhat, const double* rstd, size_t rows, size_t H,
                   const double* gain, double* dx, double* dgain, double* dbias) {
#pragma omp parallel for schedule(static)
    for (long long ii = 0; ii < static_cast<long long>(H); ++ii) {
        auto i = static_cast<size_t>(ii);
        double dg = 0, db = 0;
        for (size_t r = 0; r < rows; ++r) {
            dg += dy[r * H + i] * xhat[r * H + i];
            db += dy[r * H + i];
        }
        dgain[i] += dg;
        dbias[i] += db;
    }
#pragma omp parallel for schedule(static)
    for (long long rr = 0; rr < static_cast<long long>(rows); ++rr) {
        auto r = static_cast<size_t>(rr);
        const double* dyr = dy + r * H;
        const double* xh = xhat + r * H;
        double* dxr = dx + r * H;
        double m1 = 0, m2 = 0;
        for (size_t i = 0; i < H; ++i) {
            double t = dyr[i] * gain[i];
            m1 += t;
            m2 += t * xh[i];
        }
        m1 /= static_cast<double>(H);
        m2 /= static_cast<double>(H);
        for (size_t i = 0; i < H; ++i) {
            double t = dyr[i] * gain[i];
            dxr[i] += (t - m1 - xh[i] * m2) * rstd[r];
        }
    }
}

} // namespace

struct DiT::Workspace {
    size_t B = 0;
    std::vector<double> te, t1, ta;                 // timestep embedder caches
    std::vector<std::vector<double>> x;             // x[0] = embedded input; x[l+1] = block l output
    struct BlockCache {
        std::vector<double> xh1, rstd1, qkv, probs, ctx, xmid, xh2, rstd2, mh, ma;
    };
    std::vector<BlockCache> blocks;
    std::vector<double> xhf, rstdf, hf;

    void resize(size_t B_, const DiTConfig& cfg, int S, int P) {
        (void)P;
        B = B_;
        size_t H = static_cast<size_t>(cfg.hidden);
        size_t RH = H * static_cast<size_t>(cfg.mlp_ratio);
        size_t rows = B * static_cast<size_t>(S);
        te.assign(B * H, 0.0);
        t1.assign(B * H, 0.0);
        ta.assign(B * H, 0.0);
        x.assign(static_cast<size_t>(cfg.layers) + 1, {});
        for (auto& v : x) v.assign(rows * H, 0.0);
        blocks.assign(static_cast<size_t>(cfg.layers), {});
        for (auto& b : blocks) {
            b.xh1.assign(rows * H, 0.0);
            b.rstd1.assign(rows, 0.0);
            b.qkv.assign(rows * 3 * H, 0.0);
            b.probs.assign(B * static_cast<size_t>(cfg.heads) * static_cast<size_t>(S) * static_cast<size_t>(S), 0.0);
            b.ctx.assign(rows * H, 0.0);
            b.xmid.assign(rows * H, 0.0);
            b.xh2.assign(rows * H, 0.0);
            b.rstd2.assign(rows, 0.0);
            b.mh.assign(rows * RH, 0.0);
            b.ma.assign(rows * RH, 0.0);
        }
        xhf.assign(rows * H, 0.0);
        rstdf.assign(rows, 0.0);
        hf.assign(rows * H, 0.0);
    }
};

void DiT::embed(size_t B, const double* cond, const double* noised, const int* timesteps,
                Workspace& ws) const {
    size_t H = static_cast<size_t>(cfg_.hidden);
    size_t M = static_cast<size_t>(cfg_.chunk);
    size_t De = static_cast<size_t>(cfg_.cond_dim);
    size_t S = static_cast<size_t>(S_);
    int C = cfg_.c_max;
    double* x0 = ws.x[0].data();

    // timestep token via frequency encoding + 2-layer mlp
    for (size_t b = 0; b < B; ++b) {
        auto te = timestep_embed(timesteps[b], cfg_.hidden);
        std::copy(te.begin(), te.end(), ws.te.begin() + static_cast<long>(b * H));
    }
    linear_forward(ws.te.data(), B, H, w_.data() + off_->time_w1, w_.data() + off_->time_b1, H,
                   ws.t1.data());
    for (size_t i = 0; i < B * H; ++i) ws.ta[i] = gelu(ws.t1[i]);
    {
        std::vector<double> ttok(B * H);
        linear_forward(ws.ta.data(), B, H, w_.data() + off_->time_w2, w_.data() + off_->time_b2, H,
                       ttok.data());
        for (size_t b = 0; b < B; ++b) {
            std::copy_n(ttok.data() + b * H, H, x0 + (b * S + 0) * H);
        }
    }

    // per-position condition and parameter projections (no weight sharing)
#pragma omp parallel for schedule(static)
    for (long long ii = 0; ii < static_cast<long long>(C + P_); ++ii) {
        int i = static_cast<int>(ii);
        if (i < C) {
            const double* wp = w_.data() + off_->cond_w[static_cast<size_t>(i)];
            const double* bp = w_.data() + off_->cond_b[static_cast<size_t>(i)];
            for (size_t b = 0; b < B; ++b) {
                const double* in = cond + (b * static_cast<size_t>(C) + static_cast<size_t>(i)) * De;
                double* out = x0 + (b * S + 1 + static_cast<size_t>(i)) * H;
                for (size_t o = 0; o < H; ++o) out[o] = dot(in, wp + o * De, De) + bp[o];
            }
        } else {
            int p = i - C;
            const double* wp = w_.data() + off_->par_w[static_cast<size_t>(p)];
            const double* bp = w_.data() + off_->par_b[static_cast<size_t>(p)];
            for (size_t b = 0; b < B; ++b) {
                const double* in = noised + (b * static_cast<size_t>(P_) + static_cast<size_t>(p)) * M;
                double* out = x0 + (b * S + 1 + static_cast<size_t>(C) + static_cast<size_t>(p)) * H;
                for (size_t o = 0; o < H; ++o) out[o] = dot(in, wp + o * M, M) + bp[o];
            }
        }
    }

    // learned positional embeddings
#pragma omp parallel for schedule(static)
    for (long long bb = 0; bb < static_cast<long long>(B); ++bb) {
        auto b = static_cast<size_t>(bb);
        for (size_t s = 0; s < S; ++s) {
            axpy(1.0, w_.data() + off_->pos + s * H, x0 + (b * S + s) * H, H);
        }
    }
}

void DiT::trunk_forward(size_t B, const unsigned char* cond_mask, Workspace& ws) const {
    size_t H = static_cast<size_t>(cfg_.hidden);
    size_t S = static_cast<size_t>(S_);
    size_t rows = B * S;
    size_t RH = H * static_cast<size_t>(cfg_.mlp_ratio);
    int heads = cfg_.heads;
    size_t d = static_cast<size_t>(head_dim_);
    double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    int C = cfg_.c_max;

    std::vector<double> ln_out(rows * H);
    std::vector<double> scratch(rows * std::max(3 * H, RH));

    for (int l = 0; l < cfg_.layers; ++l) {
        auto& bc = ws.blocks[static_cast<size_t>(l)];
        const auto& ob = off_->blocks[static_cast<size_t>(l)];
        const double* xin = ws.x[static_cast<size_t>(l)].data();
        double* xout = ws.x[static_cast<size_t>(l) + 1].data();

        layernorm_fwd(xin, rows, H, w_.data() + ob.ln1_g, w_.data() + ob.ln1_b, ln_out.data(),
                      bc.xh1.data(), bc.rstd1.data());
        linear_forward(ln_out.data(), rows, H, w_.data() + ob.qkv_w, w_.data() + ob.qkv_b, 3 * H,
                       bc.qkv.data());

        // full attention; padded condition keys can be masked out
#pragma omp parallel for schedule(static)
        for (long long bh = 0; bh < static_cast<long long>(B * static_cast<size_t>(heads)); ++bh) {
            size_t b = static_cast<size_t>(bh) / static_cast<size_t>(heads);
            size_t h = static_cast<size_t>(bh) % static_cast<size_t>(heads);
            const double* qkv = bc.qkv.data() + b * S * 3 * H;
            double* probs = bc.probs.data() + (b * static_cast<size_t>(heads) + h) * S * S;
            double* ctx = bc.ctx.data() + b * S * H;
            std::vector<double> row(S);
            for (size_t s = 0; s < S; ++s) {
                const double* q = qkv + s * 3 * H + h * d;
                for (size_t t = 0; t < S; ++t) {
                    bool masked = false;
                    if (cfg_.mask_padded_conditions && cond_mask && t >= 1 && t < 1 + static_cast<size_t>(C)) {
                        masked = cond_mask[b * static_cast<size_t>(C) + (t - 1)] == 0;
                    }
                    if (masked) {
                        row[t] = -1e30;
                    } else {
                        const double* k = qkv + t * 3 * H + H + h * d;
                        row[t] = dot(q, k, d) * inv_sqrt_d;
                    }
                }
                softmax_inplace(row.data(), S);
                std::copy(row.begin(), row.end(), probs + s * S);
                double* c = ctx + s * H + h * d;
                std::fill(c, c + d, 0.0);
                for (size_t t = 0; t < S; ++t) {
                    const double* v = qkv + t * 3 * H + 2 * H + h * d;
                    axpy(row[t], v, c, d);
                }
            }
        }

        // attention projection + residual
        linear_forward(bc.ctx.data(), rows, H, w_.data() + ob.att_w, w_.data() + ob.att_b, H,
                       bc.xmid.data());
        for (size_t i = 0; i < rows * H; ++i) bc.xmid[i] += xin[i];

        layernorm_fwd(bc.xmid.data(), rows, H, w_.data() + ob.ln2_g, w_.data() + ob.ln2_b, ln_out.data(),
                      bc.xh2.data(), bc.rstd2.data());
        linear_forward(ln_out.data(), rows, H, w_.data() + ob.fc1_w, w_.data() + ob.fc1_b, RH,
                       bc.mh.data());
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < static_cast<long long>(rows * RH); ++i) {
            bc.ma[static_cast<size_t>(i)] = gelu(bc.mh[static_cast<size_t>(i)]);
        }
        linear_forward(bc.ma.data(), rows, RH, w_.data() + ob.fc2_w, w_.data() + ob.fc2_b, H, xout);
        for (size_t i = 0; i < rows * H; ++i) xout[i] += bc.xmid[i];
    }

    layernorm_fwd(ws.x[static_cast<size_t>(cfg_.layers)].data(), rows, H, w_.data() + off_->lnf_g,
                  w_.data() + off_->lnf_b, ws.hf.data(), ws.xhf.data(), ws.rstdf.data());
}

void DiT::heads_forward(size_t B, Workspace& ws, double* out) const {
    size_t H = static_cast<size_t>(cfg_.hidden);
    size_t M = static_cast<size_t>(cfg_.chunk);
    size_t S = static_cast<size_t>(S_);
    int C = cfg_.c_max;
#pragma omp parallel for schedule(static)
    for (long long pp = 0; pp < static_cast<long long>(P_); ++pp) {
        int p = static_cast<int>(pp);
        const double* wp = w_.data() + off_->out_w[static_cast<size_t>(p)];
        const double* bp = w_.data() + off_->out_b[static_cast<size_t>(p)];
        for (size_t b = 0; b < B; ++b) {
            const double* h = ws.hf.data() + (b * S + 1 + static_cast<size_t>(C) + static_cast<size_t>(p)) * H;
            double* o = out + (b * static_cast<size_t>(P_) + static_cast<size_t>(p)) * M;
            for (size_t m = 0; m < M; ++m) o[m] = dot(h, wp + m * H, H) + bp[m];
        }
    }
}

void DiT::forward(size_t B, const double* cond, const unsigned char* cond_mask, const double* noised,
                  const int* timesteps, double* out) const {
    if (B == 0) throw std::invalid_argument("empty batch");
    Workspace ws;
    ws.resize(B, cfg_, S_, P_);
    embed(B, cond, noised, timesteps, ws);
    trunk_forward(B, cond_mask, ws);
    heads_forward(B, ws, out);
}

double DiT::loss_and_grad(size_t B, const double* cond, const unsigned char* cond_mask,
                          const double* noised, const int* timesteps, const double* clean) {
    if (B == 0) throw std::invalid_argument("empty batch");
    size_t H = static_cast<size_t>(cfg_.hidden);
    size_t M = static_cast<size_t>(cfg_.chunk);
    size_t De = static_cast<size_t>(cfg_.cond_dim);
    size_t S = static_cast<size_t>(S_);
    size_t rows = B * S;
    size_t RH = H * static_cast<size_t>(cfg_.mlp_ratio);
    int heads = cfg_.heads;
    size_t d = static_cast<size_t>(head_dim_);
    double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    int C = cfg_.c_max;

    Workspace ws;
    ws.resize(B, cfg_, S_, P_);
    embed(B, cond, noised, timesteps, ws);
    trunk_forward(B, cond_mask, ws);
    std::vector<double> pred(B * static_cast<size_t>(P_) * M);
    heads_forward(B, ws, pred.data());

    // mean squared error over every predicted slot
    size_t n_out = pred.size();
    double loss = 0;
    std::vector<double> dout(n_out);
    double inv_n = 1.0 / static_cast<double>(n_out);
    for (size_t i = 0; i < n_out; ++i) {
        double diff = pred[i] - clean[i];
        loss += diff * diff * inv_n;
        dout[i] = 2.0 * diff * inv_n;
    }

    // ---- backward ----
    std::vector<double> dx(rows * H, 0.0);

    // output heads -> dhf
    std::vector<double> dhf(rows * H, 0.0);
#pragma omp parallel for schedule(static)
    for (long long pp = 0; pp < static_cast<long long>(P_); ++pp) {
        int p = static_cast<int>(pp);
        const double* wp = w_.data() + off_->out_w[static_cast<size_t>(p)];
        double* dwp = g_.data() + off_->out_w[static_cast<size_t>(p)];
        double* dbp = g_.data() + off_->out_b[static_cast<size_t>(p)];
        for (size_t b = 0; b < B; ++b) {
            const double* h = ws.hf.data() + (b * S + 1 + static_cast<size_t>(C) + static_cast<size_t>(p)) * H;
            double* dh = dhf.data() + (b * S + 1 + static_cast<size_t>(C) + static_cast<size_t>(p)) * H;
            const double* dov = dout.data() + (b * static_cast<size_t>(P_) + static_cast<size_t>(p)) * M;
            for (size_t m = 0; m < M; ++m) {
                double gm = dov[m];
                dbp[m] += gm;
                axpy(gm, h, dwp + m * H, H);
                axpy(gm, wp + m * H, dh, H);
            }
        }
    }

    layernorm_bwd(dhf.data(), ws.xhf.data(), ws.rstdf.data(), rows, H, w_.data() + off_->lnf_g,
                  dx.data(), g_.data() + off_->lnf_g, g_.data() + off_->lnf_b);

    std::vector<double> ln_out(rows * H);
    std::vector<double> dln(rows * H);
    std::vector<double> dmid(rows * H);
    std::vector<double> dqkv(rows * 3 * H);
    std::vector<double> dctx(rows * H);
    std::vector<double> dma(rows * RH);

    for (int l = cfg_.layers - 1; l >= 0; --l) {
        auto& bc = ws.blocks[static_cast<size_t>(l)];
        const auto& ob = off_->blocks[static_cast<size_t>(l)];

        // --- mlp branch ---
        // recompute ln2 output (cheap vs caching another buffer)
#pragma omp parallel for schedule(static)
        for (long long rr = 0; rr < static_cast<long long>(rows); ++rr) {
            auto r = static_cast<size_t>(rr);
            const double* xh = bc.xh2.data() + r * H;
            double* o = ln_out.data() + r * H;
            const double* gain = w_.data() + ob.ln2_g;
            const double* bias = w_.data() + ob.ln2_b;
            for (size_t i = 0; i < H; ++i) o[i] = gain[i] * xh[i] + bias[i];
        }
        // dx currently holds d(xout); fc2 backward
        std::fill(dma.begin(), dma.end(), 0.0);
        linear_backward_params(dx.data(), bc.ma.data(), rows, RH, H, g_.data() + ob.fc2_w,
                               g_.data() + ob.fc2_b);
        linear_backward_input(dx.data(), rows, H, w_.data() + ob.fc2_w, RH, dma.data());
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < static_cast<long long>(rows * RH); ++i) {
            dma[static_cast<size_t>(i)] *= gelu_grad(bc.mh[static_cast<size_t>(i)]);
        }
        std::fill(dln.begin(), dln.end(), 0.0);
        linear_backward_params(dma.data(), ln_out.data(), rows, H, RH, g_.data() + ob.fc1_w,
                               g_.data() + ob.fc1_b);
        linear_backward_input(dma.data(), rows, RH, w_.data() + ob.fc1_w, H, dln.data());

        // residual: d(xmid) = d(xout) + ln2-backprop
        std::copy(dx.begin(), dx.end(), dmid.begin());
        layernorm_bwd(dln.data(), bc.xh2.data(), bc.rstd2.data(), rows, H, w_.data() + ob.ln2_g,
                      dmid.data(), g_.data() + ob.ln2_g, g_.data() + ob.ln2_b);

        // --- attention branch ---
        std::fill(dctx.begin(), dctx.end(), 0.0);
        linear_backward_params(dmid.data(), bc.ctx.data(), rows, H, H, g_.data() + ob.att_w,
                               g_.data() + ob.att_b);
        linear_backward_input(dmid.data(), rows, H, w_.data() + ob.att_w, H, dctx.data());

        std::fill(dqkv.begin(), dqkv.end(), 0.0);
#pragma omp parallel for schedule(static)
        for (long long bh = 0; bh < static_cast<long long>(B * static_cast<size_t>(heads)); ++bh) {
            size_t b = static_cast<size_t>(bh) / static_cast<size_t>(heads);
            size_t h = static_cast<size_t>(bh) % static_cast<size_t>(heads);
            const double* qkv = bc.qkv.data() + b * S * 3 * H;
            double* dq = dqkv.data() + b * S * 3 * H;
            const double* probs = bc.probs.data() + (b * static_cast<size_t>(heads) + h) * S * S;
            const double* dctxb = dctx.data() + b * S * H;
            std::vector<double> dprow(S), dsrow(S);
            for (size_t s = 0; s < S; ++s) {
                const double* dc = dctxb + s * H + h * d;
                const double* prow = probs + s * S;
                // dv and dprobs
                double dp_dot_p = 0;
                for (size_t t = 0; t < S; ++t) {
                    const double* v = qkv + t * 3 * H + 2 * H + h * d;
                    dprow[t] = dot(dc, v, d);
                    double* dv = dq + t * 3 * H + 2 * H + h * d;
                    axpy(prow[t], dc, dv, d);
                    dp_dot_p += dprow[t] * prow[t];
                }
                for (size_t t = 0; t < S; ++t) dsrow[t] = prow[t] * (dprow[t] - dp_dot_p);
                const double* q = qkv + s * 3 * H + h * d;
                double* dqs = dq + s * 3 * H + h * d;
                for (size_t t = 0; t < S; ++t) {
                    double gs = dsrow[t] * inv_sqrt_d;
                    if (gs == 0.0) continue;
                    const double* k = qkv + t * 3 * H + H + h * d;
                    double* dk = dq + t * 3 * H + H + h * d;
                    axpy(gs, k, dqs, d);
                    axpy(gs, q, dk, d);
                }
            }
        }

        // recompute ln1 output for qkv weight grads
#pragma omp parallel for schedule(static)
        for (long long rr = 0; rr < static_cast<long long>(rows); ++rr) {
            auto r = static_cast<size_t>(rr);
            const double* xh = bc.xh1.data() + r * H;
            double* o = ln_out.data() + r * H;
            const double* gain = w_.data() + ob.ln1_g;
            const double* bias = w_.data() + ob.ln1_b;
            for (size_t i = 0; i < H; ++i) o[i] = gain[i] * xh[i] + bias[i];
        }
        std::fill(dln.begin(), dln.end(), 0.0);
        linear_backward_params(dqkv.data(), ln_out.data(), rows, H, 3 * H, g_.data() + ob.qkv_w,
                               g_.data() + ob.qkv_b);
        linear_backward_input(dqkv.data(), rows, 3 * H, w_.data() + ob.qkv_w, H, dln.data());

        // residual: d(xin) = d(xmid) + ln1-backprop
        std::copy(dmid.begin(), dmid.end(), dx.begin());
        layernorm_bwd(dln.data(), bc.xh1.data(), bc.rstd1.data(), rows, H, w_.data() + ob.ln1_g,
                      dx.data(), g_.data() + ob.ln1_g, g_.data() + ob.ln1_b);
    }

    // ---- embedding backward ----
    // positional embeddings
#pragma omp parallel for schedule(static)
    for (long long ss = 0; ss < static_cast<long long>(S); ++ss) {
        auto s = static_cast<size_t>(ss);
        double* dp = g_.data() + off_->pos + s * H;
        for (size_t b = 0; b < B; ++b) axpy(1.0, dx.data() + (b * S + s) * H, dp, H);
    }

    // per-position projections
#pragma omp parallel for schedule(static)
    for (long long ii = 0; ii < static_cast<long long>(C + P_); ++ii) {
        int i = static_cast<int>(ii);
        if (i < C) {
            double* dwp = g_.data() + off_->cond_w[static_cast<size_t>(i)];
            double* dbp = g_.data() + off_->cond_b[static_cast<size_t>(i)];
            for (size_t b = 0; b < B; ++b) {
                const double* in = cond + (b * static_cast<size_t>(C) + static_cast<size_t>(i)) * De;
                const double* dh = dx.data() + (b * S + 1 + static_cast<size_t>(i)) * H;
                for (size_t o = 0; o < H; ++o) {
                    dbp[o] += dh[o];
                    axpy(dh[o], in, dwp + o * De, De);
                }
            }
        } else {
            int p = i - C;
            double* dwp = g_.data() + off_->par_w[static_cast<size_t>(p)];
            double* dbp = g_.data() + off_->par_b[static_cast<size_t>(p)];
            for (size_t b = 0; b < B; ++b) {
                const double* in = noised + (b * static_cast<size_t>(P_) + static_cast<size_t>(p)) * M;
                const double* dh = dx.data() + (b * S + 1 + static_cast<size_t>(C) + static_cast<size_t>(p)) * H;
                for (size_t o = 0; o < H; ++o) {
                    dbp[o] += dh[o];
                    axpy(dh[o], in, dwp + o * M, M);
                }
            }
        }
    }

    // timestep embedder
    {
        std::vector<double> dttok(B * H);
        for (size_t b = 0; b < B; ++b) {
            std::copy_n(dx.data() + (b * S + 0) * H, H, dttok.data() + b * H);
        }
        std::vector<double> dta(B * H, 0.0);
        linear_backward_params(dttok.data(), ws.ta.data(), B, H, H, g_.data() + off_->time_w2,
                               g_.data() + off_->time_b2);
        linear_backward_input(dttok.data(), B, H, w_.data() + off_->time_w2, H, dta.data());
        for (size_t i = 0; i < B * H; ++i) dta[i] *= gelu_grad(ws.t1[i]);
        linear_backward_params(dta.data(), ws.te.data(), B, H, H, g_.data() + off_->time_w1,
                               g_.data() + off_->time_b1);
    }

    return loss;
}

// ---------------------------------------------------------------------------
// optimizer and training loop
// ---------------------------------------------------------------------------

void AdamState::reset(size_t n) {
    m.assign(n, 0.0);
    v.assign(n, 0.0);
    t = 0;
}

double train_step(DiT& model, AdamState& opt, const DiffusionTrainConfig& cfg, size_t B,
                  const double* cond, const unsigned char* cond_mask, const double* noised,
                  const int* timesteps, const double* clean, long long iter) {
    if (opt.m.size() != model.param_count()) opt.reset(model.param_count());
    model.zero_grads();
    double loss = model.loss_and_grad(B, cond, cond_mask, noised, timesteps, clean);
    if (!std::isfinite(loss)) {
        throw std::runtime_error("non-finite diffusion loss at iteration " + std::to_string(iter));
    }

    auto& w = model.raw_params();
    auto& g = model.raw_grads();

    // global-norm clipping
    double norm = std::sqrt(squared_norm(g.data(), g.size()));
    if (cfg.grad_clip > 0 && norm > cfg.grad_clip) {
        double scale = cfg.grad_clip / norm;
        for (double& x : g) x *= scale;
    }

    opt.t += 1;
    double lr = cfg.lr;
    if (cfg.warmup > 0 && iter < cfg.warmup) {
        lr *= static_cast<double>(iter + 1) / static_cast<double>(cfg.warmup);
    }
    double b1t = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(opt.t));
    double b2t = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(opt.t));
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(w.size()); ++i) {
        auto k = static_cast<size_t>(i);
        opt.m[k] = cfg.adam_beta1 * opt.m[k] + (1.0 - cfg.adam_beta1) * g[k];
        opt.v[k] = cfg.adam_beta2 * opt.v[k] + (1.0 - cfg.adam_beta2) * g[k] * g[k];
        double mh = opt.m[k] / b1t;
        double vh = opt.v[k] / b2t;
        w[k] -= lr * mh / (std::sqrt(vh) + cfg.adam_eps);
    }
    return loss;
}

namespace {

// permutation over the real class prefix; padded tail positions stay fixed
std::vector<int> prefix_permutation(int c, int c_max, Rng& rng) {
    std::vector<int> perm = random_permutation(c, rng);
    perm.resize(static_cast<size_t>(c_max));
    for (int i = c; i < c_max; ++i) perm[static_cast<size_t>(i)] = i;
    return perm;
}

} // namespace

TrainResult train_diffusion(DiT& model, AdamState& opt, const PModelDataset& data,
                            const Vocabulary& vocab, const Encoder& encoder,
                            const NoiseSchedule& sched, const DiffusionTrainConfig& cfg,
                            const std::string& log_path) {
    if (data.records.empty()) throw std::invalid_argument("diffusion training needs a nonempty dataset");
    if (cfg.augment != "classifier" && cfg.augment != "permute" && cfg.augment != "none") {
        throw std::invalid_argument("unknown augmentation: " + cfg.augment);
    }
    const DiTConfig& mc = model.config();
    int c_max = mc.c_max;
    size_t M = static_cast<size_t>(mc.chunk);
    size_t P = static_cast<size_t>(model.n_param_tokens());
    size_t De = static_cast<size_t>(mc.cond_dim);

    // pad every record once; prompts stay as strings so augmentation can
    // reorder them before the (cached) embedding lookup
    struct Prepared {
        FlatParams theta;
        std::vector<std::string> prompt;
        std::vector<bool> mask;
    };
    std::vector<Prepared> prep;
    prep.reserve(data.records.size());
    std::map<std::string, std::vector<double>> embed_cache;
    auto embed_of = [&](const std::string& s) -> const std::vector<double>& {
        auto it = embed_cache.find(s);
        if (it == embed_cache.end()) it = embed_cache.emplace(s, encoder.encode_text(s)).first;
        return it->second;
    };
    for (const auto& rec : data.records) {
        auto prompt = render_prompt(rec.task, vocab);
        PaddedTask padded = pad_task(rec.theta, prompt, c_max);
        for (const auto& s : padded.prompt) embed_of(s);
        prep.push_back({std::move(padded.theta), std::move(padded.prompt), std::move(padded.mask)});
    }
    {
        TokenSeq check = tokenize(prep.front().theta, mc.chunk);
        if (check.count() != P) {
            throw std::invalid_argument("dataset layout does not match the model's token template");
        }
    }

    std::ofstream log;
    if (!log_path.empty()) {
        log.open(log_path, std::ios::trunc);
        if (!log) throw std::runtime_error("cannot open training log " + log_path);
        log << "iteration\tloss\n";
    }

    Rng rng = Rng(cfg.seed).fork(0xd1f);
    size_t B = static_cast<size_t>(cfg.batch);
    std::vector<double> cond(B * static_cast<size_t>(c_max) * De);
    std::vector<unsigned char> cond_mask(B * static_cast<size_t>(c_max));
    std::vector<double> noised(B * P * M), clean(B * P * M);
    std::vector<int> timesteps(B);

    TrainResult result;
    for (long long iter = 0; iter < cfg.iters; ++iter) {
        for (size_t b = 0; b < B; ++b) {
            const Prepared& rec = prep[static_cast<size_t>(rng.below(prep.size()))];
            FlatParams theta = rec.theta;
            std::vector<std::string> prompt = rec.prompt;

            int c_real = 0;
            for (bool m : rec.mask) c_real += m ? 1 : 0;
            if (cfg.augment == "classifier") {
                auto perm = prefix_permutation(c_real, c_max, rng);
                apply_classifier_permutation(theta, perm);
                std::vector<std::string> p2(prompt.size());
                for (size_t i = 0; i < p2.size(); ++i) p2[i] = prompt[static_cast<size_t>(perm[i])];
                prompt = std::move(p2);
            } else if (cfg.augment == "permute") {
                theta = permute_neurons(theta, data.arch, rng.next_u64());
            }

            // condition tokens (padded positions carry the pad embedding)
            std::vector<double> merged;
            if (cfg.merge_text_embedding) {
                merged.assign(De, 0.0);
                for (int i = 0; i < c_real; ++i) {
                    const auto& e = embed_of(prompt[static_cast<size_t>(i)]);
                    for (size_t k = 0; k < De; ++k) merged[k] += e[k];
                }
                for (double& x : merged) x /= static_cast<double>(c_real);
            }
            for (int i = 0; i < c_max; ++i) {
                const std::vector<double>& e = (cfg.merge_text_embedding && i < c_real)
                                                   ? merged
                                                   : embed_of(prompt[static_cast<size_t>(i)]);
                std::copy(e.begin(), e.end(),
                          cond.begin() + static_cast<long>((b * static_cast<size_t>(c_max) + static_cast<size_t>(i)) * De));
                cond_mask[b * static_cast<size_t>(c_max) + static_cast<size_t>(i)] = rec.mask[static_cast<size_t>(i)] ? 1 : 0;
            }

            // tokenize the clean signal, then noise every token slot
            TokenSeq toks = tokenize(theta, mc.chunk);
            int j = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(sched.J())));
            timesteps[b] = j;
            double ms = std::sqrt(sched.alpha_bar(j));
            double ns = std::sqrt(1.0 - sched.alpha_bar(j));
            for (size_t p = 0; p < P; ++p) {
                const auto& tok = toks.tokens[p];
                double* cl = clean.data() + (b * P + p) * M;
                double* no = noised.data() + (b * P + p) * M;
                for (size_t m = 0; m < M; ++m) {
                    cl[m] = tok[m];
                    no[m] = ms * tok[m] + ns * rng.gaussian();
                }
            }
        }

        double loss = train_step(model, opt, cfg, B, cond.data(), cond_mask.data(), noised.data(),
                                 timesteps.data(), clean.data(), iter);
        result.final_loss = loss;
        if (iter % cfg.log_every == 0 || iter + 1 == cfg.iters) {
            result.loss_log.emplace_back(iter, loss);
            if (log.is_open()) {
                char buf[64];
                std::snprintf(buf, sizeof(buf), "%lld\t%.10g\n", iter, loss);
                log << buf;
            }
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

FlatParams ddpm_sample(const DiT& model, const PromptSeq& prompt, const NoiseSchedule& sched,
                       uint64_t seed) {
    const DiTConfig& mc = model.config();
    if (prompt.length() != mc.c_max) {
        throw std::invalid_argument("prompt must be padded to c_max before sampling");
    }
    size_t M = static_cast<size_t>(mc.chunk);
    size_t P = static_cast<size_t>(model.n_param_tokens());
    size_t De = static_cast<size_t>(mc.cond_dim);

    std::vector<double> cond(static_cast<size_t>(mc.c_max) * De);
    std::vector<unsigned char> cond_mask(static_cast<size_t>(mc.c_max));
    for (int i = 0; i < mc.c_max; ++i) {
        const auto& t = prompt.tokens[static_cast<size_t>(i)];
        if (static_cast<size_t>(t.size()) != De) throw std::invalid_argument("prompt token dim mismatch");
        std::copy(t.begin(), t.end(), cond.begin() + static_cast<long>(static_cast<size_t>(i) * De));
        cond_mask[static_cast<size_t>(i)] = prompt.mask[static_cast<size_t>(i)] ? 1 : 0;
    }

    Rng rng = Rng(seed).fork(0x5a3);
    std::vector<double> x(P * M);
    rng.fill_gaussian(x);
    std::vector<double> pred(P * M);

    for (int j = sched.J(); j >= 1; --j) {
        int ts = j;
        model.forward(1, cond.data(), cond_mask.data(), x.data(), &ts, pred.data());
        for (double v : pred) {
            if (!std::isfinite(v)) {
                throw std::runtime_error("non-finite prediction during sampling at step " + std::to_string(j));
            }
        }
        if (j == 1) {
            x = pred; // final step returns the predicted clean signal
            break;
        }
        double ab = sched.alpha_bar(j);
        double ab_prev = sched.alpha_bar(j - 1);
        double beta = sched.beta(j);
        double alpha = sched.alpha(j);
        double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
        double c1 = std::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab);
        double sigma = std::sqrt((1.0 - ab_prev) / (1.0 - ab) * beta);
        for (size_t i = 0; i < x.size(); ++i) {
            x[i] = c0 * pred[i] + c1 * x[i] + sigma * rng.gaussian();
        }
    }

    // pack the sampled tokens back through the codec
    TokenSeq seq;
    seq.chunk_size = mc.chunk;
    seq.layout = model.token_template().layout;
    seq.classifier = model.token_template().classifier;
    seq.meta = model.token_template().meta;
    for (size_t p = 0; p < P; ++p) {
        seq.tokens.emplace_back(x.begin() + static_cast<long>(p * M), x.begin() + static_cast<long>((p + 1) * M));
    }
    return detokenize(seq);
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const DiT& model, const NoiseSchedule& sched,
                     const ArchSpec& arch, const std::string& encoder_kind, long long iteration) {
    nlohmann::json j;
    j["format"] = "tina-dit-v1";
    j["dit"] = nlohmann::json::parse(model.config().to_json());
    j["arch"] = nlohmann::json::parse(arch.to_json());
    j["head_rows"] = model.token_template().classifier.rows;
    j["schedule"] = {{"betas", sched.betas}};
    j["encoder_kind"] = encoder_kind;
    j["iteration"] = iteration;
    j["param_count"] = model.param_count();
    std::string header = j.dump();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open checkpoint for write: " + path);
    const char magic[8] = {'T', 'I', 'N', 'A', 'C', 'K', 'P', 'T'};
    os.write(magic, 8);
    uint64_t hlen = header.size();
    os.write(reinterpret_cast<const char*>(&hlen), 8);
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    std::vector<unsigned char> blob;
    append_f32(blob, model.raw_params());
    os.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, "TINACKPT", 8) != 0) {
        throw std::runtime_error("bad checkpoint magic in " + path);
    }
    uint64_t hlen = 0;
    is.read(reinterpret_cast<char*>(&hlen), 8);
    std::string header(hlen, '\0');
    is.read(header.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw std::runtime_error("truncated checkpoint header in " + path);
    nlohmann::json j = nlohmann::json::parse(header);

    LoadedCheckpoint ck;
    ck.cfg = DiTConfig::from_json(j.at("dit").dump());
    ck.arch = ArchSpec::from_json(j.at("arch").dump());
    ck.schedule.betas = j.at("schedule").at("betas").get<std::vector<double>>();
    ck.schedule.alpha_bars.resize(ck.schedule.betas.size());
    double cum = 1.0;
    for (size_t i = 0; i < ck.schedule.betas.size(); ++i) {
        cum *= 1.0 - ck.schedule.betas[i];
        ck.schedule.alpha_bars[i] = cum;
    }
    ck.encoder_kind = j.at("encoder_kind").get<std::string>();
    ck.iteration = j.at("iteration").get<long long>();
    int head_rows = j.at("head_rows").get<int>();
    ck.token_template = tokenize(zero_flat(ck.arch, head_rows), ck.cfg.chunk);
    ck.model = std::make_unique<DiT>(ck.cfg, ck.token_template);

    size_t n = j.at("param_count").get<size_t>();
    if (n != ck.model->param_count()) {
        throw std::runtime_error("checkpoint parameter count does not match its configuration");
    }
    std::vector<unsigned char> bytes(n * 4);
    is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!is) throw std::runtime_error("truncated checkpoint blob in " + path);
    ck.model->raw_params() = decode_f32(bytes.data(), n);
    return ck;
}

} // namespace tina
