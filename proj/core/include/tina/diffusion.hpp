// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "tina/common.hpp"
#include "tina/param_codec.hpp"
#include "tina/pmodel_factory.hpp"
#include "tina/prompt_encoder.hpp"

#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace tina {

/// Forward-process schedule: betas and cumulative variances for steps 1..J.
struct NoiseSchedule {
    std::vector<double> betas;
    std::vector<double> alpha_bars;

    int J() const { return static_cast<int>(betas.size()); }
    double beta(int j) const;      // j in 1..J
    double alpha(int j) const { return 1.0 - beta(j); }
    double alpha_bar(int j) const; // j in 0..J, alpha_bar(0) == 1

    static NoiseSchedule linear(int J, double beta_start, double beta_end);
};

// theta_j ~ N(sqrt(abar_j) * theta, (1 - abar_j) I)
std::vector<double> forward_noise(const std::vector<double>& theta, int j, const NoiseSchedule& s,
                                  Rng& rng);

// interleaved sin/cos over log-spaced frequencies; dim must be even
std::vector<double> timestep_embed(int j, int dim);

struct DiTConfig {
    int hidden = 2048;
    int layers = 12;
    int heads = 16;
    int chunk = 576;
    int c_max = 10;
    int cond_dim = 512;
    int mlp_ratio = 4;
    bool mask_padded_conditions = false;

    static DiTConfig paper_scale(); // Appendix defaults, kept for reference
    static DiTConfig toy();

    std::string to_json() const;
    static DiTConfig from_json(const std::string& s);
};

/// Decoder-style transformer over [timestep token | c_max condition tokens |
/// parameter tokens], full (non-causal) attention, per-token input/output
/// linear projections without weight sharing, learned positional embeddings.
/// Predicts the clean parameter tokens (signal prediction).
class DiT {
public:
    DiT(const DiTConfig& cfg, const TokenSeq& token_template);

    int n_param_tokens() const { return P_; }
    int seq_len() const { return S_; }
    const DiTConfig& config() const { return cfg_; }
    const TokenSeq& token_template() const { return template_; }

    void init_params(Rng& rng);

    size_t param_count() const { return w_.size(); }
    const std::vector<double>& raw_params() const { return w_; }
    std::vector<double>& raw_params() { return w_; }
    const std::vector<double>& raw_grads() const { return g_; }
    std::vector<double>& raw_grads() { return g_; }
    void zero_grads();

    // cond [B,c_max,cond_dim], cond_mask [B,c_max] (1 = real class),
    // noised [B,P,M], timesteps [B]; writes predictions [B,P,M]
    void forward(size_t B, const double* cond, const unsigned char* cond_mask, const double* noised,
                 const int* timesteps, double* out) const;

    // forward + mean-squared error against clean [B,P,M] + backprop into
    // raw_grads() (accumulating); returns the loss
    double loss_and_grad(size_t B, const double* cond, const unsigned char* cond_mask,
                         const double* noised, const int* timesteps, const double* clean);

private:
    struct Offsets;
    struct Workspace;

    void embed(size_t B, const double* cond, const double* noised, const int* timesteps,
               Workspace& ws) const;
    void trunk_forward(size_t B, const unsigned char* cond_mask, Workspace& ws) const;
    void heads_forward(size_t B, Workspace& ws, double* out) const;

    DiTConfig cfg_;
    TokenSeq template_;
    int P_ = 0, S_ = 0, head_dim_ = 0;
    std::vector<double> w_, g_;
    std::unique_ptr<Offsets> off_;
};

struct AdamState {
    std::vector<double> m, v;
    long long t = 0;

    void reset(size_t n);
};

struct DiffusionTrainConfig {
    long long iters = 2000;
    int batch = 16;
    double lr = 1e-3;
    double grad_clip = 0.1; // global-norm threshold applied every step
    int warmup = 100;
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
    std::string augment = "classifier"; // classifier | permute | none
    bool merge_text_embedding = false;
    int log_every = 50;
    uint64_t seed = 1;
};

// One optimizer step on explicit arrays (also the hook for gradient checks);
// returns the loss. Throws on non-finite loss.
double train_step(DiT& model, AdamState& opt, const DiffusionTrainConfig& cfg, size_t B,
                  const double* cond, const unsigned char* cond_mask, const double* noised,
                  const int* timesteps, const double* clean, long long iter);

struct TrainResult {
    std::vector<std::pair<long long, double>> loss_log;
    double final_loss = 0.0;
};

// Algorithm: sample batch, pad tasks to c_max, augment, draw j ~ U{1..J},
// noise tokens, predict, MSE update. log_path (optional) receives
// "iter\tloss" lines.
TrainResult train_diffusion(DiT& model, AdamState& opt, const PModelDataset& data,
                            const Vocabulary& vocab, const Encoder& encoder,
                            const NoiseSchedule& sched, const DiffusionTrainConfig& cfg,
                            const std::string& log_path = "");

// DDPM sampling from pure noise, conditioning on a padded prompt; the final
// step returns the predicted clean signal directly.
FlatParams ddpm_sample(const DiT& model, const PromptSeq& prompt, const NoiseSchedule& sched,
                       uint64_t seed);

// checkpoint: JSON header (config, token layout, schedule, arch, encoder
// kind, iteration) + float32 parameter blob
void save_checkpoint(const std::string& path, const DiT& model, const NoiseSchedule& sched,
                     const ArchSpec& arch, const std::string& encoder_kind, long long iteration);

struct LoadedCheckpoint {
    DiTConfig cfg;
    TokenSeq token_template;
    NoiseSchedule schedule;
    ArchSpec arch;
    std::string encoder_kind;
    long long iteration = 0;
    std::unique_ptr<DiT> model;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

} // namespace tina
