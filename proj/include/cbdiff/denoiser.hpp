#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "cbdiff/conditioning.hpp"
#include "cbdiff/diffusion.hpp"
#include "cbdiff/tape.hpp"

namespace cbdiff {

enum class NoiseKind { bernoulli, gaussian };

std::string to_string(NoiseKind k);
NoiseKind noise_kind_from_string(const std::string& s);

struct DenoiserConfig {
    int base_channels = 32;
    int depth = 3;  // down/up stages; bottleneck at H / 2^depth
    int time_embed_dim = 128;
    int attention_heads = 4;
    float dropout_rate = 0.1f;
    std::vector<int> channel_mult = {1, 1, 2};  // per-stage width factors
    int gn_groups = 8;
    bool use_tsc_attention = true;       // false drops the attention blocks
    bool plain_cross_attention = false;  // true disables time modulation
    NoiseKind noise = NoiseKind::bernoulli;

    int out_channels() const { return noise == NoiseKind::bernoulli ? 2 : 1; }
    int mask_channels() const { return out_channels(); }
    nlohmann::json to_json() const;
    static DenoiserConfig from_json(const nlohmann::json& j);
};

// Named parameter tensors; order is stable and drives checkpointing.
template <class T>
struct ParamStore {
    struct Entry {
        std::string name;
        Tensor<T> value;
        bool trainable = true;
    };
    std::vector<Entry> entries;
    std::unordered_map<std::string, size_t> index;

    Tensor<T>& add(const std::string& name, Tensor<T> value, bool trainable = true);
    Tensor<T>& at(const std::string& name);
    const Tensor<T>& at(const std::string& name) const;
    int64_t count_scalars() const;
};

// Pre-MLP sinusoidal position encoding of a step index; frequencies run
// geometrically from 1 down to 1/10000. dim must be even.
Tensor<double> sinusoidal_time_embedding(int t, int dim);

// Tape node ids for one cross-attention block. mod_* < 0 disables time
// modulation (the plain cross-attention ablation).
struct TscAttnIds {
    int q_w, q_b;
    int k_w, k_b;
    int v_w, v_b;
    int o_w, o_b;
    int mod_w = -1, mod_b = -1;
};

// Cross-attention with time steps. Queries come from x (B,h,w,c);
// keys/values from the semantic map f (B,h,w,cf) after a per-sample
// scale-and-shift derived from the time embedding: f*(1+s)+b. Output is
// x + dropout(linear(attention)); the residual keeps the block near
// identity at init.
template <class T>
int tsc_attention(Tape<T>& tape, int x, int f, int temb_act, const TscAttnIds& w, int heads,
                  T dropout_rate, RngStream& rng, bool train);

// UNet denoiser. Channels-last throughout; skip connections concatenate;
// nearest-neighbor upsampling; the deepest three resolutions cross-attend
// to the semantic pyramid (coarsest map at the bottleneck).
template <class T>
class DenoiserModel {
  public:
    DenoiserModel(DenoiserConfig cfg, ConditioningConfig cond_cfg, uint64_t init_seed);

    const DenoiserConfig& config() const { return cfg_; }
    const ConditioningConfig& cond_config() const { return cond_cfg_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }
    int64_t param_count() const { return params_.count_scalars(); }

    // Graph-building forward over a batch. x_in: (B,H,W,Cin) node already
    // on the tape. Returns the head output node: (B,H,W,2) softmax
    // probabilities (bernoulli) or (B,H,W,1) noise prediction (gaussian).
    // param_ids_out (optional) receives tape ids aligned with
    // params().entries.
    int forward(Tape<T>& tape, int x_in, const std::vector<int>& tsteps,
                const std::vector<const ConditionBundle*>& bundles, bool train, RngStream* rng,
                std::vector<int>* param_ids_out = nullptr) const;

    // Eval-mode conveniences (dropout off, no gradients).
    CategoricalField predict_p0(const MaskState& x_t, int t, const ConditionBundle& bundle) const;
    std::vector<CategoricalField> predict_p0_batch(const std::vector<const MaskState*>& x_ts,
                                                   const std::vector<int>& ts,
                                                   const std::vector<const ConditionBundle*>& bundles) const;
    std::vector<Tensor<double>> predict_eps_batch(const std::vector<const Tensor<double>*>& x_ts,
                                                  const std::vector<int>& ts,
                                                  const std::vector<const ConditionBundle*>& bundles) const;

  private:
    DenoiserConfig cfg_;
    ConditioningConfig cond_cfg_;
    ParamStore<T> params_;
};

using DenoiserModel32 = DenoiserModel<float>;

}  // namespace cbdiff
