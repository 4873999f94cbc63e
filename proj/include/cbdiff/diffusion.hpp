#pragma once

#include <cstdint>

#include "cbdiff/rng.hpp"
#include "cbdiff/schedule.hpp"
#include "cbdiff/tensor.hpp"

namespace cbdiff {

// Class convention, fixed project-wide: channel 0 = untampered,
// channel 1 = tampered.
inline constexpr int kUntampered = 0;
inline constexpr int kTampered = 1;

// One-hot binary mask (H,W,2) at diffusion step `step` (0 = clean).
struct MaskState {
    int H = 0, W = 0;
    int step = 0;
    Tensor<uint8_t> onehot;  // (H,W,2), exactly one channel set per pixel

    static MaskState zeros(int H, int W, int step = 0);  // all untampered
    static MaskState from_classes(int H, int W, const std::vector<uint8_t>& cls, int step = 0);

    int cls(int y, int x) const { return onehot[(int64_t(y) * W + x) * 2 + 1]; }
    void set_cls(int y, int x, int c);
    int64_t pixels() const { return int64_t(H) * W; }
    void validate(const char* op) const;  // throws on non-one-hot content
};

// Per-pixel 2-class probabilities (H,W,2); channels sum to 1.
struct CategoricalField {
    int H = 0, W = 0;
    Tensor<double> probs;  // (H,W,2)

    static CategoricalField uniform(int H, int W);
    double p(int y, int x, int c) const { return probs[(int64_t(y) * W + x) * 2 + c]; }
    void validate(const char* op, double tol = 1e-9) const;  // channel sums == 1
};

enum class LossBranch { kl, ce };

struct LossValue {
    double value = 0;
    LossBranch branch = LossBranch::kl;
};

// --- forward process -------------------------------------------------------

// One corruption step: per pixel, categorical with parameter
// (beta_t/2)*1 + (1-beta_t)*x_prev. Step counter increments.
MaskState q_sample_step(const MaskState& x_prev, double beta_t, RngStream& rng);

// Closed-form marginal q(X_t | X_0): ((1-abar_t)/2)*1 + abar_t*x0.
CategoricalField q_marginal_params(const MaskState& x0, int t, const NoiseSchedule& sched);

// Draws a one-hot state from per-pixel categorical parameters. Pixel i
// consumes the uniform `unit_at(rng.key(), base+i)`, so the draw is
// reproducible regardless of traversal order.
MaskState sample_categorical(const CategoricalField& params, RngStream& rng, int step);

// --- reverse process -------------------------------------------------------

// Exact Bayes posterior q(X_{t-1} | X_t, X_0) for t in 2..T. The prior
// factor uses abar_{t-1}; see tests for the enumeration oracle this is
// held to.
CategoricalField posterior_params(const MaskState& x_t, const MaskState& x0, int t,
                                  const NoiseSchedule& sched);

// P_hat_{t-1} = sum_k posterior(x_t, onehot_k) * p0_hat[k].
CategoricalField mixture_reverse_params(const MaskState& x_t, const CategoricalField& p0_hat, int t,
                                        const NoiseSchedule& sched);

// --- losses ----------------------------------------------------------------

inline constexpr double kProbFloor = 1e-12;

// Mean over pixels of KL(q(X_{t-1}|X_t,X_0) || mixture_reverse_params),
// t in 2..T. 0*log0 := 0; mixture probabilities floored at kProbFloor.
LossValue kl_loss(const MaskState& x_t, const MaskState& x0, const CategoricalField& p0_hat, int t,
                  const NoiseSchedule& sched);

// Mean over pixels of -sum_k x0[k] log p0_hat[k], floored at kProbFloor.
LossValue ce_loss(const MaskState& x0, const CategoricalField& p0_hat);

// --- Gaussian baseline (noise-type ablation) -------------------------------

// Mask mapped to one continuous channel: untampered -> -1, tampered -> +1.
Tensor<double> gaussian_map_mask(const MaskState& x0);

// Forward marginal sample x_t = sqrt(abar)*x0 + sqrt(1-abar)*eps.
// When `noise_out` is non-null the injected eps is returned for the
// noise-prediction objective.
Tensor<double> gaussian_forward_sample(const Tensor<double>& x0_cont, double alpha_bar,
                                       RngStream& rng, Tensor<double>* noise_out = nullptr);

// MSE between predicted and injected noise.
LossValue gaussian_noise_mse(const Tensor<double>& eps_hat, const Tensor<double>& eps);

}  // namespace cbdiff
