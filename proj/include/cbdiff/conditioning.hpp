#pragma once

#include <cstdint>
#include <vector>

#include "cbdiff/diffusion.hpp"
#include "cbdiff/tensor.hpp"

namespace cbdiff {

struct ConditioningConfig {
    bool use_image = true;      // Y channels in the denoiser input
    bool use_residual = true;   // N channel in the denoiser input
    bool use_pyramid = true;    // F maps feeding cross-attention
    std::vector<int> pyramid_channels = {32, 64, 128};
    uint64_t extractor_seed = 2025;
};

// Conditioning inputs for one image: the image itself, a high-pass
// residual map, and a multi-scale semantic pyramid f_i at H/2^i.
struct ConditionBundle {
    Tensor<float> image;     // (H,W,3) in [0,1]
    Tensor<float> residual;  // (H,W,1) in [-1,1]
    std::vector<Tensor<float>> pyramid;
    uint64_t extractor_seed = 0;
};

// Grayscale conversion followed by a fixed 3x3 high-pass (center 8,
// neighbors -1, /8) with replicate padding, clamped to [-1,1].
Tensor<float> extract_residual(const Tensor<float>& image);

// Frozen, seeded 3-stage strided conv encoder (SiLU + group norm).
// Weights are a pure function of (seed, channels) and are never trained.
std::vector<Tensor<float>> extract_semantic_pyramid(const Tensor<float>& image,
                                                    uint64_t extractor_seed,
                                                    const std::vector<int>& channels = {32, 64, 128});

ConditionBundle make_bundle(const Tensor<float>& image, const ConditioningConfig& cfg);

// Channel concatenation [X_t | Y | N] in that fixed order; pyramid maps
// enter through attention only. Ablation flags drop Y or N.
Tensor<float> assemble_denoiser_input(const MaskState& x_t, const ConditionBundle& bundle,
                                      const ConditioningConfig& cfg);

// Gaussian-baseline variant: the mask slot is one continuous channel.
Tensor<float> assemble_denoiser_input_cont(const Tensor<float>& state_1ch,
                                           const ConditionBundle& bundle,
                                           const ConditioningConfig& cfg);

// Input channel count implied by the flags (mask slot included).
int denoiser_input_channels(const ConditioningConfig& cfg, int mask_channels);

}  // namespace cbdiff
