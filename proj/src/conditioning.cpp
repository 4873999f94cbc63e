#include "cbdiff/conditioning.hpp"

#include <cmath>
#include <stdexcept>

#include "cbdiff/rng.hpp"
#include "cbdiff/tape.hpp"

namespace cbdiff {

namespace {

[[noreturn]] void fail(const std::string& what) { throw std::runtime_error("conditioning: " + what); }

Tensor<float> he_init(Shape shape, int fan_in, RngStream& rs) {
    Tensor<float> w(std::move(shape));
    const double std = std::sqrt(2.0 / double(fan_in));
    for (int64_t i = 0; i < w.size(); ++i) w[i] = float(rs.next_normal() * std);
    return w;
}

}  // namespace

Tensor<float> extract_residual(const Tensor<float>& image) {
    if (image.rank() != 3 || image.dim(2) != 3)
        fail("extract_residual expects (H,W,3), got " + shape_str(image.shape()));
    const int H = image.dim(0), W = image.dim(1);
    Tensor<float> gray({H, W});
    for (int64_t p = 0; p < int64_t(H) * W; ++p)
        gray[p] = 0.299f * image[p * 3] + 0.587f * image[p * 3 + 1] + 0.114f * image[p * 3 + 2];
    Tensor<float> out({H, W, 1});
    auto at = [&](int y, int x) {  // replicate padding keeps constants DC-free
        y = y < 0 ? 0 : (y >= H ? H - 1 : y);
        x = x < 0 ? 0 : (x >= W ? W - 1 : x);
        return gray[int64_t(y) * W + x];
    };
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            // center 8, neighbors -1, /8 — written as paired differences so
            // constant regions cancel exactly
            float acc = 0.f;
            const float center = at(y, x);
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx)
                    if (dy || dx) acc += center - at(y + dy, x + dx);
            acc /= 8.f;
            out[int64_t(y) * W + x] = acc < -1.f ? -1.f : (acc > 1.f ? 1.f : acc);
        }
    return out;
}

std::vector<Tensor<float>> extract_semantic_pyramid(const Tensor<float>& image,
                                                    uint64_t extractor_seed,
                                                    const std::vector<int>& channels) {
    if (image.rank() != 3 || image.dim(2) != 3)
        fail("extract_semantic_pyramid expects (H,W,3), got " + shape_str(image.shape()));
    const int H = image.dim(0), W = image.dim(1);
    if (H % 8 || W % 8) fail("H and W must be divisible by 8, got " + shape_str(image.shape()));
    if (channels.size() != 3) fail("pyramid needs 3 channel counts");

    Tape<float> t;
    Shape in_shape{1, H, W, 3};
    int h = t.constant(Tensor<float>(in_shape, image.vec()));
    std::vector<Tensor<float>> maps;
    int cin = 3;
    for (int stage = 0; stage < 3; ++stage) {
        const int cout = channels[size_t(stage)];
        RngStream rs(extractor_seed, {0x707972ull, uint64_t(stage)});
        auto w = he_init({3, 3, cin, cout}, 9 * cin, rs);
        int conv = conv2d(t, h, t.constant(w), t.constant(Tensor<float>({cout})), 2);
        const int groups = cout % 8 == 0 ? 8 : 1;
        int gn = group_norm(t, conv, t.constant(Tensor<float>::full({cout}, 1.f)),
                            t.constant(Tensor<float>({cout})), groups);
        h = silu_(t, gn);
        const auto& v = t.value(h);
        maps.emplace_back(Shape{v.dim(1), v.dim(2), v.dim(3)}, v.vec());
        cin = cout;
    }
    return maps;
}

ConditionBundle make_bundle(const Tensor<float>& image, const ConditioningConfig& cfg) {
    ConditionBundle b;
    b.image = image;
    b.residual = extract_residual(image);
    if (cfg.use_pyramid)
        b.pyramid = extract_semantic_pyramid(image, cfg.extractor_seed, cfg.pyramid_channels);
    b.extractor_seed = cfg.extractor_seed;
    return b;
}

int denoiser_input_channels(const ConditioningConfig& cfg, int mask_channels) {
    return mask_channels + (cfg.use_image ? 3 : 0) + (cfg.use_residual ? 1 : 0);
}

namespace {

Tensor<float> assemble(const Tensor<float>& state, const ConditionBundle& bundle,
                       const ConditioningConfig& cfg) {
    const int H = state.dim(0), W = state.dim(1), Cm = state.dim(2);
    if (cfg.use_image && (bundle.image.rank() != 3 || bundle.image.dim(0) != H || bundle.image.dim(1) != W))
        fail("assemble: image size " + shape_str(bundle.image.shape()) + " does not match state " +
             shape_str(state.shape()));
    if (cfg.use_residual &&
        (bundle.residual.rank() != 3 || bundle.residual.dim(0) != H || bundle.residual.dim(1) != W))
        fail("assemble: residual size mismatch");
    const int C = denoiser_input_channels(cfg, Cm);
    Tensor<float> out({H, W, C});
    for (int64_t p = 0; p < int64_t(H) * W; ++p) {
        int c = 0;
        for (int i = 0; i < Cm; ++i) out[p * C + c++] = state[p * Cm + i];
        if (cfg.use_image)
            for (int i = 0; i < 3; ++i) out[p * C + c++] = bundle.image[p * 3 + i];
        if (cfg.use_residual) out[p * C + c++] = bundle.residual[p];
    }
    return out;
}

}  // namespace

Tensor<float> assemble_denoiser_input(const MaskState& x_t, const ConditionBundle& bundle,
                                      const ConditioningConfig& cfg) {
    x_t.validate("assemble_denoiser_input");
    Tensor<float> state({x_t.H, x_t.W, 2});
    for (int64_t i = 0; i < state.size(); ++i) state[i] = float(x_t.onehot[i]);
    return assemble(state, bundle, cfg);
}

Tensor<float> assemble_denoiser_input_cont(const Tensor<float>& state_1ch,
                                           const ConditionBundle& bundle,
                                           const ConditioningConfig& cfg) {
    if (state_1ch.rank() != 3 || state_1ch.dim(2) != 1)
        fail("assemble: continuous state must be (H,W,1), got " + shape_str(state_1ch.shape()));
    return assemble(state_1ch, bundle, cfg);
}

}  // namespace cbdiff
