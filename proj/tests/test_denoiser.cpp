#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cbdiff/denoiser.hpp"
#include "cbdiff/synth_data.hpp"

using namespace cbdiff;

namespace {

Tensor<double> randu(Shape s, uint64_t seed, double lo = -1.0, double hi = 1.0) {
    RngStream rs(seed);
    Tensor<double> t(std::move(s));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = lo + (hi - lo) * rs.next_unit();
    return t;
}

ConditioningConfig small_cond() {
    ConditioningConfig c;
    c.pyramid_channels = {8, 12, 16};
    return c;
}

DenoiserConfig small_cfg() {
    DenoiserConfig c;
    c.base_channels = 8;
    c.time_embed_dim = 16;
    c.attention_heads = 2;
    c.channel_mult = {1, 1, 2};
    return c;
}

}  // namespace

TEST_CASE("sinusoidal embedding basics") {
    auto e0 = sinusoidal_time_embedding(0, 8);
    for (int i = 0; i < 4; ++i) {
        CHECK(e0[i] == 0.0);       // sin(0)
        CHECK(e0[4 + i] == 1.0);   // cos(0)
    }
    auto e1 = sinusoidal_time_embedding(1, 8);
    auto e2 = sinusoidal_time_embedding(2, 8);
    CHECK(e1.vec() != e2.vec());
    CHECK_THROWS_AS(sinusoidal_time_embedding(1, 7), std::runtime_error);
}

TEST_CASE("time MLP gradients check out") {
    auto w1 = randu({8, 8}, 1, -0.5, 0.5);
    auto b1 = randu({8}, 2, -0.1, 0.1);
    auto w2 = randu({8, 8}, 3, -0.5, 0.5);
    auto b2 = randu({8}, 4, -0.1, 0.1);
    auto sin3 = sinusoidal_time_embedding(3, 8);
    auto f = [&](Tape<double>& t, const std::vector<int>& id) {
        int e = t.constant(Tensor<double>({1, 8}, sin3.vec()));
        int h = silu_(t, add_rowvec(t, matmul(t, e, id[0]), id[1]));
        h = add_rowvec(t, matmul(t, h, id[2]), id[3]);
        return sum_all(t, h);
    };
    CHECK(grad_check(f, {w1, b1, w2, b2}, 1e-5) < 1e-6);
}

TEST_CASE("tsc_attention: zero keys and values leave the input untouched") {
    // f = 0 and zero shift weights make the modulated map zero; with zero
    // value/output biases the attention branch is exactly zero.
    Tape<double> t;
    const int B = 2, h = 3, w = 3, c = 4, cf = 3, demb = 6;
    auto x = randu({B, h, w, c}, 10);
    TscAttnIds ids;
    ids.q_w = t.leaf(randu({c, c}, 11), true);
    ids.q_b = t.leaf(randu({c}, 12), true);
    ids.k_w = t.leaf(randu({cf, c}, 13), true);
    ids.k_b = t.constant(Tensor<double>({c}));  // zero key bias not required, but keeps S finite
    ids.v_w = t.leaf(randu({cf, c}, 14), true);
    ids.v_b = t.constant(Tensor<double>({c}));           // zero value bias
    ids.o_w = t.leaf(randu({c, c}, 15), true);
    ids.o_b = t.constant(Tensor<double>({c}));           // zero output bias
    ids.mod_w = t.constant(Tensor<double>({demb, 2 * cf}));  // zero scale/shift producer
    ids.mod_b = t.constant(Tensor<double>({demb == 0 ? 0 : 2 * cf}));
    int xid = t.leaf(x, false);
    int fid = t.constant(Tensor<double>({B, h, w, cf}));  // f = 0
    int temb = t.constant(randu({B, demb}, 16));
    RngStream rng(1);
    int out = tsc_attention(t, xid, fid, temb, ids, 2, 0.0, rng, false);
    for (int64_t i = 0; i < x.size(); ++i) CHECK(t.value(out)[i] == x[i]);
}

TEST_CASE("tsc_attention: single location reduces to a linear map of V") {
    // h = w = 1: softmax over one key is 1, so out = x + Wo^T V + bo
    Tape<double> t;
    const int c = 4, cf = 3;
    auto x = randu({1, 1, 1, c}, 20);
    auto fv = randu({1, 1, 1, cf}, 21);
    auto vw = randu({cf, c}, 22);
    auto vb = randu({c}, 23);
    auto ow = randu({c, c}, 24);
    auto ob = randu({c}, 25);
    TscAttnIds ids;
    ids.q_w = t.constant(randu({c, c}, 26));
    ids.q_b = t.constant(randu({c}, 27));
    ids.k_w = t.constant(randu({cf, c}, 28));
    ids.k_b = t.constant(randu({c}, 29));
    ids.v_w = t.constant(vw);
    ids.v_b = t.constant(vb);
    ids.o_w = t.constant(ow);
    ids.o_b = t.constant(ob);
    // plain variant: mod ids unset
    RngStream rng(2);
    int out = tsc_attention(t, t.constant(x), t.constant(fv), t.constant(randu({1, 4}, 30)), ids, 2,
                            0.0, rng, false);
    // hand-computed: v = f·Wv + bv ; out = x + v·Wo + bo
    double v[4];
    for (int j = 0; j < c; ++j) {
        v[j] = vb[j];
        for (int i = 0; i < cf; ++i) v[j] += fv[i] * vw[i * c + j];
    }
    for (int j = 0; j < c; ++j) {
        double o = ob[j];
        for (int i = 0; i < c; ++i) o += v[i] * ow[i * c + j];
        CHECK(t.value(out)[j] == doctest::Approx(x[j] + o).epsilon(1e-12));
    }
}

TEST_CASE("tsc_attention: gradient over every block parameter") {
    const int B = 1, h = 8, w = 8, c = 16, cf = 8, demb = 8, heads = 4;
    auto x = randu({B, h, w, c}, 40, -0.5, 0.5);
    auto f = randu({B, h, w, cf}, 41, -0.5, 0.5);
    auto temb = randu({B, demb}, 42, -0.5, 0.5);
    std::vector<Tensor<double>> params = {
        randu({c, c}, 43, -0.3, 0.3),  randu({c}, 44, -0.1, 0.1),   // q
        randu({cf, c}, 45, -0.3, 0.3), randu({c}, 46, -0.1, 0.1),   // k
        randu({cf, c}, 47, -0.3, 0.3), randu({c}, 48, -0.1, 0.1),   // v
        randu({c, c}, 49, -0.3, 0.3),  randu({c}, 50, -0.1, 0.1),   // o
        randu({demb, 2 * cf}, 51, -0.3, 0.3), randu({2 * cf}, 52, -0.1, 0.1),  // mod
    };
    auto builder = [&](Tape<double>& t, const std::vector<int>& id) {
        TscAttnIds ids{id[0], id[1], id[2], id[3], id[4], id[5], id[6], id[7], id[8], id[9]};
        RngStream rng(3);
        int out = tsc_attention(t, t.constant(x), t.constant(f), t.constant(temb), ids, heads, 0.0,
                                rng, false);
        return sum_all(t, out);
    };
    CHECK(grad_check(builder, params, 1e-5) < 1e-4);
}

TEST_CASE("denoiser forward: softmax head, shapes, determinism") {
    ConditioningConfig ccfg = small_cond();
    DenoiserModel<float> model(small_cfg(), ccfg, 77);
    auto img = generate_base_image(5, 32, 32);
    auto bundle = make_bundle(img, ccfg);
    auto x = MaskState::zeros(32, 32, 10);
    for (int y = 4; y < 12; ++y)
        for (int xx = 4; xx < 12; ++xx) x.set_cls(y, xx, kTampered);

    auto p0 = model.predict_p0(x, 10, bundle);
    CHECK(p0.probs.shape() == Shape{32, 32, 2});
    for (int64_t p = 0; p < 32 * 32; ++p)
        CHECK(std::abs(p0.p(int(p / 32), int(p % 32), 0) + p0.p(int(p / 32), int(p % 32), 1) - 1.0) <
              1e-6);

    auto p1 = model.predict_p0(x, 10, bundle);
    CHECK(p0.probs.vec() == p1.probs.vec());  // eval mode: bit-identical
}

TEST_CASE("denoiser: distinct time steps change the prediction") {
    ConditioningConfig ccfg = small_cond();
    auto cfg = small_cfg();
    DenoiserModel<float> model(cfg, ccfg, 78);
    auto bundle = make_bundle(generate_base_image(6, 32, 32), ccfg);
    // nonzero time path: perturb the zero-init time projections so the
    // step index actually reaches the trunk
    for (auto& e : model.params().entries)
        if (e.name.find(".temb.w") != std::string::npos) {
            RngStream rs(5);
            for (int64_t i = 0; i < e.value.size(); ++i) e.value[i] = float(rs.next_normal() * 0.05);
        }
    auto x = MaskState::zeros(32, 32, 1);
    auto a = model.predict_p0(x, 1, bundle);
    auto b = model.predict_p0(x, 9, bundle);
    CHECK(a.probs.vec() != b.probs.vec());
}

TEST_CASE("denoiser ablations: plain cross-attention and no attention") {
    ConditioningConfig ccfg = small_cond();
    auto cfg = small_cfg();
    cfg.plain_cross_attention = true;  // time modulation disabled
    DenoiserModel<float> plain(cfg, ccfg, 79);
    for (const auto& e : plain.params().entries) CHECK(e.name.find(".mod.") == std::string::npos);
    auto bundle = make_bundle(generate_base_image(9, 32, 32), ccfg);
    auto x = MaskState::zeros(32, 32, 3);
    CHECK_NOTHROW(plain.predict_p0(x, 3, bundle));

    ConditioningConfig nopyr = ccfg;
    nopyr.use_pyramid = false;
    DenoiserConfig cfg2 = small_cfg();
    DenoiserModel<float> noattn(cfg2, nopyr, 80);
    for (const auto& e : noattn.params().entries) CHECK(e.name.find("attn") == std::string::npos);
    auto bundle2 = make_bundle(generate_base_image(9, 32, 32), nopyr);
    CHECK_NOTHROW(noattn.predict_p0(x, 3, bundle2));
}

TEST_CASE("default configuration stays under 5M parameters") {
    DenoiserConfig cfg;  // defaults
    ConditioningConfig ccfg;
    DenoiserModel<float> model(cfg, ccfg, 81);
    CHECK(model.param_count() < 5'000'000);
    CHECK(model.param_count() > 50'000);  // and is an actual network
}

TEST_CASE("gaussian head emits one channel without softmax") {
    ConditioningConfig ccfg = small_cond();
    auto cfg = small_cfg();
    cfg.noise = NoiseKind::gaussian;
    DenoiserModel<float> model(cfg, ccfg, 82);
    auto bundle = make_bundle(generate_base_image(10, 32, 32), ccfg);
    Tensor<double> xt({32, 32, 1});
    for (int64_t i = 0; i < xt.size(); ++i) xt[i] = (i % 7) * 0.1 - 0.3;
    auto eps = model.predict_eps_batch({&xt}, {4}, {&bundle});
    CHECK(eps[0].shape() == Shape{32, 32, 1});
}
