#include "cbdiff/denoiser.hpp"

#include <cmath>
#include <stdexcept>

namespace cbdiff {

namespace {

[[noreturn]] void fail(const std::string& what) { throw std::runtime_error("denoiser: " + what); }

int groups_for(int channels, int preferred) {
    return channels % preferred == 0 ? preferred : 1;
}

// platform-stable name hash for parameter init streams
uint64_t fnv1a(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace

std::string to_string(NoiseKind k) { return k == NoiseKind::bernoulli ? "bernoulli" : "gaussian"; }

NoiseKind noise_kind_from_string(const std::string& s) {
    if (s == "bernoulli") return NoiseKind::bernoulli;
    if (s == "gaussian") return NoiseKind::gaussian;
    fail("unknown noise kind '" + s + "'");
}

nlohmann::json DenoiserConfig::to_json() const {
    return {{"base_channels", base_channels},
            {"depth", depth},
            {"time_embed_dim", time_embed_dim},
            {"attention_heads", attention_heads},
            {"dropout_rate", dropout_rate},
            {"channel_mult", channel_mult},
            {"gn_groups", gn_groups},
            {"use_tsc_attention", use_tsc_attention},
            {"plain_cross_attention", plain_cross_attention},
            {"noise", to_string(noise)}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
    DenoiserConfig c;
    c.base_channels = j.value("base_channels", c.base_channels);
    c.depth = j.value("depth", c.depth);
    c.time_embed_dim = j.value("time_embed_dim", c.time_embed_dim);
    c.attention_heads = j.value("attention_heads", c.attention_heads);
    c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
    c.channel_mult = j.value("channel_mult", c.channel_mult);
    c.gn_groups = j.value("gn_groups", c.gn_groups);
    c.use_tsc_attention = j.value("use_tsc_attention", c.use_tsc_attention);
    c.plain_cross_attention = j.value("plain_cross_attention", c.plain_cross_attention);
    if (j.contains("noise")) c.noise = noise_kind_from_string(j.at("noise").get<std::string>());
    return c;
}

template <class T>
Tensor<T>& ParamStore<T>::add(const std::string& name, Tensor<T> value, bool trainable) {
    if (index.count(name)) fail("duplicate parameter '" + name + "'");
    index[name] = entries.size();
    entries.push_back({name, std::move(value), trainable});
    return entries.back().value;
}

template <class T>
Tensor<T>& ParamStore<T>::at(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) fail("unknown parameter '" + name + "'");
    return entries[it->second].value;
}

template <class T>
const Tensor<T>& ParamStore<T>::at(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) fail("unknown parameter '" + name + "'");
    return entries[it->second].value;
}

template <class T>
int64_t ParamStore<T>::count_scalars() const {
    int64_t n = 0;
    for (const auto& e : entries) n += e.value.size();
    return n;
}

Tensor<double> sinusoidal_time_embedding(int t, int dim) {
    if (t < 0) fail("time_embed: t must be >= 0");
    if (dim < 2 || dim % 2) fail("time_embed: dim must be even and >= 2, got " + std::to_string(dim));
    Tensor<double> e({dim});
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq =
            half > 1 ? std::exp(-std::log(10000.0) * double(i) / double(half - 1)) : 1.0;
        e[i] = std::sin(double(t) * freq);
        e[half + i] = std::cos(double(t) * freq);
    }
    return e;
}

template <class T>
int tsc_attention(Tape<T>& tape, int x, int f, int temb_act, const TscAttnIds& w, int heads,
                  T dropout_rate, RngStream& rng, bool train) {
    const auto& xs = tape.value(x).shape();
    const auto& fs = tape.value(f).shape();
    if (xs.size() != 4 || fs.size() != 4 || xs[0] != fs[0] || xs[1] != fs[1] || xs[2] != fs[2])
        fail("tsc_attention: x " + shape_str(xs) + " and f " + shape_str(fs) +
             " must be spatially aligned (B,h,w,*)");
    const int B = xs[0], hh = xs[1], ww = xs[2], c = xs[3], cf = fs[3];
    if (c % heads) fail("tsc_attention: channels not divisible by heads");
    if (w.mod_w >= 0) {
        int mp = add_rowvec(tape, matmul(tape, temb_act, w.mod_w), w.mod_b);
        int sf = add_const(tape, slice_last(tape, mp, 0, cf), T(1));
        int bf = slice_last(tape, mp, cf, 2 * cf);
        f = affine_nc(tape, f, sf, bf);
    }
    const int dh = c / heads;
    const T inv_sqrt = T(1) / std::sqrt(T(dh));
    std::vector<int> outs(static_cast<size_t>(B));
    for (int bi = 0; bi < B; ++bi) {
        int xb = reshape(tape, select_batch(tape, x, bi), {hh * ww, c});
        int fb = reshape(tape, select_batch(tape, f, bi), {hh * ww, cf});
        int q = add_rowvec(tape, matmul(tape, xb, w.q_w), w.q_b);
        int k = add_rowvec(tape, matmul(tape, fb, w.k_w), w.k_b);
        int v = add_rowvec(tape, matmul(tape, fb, w.v_w), w.v_b);
        int merged = -1;
        for (int hd = 0; hd < heads; ++hd) {
            int qh = slice_last(tape, q, hd * dh, (hd + 1) * dh);
            int kh = slice_last(tape, k, hd * dh, (hd + 1) * dh);
            int vh = slice_last(tape, v, hd * dh, (hd + 1) * dh);
            int att = softmax(tape, scale_const(tape, matmul_nt(tape, qh, kh), inv_sqrt), 1);
            int ho = matmul(tape, att, vh);
            merged = hd == 0 ? ho : concat_last(tape, merged, ho);
        }
        int o = add_rowvec(tape, matmul(tape, merged, w.o_w), w.o_b);
        o = dropout(tape, o, dropout_rate, rng, train);
        outs[static_cast<size_t>(bi)] = reshape(tape, o, {hh, ww, c});
    }
    return add(tape, x, stack_batch(tape, outs));
}

template int tsc_attention<float>(Tape<float>&, int, int, int, const TscAttnIds&, int, float,
                                  RngStream&, bool);
template int tsc_attention<double>(Tape<double>&, int, int, int, const TscAttnIds&, int, double,
                                   RngStream&, bool);

namespace {

template <class T>
struct Builder {
    // shared state while creating parameters
    ParamStore<T>& ps;
    uint64_t init_seed;

    Tensor<T> randn(Shape shape, const std::string& name, double std) {
        RngStream rs(hash_key({init_seed, fnv1a(name), 0x696e6974ull}));
        Tensor<T> w(std::move(shape));
        for (int64_t i = 0; i < w.size(); ++i) w[i] = T(rs.next_normal() * std);
        return w;
    }
    void conv(const std::string& name, int kh, int kw, int cin, int cout, bool zero = false) {
        const double std = zero ? 0.0 : std::sqrt(2.0 / double(kh * kw * cin));
        ps.add(name + ".w", zero ? Tensor<T>({kh, kw, cin, cout}) : randn({kh, kw, cin, cout}, name, std));
        ps.add(name + ".b", Tensor<T>({cout}));
    }
    void linear(const std::string& name, int cin, int cout, bool zero = false) {
        const double std = zero ? 0.0 : std::sqrt(1.0 / double(cin));
        ps.add(name + ".w", zero ? Tensor<T>({cin, cout}) : randn({cin, cout}, name, std));
        ps.add(name + ".b", Tensor<T>({cout}));
    }
    void norm(const std::string& name, int c) {
        ps.add(name + ".g", Tensor<T>::full({c}, T(1)));
        ps.add(name + ".b", Tensor<T>({c}));
    }
    void res_block(const std::string& pfx, int cin, int cout, int temb_dim) {
        norm(pfx + ".gn1", cin);
        conv(pfx + ".conv1", 3, 3, cin, cout);
        linear(pfx + ".temb", temb_dim, 2 * cout, /*zero=*/true);
        norm(pfx + ".gn2", cout);
        conv(pfx + ".conv2", 3, 3, cout, cout);
        if (cin != cout) conv(pfx + ".skip", 1, 1, cin, cout);
    }
    void attn_block(const std::string& pfx, int c, int cf, int temb_dim, bool plain) {
        linear(pfx + ".q", c, c);
        linear(pfx + ".k", cf, c);
        linear(pfx + ".v", cf, c);
        linear(pfx + ".o", c, c, /*zero=*/true);  // residual branch starts silent
        if (!plain) linear(pfx + ".mod", temb_dim, 2 * cf, /*zero=*/true);
    }
};

}  // namespace

template <class T>
DenoiserModel<T>::DenoiserModel(DenoiserConfig cfg, ConditioningConfig cond_cfg, uint64_t init_seed)
    : cfg_(std::move(cfg)), cond_cfg_(std::move(cond_cfg)) {
    if (cfg_.depth < 1 || cfg_.depth > 3) fail("depth must be in 1..3");
    if (int(cfg_.channel_mult.size()) != cfg_.depth) fail("channel_mult size must equal depth");
    if (cfg_.time_embed_dim % 2) fail("time_embed_dim must be even");
    if (!cond_cfg_.use_pyramid) cfg_.use_tsc_attention = false;

    std::vector<int> w(static_cast<size_t>(cfg_.depth));
    for (int k = 0; k < cfg_.depth; ++k) w[size_t(k)] = cfg_.base_channels * cfg_.channel_mult[size_t(k)];
    const int wb = w.back();
    if (cfg_.use_tsc_attention)
        for (int k = 0; k < cfg_.depth; ++k)
            if (w[size_t(k)] % cfg_.attention_heads)
                fail("stage width " + std::to_string(w[size_t(k)]) + " not divisible by " +
                     std::to_string(cfg_.attention_heads) + " heads");

    Builder<T> b{params_, init_seed};
    const int d = cfg_.time_embed_dim;
    b.linear("time.fc1", d, d);
    b.linear("time.fc2", d, d);
    const int cin = denoiser_input_channels(cond_cfg_, cfg_.mask_channels());
    b.conv("stem", 3, 3, cin, w[0]);
    for (int k = 0; k < cfg_.depth; ++k) {
        b.res_block("enc" + std::to_string(k) + ".res", w[size_t(k)], w[size_t(k)], d);
        const int next = k + 1 < cfg_.depth ? w[size_t(k + 1)] : wb;
        b.conv("down" + std::to_string(k), 3, 3, w[size_t(k)], next);
    }
    const auto cf_at = [&](int level) { return cond_cfg_.pyramid_channels.at(size_t(level - 1)); };
    b.res_block("mid.res1", wb, wb, d);
    if (cfg_.use_tsc_attention && cfg_.depth <= 3)
        b.attn_block("mid.attn", wb, cf_at(cfg_.depth), d, cfg_.plain_cross_attention);
    b.res_block("mid.res2", wb, wb, d);
    int prev = wb;
    for (int k = cfg_.depth - 1; k >= 0; --k) {
        const std::string pfx = "dec" + std::to_string(k);
        b.res_block(pfx + ".res", prev + w[size_t(k)], w[size_t(k)], d);
        if (cfg_.use_tsc_attention && k >= 1 && k <= 3)
            b.attn_block(pfx + ".attn", w[size_t(k)], cf_at(k), d, cfg_.plain_cross_attention);
        prev = w[size_t(k)];
    }
    b.norm("head.gn", w[0]);
    b.conv("head.conv", 1, 1, w[0], cfg_.out_channels(), /*zero=*/true);
}

template <class T>
int DenoiserModel<T>::forward(Tape<T>& tape, int x_in, const std::vector<int>& tsteps,
                              const std::vector<const ConditionBundle*>& bundles, bool train,
                              RngStream* rng, std::vector<int>* param_ids_out) const {
    const int B = int(tsteps.size());
    const auto& xs = tape.value(x_in).shape();
    if (xs.size() != 4 || xs[0] != B)
        fail("forward: input must be (B,H,W,C) with B=" + std::to_string(B) + ", got " +
             shape_str(xs));
    if (cfg_.use_tsc_attention && int(bundles.size()) != B)
        fail("forward: need one condition bundle per sample");
    if (train && !rng) fail("forward: training mode requires an rng stream");
    RngStream dummy(0);
    RngStream& rs = rng ? *rng : dummy;
    const int H = xs[1], W = xs[2];
    if (H % (1 << cfg_.depth) || W % (1 << cfg_.depth))
        fail("forward: spatial size must divide by " + std::to_string(1 << cfg_.depth));

    // parameters as tape leaves
    std::unordered_map<std::string, int> pid;
    pid.reserve(params_.entries.size() * 2);
    if (param_ids_out) param_ids_out->clear();
    for (const auto& e : params_.entries) {
        const int id = tape.leaf(e.value, train && e.trainable);
        pid[e.name] = id;
        if (param_ids_out) param_ids_out->push_back(id);
    }
    const auto P = [&](const std::string& n) {
        auto it = pid.find(n);
        if (it == pid.end()) fail("forward: missing parameter " + n);
        return it->second;
    };

    // time embedding: sinusoidal table -> 2-layer MLP, one row per sample
    const int d = cfg_.time_embed_dim;
    Tensor<T> sins({B, d});
    for (int bi = 0; bi < B; ++bi) {
        const auto e = sinusoidal_time_embedding(tsteps[size_t(bi)], d);
        for (int i = 0; i < d; ++i) sins[int64_t(bi) * d + i] = T(e[i]);
    }
    int temb = add_rowvec(tape, matmul(tape, tape.constant(std::move(sins)), P("time.fc1.w")),
                          P("time.fc1.b"));
    temb = silu_(tape, temb);
    temb = add_rowvec(tape, matmul(tape, temb, P("time.fc2.w")), P("time.fc2.b"));
    const int temb_act = silu_(tape, temb);  // shared activation for all projections

    const auto res_block = [&](int h, const std::string& pfx, int rcin, int rcout) {
        int y = group_norm(tape, h, P(pfx + ".gn1.g"), P(pfx + ".gn1.b"),
                           groups_for(rcin, cfg_.gn_groups));
        y = silu_(tape, y);
        y = conv2d(tape, y, P(pfx + ".conv1.w"), P(pfx + ".conv1.b"), 1);
        int tp = add_rowvec(tape, matmul(tape, temb_act, P(pfx + ".temb.w")), P(pfx + ".temb.b"));
        int scale = add_const(tape, slice_last(tape, tp, 0, rcout), T(1));
        int shift = slice_last(tape, tp, rcout, 2 * rcout);
        y = group_norm(tape, y, P(pfx + ".gn2.g"), P(pfx + ".gn2.b"),
                       groups_for(rcout, cfg_.gn_groups));
        y = affine_nc(tape, y, scale, shift);
        y = silu_(tape, y);
        y = dropout(tape, y, T(cfg_.dropout_rate), rs, train);
        y = conv2d(tape, y, P(pfx + ".conv2.w"), P(pfx + ".conv2.b"), 1);
        int sk = rcin == rcout ? h : conv2d(tape, h, P(pfx + ".skip.w"), P(pfx + ".skip.b"), 1);
        return add(tape, y, sk);
    };

    const auto tsc_attn = [&](int x, const std::string& pfx, int level, int c) {
        const auto& hs = tape.value(x).shape();
        const int hh = hs[1], ww = hs[2];
        const int cf = cond_cfg_.pyramid_channels.at(size_t(level - 1));
        Tensor<T> fstack({B, hh, ww, cf});
        for (int bi = 0; bi < B; ++bi) {
            const auto& f = bundles[size_t(bi)]->pyramid.at(size_t(level - 1));
            if (f.dim(0) != hh || f.dim(1) != ww || f.dim(2) != cf)
                fail("attention: pyramid level " + std::to_string(level) + " is " +
                     shape_str(f.shape()) + ", expected (" + std::to_string(hh) + "," +
                     std::to_string(ww) + "," + std::to_string(cf) + ")");
            for (int64_t i = 0; i < f.size(); ++i) fstack[int64_t(bi) * f.size() + i] = T(f[i]);
        }
        int fmap = tape.constant(std::move(fstack));
        TscAttnIds ids;
        ids.q_w = P(pfx + ".q.w"); ids.q_b = P(pfx + ".q.b");
        ids.k_w = P(pfx + ".k.w"); ids.k_b = P(pfx + ".k.b");
        ids.v_w = P(pfx + ".v.w"); ids.v_b = P(pfx + ".v.b");
        ids.o_w = P(pfx + ".o.w"); ids.o_b = P(pfx + ".o.b");
        if (!cfg_.plain_cross_attention) {
            ids.mod_w = P(pfx + ".mod.w");
            ids.mod_b = P(pfx + ".mod.b");
        }
        return tsc_attention(tape, x, fmap, temb_act, ids, cfg_.attention_heads,
                             T(cfg_.dropout_rate), rs, train);
    };

    std::vector<int> width(static_cast<size_t>(cfg_.depth));
    for (int k = 0; k < cfg_.depth; ++k)
        width[size_t(k)] = cfg_.base_channels * cfg_.channel_mult[size_t(k)];
    const int wb = width.back();

    int h = conv2d(tape, x_in, P("stem.w"), P("stem.b"), 1);
    std::vector<int> skips(static_cast<size_t>(cfg_.depth));
    for (int k = 0; k < cfg_.depth; ++k) {
        h = res_block(h, "enc" + std::to_string(k) + ".res", width[size_t(k)], width[size_t(k)]);
        skips[size_t(k)] = h;
        const std::string dn = "down" + std::to_string(k);
        h = conv2d(tape, h, P(dn + ".w"), P(dn + ".b"), 2);
    }
    h = res_block(h, "mid.res1", wb, wb);
    if (cfg_.use_tsc_attention && cfg_.depth <= 3) h = tsc_attn(h, "mid.attn", cfg_.depth, wb);
    h = res_block(h, "mid.res2", wb, wb);
    int prev = wb;
    for (int k = cfg_.depth - 1; k >= 0; --k) {
        h = upsample2x(tape, h);
        h = concat_last(tape, h, skips[size_t(k)]);
        const std::string pfx = "dec" + std::to_string(k);
        h = res_block(h, pfx + ".res", prev + width[size_t(k)], width[size_t(k)]);
        if (cfg_.use_tsc_attention && k >= 1 && k <= 3) h = tsc_attn(h, pfx + ".attn", k, width[size_t(k)]);
        prev = width[size_t(k)];
    }
    h = group_norm(tape, h, P("head.gn.g"), P("head.gn.b"), groups_for(width[0], cfg_.gn_groups));
    h = silu_(tape, h);
    h = conv2d(tape, h, P("head.conv.w"), P("head.conv.b"), 1);
    if (cfg_.noise == NoiseKind::bernoulli) h = softmax(tape, h, 3);
    return h;
}

template <class T>
CategoricalField DenoiserModel<T>::predict_p0(const MaskState& x_t, int t,
                                              const ConditionBundle& bundle) const {
    return predict_p0_batch({&x_t}, {t}, {&bundle})[0];
}

template <class T>
std::vector<CategoricalField> DenoiserModel<T>::predict_p0_batch(
    const std::vector<const MaskState*>& x_ts, const std::vector<int>& ts,
    const std::vector<const ConditionBundle*>& bundles) const {
    if (cfg_.noise != NoiseKind::bernoulli) fail("predict_p0 requires the bernoulli head");
    const int B = int(x_ts.size());
    if (int(ts.size()) != B || int(bundles.size()) != B) fail("predict_p0: batch size mismatch");
    const int H = x_ts[0]->H, W = x_ts[0]->W;
    const int cin = denoiser_input_channels(cond_cfg_, 2);
    Tensor<T> input({B, H, W, cin});
    for (int b = 0; b < B; ++b) {
        const auto one = assemble_denoiser_input(*x_ts[size_t(b)], *bundles[size_t(b)], cond_cfg_);
        if (one.dim(0) != H || one.dim(1) != W) fail("predict_p0: mixed spatial sizes in batch");
        for (int64_t i = 0; i < one.size(); ++i) input[int64_t(b) * one.size() + i] = T(one[i]);
    }
    Tape<T> tape;
    const int out = forward(tape, tape.constant(std::move(input)), ts, bundles, false, nullptr);
    const auto& ov = tape.value(out);
    std::vector<CategoricalField> fields(static_cast<size_t>(B));
    const int64_t stride = int64_t(H) * W * 2;
    for (int b = 0; b < B; ++b) {
        CategoricalField f;
        f.H = H;
        f.W = W;
        f.probs = Tensor<double>({H, W, 2});
        for (int64_t i = 0; i < stride; ++i) f.probs[i] = double(ov[int64_t(b) * stride + i]);
        // float32 softmax rows can be ~1e-7 off; renormalize into the
        // CategoricalField contract before the double-precision math.
        for (int64_t p = 0; p < int64_t(H) * W; ++p) {
            const double z = f.probs[p * 2] + f.probs[p * 2 + 1];
            f.probs[p * 2] /= z;
            f.probs[p * 2 + 1] /= z;
        }
        f.validate("predict_p0");
        fields[size_t(b)] = std::move(f);
    }
    return fields;
}

template <class T>
std::vector<Tensor<double>> DenoiserModel<T>::predict_eps_batch(
    const std::vector<const Tensor<double>*>& x_ts, const std::vector<int>& ts,
    const std::vector<const ConditionBundle*>& bundles) const {
    if (cfg_.noise != NoiseKind::gaussian) fail("predict_eps requires the gaussian head");
    const int B = int(x_ts.size());
    if (int(ts.size()) != B || int(bundles.size()) != B) fail("predict_eps: batch size mismatch");
    const int H = x_ts[0]->dim(0), W = x_ts[0]->dim(1);
    const int cin = denoiser_input_channels(cond_cfg_, 1);
    Tensor<T> input({B, H, W, cin});
    for (int b = 0; b < B; ++b) {
        Tensor<float> state({H, W, 1});
        for (int64_t i = 0; i < state.size(); ++i) state[i] = float((*x_ts[size_t(b)])[i]);
        const auto one = assemble_denoiser_input_cont(state, *bundles[size_t(b)], cond_cfg_);
        for (int64_t i = 0; i < one.size(); ++i) input[int64_t(b) * one.size() + i] = T(one[i]);
    }
    Tape<T> tape;
    const int out = forward(tape, tape.constant(std::move(input)), ts, bundles, false, nullptr);
    const auto& ov = tape.value(out);
    std::vector<Tensor<double>> eps(static_cast<size_t>(B));
    const int64_t stride = int64_t(H) * W;
    for (int b = 0; b < B; ++b) {
        eps[size_t(b)] = Tensor<double>({H, W, 1});
        for (int64_t i = 0; i < stride; ++i) eps[size_t(b)][i] = double(ov[int64_t(b) * stride + i]);
    }
    return eps;
}

template struct ParamStore<float>;
template struct ParamStore<double>;
template class DenoiserModel<float>;
template class DenoiserModel<double>;

}  // namespace cbdiff
