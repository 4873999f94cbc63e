#include "cbdiff/diffusion.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace cbdiff {

namespace {

[[noreturn]] void fail(const char* op, const std::string& what) {
    throw std::runtime_error(std::string(op) + ": " + what);
}

void check_step_range(int t, int lo, const NoiseSchedule& sched, const char* op) {
    if (t < lo || t > sched.steps())
        fail(op, "t=" + std::to_string(t) + " outside [" + std::to_string(lo) + "," +
                     std::to_string(sched.steps()) + "]");
}

void check_same_size(int Ha, int Wa, int Hb, int Wb, const char* op) {
    if (Ha != Hb || Wa != Wb)
        fail(op, "spatial size mismatch (" + std::to_string(Ha) + "x" + std::to_string(Wa) +
                     ") vs (" + std::to_string(Hb) + "x" + std::to_string(Wb) + ")");
}

// Posterior over X_{t-1} classes for a pixel with observed x_t class j
// and clean class k0: normalize over k of
//   q(X_t=j | X_{t-1}=k) * q(X_{t-1}=k | X_0=k0).
inline void pixel_posterior(int j, int k0, double beta_t, double abar_prev, double out[2]) {
    double z = 0;
    for (int k = 0; k < 2; ++k) {
        const double like = beta_t / 2 + (1.0 - beta_t) * (j == k ? 1.0 : 0.0);
        const double prior = (1.0 - abar_prev) / 2 + abar_prev * (k == k0 ? 1.0 : 0.0);
        out[k] = like * prior;
        z += out[k];
    }
    out[0] /= z;
    out[1] /= z;
}

}  // namespace

MaskState MaskState::zeros(int H, int W, int step) {
    MaskState m;
    m.H = H;
    m.W = W;
    m.step = step;
    m.onehot = Tensor<uint8_t>({H, W, 2});
    for (int64_t p = 0; p < m.pixels(); ++p) m.onehot[p * 2 + kUntampered] = 1;
    return m;
}

MaskState MaskState::from_classes(int H, int W, const std::vector<uint8_t>& cls, int step) {
    if (static_cast<int64_t>(cls.size()) != int64_t(H) * W)
        fail("mask", "class list length does not match " + std::to_string(H) + "x" + std::to_string(W));
    MaskState m = zeros(H, W, step);
    for (int64_t p = 0; p < m.pixels(); ++p) {
        m.onehot[p * 2 + kUntampered] = cls[size_t(p)] ? 0 : 1;
        m.onehot[p * 2 + kTampered] = cls[size_t(p)] ? 1 : 0;
    }
    return m;
}

void MaskState::set_cls(int y, int x, int c) {
    const int64_t p = int64_t(y) * W + x;
    onehot[p * 2 + kUntampered] = c == kUntampered ? 1 : 0;
    onehot[p * 2 + kTampered] = c == kTampered ? 1 : 0;
}

void MaskState::validate(const char* op) const {
    if (onehot.shape() != Shape{H, W, 2}) fail(op, "mask tensor shape is not (H,W,2)");
    for (int64_t p = 0; p < pixels(); ++p) {
        const int a = onehot[p * 2], b = onehot[p * 2 + 1];
        if ((a != 0 && a != 1) || (b != 0 && b != 1) || a + b != 1)
            fail(op, "mask is not one-hot at pixel " + std::to_string(p));
    }
}

CategoricalField CategoricalField::uniform(int H, int W) {
    CategoricalField f;
    f.H = H;
    f.W = W;
    f.probs = Tensor<double>::full({H, W, 2}, 0.5);
    return f;
}

void CategoricalField::validate(const char* op, double tol) const {
    if (probs.shape() != Shape{H, W, 2}) fail(op, "field tensor shape is not (H,W,2)");
    const int64_t n = int64_t(H) * W;
    for (int64_t p = 0; p < n; ++p) {
        const double a = probs[p * 2], b = probs[p * 2 + 1];
        if (a < 0 || b < 0 || std::abs(a + b - 1.0) > tol)
            fail(op, "channel probabilities do not sum to 1 at pixel " + std::to_string(p));
    }
}

MaskState q_sample_step(const MaskState& x_prev, double beta_t, RngStream& rng) {
    if (!(beta_t > 0.0 && beta_t < 1.0))
        fail("q_sample_step", "beta_t=" + std::to_string(beta_t) + " outside (0,1)");
    x_prev.validate("q_sample_step");
    MaskState out = x_prev;
    out.step = x_prev.step + 1;
    const uint64_t key = rng.key();
    const uint64_t base = rng.reserve(uint64_t(x_prev.pixels()));
    for (int64_t p = 0; p < x_prev.pixels(); ++p) {
        const double p_tampered =
            beta_t / 2 + (1.0 - beta_t) * double(x_prev.onehot[p * 2 + kTampered]);
        const int c = unit_at(key, base + uint64_t(p)) < p_tampered ? kTampered : kUntampered;
        out.onehot[p * 2 + kUntampered] = c == kUntampered ? 1 : 0;
        out.onehot[p * 2 + kTampered] = c == kTampered ? 1 : 0;
    }
    return out;
}

CategoricalField q_marginal_params(const MaskState& x0, int t, const NoiseSchedule& sched) {
    check_step_range(t, 1, sched, "q_marginal_params");
    x0.validate("q_marginal_params");
    const double abar = sched.alpha_bar(t);
    CategoricalField f;
    f.H = x0.H;
    f.W = x0.W;
    f.probs = Tensor<double>({x0.H, x0.W, 2});
    for (int64_t i = 0; i < f.probs.size(); ++i)
        f.probs[i] = (1.0 - abar) / 2 + abar * double(x0.onehot[i]);
    return f;
}

MaskState sample_categorical(const CategoricalField& params, RngStream& rng, int step) {
    params.validate("sample_categorical");
    MaskState m = MaskState::zeros(params.H, params.W, step);
    const uint64_t key = rng.key();
    const uint64_t base = rng.reserve(uint64_t(m.pixels()));
    for (int64_t p = 0; p < m.pixels(); ++p) {
        const int c = unit_at(key, base + uint64_t(p)) < params.probs[p * 2 + kTampered]
                          ? kTampered
                          : kUntampered;
        m.onehot[p * 2 + kUntampered] = c == kUntampered ? 1 : 0;
        m.onehot[p * 2 + kTampered] = c == kTampered ? 1 : 0;
    }
    return m;
}

CategoricalField posterior_params(const MaskState& x_t, const MaskState& x0, int t,
                                  const NoiseSchedule& sched) {
    if (t == 1) fail("posterior_params", "t=1 has no posterior branch (cross-entropy applies)");
    check_step_range(t, 2, sched, "posterior_params");
    x_t.validate("posterior_params");
    x0.validate("posterior_params");
    check_same_size(x_t.H, x_t.W, x0.H, x0.W, "posterior_params");
    const double beta_t = sched.beta(t);
    const double abar_prev = sched.alpha_bar(t - 1);
    // Only 4 (x_t class, x0 class) combinations exist; precompute them.
    double table[2][2][2];
    for (int j = 0; j < 2; ++j)
        for (int k0 = 0; k0 < 2; ++k0) pixel_posterior(j, k0, beta_t, abar_prev, table[j][k0]);
    CategoricalField f;
    f.H = x_t.H;
    f.W = x_t.W;
    f.probs = Tensor<double>({f.H, f.W, 2});
    for (int64_t p = 0; p < x_t.pixels(); ++p) {
        const double* q = table[x_t.onehot[p * 2 + 1]][x0.onehot[p * 2 + 1]];
        f.probs[p * 2] = q[0];
        f.probs[p * 2 + 1] = q[1];
    }
    return f;
}

CategoricalField mixture_reverse_params(const MaskState& x_t, const CategoricalField& p0_hat, int t,
                                        const NoiseSchedule& sched) {
    check_step_range(t, 2, sched, "mixture_reverse_params");
    x_t.validate("mixture_reverse_params");
    p0_hat.validate("mixture_reverse_params");
    check_same_size(x_t.H, x_t.W, p0_hat.H, p0_hat.W, "mixture_reverse_params");
    const double beta_t = sched.beta(t);
    const double abar_prev = sched.alpha_bar(t - 1);
    double table[2][2][2];
    for (int j = 0; j < 2; ++j)
        for (int k0 = 0; k0 < 2; ++k0) pixel_posterior(j, k0, beta_t, abar_prev, table[j][k0]);
    CategoricalField f;
    f.H = x_t.H;
    f.W = x_t.W;
    f.probs = Tensor<double>({f.H, f.W, 2});
    for (int64_t p = 0; p < x_t.pixels(); ++p) {
        const int j = x_t.onehot[p * 2 + 1];
        for (int c = 0; c < 2; ++c)
            f.probs[p * 2 + c] = table[j][0][c] * p0_hat.probs[p * 2 + kUntampered] +
                                 table[j][1][c] * p0_hat.probs[p * 2 + kTampered];
    }
    return f;
}

LossValue kl_loss(const MaskState& x_t, const MaskState& x0, const CategoricalField& p0_hat, int t,
                  const NoiseSchedule& sched) {
    const CategoricalField q = posterior_params(x_t, x0, t, sched);
    const CategoricalField p = mixture_reverse_params(x_t, p0_hat, t, sched);
    double acc = 0;
    for (int64_t i = 0; i < q.probs.size(); ++i) {
        const double qi = q.probs[i];
        if (qi <= 0) continue;  // 0*log0 := 0
        acc += qi * std::log(qi / std::max(p.probs[i], kProbFloor));
    }
    LossValue l;
    l.branch = LossBranch::kl;
    l.value = acc / double(x0.pixels());
    if (!std::isfinite(l.value)) fail("kl_loss", "non-finite loss");
    return l;
}

LossValue ce_loss(const MaskState& x0, const CategoricalField& p0_hat) {
    x0.validate("ce_loss");
    p0_hat.validate("ce_loss");
    check_same_size(x0.H, x0.W, p0_hat.H, p0_hat.W, "ce_loss");
    double acc = 0;
    for (int64_t i = 0; i < p0_hat.probs.size(); ++i)
        if (x0.onehot[i]) acc -= std::log(std::max(p0_hat.probs[i], kProbFloor));
    LossValue l;
    l.branch = LossBranch::ce;
    l.value = acc / double(x0.pixels());
    if (!std::isfinite(l.value)) fail("ce_loss", "non-finite loss");
    return l;
}

Tensor<double> gaussian_map_mask(const MaskState& x0) {
    x0.validate("gaussian_map_mask");
    Tensor<double> out({x0.H, x0.W, 1});
    for (int64_t p = 0; p < x0.pixels(); ++p)
        out[p] = x0.onehot[p * 2 + kTampered] ? 1.0 : -1.0;
    return out;
}

Tensor<double> gaussian_forward_sample(const Tensor<double>& x0_cont, double alpha_bar,
                                       RngStream& rng, Tensor<double>* noise_out) {
    if (!(alpha_bar >= 0.0 && alpha_bar <= 1.0))
        fail("gaussian_forward_sample", "alpha_bar outside [0,1]");
    Tensor<double> out(x0_cont.shape());
    if (noise_out) *noise_out = Tensor<double>(x0_cont.shape());
    const double a = std::sqrt(alpha_bar), b = std::sqrt(1.0 - alpha_bar);
    for (int64_t i = 0; i < out.size(); ++i) {
        const double eps = rng.next_normal();
        if (noise_out) (*noise_out)[i] = eps;
        out[i] = a * x0_cont[i] + b * eps;
    }
    ensure_finite(out, "gaussian_forward_sample");
    return out;
}

LossValue gaussian_noise_mse(const Tensor<double>& eps_hat, const Tensor<double>& eps) {
    check_shapes_match(eps_hat.shape(), eps.shape(), "gaussian_noise_mse");
    double acc = 0;
    for (int64_t i = 0; i < eps.size(); ++i) {
        const double d = eps_hat[i] - eps[i];
        acc += d * d;
    }
    LossValue l;
    l.branch = LossBranch::ce;  // reported under the single-branch objective
    l.value = acc / double(eps.size());
    if (!std::isfinite(l.value)) fail("gaussian_noise_mse", "non-finite loss");
    return l;
}

}  // namespace cbdiff
