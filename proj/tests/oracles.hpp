#pragma once

// Test-side oracles, kept independent of the library's diffusion code:
// everything here is built only from the per-step transition kernel
// (corruption parameter beta/2 + (1-beta)*x) iterated as 2x2 matrices.

#include <array>

#include "cbdiff/schedule.hpp"

namespace oracle {

using Vec2 = std::array<double, 2>;
using Mat2 = std::array<std::array<double, 2>, 2>;  // [from][to]

inline Mat2 step_kernel(double beta) {
    Mat2 m;
    for (int from = 0; from < 2; ++from)
        for (int to = 0; to < 2; ++to) m[from][to] = beta / 2 + (1.0 - beta) * (from == to ? 1.0 : 0.0);
    return m;
}

// Marginal over X_t classes after iterating t kernels from a one-hot start.
inline Vec2 marginal(int x0_cls, int t, const cbdiff::NoiseSchedule& sched) {
    Vec2 m{x0_cls == 0 ? 1.0 : 0.0, x0_cls == 1 ? 1.0 : 0.0};
    for (int i = 1; i <= t; ++i) {
        const Mat2 k = step_kernel(sched.beta(i));
        Vec2 next{0, 0};
        for (int to = 0; to < 2; ++to)
            for (int from = 0; from < 2; ++from) next[to] += m[from] * k[from][to];
        m = next;
    }
    return m;
}

// Brute-force Bayes over the two X_{t-1} states:
// post[k] = q(X_t=j | X_{t-1}=k) * q(X_{t-1}=k | X_0) / Z.
inline Vec2 posterior(int xt_cls, int x0_cls, int t, const cbdiff::NoiseSchedule& sched) {
    const Vec2 prior = marginal(x0_cls, t - 1, sched);
    const Mat2 k = step_kernel(sched.beta(t));
    Vec2 post{prior[0] * k[0][xt_cls], prior[1] * k[1][xt_cls]};
    const double z = post[0] + post[1];
    post[0] /= z;
    post[1] /= z;
    return post;
}

inline Vec2 mixture(int xt_cls, const Vec2& p0_hat, int t, const cbdiff::NoiseSchedule& sched) {
    Vec2 out{0, 0};
    for (int k0 = 0; k0 < 2; ++k0) {
        const Vec2 post = posterior(xt_cls, k0, t, sched);
        out[0] += post[0] * p0_hat[k0];
        out[1] += post[1] * p0_hat[k0];
    }
    return out;
}

}  // namespace oracle
