#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cbdiff/diffusion.hpp"
#include "oracles.hpp"

using namespace cbdiff;

namespace {

MaskState one_pixel(int cls, int step = 0) {
    return MaskState::from_classes(1, 1, {uint8_t(cls)}, step);
}

CategoricalField field_1px(double p0, double p1) {
    CategoricalField f;
    f.H = f.W = 1;
    f.probs = Tensor<double>({1, 1, 2}, {p0, p1});
    return f;
}

MaskState random_mask(int H, int W, uint64_t seed, int step = 0) {
    RngStream rs(seed);
    std::vector<uint8_t> cls(size_t(H) * W);
    for (auto& c : cls) c = rs.next_unit() < 0.5 ? 0 : 1;
    return MaskState::from_classes(H, W, cls, step);
}

CategoricalField random_field(int H, int W, uint64_t seed) {
    RngStream rs(seed);
    CategoricalField f;
    f.H = H;
    f.W = W;
    f.probs = Tensor<double>({H, W, 2});
    for (int64_t p = 0; p < int64_t(H) * W; ++p) {
        const double a = 0.02 + 0.96 * rs.next_unit();
        f.probs[p * 2] = a;
        f.probs[p * 2 + 1] = 1.0 - a;
    }
    return f;
}

}  // namespace

TEST_CASE("q_sample_step: noiseless limit keeps the input") {
    auto x = random_mask(8, 8, 1);
    RngStream rng(42);
    auto y = q_sample_step(x, 1e-15, rng);
    CHECK(y.step == 1);
    CHECK(y.onehot.vec() == x.onehot.vec());
    // parameter vector equals x_prev within 1e-14 at this beta
    for (int64_t i = 0; i < x.onehot.size(); ++i) {
        const double param = 1e-15 / 2 + (1.0 - 1e-15) * double(x.onehot[i]);
        CHECK(std::abs(param - double(x.onehot[i])) < 1e-14);
    }
}

TEST_CASE("q_sample_step rejects boundary beta and malformed masks") {
    auto x = one_pixel(0);
    RngStream rng(1);
    CHECK_THROWS_AS(q_sample_step(x, 1.0, rng), std::runtime_error);
    CHECK_THROWS_AS(q_sample_step(x, 0.0, rng), std::runtime_error);
    MaskState bad = x;
    bad.onehot[0] = 1;
    bad.onehot[1] = 1;
    CHECK_THROWS_AS(q_sample_step(bad, 0.2, rng), std::runtime_error);
}

TEST_CASE("q_sample_step Monte Carlo matches the corruption parameter") {
    // class-0 pixel, beta=0.2: stay probability 1 - beta/2 = 0.9
    auto x = one_pixel(0);
    RngStream rng(2024);
    const int n = 100000;
    int stays = 0;
    for (int i = 0; i < n; ++i) {
        auto y = q_sample_step(x, 0.2, rng);
        stays += y.cls(0, 0) == 0 ? 1 : 0;
    }
    const double phat = double(stays) / n;
    CHECK(std::abs(phat - 0.9) < 0.003);  // +-3 sigma binomial
}

TEST_CASE("q_marginal_params evaluates the closed form") {
    // abar_1 = 0.5 via a single step of beta = 0.5
    auto s = NoiseSchedule::make_linear(1, 0.5, 0.5);
    auto f = q_marginal_params(one_pixel(0), 1, s);
    CHECK(f.p(0, 0, 0) == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(f.p(0, 0, 1) == doctest::Approx(0.25).epsilon(1e-15));

    // terminal prior: abar -> 0 gives the uniform field
    auto deep = NoiseSchedule::make_linear(40, 0.5, 0.9);
    auto g = q_marginal_params(one_pixel(1), 40, deep);
    CHECK(g.p(0, 0, 0) == doctest::Approx(0.5).epsilon(1e-10));

    CHECK_THROWS_AS(q_marginal_params(one_pixel(0), 0, s), std::runtime_error);
    CHECK_THROWS_AS(q_marginal_params(one_pixel(0), 2, s), std::runtime_error);
}

TEST_CASE("forward consistency: marginal equals composed single steps") {
    auto s = NoiseSchedule::make_linear(50, 0.01, 0.2);
    for (int cls = 0; cls < 2; ++cls)
        for (int t = 1; t <= 10; ++t) {
            const auto expect = oracle::marginal(cls, t, s);
            auto f = q_marginal_params(one_pixel(cls), t, s);
            CHECK(std::abs(f.p(0, 0, 0) - expect[0]) < 1e-12);
            CHECK(std::abs(f.p(0, 0, 1) - expect[1]) < 1e-12);
        }
}

TEST_CASE("posterior matches the frozen Bayes enumeration example") {
    // beta_t = 0.375 at t=2, abar_1 = 0.8: likelihood (0.8125, 0.1875)
    // against prior (0.9, 0.1) -> (0.975, 0.025) after normalization.
    auto s = NoiseSchedule::make_linear(2, 0.2, 0.375);
    auto post = posterior_params(one_pixel(0, 2), one_pixel(0), 2, s);
    CHECK(post.p(0, 0, 0) == doctest::Approx(0.975).epsilon(1e-12));
    CHECK(post.p(0, 0, 1) == doctest::Approx(0.025).epsilon(1e-12));
}

TEST_CASE("posterior equals brute-force enumeration for all combos and steps") {
    for (auto s : {NoiseSchedule::make_linear(50, 0.01, 0.2), NoiseSchedule::make_cosine(50, 0.008)})
        for (int t = 2; t <= 10; ++t)
            for (int xt = 0; xt < 2; ++xt)
                for (int x0 = 0; x0 < 2; ++x0) {
                    const auto expect = oracle::posterior(xt, x0, t, s);
                    auto got = posterior_params(one_pixel(xt, t), one_pixel(x0), t, s);
                    CHECK(std::abs(got.p(0, 0, 0) - expect[0]) < 1e-12);
                    CHECK(std::abs(got.p(0, 0, 1) - expect[1]) < 1e-12);
                }
}

TEST_CASE("posterior limit cases") {
    // abar_{t-1} = 1 is unreachable through valid schedules, but a tiny
    // first beta gets within float distance: posterior pins to x0.
    auto s = NoiseSchedule::make_linear(2, 1e-12, 0.3);
    auto post = posterior_params(one_pixel(1, 2), one_pixel(0), 2, s);
    CHECK(post.p(0, 0, 0) == doctest::Approx(1.0).epsilon(1e-9));

    // x_t = x0 and alpha_t -> 1: posterior -> one-hot at x0
    auto s2 = NoiseSchedule::make_linear(2, 1e-12, 2e-12);
    auto post2 = posterior_params(one_pixel(1, 2), one_pixel(1), 2, s2);
    CHECK(post2.p(0, 0, 1) == doctest::Approx(1.0).epsilon(1e-9));

    CHECK_THROWS_AS(posterior_params(one_pixel(0, 1), one_pixel(0), 1, s), std::runtime_error);
}

TEST_CASE("mixture collapses to the posterior under a one-hot prediction") {
    auto s = NoiseSchedule::make_linear(50, 0.01, 0.2);
    auto xt = random_mask(4, 4, 3, 5);
    auto x0 = random_mask(4, 4, 4);
    CategoricalField p0;
    p0.H = p0.W = 4;
    p0.probs = x0.onehot.cast<double>();
    auto mix = mixture_reverse_params(xt, p0, 5, s);
    auto post = posterior_params(xt, x0, 5, s);
    for (int64_t i = 0; i < mix.probs.size(); ++i)
        CHECK(std::abs(mix.probs[i] - post.probs[i]) < 1e-15);
}

TEST_CASE("mixture matches per-pixel enumeration on random inputs") {
    auto s = NoiseSchedule::make_linear(50, 0.01, 0.2);
    auto xt = random_mask(6, 6, 10, 5);
    auto p0 = random_field(6, 6, 11);
    auto mix = mixture_reverse_params(xt, p0, 5, s);
    for (int64_t p = 0; p < 36; ++p) {
        const auto expect = oracle::mixture(xt.onehot[p * 2 + 1],
                                            {p0.probs[p * 2], p0.probs[p * 2 + 1]}, 5, s);
        CHECK(std::abs(mix.probs[p * 2] - expect[0]) < 1e-12);
        CHECK(std::abs(mix.probs[p * 2 + 1] - expect[1]) < 1e-12);
    }
}

TEST_CASE("mixture under a washed-out prior still favors the observed state") {
    // With abar_{t-1} ~ 0 and a uniform prediction the posterior is driven
    // by the single-step likelihood alone: (1 - beta/2, beta/2) for the
    // observed class, not the uniform field. Held to the enumeration oracle.
    auto s = NoiseSchedule::make_linear(10, 0.5, 0.9);
    const int t = 10;
    CHECK(s.alpha_bar(t - 1) < 1e-3);
    auto mix = mixture_reverse_params(one_pixel(0, t), field_1px(0.5, 0.5), t, s);
    const auto expect = oracle::mixture(0, {0.5, 0.5}, t, s);
    CHECK(std::abs(mix.p(0, 0, 0) - expect[0]) < 1e-12);
    CHECK(mix.p(0, 0, 0) == doctest::Approx(1.0 - s.beta(t) / 2).epsilon(1e-6));
}

TEST_CASE("two-step chain law: posterior integrates back to the marginal") {
    // sum_j post(k | X_t=j, x0) * marg_t(j) == marg_{t-1}(k)
    for (auto s : {NoiseSchedule::make_linear(50, 0.01, 0.2), NoiseSchedule::make_cosine(50, 0.008)})
        for (int x0 = 0; x0 < 2; ++x0)
            for (int t = 2; t <= 10; ++t) {
                const auto mt = oracle::marginal(x0, t, s);
                const auto mprev = oracle::marginal(x0, t - 1, s);
                for (int k = 0; k < 2; ++k) {
                    double acc = 0;
                    for (int j = 0; j < 2; ++j) {
                        auto post = posterior_params(one_pixel(j, t), one_pixel(x0), t, s);
                        acc += post.p(0, 0, k) * mt[j];
                    }
                    CHECK(std::abs(acc - mprev[k]) < 1e-12);
                }
            }
}

TEST_CASE("terminal convergence supports dropping the prior KL term") {
    auto s = NoiseSchedule::make_linear(50, 0.01, 0.2);
    double worst = 0, kl = 0;
    for (int cls = 0; cls < 2; ++cls) {
        auto f = q_marginal_params(one_pixel(cls), 50, s);
        for (int c = 0; c < 2; ++c) worst = std::max(worst, std::abs(f.p(0, 0, c) - 0.5));
        double k = 0;
        for (int c = 0; c < 2; ++c) k += f.p(0, 0, c) * std::log(f.p(0, 0, c) / 0.5);
        kl = std::max(kl, k);
    }
    CHECK(worst < 0.005);
    CHECK(kl < 1e-4);  // nats per pixel
}

TEST_CASE("kl_loss is zero for a perfect prediction") {
    auto s = NoiseSchedule::make_linear(50, 0.01, 0.2);
    auto x0 = random_mask(8, 8, 20);
    auto xt = random_mask(8, 8, 21, 7);
    CategoricalField p0;
    p0.H = p0.W = 8;
    p0.probs = x0.onehot.cast<double>();
    CHECK(kl_loss(xt, x0, p0, 7, s).value < 1e-12);
}

TEST_CASE("kl_loss frozen scalar example") {
    // Schedule chosen so q(X_1|X_2,X_0) = (0.975, 0.025); the prediction
    // (7/26, 19/26) makes the reverse mixture exactly uniform, so
    // KL = 0.975 ln 1.95 + 0.025 ln 0.05 = 0.5762403.
    auto s = NoiseSchedule::make_linear(2, 0.2, 0.375);
    auto mix = mixture_reverse_params(one_pixel(0, 2), field_1px(7.0 / 26.0, 19.0 / 26.0), 2, s);
    CHECK(mix.p(0, 0, 0) == doctest::Approx(0.5).epsilon(1e-14));
    auto l = kl_loss(one_pixel(0, 2), one_pixel(0), field_1px(7.0 / 26.0, 19.0 / 26.0), 2, s);
    CHECK(l.branch == LossBranch::kl);
    CHECK(l.value == doctest::Approx(0.5762403).epsilon(1e-6));
}

TEST_CASE("kl_loss is nonnegative on random inputs") {
    auto s = NoiseSchedule::make_cosine(50, 0.008);
    RngStream rs(99);
    for (int i = 0; i < 1000; ++i) {
        const int t = 2 + int(rs.next_u64() % 49);
        auto x0 = random_mask(2, 2, rs.next_u64());
        auto xt = random_mask(2, 2, rs.next_u64(), t);
        auto p0 = random_field(2, 2, rs.next_u64());
        auto l = kl_loss(xt, x0, p0, t, s);
        CHECK(l.value >= 0.0);
        CHECK(std::isfinite(l.value));
    }
}

TEST_CASE("ce_loss examples") {
    auto x0 = one_pixel(1);
    CHECK(ce_loss(x0, field_1px(0.0, 1.0)).value <= 1e-11);  // floor only
    CHECK(ce_loss(x0, field_1px(0.5, 0.5)).value == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(ce_loss(x0, field_1px(0.9, 0.1)).value == doctest::Approx(-std::log(0.1)).epsilon(1e-12));
    CHECK(ce_loss(x0, field_1px(0.9, 0.1)).branch == LossBranch::ce);
}

TEST_CASE("gaussian baseline: mask mapping and exact noiseless forward") {
    auto x0 = MaskState::from_classes(1, 2, {0, 1});
    auto cont = gaussian_map_mask(x0);
    CHECK(cont[0] == -1.0);
    CHECK(cont[1] == 1.0);

    RngStream rng(5);
    auto noised = gaussian_forward_sample(cont, 1.0, rng);
    CHECK(noised[0] == -1.0);  // abar = 1: no noise, exact
    CHECK(noised[1] == 1.0);
}

TEST_CASE("gaussian baseline: perfect noise prediction gives zero loss") {
    RngStream rng(6);
    auto x0 = gaussian_map_mask(random_mask(4, 4, 30));
    Tensor<double> eps;
    auto xt = gaussian_forward_sample(x0, 0.37, rng, &eps);
    (void)xt;
    CHECK(gaussian_noise_mse(eps, eps).value == 0.0);
}

TEST_CASE("gaussian baseline: forward Monte Carlo mean matches the marginal") {
    Tensor<double> x0({1, 1, 1}, {1.0});
    RngStream rng(7);
    const int n = 100000;
    double acc = 0;
    for (int i = 0; i < n; ++i) acc += gaussian_forward_sample(x0, 0.5, rng)[0];
    const double mean = acc / n;
    const double want = std::sqrt(0.5);
    const double band = 3.0 * std::sqrt(0.5) / std::sqrt(double(n));
    CHECK(std::abs(mean - want) < band);
}
