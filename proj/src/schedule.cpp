#include "cbdiff/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace cbdiff {

std::string to_string(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "cosine"; }

ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "linear") return ScheduleKind::linear;
    if (s == "cosine") return ScheduleKind::cosine;
    throw std::runtime_error("unknown schedule kind '" + s + "' (expected linear|cosine)");
}

void NoiseSchedule::finalize() {
    alpha_bars_.assign(static_cast<size_t>(T_) + 1, 1.0);
    for (int t = 1; t <= T_; ++t) {
        const double beta = betas_[static_cast<size_t>(t - 1)];
        if (!(beta > 0.0 && beta < 1.0))
            throw std::runtime_error("schedule: beta_" + std::to_string(t) + "=" +
                                     std::to_string(beta) + " outside (0,1)");
        alpha_bars_[static_cast<size_t>(t)] = alpha_bars_[static_cast<size_t>(t - 1)] * (1.0 - beta);
    }
}

NoiseSchedule NoiseSchedule::make_linear(int T, double beta_start, double beta_end) {
    if (T < 1) throw std::runtime_error("schedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw std::runtime_error("schedule: need 0 < beta_start <= beta_end < 1, got start=" +
                                 std::to_string(beta_start) + " end=" + std::to_string(beta_end));
    NoiseSchedule s;
    s.kind_ = ScheduleKind::linear;
    s.T_ = T;
    s.beta_start_ = beta_start;
    s.beta_end_ = beta_end;
    s.betas_.resize(static_cast<size_t>(T));
    for (int t = 1; t <= T; ++t)
        s.betas_[static_cast<size_t>(t - 1)] =
            T > 1 ? beta_start + double(t - 1) / double(T - 1) * (beta_end - beta_start) : beta_start;
    s.finalize();
    return s;
}

NoiseSchedule NoiseSchedule::make_cosine(int T, double s_offset) {
    if (T < 1) throw std::runtime_error("schedule: T must be >= 1");
    if (!(s_offset > 0.0)) throw std::runtime_error("schedule: cosine offset s must be > 0");
    NoiseSchedule s;
    s.kind_ = ScheduleKind::cosine;
    s.T_ = T;
    s.s_ = s_offset;
    const double half_pi = 1.5707963267948966;
    auto g = [&](double t) {
        const double u = (t / double(T) + s_offset) / (1.0 + s_offset) * half_pi;
        const double c = std::cos(u);
        return c * c;
    };
    const double g0 = g(0.0);
    s.betas_.resize(static_cast<size_t>(T));
    double prev_bar = 1.0;
    for (int t = 1; t <= T; ++t) {
        const double bar = g(double(t)) / g0;
        double beta = 1.0 - bar / prev_bar;
        beta = std::min(std::max(beta, 1e-6), 0.999);
        s.betas_[static_cast<size_t>(t - 1)] = beta;
        prev_bar = bar;
    }
    s.finalize();
    return s;
}

nlohmann::json NoiseSchedule::to_json() const {
    nlohmann::json j;
    j["kind"] = to_string(kind_);
    j["T"] = T_;
    if (kind_ == ScheduleKind::linear) {
        j["beta_start"] = beta_start_;
        j["beta_end"] = beta_end_;
    } else {
        j["s"] = s_;
    }
    return j;
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
    const ScheduleKind kind = schedule_kind_from_string(j.at("kind").get<std::string>());
    const int T = j.at("T").get<int>();
    if (kind == ScheduleKind::linear)
        return make_linear(T, j.at("beta_start").get<double>(), j.at("beta_end").get<double>());
    return make_cosine(T, j.at("s").get<double>());
}

}  // namespace cbdiff
