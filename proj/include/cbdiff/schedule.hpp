#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace cbdiff {

enum class ScheduleKind { linear, cosine };

std::string to_string(ScheduleKind k);
ScheduleKind schedule_kind_from_string(const std::string& s);

// Noise schedule for the diffusion chain: per-step corruption rates
// beta_t, retention alpha_t = 1 - beta_t and cumulative retention
// alpha_bar_t = prod alpha_i. Immutable after construction.
class NoiseSchedule {
  public:
    static NoiseSchedule make_linear(int T, double beta_start, double beta_end);
    static NoiseSchedule make_cosine(int T, double s);

    ScheduleKind kind() const { return kind_; }
    int steps() const { return T_; }
    double beta_start() const { return beta_start_; }
    double beta_end() const { return beta_end_; }
    double cosine_s() const { return s_; }

    // t in 1..T
    double beta(int t) const { return betas_.at(static_cast<size_t>(t - 1)); }
    double alpha(int t) const { return 1.0 - beta(t); }
    // t in 0..T, alpha_bar(0) == 1
    double alpha_bar(int t) const { return alpha_bars_.at(static_cast<size_t>(t)); }

    const std::vector<double>& betas() const { return betas_; }

    nlohmann::json to_json() const;
    static NoiseSchedule from_json(const nlohmann::json& j);

  private:
    NoiseSchedule() = default;
    void finalize();  // derives alphas/alpha_bars from betas and validates

    ScheduleKind kind_ = ScheduleKind::linear;
    int T_ = 0;
    double beta_start_ = 0, beta_end_ = 0, s_ = 0;
    std::vector<double> betas_;
    std::vector<double> alpha_bars_;  // index 0..T
};

}  // namespace cbdiff
