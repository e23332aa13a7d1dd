#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <vector>

namespace deepcox {

// Right-continuous survival step function with S(t) = 1 before the first
// step.  `days` are the distinct step times in ascending order; `survival[i]`
// is the value from days[i] onwards.
struct SurvivalCurve {
  std::vector<double> days;
  std::vector<double> survival;

  double at(double t) const {
    // last step time <= t
    std::size_t lo = std::upper_bound(days.begin(), days.end(), t) - days.begin();
    return lo == 0 ? 1.0 : survival[lo - 1];
  }
  bool empty() const { return days.empty(); }
};

// Breslow estimator of the baseline survival anchored at a reference log
// relative risk: H0(t) = sum over event times t_i <= t of
// d_i / sum_{j at risk} exp(g_j - g_ref), S0(t) = exp(-H0(t)).
inline SurvivalCurve breslow_baseline(const std::vector<double>& g_all,
                                      const std::vector<double>& times,
                                      const std::vector<std::uint8_t>& events,
                                      double g_ref) {
  const std::size_t n = times.size();
  if (g_all.size() != n || events.size() != n)
    throw std::invalid_argument("breslow_baseline: misaligned inputs");
  bool any_event = false;
  for (std::uint8_t e : events) any_event |= e != 0;
  if (!any_event) throw std::runtime_error("breslow_baseline: no events");

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return times[a] > times[b];
  });

  // accumulate risk-set denominators from the largest time down
  std::map<double, std::pair<double, double>> at_events;  // t -> (d, denom)
  double denom = 0;
  std::size_t k = 0;
  while (k < n) {
    const double t = times[order[k]];
    double d = 0;
    while (k < n && times[order[k]] == t) {
      denom += std::exp(g_all[order[k]] - g_ref);
      if (events[order[k]]) d += 1;
      ++k;
    }
    if (d > 0) at_events[t] = {d, denom};
  }

  SurvivalCurve s0;
  double h0 = 0;
  for (const auto& [t, dd] : at_events) {
    h0 += dd.first / dd.second;
    s0.days.push_back(t);
    s0.survival.push_back(std::exp(-h0));
  }
  return s0;
}

// Event probability by the horizon for a subject with log relative risk g.
inline double five_year_risk(double g, double g_ref, const SurvivalCurve& s0,
                             double horizon_days) {
  return 1.0 - std::pow(s0.at(horizon_days), std::exp(g - g_ref));
}

inline double risk_at(double g, double g_ref, const SurvivalCurve& s0,
                      double t) {
  return 1.0 - std::pow(s0.at(t), std::exp(g - g_ref));
}

}  // namespace deepcox
