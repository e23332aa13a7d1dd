#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepcox/baseline.hpp"
#include "deepcox/cph.hpp"

namespace deepcox {

namespace special {

// Wichura's AS241 (PPND16) inverse normal CDF, accurate to ~1e-15.
inline double norm_ppf(double p) {
  if (p <= 0 || p >= 1) throw std::invalid_argument("norm_ppf: p in (0,1)");
  const double q = p - 0.5;
  double r;
  if (std::fabs(q) <= 0.425) {
    r = 0.180625 - q * q;
    return q *
           (((((((2.5090809287301226727e+3 * r + 3.3430575583588128105e+4) * r +
                 6.7265770927008700853e+4) * r + 4.5921953931549871457e+4) * r +
               1.3731693765509461125e+4) * r + 1.9715909503065514427e+3) * r +
             1.3314166789178437745e+2) * r + 3.3871328727963666080e+0) /
           (((((((5.2264952788528545610e+3 * r + 2.8729085735721942674e+4) * r +
                 3.9307895800092710610e+4) * r + 2.1213794301586595867e+4) * r +
               5.3941960214247511077e+3) * r + 6.8718700749205790830e+2) * r +
             4.2313330701600911252e+1) * r + 1.0);
  }
  r = q < 0 ? p : 1 - p;
  r = std::sqrt(-std::log(r));
  double v;
  if (r <= 5.0) {
    r -= 1.6;
    v = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
              2.41780725177450611770e-1) * r + 1.27045825245236838258e+0) * r +
            3.64784832476320460504e+0) * r + 5.76949722146069140550e+0) * r +
          4.63033784615654529590e+0) * r + 1.42343711074968357734e+0) /
        (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
              1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r +
            6.89767334985100004550e-1) * r + 1.67638483018380384940e+0) * r +
          2.05319162663775882187e+0) * r + 1.0);
  } else {
    r -= 5.0;
    v = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
              1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r +
            2.96560571828504891230e-1) * r + 1.78482653991729133580e+0) * r +
          5.46378491116411436990e+0) * r + 6.65790464350110377720e+0) /
        (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
              1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r +
            1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r +
          5.99832206555887937690e-1) * r + 1.0);
  }
  return q < 0 ? -v : v;
}

// Regularised incomplete beta by Lentz's continued fraction.
inline double betacf(double a, double b, double x) {
  const int max_iter = 300;
  const double eps = 3e-15, fpmin = 1e-300;
  double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::fabs(d) < fpmin) d = fpmin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= max_iter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < eps) break;
  }
  return h;
}

inline double betainc(double a, double b, double x) {
  if (x <= 0) return 0;
  if (x >= 1) return 1;
  const double ln_bt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                       a * std::log(x) + b * std::log1p(-x);
  const double bt = std::exp(ln_bt);
  if (x < (a + 1.0) / (a + b + 2.0)) return bt * betacf(a, b, x) / a;
  return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

// Upper tail of the F(d1, d2) distribution.
inline double f_sf(double f, double d1, double d2) {
  if (f <= 0) return 1.0;
  const double x = d2 / (d2 + d1 * f);
  return betainc(d2 / 2.0, d1 / 2.0, x);
}

}  // namespace special

// Kaplan-Meier estimate of the survival function of the outcome; flip the
// event indicator to estimate the censoring distribution instead.
inline SurvivalCurve kaplan_meier(const std::vector<double>& times,
                                  const std::vector<std::uint8_t>& events) {
  const std::size_t n = times.size();
  if (events.size() != n)
    throw std::invalid_argument("kaplan_meier: misaligned inputs");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return times[a] < times[b]; });
  SurvivalCurve s;
  double surv = 1.0;
  std::size_t k = 0;
  std::size_t at_risk = n;
  while (k < n) {
    const double t = times[order[k]];
    std::size_t d = 0, removed = 0;
    while (k < n && times[order[k]] == t) {
      if (events[order[k]]) ++d;
      ++removed;
      ++k;
    }
    if (d > 0) {
      surv *= 1.0 - static_cast<double>(d) / static_cast<double>(at_risk);
      s.days.push_back(t);
      s.survival.push_back(surv);
    }
    at_risk -= removed;
  }
  return s;
}

namespace detail {

// Fenwick tree over compressed prediction ranks; counts pairs exactly.
class Bit {
 public:
  explicit Bit(std::size_t n) : tree_(n + 1, 0) {}
  void add(std::size_t i) {
    for (++i; i < tree_.size(); i += i & (~i + 1)) ++tree_[i];
  }
  // count of inserted items with rank < i
  long long below(std::size_t i) const {
    long long s = 0;
    for (; i > 0; i -= i & (~i + 1)) s += tree_[i];
    return s;
  }

 private:
  std::vector<long long> tree_;
};

struct PairCounts {
  long long comparable = 0;
  long long concordant = 0;
  long long tied = 0;
};

}  // namespace detail

// Harrell's C with exact integer pair counting in O(n log n).  A pair is
// comparable when the subject with the smaller time had an event, or on a
// time tie when exactly the event subject is compared against a censored
// one; tied predictions count one half.
inline double harrell_c(const std::vector<double>& g,
                        const std::vector<double>& times,
                        const std::vector<std::uint8_t>& events) {
  const std::size_t n = g.size();
  if (times.size() != n || events.size() != n)
    throw std::invalid_argument("harrell_c: misaligned inputs");

  std::vector<double> sorted_g = g;
  std::sort(sorted_g.begin(), sorted_g.end());
  sorted_g.erase(std::unique(sorted_g.begin(), sorted_g.end()),
                 sorted_g.end());
  auto rank_of = [&](double v) {
    return static_cast<std::size_t>(
        std::lower_bound(sorted_g.begin(), sorted_g.end(), v) -
        sorted_g.begin());
  };

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return times[a] > times[b]; });

  detail::Bit bit(sorted_g.size());
  long long inserted = 0;
  detail::PairCounts pc;
  std::size_t k = 0;
  while (k < n) {
    const double t = times[order[k]];
    std::size_t start = k;
    while (k < n && times[order[k]] == t) ++k;
    // censored subjects at t are comparable with events at t, so they enter
    // the tree first; events at t never pair with each other
    for (std::size_t i = start; i < k; ++i) {
      const std::size_t idx = order[i];
      if (!events[idx]) {
        bit.add(rank_of(g[idx]));
        ++inserted;
      }
    }
    for (std::size_t i = start; i < k; ++i) {
      const std::size_t idx = order[i];
      if (!events[idx]) continue;
      const std::size_t r = rank_of(g[idx]);
      const long long lower = bit.below(r);        // g_j < g_i: concordant
      const long long lower_eq = bit.below(r + 1);  // g_j <= g_i
      pc.comparable += inserted;
      pc.concordant += lower;
      pc.tied += lower_eq - lower;
    }
    for (std::size_t i = start; i < k; ++i) {
      const std::size_t idx = order[i];
      if (events[idx]) {
        bit.add(rank_of(g[idx]));
        ++inserted;
      }
    }
  }
  if (pc.comparable == 0)
    throw std::runtime_error("harrell_c: no comparable pairs");
  return (2.0 * static_cast<double>(pc.concordant) +
          static_cast<double>(pc.tied)) /
         (2.0 * static_cast<double>(pc.comparable));
}

// Blom normal scores with midranks for ties.
inline std::vector<double> blom_scores(const std::vector<double>& g) {
  const std::size_t n = g.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return g[a] < g[b]; });
  std::vector<double> rank(n, 0.0);
  std::size_t k = 0;
  while (k < n) {
    std::size_t j = k;
    while (j < n && g[order[j]] == g[order[k]]) ++j;
    const double mid = 0.5 * (static_cast<double>(k + 1) + static_cast<double>(j));
    for (std::size_t i = k; i < j; ++i) rank[order[i]] = mid;
    k = j;
  }
  std::vector<double> z(n);
  for (std::size_t i = 0; i < n; ++i)
    z[i] = special::norm_ppf((rank[i] - 0.375) / (static_cast<double>(n) + 0.25));
  return z;
}

inline constexpr double kappa_d() { return 1.5957691216057307117;  /* sqrt(8/pi) */ }

// Royston & Sauerbrei's D: the Cox coefficient of the scaled normal scores
// of the prognostic index.  A constant index carries no ordering information
// and returns 0 by convention.
inline double d_statistic(const std::vector<double>& g,
                          const std::vector<double>& times,
                          const std::vector<std::uint8_t>& events) {
  const std::size_t n = g.size();
  if (n < 4) throw std::invalid_argument("d_statistic: need n >= 4");
  std::size_t n_events = 0;
  for (std::uint8_t e : events) n_events += e != 0;
  if (n_events < 2) throw std::invalid_argument("d_statistic: need >= 2 events");
  bool constant = true;
  for (std::size_t i = 1; i < n; ++i) constant &= g[i] == g[0];
  if (constant) return 0.0;

  std::vector<double> z = blom_scores(g);
  for (double& v : z) v /= kappa_d();
  CphModel fit = fit_cph(z, n, 1, times, events, TieMethod::efron);
  return fit.beta[0];
}

// Explained variation from D: R2 = (D^2/k^2) / (pi^2/6 + D^2/k^2), k^2 = 8/pi.
inline double r_squared_from_d(double d) {
  const double k2 = 8.0 / 3.14159265358979323846;
  const double s2 = d * d / k2;
  const double pi2_6 = 3.14159265358979323846 * 3.14159265358979323846 / 6.0;
  return s2 / (pi2_6 + s2);
}

// Graf's IPCW Brier score at time t for predicted event probabilities at t.
// Subjects with an observed event before t weigh 1/G(T-); subjects still at
// risk at t weigh 1/G(t); censored-before-t subjects contribute nothing.
inline double brier_ipcw(double t, const std::vector<double>& predicted,
                         const std::vector<double>& times,
                         const std::vector<std::uint8_t>& events,
                         bool ipcw = true) {
  const std::size_t n = predicted.size();
  if (times.size() != n || events.size() != n)
    throw std::invalid_argument("brier: misaligned inputs");
  std::vector<std::uint8_t> censor_ind(n);
  for (std::size_t i = 0; i < n; ++i) censor_ind[i] = events[i] ? 0 : 1;
  const SurvivalCurve g_hat = kaplan_meier(times, censor_ind);

  auto g_left = [&](double u) {
    // left limit: steps strictly before u
    return g_hat.at(std::nextafter(u, -1.0));
  };

  const double g_t = ipcw ? g_hat.at(t) : 1.0;
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (times[i] <= t && events[i]) {
      const double w = ipcw ? g_left(times[i]) : 1.0;
      if (w <= 0)
        throw std::runtime_error("brier: no censoring support at t");
      total += (1.0 - predicted[i]) * (1.0 - predicted[i]) / w;
    } else if (times[i] > t) {
      if (g_t <= 0)
        throw std::runtime_error("brier: no censoring support at t");
      total += predicted[i] * predicted[i] / g_t;
    }
  }
  return total / static_cast<double>(n);
}

// Time-averaged Brier score over [0, horizon]: trapezoids between the grid
// points (the distinct event times), constant extension to the endpoints.
// With a single grid point this collapses to the score at that time.
inline double integrated_brier(const std::vector<double>& grid,
                               const std::vector<double>& brier_values,
                               double horizon) {
  if (grid.empty() || grid.size() != brier_values.size())
    throw std::invalid_argument("integrated_brier: bad grid");
  if (grid.size() == 1) return brier_values[0];
  double integral = brier_values.front() * grid.front();
  for (std::size_t i = 0; i + 1 < grid.size(); ++i)
    integral += 0.5 * (brier_values[i] + brier_values[i + 1]) *
                (grid[i + 1] - grid[i]);
  integral += brier_values.back() * (horizon - grid.back());
  return integral / horizon;
}

inline std::vector<double> event_time_grid(const std::vector<double>& times,
                                           const std::vector<std::uint8_t>& events,
                                           double horizon) {
  std::vector<double> grid;
  for (std::size_t i = 0; i < times.size(); ++i)
    if (events[i] && times[i] <= horizon) grid.push_back(times[i]);
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  return grid;
}

// Convenience: IPCW Brier over the event-time grid, integrated to horizon.
// Predictions come from a survival curve: p_i(t) = 1 - S0(t)^exp(g_i - g_ref).
inline double integrated_brier_from_curve(const std::vector<double>& g,
                                          double g_ref,
                                          const SurvivalCurve& s0,
                                          const std::vector<double>& times,
                                          const std::vector<std::uint8_t>& events,
                                          double horizon, bool ipcw = true) {
  const std::vector<double> grid = event_time_grid(times, events, horizon);
  if (grid.empty()) throw std::runtime_error("integrated_brier: no event times");
  std::vector<double> bs(grid.size());
  std::vector<double> pred(g.size());
  for (std::size_t k = 0; k < grid.size(); ++k) {
    for (std::size_t i = 0; i < g.size(); ++i)
      pred[i] = risk_at(g[i], g_ref, s0, grid[k]);
    bs[k] = brier_ipcw(grid[k], pred, times, events, ipcw);
  }
  return integrated_brier(grid, bs, horizon);
}

struct CalibrationDecile {
  int decile = 0;  // 1..10 ascending by predicted risk
  double mean_predicted = 0;
  double observed = 0;  // 1 - KM(horizon) within the decile
  std::size_t n = 0;
  std::size_t observed_events = 0;  // events by horizon
};

struct DiscriminationDecile {
  int decile = 0;
  double event_share = 0;  // share of all observed events
  std::size_t events = 0;
};

// Left-closed decile bins by predicted risk, ties broken by stable person
// order so reruns bin identically.
inline std::vector<std::size_t> decile_assignment(
    const std::vector<double>& predicted) {
  const std::size_t n = predicted.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return predicted[a] < predicted[b];
  });
  std::vector<std::size_t> bin(n, 0);
  for (std::size_t r = 0; r < n; ++r) bin[order[r]] = (r * 10) / n;
  return bin;
}

inline std::vector<CalibrationDecile> calibration_deciles(
    const std::vector<double>& predicted, const std::vector<double>& times,
    const std::vector<std::uint8_t>& events, double horizon) {
  const std::size_t n = predicted.size();
  if (n < 10) throw std::invalid_argument("calibration_deciles: need n >= 10");
  if (times.size() != n || events.size() != n)
    throw std::invalid_argument("calibration_deciles: misaligned inputs");
  const std::vector<std::size_t> bin = decile_assignment(predicted);
  std::vector<CalibrationDecile> rows(10);
  for (int d = 0; d < 10; ++d) rows[d].decile = d + 1;
  std::vector<std::vector<double>> t_bin(10);
  std::vector<std::vector<std::uint8_t>> e_bin(10);
  for (std::size_t i = 0; i < n; ++i) {
    CalibrationDecile& r = rows[bin[i]];
    r.mean_predicted += predicted[i];
    r.n += 1;
    if (events[i] && times[i] <= horizon) r.observed_events += 1;
    t_bin[bin[i]].push_back(times[i]);
    e_bin[bin[i]].push_back(events[i]);
  }
  for (int d = 0; d < 10; ++d) {
    CalibrationDecile& r = rows[d];
    if (r.n == 0) continue;
    r.mean_predicted /= static_cast<double>(r.n);
    const SurvivalCurve km = kaplan_meier(t_bin[d], e_bin[d]);
    r.observed = 1.0 - km.at(horizon);
  }
  return rows;
}

inline std::vector<DiscriminationDecile> discrimination_deciles(
    const std::vector<double>& predicted, const std::vector<double>& times,
    const std::vector<std::uint8_t>& events, double horizon) {
  const std::size_t n = predicted.size();
  if (n < 10)
    throw std::invalid_argument("discrimination_deciles: need n >= 10");
  const std::vector<std::size_t> bin = decile_assignment(predicted);
  std::vector<DiscriminationDecile> rows(10);
  std::size_t total = 0;
  for (int d = 0; d < 10; ++d) rows[d].decile = d + 1;
  for (std::size_t i = 0; i < n; ++i) {
    if (events[i] && times[i] <= horizon) {
      rows[bin[i]].events += 1;
      ++total;
    }
  }
  for (auto& r : rows)
    r.event_share =
        total == 0 ? 0.0
                   : static_cast<double>(r.events) / static_cast<double>(total);
  return rows;
}

struct MetricsReport {
  double r_squared = 0;
  double d_statistic = 0;
  double harrell_c = 0;
  double integrated_brier = 0;
  std::vector<CalibrationDecile> calibration;
  std::vector<DiscriminationDecile> discrimination;
};

struct FTestResult {
  double f = 0;
  double p_value = 1;
};

// Combined 5x2cv F test: F = sum of the ten squared differences over twice
// the sum of the five per-replication variances, referred to F(10, 5).
inline FTestResult f_test_5x2(const std::vector<std::array<double, 2>>& p) {
  if (p.size() != 5) throw std::invalid_argument("f_test_5x2: need 5x2 values");
  double num = 0, var_sum = 0;
  for (const auto& rep : p) {
    if (!std::isfinite(rep[0]) || !std::isfinite(rep[1]))
      throw std::invalid_argument("f_test_5x2: non-finite difference");
    const double mean = 0.5 * (rep[0] + rep[1]);
    var_sum += (rep[0] - mean) * (rep[0] - mean) +
               (rep[1] - mean) * (rep[1] - mean);
    num += rep[0] * rep[0] + rep[1] * rep[1];
  }
  if (var_sum == 0) throw std::runtime_error("f_test_5x2: degenerate variance");
  FTestResult r;
  r.f = num / (2.0 * var_sum);
  r.p_value = special::f_sf(r.f, 10.0, 5.0);
  return r;
}

}  // namespace deepcox
