#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepcox/baseline.hpp"
#include "deepcox/cohort.hpp"

namespace deepcox {

enum class TieMethod { efron, breslow };

struct CphModel {
  std::vector<double> beta;        // length P
  std::vector<double> covariance;  // P x P row-major, inverse observed information
  SurvivalCurve baseline;          // at the reference covariates (zero vector)
  CentringSpec centring;
  long horizon_days = 1826;
  double log_likelihood = 0;
  int iterations = 0;
  std::vector<double> ll_trace;  // accepted Newton iterations

  double se(std::size_t k) const {
    return std::sqrt(covariance[k * beta.size() + k]);
  }
};

struct HazardRatioRow {
  std::string predictor;
  double beta = 0;
  double se = 0;
  double hr = 1;
  double ci_low = 1;
  double ci_high = 1;
};

namespace detail {

// Cholesky factorisation of a symmetric positive definite matrix; P is small
// (at most a few dozen), so dense loops are plenty.
inline bool cholesky(const std::vector<double>& a, std::size_t p,
                     std::vector<double>& l) {
  l.assign(p * p, 0.0);
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = a[i * p + j];
      for (std::size_t k = 0; k < j; ++k) s -= l[i * p + k] * l[j * p + k];
      if (i == j) {
        if (s <= 0 || !std::isfinite(s)) return false;
        l[i * p + i] = std::sqrt(s);
      } else {
        l[i * p + j] = s / l[j * p + j];
      }
    }
  }
  return true;
}

inline std::vector<double> chol_solve(const std::vector<double>& l,
                                      std::size_t p, std::vector<double> b) {
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t k = 0; k < i; ++k) b[i] -= l[i * p + k] * b[k];
    b[i] /= l[i * p + i];
  }
  for (std::size_t ii = p; ii-- > 0;) {
    for (std::size_t k = ii + 1; k < p; ++k) b[ii] -= l[k * p + ii] * b[k];
    b[ii] /= l[ii * p + ii];
  }
  return b;
}

inline std::vector<double> chol_inverse(const std::vector<double>& l,
                                        std::size_t p) {
  std::vector<double> inv(p * p, 0.0);
  for (std::size_t c = 0; c < p; ++c) {
    std::vector<double> e(p, 0.0);
    e[c] = 1.0;
    std::vector<double> x = chol_solve(l, p, std::move(e));
    for (std::size_t r = 0; r < p; ++r) inv[r * p + c] = x[r];
  }
  for (std::size_t r = 0; r < p; ++r)
    for (std::size_t c = r + 1; c < p; ++c) {
      double v = 0.5 * (inv[r * p + c] + inv[c * p + r]);
      inv[r * p + c] = inv[c * p + r] = v;
    }
  return inv;
}

struct CoxWork {
  double ll = 0;
  std::vector<double> score;
  std::vector<double> info;  // observed information (negative Hessian)
};

// Partial log-likelihood, score and information in one sweep from the
// largest time down.  Tied event times use Efron's correction: the j-th of d
// tied events sees the risk-set sums reduced by (j/d) of the tied events'
// own contributions; Breslow applies no reduction.
inline CoxWork cox_accumulate(const std::vector<double>& x, std::size_t n,
                              std::size_t p, const std::vector<double>& times,
                              const std::vector<std::uint8_t>& events,
                              const std::vector<double>& beta, TieMethod ties,
                              const std::vector<std::size_t>& order_desc,
                              bool want_derivatives) {
  CoxWork w;
  w.score.assign(p, 0.0);
  w.info.assign(p * p, 0.0);

  double s0 = 0;
  std::vector<double> s1(p, 0.0), s2(p * p, 0.0);
  std::vector<double> d1(p, 0.0), d2(p * p, 0.0), xsum(p, 0.0), r1(p, 0.0);

  std::size_t k = 0;
  while (k < n) {
    const double t = times[order_desc[k]];
    double d0 = 0;       // tied event count
    double dsum0 = 0;    // sum of exp(eta) over tied events
    double eta_sum = 0;  // sum of eta over tied events
    std::fill(d1.begin(), d1.end(), 0.0);
    std::fill(xsum.begin(), xsum.end(), 0.0);
    if (want_derivatives) std::fill(d2.begin(), d2.end(), 0.0);
    while (k < n && times[order_desc[k]] == t) {
      const std::size_t i = order_desc[k];
      const double* xi = &x[i * p];
      double eta = 0;
      for (std::size_t a = 0; a < p; ++a) eta += beta[a] * xi[a];
      const double r = std::exp(eta);
      s0 += r;
      for (std::size_t a = 0; a < p; ++a) s1[a] += r * xi[a];
      if (want_derivatives)
        for (std::size_t a = 0; a < p; ++a)
          for (std::size_t b = 0; b <= a; ++b)
            s2[a * p + b] += r * xi[a] * xi[b];
      if (events[i]) {
        d0 += 1;
        dsum0 += r;
        eta_sum += eta;
        for (std::size_t a = 0; a < p; ++a) {
          xsum[a] += xi[a];
          d1[a] += r * xi[a];
        }
        if (want_derivatives)
          for (std::size_t a = 0; a < p; ++a)
            for (std::size_t b = 0; b <= a; ++b)
              d2[a * p + b] += r * xi[a] * xi[b];
      }
      ++k;
    }
    if (d0 == 0) continue;
    w.ll += eta_sum;
    const int d_int = static_cast<int>(d0);
    for (int j = 0; j < d_int; ++j) {
      const double f =
          ties == TieMethod::efron ? static_cast<double>(j) / d0 : 0.0;
      const double denom = s0 - f * dsum0;
      w.ll -= std::log(denom);
      if (!want_derivatives) continue;
      for (std::size_t a = 0; a < p; ++a) r1[a] = (s1[a] - f * d1[a]) / denom;
      for (std::size_t a = 0; a < p; ++a) {
        w.score[a] += xsum[a] / d0 - r1[a];
        for (std::size_t b = 0; b <= a; ++b) {
          const double r2 = (s2[a * p + b] - f * d2[a * p + b]) / denom;
          w.info[a * p + b] += r2 - r1[a] * r1[b];
        }
      }
    }
  }
  if (want_derivatives)
    for (std::size_t a = 0; a < p; ++a)
      for (std::size_t b = a + 1; b < p; ++b)
        w.info[a * p + b] = w.info[b * p + a];
  return w;
}

}  // namespace detail

// Newton-Raphson maximisation of the Cox partial likelihood with
// step-halving when a step decreases the likelihood.  Convergence once the
// score is flat (max |score| < 1e-8) or the relative likelihood change drops
// below 1e-10.  Monotone likelihood (separation) and non-convergence are
// surfaced as errors rather than silently regularised.
inline CphModel fit_cph(const std::vector<double>& x, std::size_t n,
                        std::size_t p, const std::vector<double>& times,
                        const std::vector<std::uint8_t>& events,
                        TieMethod ties = TieMethod::efron, int max_iter = 50) {
  if (x.size() != n * p || times.size() != n || events.size() != n)
    throw std::invalid_argument("fit_cph: misaligned inputs");
  if (n <= p) throw std::invalid_argument("fit_cph: need n > P");
  std::size_t n_events = 0;
  for (std::uint8_t e : events) n_events += e != 0;
  if (n_events == 0) throw std::runtime_error("fit_cph: no events");

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return times[a] > times[b];
  });

  CphModel model;
  model.beta.assign(p, 0.0);
  std::vector<double> beta = model.beta;

  detail::CoxWork cur =
      detail::cox_accumulate(x, n, p, times, events, beta, ties, order, true);
  model.ll_trace.push_back(cur.ll);
  std::vector<double> l;
  std::string trace;
  int it = 0;
  for (; it < max_iter; ++it) {
    double score_max = 0;
    for (double s : cur.score) score_max = std::max(score_max, std::fabs(s));
    if (score_max < 1e-8) break;

    if (!detail::cholesky(cur.info, p, l))
      throw std::runtime_error(
          "fit_cph: information matrix not positive definite");
    std::vector<double> step = detail::chol_solve(l, p, cur.score);

    // step-halving on likelihood decrease
    double scale = 1.0;
    detail::CoxWork next;
    std::vector<double> cand(p);
    bool accepted = false;
    for (int h = 0; h < 30; ++h) {
      for (std::size_t a = 0; a < p; ++a) cand[a] = beta[a] + scale * step[a];
      next = detail::cox_accumulate(x, n, p, times, events, cand, ties, order,
                                    true);
      if (std::isfinite(next.ll) && next.ll >= cur.ll - 1e-13) {
        accepted = true;
        break;
      }
      scale *= 0.5;
    }
    if (!accepted)
      throw std::runtime_error(
          "fit_cph: step-halving failed at iteration " + std::to_string(it));

    const double rel = std::fabs(next.ll - cur.ll) /
                       std::max(1.0, std::fabs(cur.ll));
    beta = cand;
    cur = next;
    model.ll_trace.push_back(cur.ll);
    trace += (trace.empty() ? "" : ", ") + std::to_string(cur.ll);

    // a coefficient drifting past 15 (hazard ratio > 3e6) means the
    // likelihood is monotone in that direction: the score shrinks like
    // exp(-|beta|) and Newton would otherwise "converge" at an arbitrary
    // point on the plateau
    for (std::size_t a = 0; a < p; ++a)
      if (std::fabs(beta[a]) > 15.0)
        throw std::runtime_error(
            "fit_cph: monotone likelihood (separation) on covariate " +
            std::to_string(a));
    if (rel < 1e-10) {
      ++it;
      break;
    }
  }
  if (it >= max_iter)
    throw std::runtime_error(
        "fit_cph: no convergence after " + std::to_string(max_iter) +
        " iterations; log-likelihood trace: " + trace);

  if (!detail::cholesky(cur.info, p, l))
    throw std::runtime_error(
        "fit_cph: information matrix not positive definite at optimum");
  model.beta = beta;
  model.covariance = detail::chol_inverse(l, p);
  model.log_likelihood = cur.ll;
  model.iterations = it;

  // Breslow baseline at the reference covariates (g_ref = 0)
  std::vector<double> g(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double eta = 0;
    for (std::size_t a = 0; a < p; ++a) eta += beta[a] * x[i * p + a];
    g[i] = eta;
  }
  model.baseline = breslow_baseline(g, times, events, 0.0);
  return model;
}

inline double cph_partial_loglik(const std::vector<double>& x, std::size_t n,
                                 std::size_t p,
                                 const std::vector<double>& times,
                                 const std::vector<std::uint8_t>& events,
                                 const std::vector<double>& beta,
                                 TieMethod ties = TieMethod::efron) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return times[a] > times[b];
  });
  return detail::cox_accumulate(x, n, p, times, events, beta, ties, order,
                                false)
      .ll;
}

inline std::vector<HazardRatioRow> hazard_ratios(
    const CphModel& model,
    const std::vector<std::string>& names = std::vector<std::string>()) {
  std::vector<HazardRatioRow> rows;
  for (std::size_t k = 0; k < model.beta.size(); ++k) {
    HazardRatioRow r;
    r.predictor = k < names.size()
                      ? names[k]
                      : (k < kPredictorDim ? kPredictorNames[k]
                                           : "x" + std::to_string(k));
    r.beta = model.beta[k];
    r.se = model.se(k);
    r.hr = std::exp(r.beta);
    r.ci_low = std::exp(r.beta - 1.96 * r.se);
    r.ci_high = std::exp(r.beta + 1.96 * r.se);
    rows.push_back(std::move(r));
  }
  return rows;
}

struct CphPrediction {
  double g = 0;
  double five_year_risk = 0;
};

inline CphPrediction cph_predict(const CphModel& model,
                                 const PredictorVector& x) {
  if (x.size() != model.beta.size())
    throw std::invalid_argument("cph_predict: vector length mismatch");
  CphPrediction out;
  for (std::size_t k = 0; k < x.size(); ++k) out.g += model.beta[k] * x[k];
  out.five_year_risk = five_year_risk(out.g, 0.0, model.baseline,
                                      static_cast<double>(model.horizon_days));
  return out;
}

}  // namespace deepcox
