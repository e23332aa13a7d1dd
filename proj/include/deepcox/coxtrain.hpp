#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepcox/autodiff.hpp"
#include "deepcox/baseline.hpp"
#include "deepcox/cohort.hpp"
#include "deepcox/risknet.hpp"

namespace deepcox {

struct TrainConfig {
  std::size_t batch_cases = 256;
  std::size_t epochs = 10;
  double learning_rate = 0.001;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t ensemble_size = 10;
  std::uint64_t seed = 1;

  void validate() const {
    if (batch_cases == 0 || learning_rate <= 0 || adam_eps <= 0 ||
        ensemble_size == 0 || adam_beta1 <= 0 || adam_beta1 >= 1 ||
        adam_beta2 <= 0 || adam_beta2 >= 1)
      throw std::invalid_argument("TrainConfig: invalid values");
  }
};

struct EncodedPerson {
  CodeSequence seq;
  PredictorVector x;
  double time = 0;
  bool event = false;
};

struct EncodedCohort {
  std::vector<EncodedPerson> persons;
  CentringSpec centring;
  std::vector<std::string> vocab_codes;
  long horizon_days = 1826;
};

inline EncodedCohort encode_cohort(const Cohort& cohort, const Vocabulary& vocab,
                                   const CentringSpec& centring,
                                   std::size_t max_seq_len = 100) {
  EncodedCohort out;
  out.centring = centring;
  out.vocab_codes = vocab.codes;
  out.horizon_days = cohort.horizon_days;
  out.persons.reserve(cohort.persons.size());
  for (const Person& p : cohort.persons) {
    EncodedPerson e;
    e.seq = encode_history(p, vocab, cohort, max_seq_len);
    e.x = predictor_vector(p, centring);
    e.time = static_cast<double>(p.outcome_days);
    e.event = p.outcome_event;
    out.persons.push_back(std::move(e));
  }
  return out;
}

// Risk sets as prefixes of the persons sorted by descending follow-up time:
// everyone with t_j >= t_i is at risk at event time t_i, ties included.
struct RiskSets {
  std::vector<std::uint32_t> order_desc;  // person indices, time descending
  std::vector<std::uint32_t> cases;       // person indices with an event
  std::vector<std::uint32_t> prefix;      // per case: members of its risk set

  std::vector<std::uint32_t> members(std::size_t case_k) const {
    return {order_desc.begin(), order_desc.begin() + prefix[case_k]};
  }
};

inline RiskSets build_risk_sets(const std::vector<double>& times,
                                const std::vector<std::uint8_t>& events) {
  const std::size_t n = times.size();
  if (events.size() != n)
    throw std::invalid_argument("build_risk_sets: misaligned inputs");
  RiskSets rs;
  rs.order_desc.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    rs.order_desc[i] = static_cast<std::uint32_t>(i);
  std::stable_sort(rs.order_desc.begin(), rs.order_desc.end(),
                   [&](std::uint32_t a, std::uint32_t b) {
                     return times[a] > times[b];
                   });
  // prefix length for time t: count of persons with time >= t
  std::vector<double> sorted_desc(n);
  for (std::size_t i = 0; i < n; ++i) sorted_desc[i] = times[rs.order_desc[i]];
  for (std::size_t i = 0; i < n; ++i) {
    if (!events[i]) continue;
    const double t = times[i];
    // first position with time < t
    std::size_t lo = 0, hi = n;
    while (lo < hi) {
      const std::size_t mid = (lo + hi) / 2;
      if (sorted_desc[mid] >= t)
        lo = mid + 1;
      else
        hi = mid;
    }
    rs.cases.push_back(static_cast<std::uint32_t>(i));
    rs.prefix.push_back(static_cast<std::uint32_t>(lo));
  }
  if (rs.cases.empty()) throw std::runtime_error("nothing to train on");
  return rs;
}

struct CaseControlPair {
  std::uint32_t case_index;
  std::uint32_t control_index;
};

// One control drawn uniformly from the case's risk set excluding the case
// itself; cases whose risk set has no other member are skipped and counted.
inline std::vector<CaseControlPair> sample_pairs(
    const RiskSets& rs, const std::vector<std::size_t>& case_positions,
    Rng& rng, std::size_t* skipped = nullptr) {
  std::vector<CaseControlPair> pairs;
  pairs.reserve(case_positions.size());
  for (std::size_t k : case_positions) {
    const std::uint32_t case_idx = rs.cases[k];
    const std::uint32_t len = rs.prefix[k];
    if (len < 2) {
      if (skipped) ++*skipped;
      continue;
    }
    std::uint32_t control = case_idx;
    while (control == case_idx)
      control = rs.order_desc[static_cast<std::size_t>(rng.below(len))];
    pairs.push_back({case_idx, control});
  }
  return pairs;
}

// Sampled-pair form of the negative Cox partial log-likelihood:
// mean of log(1 + exp(g_control - g_case)), evaluated through softplus so
// large magnitudes stay finite.
inline ad::Value case_control_loss(ad::Tape& tape, ad::Value g_case,
                                   ad::Value g_control) {
  return tape.softplus(tape.add(g_control, tape.affine(g_case, -1.0, 0.0)));
}

inline double case_control_loss(double g_case, double g_control) {
  const double d = g_control - g_case;
  return (d > 0 ? d : 0.0) + std::log1p(std::exp(-std::fabs(d)));
}

struct RiskModel {
  NetConfig net_config;
  TrainConfig train_config;
  std::vector<NetParams> members;
  double g_ref = 0;
  SurvivalCurve s0;
  long horizon_days = 1826;
  CentringSpec centring;
  std::vector<std::string> vocab_codes;
  std::vector<std::vector<double>> member_epoch_loss;  // diagnostics
};

inline double predict_g(const RiskModel& model, const CodeSequence& seq,
                        const PredictorVector& x) {
  if (model.members.empty())
    throw std::runtime_error("predict_g: empty ensemble");
  double s = 0;
  for (const NetParams& m : model.members)
    s += net_predict(const_cast<NetParams&>(m), seq, x);
  return s / static_cast<double>(model.members.size());
}

namespace detail {

class Adam {
 public:
  Adam(const TrainConfig& cfg) : cfg_(cfg) {}

  void step(NetParams& net) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.adam_beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.adam_beta2, t_);
    net.for_each([&](ad::Param& p, int) {
      if (p.grad.size() != p.value.size()) return;  // untouched this step
      if (p.m.size() != p.value.size()) {
        p.m = ad::Tensor(p.value.rows, p.value.cols);
        p.v = ad::Tensor(p.value.rows, p.value.cols);
      }
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad.data[i];
        p.m.data[i] = cfg_.adam_beta1 * p.m.data[i] + (1 - cfg_.adam_beta1) * g;
        p.v.data[i] =
            cfg_.adam_beta2 * p.v.data[i] + (1 - cfg_.adam_beta2) * g * g;
        const double mhat = p.m.data[i] / bc1;
        const double vhat = p.v.data[i] / bc2;
        p.value.data[i] -=
            cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
      }
    });
  }

 private:
  TrainConfig cfg_;
  long t_ = 0;
};

inline double param_norm(NetParams& net) {
  double s = 0;
  net.for_each([&](ad::Param& p, int) {
    for (double v : p.value.data) s += v * v;
  });
  return std::sqrt(s);
}

}  // namespace detail

// Reference person: empty history, zero predictor vector (mean age, third
// deprivation quintile, reference categories, no medications).
inline double reference_g(NetParams& net) {
  return net_predict(net, CodeSequence{},
                     PredictorVector(net.config.predictor_dim, 0.0));
}

// Case-control training of the ensemble, then the Breslow baseline anchored
// at the reference person, all on the training data.  Deterministic given
// (seed, config, cohort).
inline RiskModel train(const EncodedCohort& data, const NetConfig& net_config,
                       const TrainConfig& train_config) {
  train_config.validate();
  std::vector<double> times;
  std::vector<std::uint8_t> events;
  for (const EncodedPerson& p : data.persons) {
    times.push_back(p.time);
    events.push_back(p.event ? 1 : 0);
  }
  const RiskSets rs = build_risk_sets(times, events);

  RiskModel model;
  model.net_config = net_config;
  model.train_config = train_config;
  model.horizon_days = data.horizon_days;
  model.centring = data.centring;
  model.vocab_codes = data.vocab_codes;

  const Rng root(train_config.seed);
  for (std::size_t member = 0; member < train_config.ensemble_size; ++member) {
    NetConfig cfg = net_config;
    cfg.seed = root.stream(member).next();
    NetParams net = init_params(cfg, data.vocab_codes.size());
    Rng rng = root.stream(0x7000 + member);
    detail::Adam adam(train_config);
    std::vector<double> epoch_losses;

    std::vector<std::size_t> case_order(rs.cases.size());
    for (std::size_t i = 0; i < case_order.size(); ++i) case_order[i] = i;

    for (std::size_t epoch = 0; epoch < train_config.epochs; ++epoch) {
      rng.shuffle(case_order);
      double loss_sum = 0;
      std::size_t loss_count = 0;
      std::size_t pos = 0;
      std::size_t batch_index = 0;
      while (pos < case_order.size()) {
        const std::size_t take =
            std::min(train_config.batch_cases, case_order.size() - pos);
        std::vector<std::size_t> chunk(case_order.begin() + pos,
                                       case_order.begin() + pos + take);
        pos += take;
        std::size_t skipped = 0;
        const std::vector<CaseControlPair> pairs =
            sample_pairs(rs, chunk, rng, &skipped);
        if (pairs.empty()) continue;
        net.for_each([](ad::Param& p, int) { p.zero_grad(); });
        const double inv = 1.0 / static_cast<double>(pairs.size());
        double batch_loss = 0;
        for (const CaseControlPair& pr : pairs) {
          ad::Tape tape;
          const EncodedPerson& a = data.persons[pr.case_index];
          const EncodedPerson& b = data.persons[pr.control_index];
          ad::Value g_case = net_forward(tape, net, a.seq, a.x, true, &rng).g;
          ad::Value g_control =
              net_forward(tape, net, b.seq, b.x, true, &rng).g;
          ad::Value loss = case_control_loss(tape, g_case, g_control);
          const double lv = tape.value(loss).data[0];
          if (!std::isfinite(lv))
            throw std::runtime_error(
                "train: non-finite loss at epoch " + std::to_string(epoch) +
                ", batch " + std::to_string(batch_index) +
                ", parameter norm " + std::to_string(detail::param_norm(net)));
          batch_loss += lv * inv;
          tape.backward(loss, inv);
        }
        adam.step(net);
        loss_sum += batch_loss * static_cast<double>(pairs.size());
        loss_count += pairs.size();
        ++batch_index;
      }
      epoch_losses.push_back(loss_count ? loss_sum / loss_count : 0.0);
    }
    model.member_epoch_loss.push_back(std::move(epoch_losses));
    model.members.push_back(std::move(net));
  }

  // g_ref per member, averaged like predictions are
  double g_ref = 0;
  for (NetParams& m : model.members) g_ref += reference_g(m);
  model.g_ref = g_ref / static_cast<double>(model.members.size());

  std::vector<double> g_all(data.persons.size());
  for (std::size_t i = 0; i < data.persons.size(); ++i)
    g_all[i] = predict_g(model, data.persons[i].seq, data.persons[i].x);
  model.s0 = breslow_baseline(g_all, times, events, model.g_ref);
  return model;
}

}  // namespace deepcox
