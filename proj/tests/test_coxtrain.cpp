#include <doctest.h>

#include <cmath>
#include <limits>
#include <map>

#include "deepcox/coxtrain.hpp"
#include "deepcox/synth.hpp"
#include "oracles.hpp"

using namespace deepcox;

namespace {

EncodedCohort encode_preset(const std::string& preset, std::size_t n,
                            std::uint64_t seed, int min_count = 5) {
  GeneratorConfig cfg = generator_preset(preset);
  cfg.n_persons = n;
  cfg.seed = seed;
  const Cohort cohort = generate(cfg).first;
  const Vocabulary vocab = build_vocabulary(cohort, min_count);
  return encode_cohort(cohort, vocab, CentringSpec{mean_age(cohort), 3});
}

NetConfig tiny_net() {
  NetConfig n;
  n.embed_dim = 4;
  return n;
}

TrainConfig quick_train(std::size_t epochs, std::size_t ensemble,
                        std::uint64_t seed) {
  TrainConfig t;
  t.epochs = epochs;
  t.ensemble_size = ensemble;
  t.batch_cases = 32;
  t.seed = seed;
  return t;
}

}  // namespace

TEST_CASE("risk sets: sizes, tie handling, and the brute-force oracle") {
  const RiskSets rs = build_risk_sets({1, 2, 3}, {1, 1, 1});
  REQUIRE(rs.cases.size() == 3);
  std::map<double, std::size_t> size_by_time;
  for (std::size_t k = 0; k < rs.cases.size(); ++k)
    size_by_time[rs.cases[k] + 1.0] = rs.prefix[k];  // times are 1,2,3
  CHECK(size_by_time[1.0] == 3);
  CHECK(size_by_time[2.0] == 2);
  CHECK(size_by_time[3.0] == 1);

  // censored person with t=5 sits in every earlier risk set
  const std::vector<double> t = {1, 3, 5};
  const std::vector<std::uint8_t> e = {1, 1, 0};
  const RiskSets rs2 = build_risk_sets(t, e);
  for (std::size_t k = 0; k < rs2.cases.size(); ++k) {
    const auto members = rs2.members(k);
    bool has_censored = false;
    for (std::uint32_t m : members) has_censored |= m == 2;
    CHECK(has_censored);
  }

  CHECK_THROWS_WITH_AS(build_risk_sets({1, 2}, {0, 0}),
                       doctest::Contains("nothing to train on"),
                       std::runtime_error);
}

TEST_CASE("risk sets match brute force membership on a random instance") {
  Rng rng(61);
  const std::size_t n = 50;
  std::vector<double> t(n);
  std::vector<std::uint8_t> e(n);
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = std::floor(rng.uniform(1, 15));
    e[i] = rng.bernoulli(0.5) ? 1 : 0;
  }
  e[7] = 1;
  const RiskSets rs = build_risk_sets(t, e);
  const auto direct = oracle::risk_sets_bruteforce(t, e);
  REQUIRE(rs.cases.size() == direct.size());
  for (std::size_t k = 0; k < rs.cases.size(); ++k) {
    auto mine = rs.members(k);
    std::sort(mine.begin(), mine.end());
    auto want = direct[k];
    std::sort(want.begin(), want.end());
    CHECK(mine == want);
    // the case belongs to its own risk set
    bool has_self = false;
    for (std::uint32_t m : mine) has_self |= m == rs.cases[k];
    CHECK(has_self);
  }
}

TEST_CASE("sampling: fewer cases than the batch, control never the case") {
  const RiskSets rs = build_risk_sets({1, 2, 3, 4}, {1, 1, 0, 0});
  Rng rng(62);
  std::size_t skipped = 0;
  const auto pairs = sample_pairs(rs, {0, 1}, rng, &skipped);
  CHECK(pairs.size() == 2);
  CHECK(skipped == 0);
  for (const auto& p : pairs) CHECK(p.case_index != p.control_index);
}

TEST_CASE("a case with a singleton risk set is skipped and counted") {
  const RiskSets rs = build_risk_sets({1, 5}, {0, 1});
  Rng rng(63);
  std::size_t skipped = 0;
  const auto pairs = sample_pairs(rs, {0}, rng, &skipped);
  CHECK(pairs.empty());
  CHECK(skipped == 1);
}

TEST_CASE("controls are drawn uniformly from the risk set") {
  // one case at t=1 with four controls at larger times
  const RiskSets rs =
      build_risk_sets({1, 2, 3, 4, 5}, {1, 0, 0, 0, 0});
  Rng rng(64);
  std::map<std::uint32_t, std::size_t> counts;
  const std::size_t draws = 10000;
  for (std::size_t i = 0; i < draws; ++i)
    for (const auto& p : sample_pairs(rs, {0}, rng)) ++counts[p.control_index];
  REQUIRE(counts.size() == 4);
  // chi-square against uniform on 4 cells; 3 dof, p>0.01 cutoff 11.34
  double chi2 = 0;
  const double expect = draws / 4.0;
  for (const auto& [idx, n] : counts)
    chi2 += (n - expect) * (n - expect) / expect;
  CHECK(chi2 < 11.34);
}

TEST_CASE("case_control_loss identities and gradient") {
  CHECK(case_control_loss(1.7, 1.7) == doctest::Approx(std::log(2.0)));
  CHECK(case_control_loss(5, 0) < case_control_loss(1, 0));
  // stable in the extremes
  CHECK(case_control_loss(1000.0, 0.0) == doctest::Approx(0.0));
  CHECK(case_control_loss(0.0, 1000.0) == doctest::Approx(1000.0));

  const double err = ad::gradient_check(
      [](ad::Tape& t, const std::vector<ad::Value>& in) {
        return case_control_loss(t, in[0], in[1]);
      },
      {ad::Tensor::scalar(0.35), ad::Tensor::scalar(-0.4)}, 1e-6);
  CHECK(err < 1e-6);
}

TEST_CASE("epochs=0 returns the initial parameters untouched") {
  const EncodedCohort enc = encode_preset("linear", 300, 71);
  const NetConfig nc = tiny_net();
  const TrainConfig tc = quick_train(0, 1, 5);
  const RiskModel model = train(enc, nc, tc);
  NetConfig expect_cfg = nc;
  expect_cfg.seed = Rng(tc.seed).stream(0).next();
  NetParams expect = init_params(expect_cfg, enc.vocab_codes.size());
  std::vector<const ad::Param*> a, b;
  model.members[0].for_each([&](const ad::Param& p, int) { a.push_back(&p); });
  expect.for_each([&](ad::Param& p, int) { b.push_back(&p); });
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    CHECK(a[i]->value.data == b[i]->value.data);
}

TEST_CASE("training is deterministic: same seed gives bit-identical members") {
  const EncodedCohort enc = encode_preset("linear", 400, 73);
  const RiskModel m1 = train(enc, tiny_net(), quick_train(2, 2, 9));
  const RiskModel m2 = train(enc, tiny_net(), quick_train(2, 2, 9));
  CHECK(m1.g_ref == m2.g_ref);
  CHECK(m1.s0.survival == m2.s0.survival);
  REQUIRE(m1.members.size() == m2.members.size());
  for (std::size_t k = 0; k < m1.members.size(); ++k) {
    bool identical = true;
    std::vector<const ad::Param*> a, b;
    m1.members[k].for_each([&](const ad::Param& p, int) { a.push_back(&p); });
    m2.members[k].for_each([&](const ad::Param& p, int) { b.push_back(&p); });
    for (std::size_t i = 0; i < a.size(); ++i)
      identical &= a[i]->value.data == b[i]->value.data;
    CHECK(identical);
  }
}

TEST_CASE("training reduces the loss on a learnable cohort") {
  const EncodedCohort enc = encode_preset("linear", 4000, 79);
  const RiskModel model = train(enc, tiny_net(), quick_train(10, 1, 11));
  REQUIRE(model.member_epoch_loss.size() == 1);
  const auto& losses = model.member_epoch_loss[0];
  REQUIRE(losses.size() == 10);
  CHECK(losses.back() < losses.front());
}

TEST_CASE("predict_g averages ensemble members") {
  const EncodedCohort enc = encode_preset("linear", 300, 81);
  RiskModel model = train(enc, tiny_net(), quick_train(1, 2, 13));
  const EncodedPerson& p = enc.persons[0];
  const double avg = predict_g(model, p.seq, p.x);
  double manual = 0;
  for (NetParams& m : model.members) manual += net_predict(m, p.seq, p.x);
  manual /= static_cast<double>(model.members.size());
  CHECK(avg == doctest::Approx(manual).epsilon(1e-15));

  RiskModel single = model;
  single.members.resize(1);
  CHECK(predict_g(single, p.seq, p.x) ==
        doctest::Approx(net_predict(model.members[0], p.seq, p.x)));

  // identical members collapse to the single-member prediction
  RiskModel twin = model;
  twin.members.clear();
  twin.members.push_back(model.members[0]);
  twin.members.push_back(model.members[0]);
  CHECK(predict_g(twin, p.seq, p.x) ==
        doctest::Approx(net_predict(model.members[0], p.seq, p.x)));
}

TEST_CASE("model S0 is nonincreasing and risks stay inside (0,1)") {
  const EncodedCohort enc = encode_preset("linear", 2000, 83);
  const RiskModel model = train(enc, tiny_net(), quick_train(3, 1, 17));
  REQUIRE_FALSE(model.s0.empty());
  CHECK(model.s0.at(0) == 1.0);
  for (std::size_t i = 1; i < model.s0.survival.size(); ++i)
    CHECK(model.s0.survival[i] <= model.s0.survival[i - 1]);
  for (double v : model.s0.survival) {
    CHECK(v > 0.0);
    CHECK(v <= 1.0);
  }
  for (double g : {-3.0, -1.0, 0.0, 1.0, 3.0}) {
    const double r = five_year_risk(g, model.g_ref, model.s0,
                                    static_cast<double>(model.horizon_days));
    CHECK(r > 0.0);
    CHECK(r < 1.0);
  }
}

TEST_CASE("trained ranking correlates with the true log risk") {
  GeneratorConfig cfg = generator_preset("linear");
  cfg.n_persons = 3000;
  cfg.seed = 87;
  const auto [cohort, truth] = generate(cfg);
  const Vocabulary vocab = build_vocabulary(cohort, 5);
  const EncodedCohort enc =
      encode_cohort(cohort, vocab, CentringSpec{mean_age(cohort), 3});
  const RiskModel model = train(enc, tiny_net(), quick_train(10, 1, 19));

  std::vector<double> g(enc.persons.size()), t(enc.persons.size());
  std::vector<std::uint8_t> e(enc.persons.size());
  for (std::size_t i = 0; i < enc.persons.size(); ++i) {
    g[i] = predict_g(model, enc.persons[i].seq, enc.persons[i].x);
    t[i] = enc.persons[i].time;
    e[i] = enc.persons[i].event ? 1 : 0;
  }
  const double c_trained = harrell_c(g, t, e);
  NetConfig init_cfg = tiny_net();
  init_cfg.seed = 12345;
  NetParams frozen = init_params(init_cfg, vocab.n_codes());
  std::vector<double> g0(enc.persons.size());
  for (std::size_t i = 0; i < enc.persons.size(); ++i)
    g0[i] = net_predict(frozen, enc.persons[i].seq, enc.persons[i].x);
  const double c_init = harrell_c(g0, t, e);
  CHECK(c_trained > c_init);
  CHECK(c_trained > 0.6);
}

TEST_CASE("non-finite loss aborts with diagnostics") {
  EncodedCohort enc = encode_preset("linear", 200, 91);
  for (EncodedPerson& p : enc.persons)
    p.x[0] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig tc = quick_train(1, 1, 23);
  CHECK_THROWS_WITH_AS(train(enc, tiny_net(), tc), doctest::Contains("epoch"),
                       std::runtime_error);
}
