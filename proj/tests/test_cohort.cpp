#include <doctest.h>

#include <set>
#include <sstream>

#include "deepcox/cohort.hpp"
#include "deepcox/synth.hpp"

using namespace deepcox;

namespace {

Person mk_person(const std::string& id, bool event = false, long days = 1826) {
  Person p;
  p.id = id;
  p.sex = Sex::female;
  p.age_years = 50;
  p.ethnicity = Ethnicity::european;
  p.dep_quintile = 3;
  p.outcome_days = days;
  p.outcome_event = event;
  return p;
}

CodeEvent ev(int y, int m, const std::string& c,
             CodeKind k = CodeKind::primary_diagnosis) {
  return CodeEvent{y, m, c, k};
}

}  // namespace

TEST_CASE("empty input loads to an empty cohort") {
  std::istringstream in("");
  const Cohort c = load_cohort(in);
  CHECK(c.persons.empty());
}

TEST_CASE("a valid record round-trips") {
  const std::string line =
      R"({"id":"a1","sex":"F","age":49.5,"eth":"MA","dep":4,"dm":true,"af":false,)"
      R"("bp":true,"ll":false,"apac":false,"events":[{"y":2011,"m":3,"c":"I10","k":"pd"}],)"
      R"("t":900,"e":1})";
  std::istringstream in(line);
  const Cohort c = load_cohort(in);
  REQUIRE(c.persons.size() == 1);
  const Person& p = c.persons[0];
  CHECK(p.id == "a1");
  CHECK(p.sex == Sex::female);
  CHECK(p.age_years == doctest::Approx(49.5));
  CHECK(p.ethnicity == Ethnicity::maori);
  CHECK(p.dep_quintile == 4);
  CHECK(p.diabetes);
  CHECK(p.bp_lowering);
  CHECK(p.events.size() == 1);
  CHECK(p.events[0].code == "I10");
  CHECK(p.outcome_days == 900);
  CHECK(p.outcome_event);
}

TEST_CASE("dep_quintile outside 1..5 is named in the error") {
  const std::string line =
      R"({"id":"a","sex":"F","age":50,"eth":"EU","dep":6,"dm":false,"af":false,)"
      R"("bp":false,"ll":false,"apac":false,"events":[],"t":10,"e":0})";
  std::istringstream in(line);
  CHECK_THROWS_WITH_AS(load_cohort(in),
                       doctest::Contains("dep_quintile out of range"),
                       std::runtime_error);
}

TEST_CASE("loader errors carry the line number") {
  std::istringstream in("\n{not json}\n");
  CHECK_THROWS_WITH_AS(load_cohort(in), doctest::Contains("line 2"),
                       std::runtime_error);
}

TEST_CASE("unknown fields are rejected") {
  const std::string line =
      R"({"id":"a","sex":"F","age":50,"eth":"EU","dep":3,"dm":false,"af":false,)"
      R"("bp":false,"ll":false,"apac":false,"events":[],"t":10,"e":0,"zzz":1})";
  std::istringstream in(line);
  CHECK_THROWS_WITH_AS(load_cohort(in), doctest::Contains("zzz"),
                       std::runtime_error);
}

TEST_CASE("duplicate ids are rejected") {
  const std::string rec =
      R"({"id":"a","sex":"F","age":50,"eth":"EU","dep":3,"dm":false,"af":false,)"
      R"("bp":false,"ll":false,"apac":false,"events":[],"t":10,"e":0})";
  std::istringstream in(rec + "\n" + rec + "\n");
  CHECK_THROWS_WITH_AS(load_cohort(in), doctest::Contains("duplicate id"),
                       std::runtime_error);
}

TEST_CASE("save/load round-trip is byte-identical after the stable re-sort") {
  GeneratorConfig cfg = generator_preset("sequence");
  cfg.n_persons = 200;
  cfg.seed = 77;
  const Cohort cohort = generate(cfg).first;

  std::ostringstream first;
  save_cohort(cohort, first);
  std::istringstream back(first.str());
  const Cohort reloaded = load_cohort(back);
  std::ostringstream second;
  save_cohort(reloaded, second);
  CHECK(first.str() == second.str());
}

TEST_CASE("vocabulary thresholds count persons, not occurrences") {
  Cohort c;
  Person p = mk_person("p1");
  for (int i = 0; i < 900; ++i) p.events.push_back(ev(2012, 1, "X"));
  c.persons.push_back(p);

  const Vocabulary v = build_vocabulary(c, 2);
  CHECK(v.n_codes() == 0);
  CHECK(v.token_of("X") == 0);

  // 500 carriers meet a threshold of 500
  Cohort big;
  for (int i = 0; i < 500; ++i) {
    Person q = mk_person("q" + std::to_string(i));
    q.events.push_back(ev(2012, 1, "I10"));
    big.persons.push_back(q);
  }
  const Vocabulary v2 = build_vocabulary(big, 500);
  CHECK(v2.token_of("I10") == 1);
  const Vocabulary v3 = build_vocabulary(big, 501);
  CHECK(v3.token_of("I10") == 0);
}

TEST_CASE("vocabulary ordering is count-descending then lexicographic") {
  Cohort c;
  for (int i = 0; i < 3; ++i) {
    Person p = mk_person("p" + std::to_string(i));
    p.events.push_back(ev(2012, 1, "B"));
    if (i < 2) p.events.push_back(ev(2012, 2, "A"));
    if (i < 2) p.events.push_back(ev(2012, 2, "C"));
    c.persons.push_back(p);
  }
  const Vocabulary v = build_vocabulary(c, 1);
  CHECK(v.token_of("B") == 1);  // 3 carriers
  CHECK(v.token_of("A") == 2);  // 2 carriers, ties break by code
  CHECK(v.token_of("C") == 3);
  CHECK(v.min_count == 1);
}

TEST_CASE("vocabulary is deterministic") {
  GeneratorConfig cfg = generator_preset("linear");
  cfg.n_persons = 500;
  cfg.seed = 5;
  const Cohort cohort = generate(cfg).first;
  const Vocabulary a = build_vocabulary(cohort, 3);
  const Vocabulary b = build_vocabulary(cohort, 3);
  CHECK(a.codes == b.codes);
  CHECK(a.token_ids == b.token_ids);
}

TEST_CASE("encode_history: empty, month arithmetic, spanning months") {
  Cohort shell;
  Vocabulary v;
  v.codes = {"I10", "J44"};
  v.token_ids = {{"I10", 1}, {"J44", 2}};

  Person empty = mk_person("e");
  const CodeSequence s0 = encode_history(empty, v, shell);
  CHECK(s0.token_ids.empty());
  CHECK(s0.kind_ids.empty());
  CHECK(s0.delta_t_months.empty());

  Person p = mk_person("p");
  p.events.push_back(ev(2012, 3, "I10"));
  p.events.push_back(ev(2012, 7, "J44", CodeKind::medication));
  const CodeSequence s1 = encode_history(p, v, shell);
  REQUIRE(s1.token_ids.size() == 2);
  CHECK(s1.delta_t_months[0] == 0);
  CHECK(s1.delta_t_months[1] == 4);
  CHECK(s1.kind_ids[0] == 0);
  CHECK(s1.kind_ids[1] == 4);

  // hospitalisation spanning March-April appears in both months
  Person span = mk_person("s");
  span.events.push_back(ev(2012, 3, "I10"));
  span.events.push_back(ev(2012, 4, "I10"));
  const CodeSequence s2 = encode_history(span, v, shell);
  REQUIRE(s2.token_ids.size() == 2);
  CHECK(s2.token_ids[0] == s2.token_ids[1]);
  CHECK(s2.delta_t_months[0] == 0);
  CHECK(s2.delta_t_months[1] == 1);
}

TEST_CASE("encode_history drops unknown codes and truncates to max_len") {
  Cohort shell;
  Vocabulary v;
  v.codes = {"A"};
  v.token_ids = {{"A", 1}};
  Person p = mk_person("p");
  p.events.push_back(ev(2012, 1, "UNKNOWN"));
  for (int m = 1; m <= 6; ++m) p.events.push_back(ev(2012, m, "A"));
  const CodeSequence full = encode_history(p, v, shell);
  CHECK(full.token_ids.size() == 6);
  const CodeSequence cut = encode_history(p, v, shell, 3);
  REQUIRE(cut.token_ids.size() == 3);
  CHECK(cut.delta_t_months[0] == 0);  // first retained delta resets to 0
  CHECK(cut.delta_t_months[1] == 1);
}

TEST_CASE("encode_history deltas sum to the span between first and last") {
  GeneratorConfig cfg = generator_preset("linear");
  cfg.n_persons = 100;
  cfg.seed = 11;
  const Cohort cohort = generate(cfg).first;
  const Vocabulary v = build_vocabulary(cohort, 1);
  for (const Person& p : cohort.persons) {
    const CodeSequence s = encode_history(p, v, cohort);
    REQUIRE(s.token_ids.size() == s.kind_ids.size());
    REQUIRE(s.token_ids.size() == s.delta_t_months.size());
    if (s.length() < 2) continue;
    long total = 0;
    for (std::int32_t d : s.delta_t_months) {
      CHECK(d >= 0);
      total += d;
    }
    // all codes retained at min_count 1, so the span is first-to-last event
    const long span = month_index(p.events.back().year, p.events.back().month) -
                      month_index(p.events.front().year, p.events.front().month);
    CHECK(total == span);
  }
}

TEST_CASE("predictor vector of the reference person is zero") {
  CentringSpec c{49.021, 3};
  Person ref = mk_person("r");
  ref.age_years = 49.021;
  const PredictorVector x = predictor_vector(ref, c);
  REQUIRE(x.size() == kPredictorDim);
  for (double v : x) CHECK(v == 0.0);
}

TEST_CASE("predictor vector: interactions and centring arithmetic") {
  CentringSpec c{49.021, 3};
  Person p = mk_person("p");
  p.age_years = 50.021;
  p.diabetes = true;
  p.bp_lowering = true;
  const PredictorVector x = predictor_vector(p, c);
  CHECK(x[0] == doctest::Approx(1.0));   // age component exactly 1
  CHECK(x[6] == 1.0);                    // diabetes
  CHECK(x[8] == 1.0);                    // bp med
  CHECK(x[14] == 1.0);                   // bp x diabetes interaction
  CHECK(x[11] == doctest::Approx(1.0));  // age x bp
  CHECK(x[16] == 0.0);                   // bp x ll needs both
}

TEST_CASE("5x2 splits: strata, partition, determinism") {
  Cohort tiny;
  tiny.persons = {mk_person("a", true, 100), mk_person("b", true, 200),
                  mk_person("c", false), mk_person("d", false)};
  const auto splits = split_5x2_stratified(tiny, 3);
  REQUIRE(splits.size() == 10);
  for (const FoldSplit& s : splits) {
    CHECK(s.train.size() == 2);
    CHECK(s.test.size() == 2);
    int train_events = 0;
    for (std::size_t i : s.train) train_events += tiny.persons[i].outcome_event;
    CHECK(train_events == 1);  // stratification forces 1 event per fold
    std::set<std::size_t> all(s.train.begin(), s.train.end());
    all.insert(s.test.begin(), s.test.end());
    CHECK(all.size() == 4);  // partition: union is everyone, no overlap
  }
  const auto again = split_5x2_stratified(tiny, 3);
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(splits[i].train == again[i].train);
    CHECK(splits[i].test == again[i].test);
  }

  Cohort degenerate;
  degenerate.persons = {mk_person("a", true, 100), mk_person("c", false)};
  CHECK_THROWS(split_5x2_stratified(degenerate, 1));
}

TEST_CASE("5x2 event fraction per fold within one person of the cohort rate") {
  GeneratorConfig cfg = generator_preset("linear");
  cfg.n_persons = 1000;
  cfg.seed = 21;
  const Cohort cohort = generate(cfg).first;
  std::size_t total_events = 0;
  for (const Person& p : cohort.persons) total_events += p.outcome_event;
  const double rate =
      static_cast<double>(total_events) / static_cast<double>(cohort.persons.size());
  for (const FoldSplit& s : split_5x2_stratified(cohort, 4)) {
    std::size_t ev_count = 0;
    for (std::size_t i : s.train) ev_count += cohort.persons[i].outcome_event;
    const double expected = rate * static_cast<double>(s.train.size());
    CHECK(std::fabs(static_cast<double>(ev_count) - expected) <= 1.0);
  }
}

TEST_CASE("each person lands in exactly one fold per replication") {
  GeneratorConfig cfg = generator_preset("linear");
  cfg.n_persons = 101;
  cfg.seed = 31;
  const Cohort cohort = generate(cfg).first;
  const auto splits = split_5x2_stratified(cohort, 9);
  for (int rep = 0; rep < 5; ++rep) {
    const FoldSplit& a = splits[2 * rep];
    std::vector<int> seen(cohort.persons.size(), 0);
    for (std::size_t i : a.train) seen[i] += 1;
    for (std::size_t i : a.test) seen[i] += 1;
    for (int s : seen) CHECK(s == 1);
  }
}
