#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "deepcox/rng.hpp"

namespace deepcox {

enum class Sex { female, male };
enum class Ethnicity { european, maori, pacific, indian, other };
enum class CodeKind {
  primary_diagnosis,
  secondary_diagnosis,
  external_cause,
  procedure,
  medication
};

inline const char* sex_tag(Sex s) { return s == Sex::female ? "F" : "M"; }
inline const std::array<const char*, 5> kEthnicityTags = {"EU", "MA", "PA",
                                                          "IN", "OT"};
inline const std::array<const char*, 5> kKindTags = {"pd", "sd", "ec", "pr",
                                                     "rx"};

// One coded clinical event.  A hospitalisation spanning several calendar
// months is represented upstream by repeating the event once per month.
struct CodeEvent {
  int year = 0;
  int month = 0;  // 1..12
  std::string code;
  CodeKind kind = CodeKind::primary_diagnosis;
};

struct Person {
  std::string id;
  Sex sex = Sex::female;
  double age_years = 0;
  Ethnicity ethnicity = Ethnicity::european;
  int dep_quintile = 3;
  bool diabetes = false;
  bool atrial_fibrillation = false;
  bool bp_lowering = false;
  bool lipid_lowering = false;
  bool antiplatelet_anticoagulant = false;
  std::vector<CodeEvent> events;  // sorted nondecreasing by (year, month)
  long outcome_days = 0;
  bool outcome_event = false;  // true = CVD event, false = censored
};

struct Cohort {
  int index_year = 2013;
  int index_month = 1;
  long horizon_days = 1826;
  std::vector<Person> persons;
};

// 0-based month counter; deltas between events are plain differences.
inline long month_index(int year, int month) { return 12L * year + (month - 1); }

inline long lookback_months = 60;  // five-year history window

// Integer-coded token stream for one person, ready for the network.
struct CodeSequence {
  std::vector<std::int32_t> token_ids;
  std::vector<std::int32_t> kind_ids;
  std::vector<std::int32_t> delta_t_months;
  std::size_t length() const { return token_ids.size(); }
};

// Token index 0 is reserved for padding/unknown; retained codes get indices
// 1..codes.size() ordered by descending carrier count then code string.
struct Vocabulary {
  std::vector<std::string> codes;
  std::map<std::string, std::int32_t> token_ids;
  int min_count = 1;

  std::size_t n_codes() const { return codes.size(); }
  std::size_t table_rows() const { return codes.size() + 1; }
  std::int32_t token_of(const std::string& code) const {
    auto it = token_ids.find(code);
    return it == token_ids.end() ? 0 : it->second;
  }
  static std::int32_t kind_id(CodeKind k) { return static_cast<std::int32_t>(k); }
};

inline constexpr std::size_t kPredictorDim = 17;
inline const std::array<const char*, kPredictorDim> kPredictorNames = {
    "age",
    "eth_maori",
    "eth_pacific",
    "eth_indian",
    "eth_other",
    "dep",
    "diabetes",
    "af",
    "bp_med",
    "ll_med",
    "apac_med",
    "age_x_bp_med",
    "age_x_diabetes",
    "age_x_af",
    "bp_med_x_diabetes",
    "apac_med_x_diabetes",
    "bp_med_x_ll_med"};

using PredictorVector = std::vector<double>;

// Centring makes the reference person (mean age, third deprivation quintile,
// reference categories, no medications) the zero vector.
struct CentringSpec {
  double age_mean = 0;
  int dep_reference = 3;
};

inline PredictorVector predictor_vector(const Person& p,
                                        const CentringSpec& c) {
  PredictorVector x(kPredictorDim, 0.0);
  const double age = p.age_years - c.age_mean;
  const double dm = p.diabetes ? 1.0 : 0.0;
  const double af = p.atrial_fibrillation ? 1.0 : 0.0;
  const double bp = p.bp_lowering ? 1.0 : 0.0;
  const double ll = p.lipid_lowering ? 1.0 : 0.0;
  const double apac = p.antiplatelet_anticoagulant ? 1.0 : 0.0;
  x[0] = age;
  x[1] = p.ethnicity == Ethnicity::maori ? 1.0 : 0.0;
  x[2] = p.ethnicity == Ethnicity::pacific ? 1.0 : 0.0;
  x[3] = p.ethnicity == Ethnicity::indian ? 1.0 : 0.0;
  x[4] = p.ethnicity == Ethnicity::other ? 1.0 : 0.0;
  x[5] = static_cast<double>(p.dep_quintile - c.dep_reference);
  x[6] = dm;
  x[7] = af;
  x[8] = bp;
  x[9] = ll;
  x[10] = apac;
  x[11] = age * bp;
  x[12] = age * dm;
  x[13] = age * af;
  x[14] = bp * dm;
  x[15] = apac * dm;
  x[16] = bp * ll;
  return x;
}

namespace detail {

inline Sex parse_sex(const std::string& s) {
  if (s == "F") return Sex::female;
  if (s == "M") return Sex::male;
  throw std::runtime_error("sex must be \"F\" or \"M\"");
}

inline Ethnicity parse_eth(const std::string& s) {
  for (std::size_t i = 0; i < kEthnicityTags.size(); ++i)
    if (s == kEthnicityTags[i]) return static_cast<Ethnicity>(i);
  throw std::runtime_error("eth must be one of EU|MA|PA|IN|OT");
}

inline CodeKind parse_kind(const std::string& s) {
  for (std::size_t i = 0; i < kKindTags.size(); ++i)
    if (s == kKindTags[i]) return static_cast<CodeKind>(i);
  throw std::runtime_error("event kind must be one of pd|sd|ec|pr|rx");
}

inline void check_keys(const nlohmann::json& obj,
                       const std::set<std::string>& allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key()))
      throw std::runtime_error("unknown field \"" + it.key() + "\"");
}

}  // namespace detail

// Parses one JSON-lines record.  Validation errors name the offending field;
// the caller prefixes the line number.
inline Person parse_person(const std::string& line, const Cohort& cohort) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw std::runtime_error("record is not a JSON object");
  detail::check_keys(j, {"id", "sex", "age", "eth", "dep", "dm", "af", "bp",
                         "ll", "apac", "events", "t", "e"});
  for (const char* k : {"id", "sex", "age", "eth", "dep", "dm", "af", "bp",
                        "ll", "apac", "events", "t", "e"})
    if (!j.contains(k))
      throw std::runtime_error(std::string("missing field \"") + k + "\"");

  Person p;
  p.id = j.at("id").get<std::string>();
  p.sex = detail::parse_sex(j.at("sex").get<std::string>());
  p.age_years = j.at("age").get<double>();
  if (p.age_years < 30.0 || p.age_years >= 75.0)
    throw std::runtime_error("age out of range [30,75)");
  p.ethnicity = detail::parse_eth(j.at("eth").get<std::string>());
  p.dep_quintile = j.at("dep").get<int>();
  if (p.dep_quintile < 1 || p.dep_quintile > 5)
    throw std::runtime_error("dep_quintile out of range");
  p.diabetes = j.at("dm").get<bool>();
  p.atrial_fibrillation = j.at("af").get<bool>();
  p.bp_lowering = j.at("bp").get<bool>();
  p.lipid_lowering = j.at("ll").get<bool>();
  p.antiplatelet_anticoagulant = j.at("apac").get<bool>();

  if (!j.at("events").is_array())
    throw std::runtime_error("events must be an array");
  const long index_m = month_index(cohort.index_year, cohort.index_month);
  for (const auto& ej : j.at("events")) {
    if (!ej.is_object()) throw std::runtime_error("event is not an object");
    detail::check_keys(ej, {"y", "m", "c", "k"});
    for (const char* k : {"y", "m", "c", "k"})
      if (!ej.contains(k))
        throw std::runtime_error(std::string("event missing field \"") + k +
                                 "\"");
    CodeEvent e;
    e.year = ej.at("y").get<int>();
    e.month = ej.at("m").get<int>();
    if (e.month < 1 || e.month > 12)
      throw std::runtime_error("event month out of range");
    const long m = month_index(e.year, e.month);
    if (m < index_m - lookback_months || m >= index_m)
      throw std::runtime_error("event outside the five-year lookback window");
    e.code = ej.at("c").get<std::string>();
    if (e.code.empty()) throw std::runtime_error("event code is empty");
    e.kind = detail::parse_kind(ej.at("k").get<std::string>());
    p.events.push_back(std::move(e));
  }

  p.outcome_days = j.at("t").get<long>();
  if (p.outcome_days < 0 || p.outcome_days > cohort.horizon_days)
    throw std::runtime_error("t out of range [0, horizon]");
  const int ev = j.at("e").get<int>();
  if (ev != 0 && ev != 1) throw std::runtime_error("e must be 0 or 1");
  p.outcome_event = ev == 1;

  // stable re-sort for determinism; intra-month order is by code string
  std::stable_sort(p.events.begin(), p.events.end(),
                   [](const CodeEvent& a, const CodeEvent& b) {
                     if (a.year != b.year) return a.year < b.year;
                     if (a.month != b.month) return a.month < b.month;
                     return a.code < b.code;
                   });
  return p;
}

inline Cohort load_cohort(std::istream& in) {
  Cohort cohort;
  std::set<std::string> seen_ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      Person p = parse_person(line, cohort);
      if (!seen_ids.insert(p.id).second)
        throw std::runtime_error("duplicate id \"" + p.id + "\"");
      cohort.persons.push_back(std::move(p));
    } catch (const std::exception& e) {
      throw std::runtime_error("line " + std::to_string(line_no) + ": " +
                               e.what());
    }
  }
  return cohort;
}

inline Cohort load_cohort(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open cohort file: " + path);
  return load_cohort(in);
}

inline void save_person(std::ostream& out, const Person& p) {
  nlohmann::ordered_json j;
  j["id"] = p.id;
  j["sex"] = sex_tag(p.sex);
  j["age"] = p.age_years;
  j["eth"] = kEthnicityTags[static_cast<std::size_t>(p.ethnicity)];
  j["dep"] = p.dep_quintile;
  j["dm"] = p.diabetes;
  j["af"] = p.atrial_fibrillation;
  j["bp"] = p.bp_lowering;
  j["ll"] = p.lipid_lowering;
  j["apac"] = p.antiplatelet_anticoagulant;
  nlohmann::ordered_json evs = nlohmann::ordered_json::array();
  for (const CodeEvent& e : p.events) {
    nlohmann::ordered_json ej;
    ej["y"] = e.year;
    ej["m"] = e.month;
    ej["c"] = e.code;
    ej["k"] = kKindTags[static_cast<std::size_t>(e.kind)];
    evs.push_back(std::move(ej));
  }
  j["events"] = std::move(evs);
  j["t"] = p.outcome_days;
  j["e"] = p.outcome_event ? 1 : 0;
  out << j.dump() << "\n";
}

inline void save_cohort(const Cohort& cohort, std::ostream& out) {
  for (const Person& p : cohort.persons) save_person(out, p);
}

inline void save_cohort(const Cohort& cohort, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write cohort file: " + path);
  save_cohort(cohort, out);
}

// Codes are counted once per carrier, not per occurrence; retained iff the
// number of distinct persons carrying the code is at least min_count.
inline Vocabulary build_vocabulary(const Cohort& cohort, int min_count) {
  if (min_count < 1) throw std::invalid_argument("min_count must be >= 1");
  std::map<std::string, std::size_t> carriers;
  for (const Person& p : cohort.persons) {
    std::set<std::string> seen;
    for (const CodeEvent& e : p.events) seen.insert(e.code);
    for (const std::string& c : seen) ++carriers[c];
  }
  std::vector<std::pair<std::string, std::size_t>> retained;
  for (const auto& [code, n] : carriers)
    if (n >= static_cast<std::size_t>(min_count)) retained.push_back({code, n});
  std::sort(retained.begin(), retained.end(),
            [](const auto& a, const auto& b) {
              if (a.second != b.second) return a.second > b.second;
              return a.first < b.first;
            });
  Vocabulary v;
  v.min_count = min_count;
  for (std::size_t i = 0; i < retained.size(); ++i) {
    v.codes.push_back(retained[i].first);
    v.token_ids[retained[i].first] = static_cast<std::int32_t>(i + 1);
  }
  return v;
}

// Chronological token stream: unknown codes dropped, delta_t in months
// between consecutive retained events (0 for the first), truncated to the
// most recent max_len events.
inline CodeSequence encode_history(const Person& person, const Vocabulary& vocab,
                                   int index_year, int index_month,
                                   std::size_t max_len = 100) {
  (void)index_year;
  (void)index_month;
  CodeSequence seq;
  std::vector<long> months;
  for (const CodeEvent& e : person.events) {
    const std::int32_t tok = vocab.token_of(e.code);
    if (tok == 0) continue;
    seq.token_ids.push_back(tok);
    seq.kind_ids.push_back(Vocabulary::kind_id(e.kind));
    months.push_back(month_index(e.year, e.month));
  }
  if (seq.token_ids.size() > max_len) {
    const std::size_t drop = seq.token_ids.size() - max_len;
    seq.token_ids.erase(seq.token_ids.begin(), seq.token_ids.begin() + drop);
    seq.kind_ids.erase(seq.kind_ids.begin(), seq.kind_ids.begin() + drop);
    months.erase(months.begin(), months.begin() + drop);
  }
  seq.delta_t_months.resize(seq.token_ids.size());
  for (std::size_t i = 0; i < months.size(); ++i)
    seq.delta_t_months[i] =
        i == 0 ? 0 : static_cast<std::int32_t>(months[i] - months[i - 1]);
  return seq;
}

inline CodeSequence encode_history(const Person& person, const Vocabulary& vocab,
                                   const Cohort& cohort,
                                   std::size_t max_len = 100) {
  return encode_history(person, vocab, cohort.index_year, cohort.index_month,
                        max_len);
}

struct FoldSplit {
  int replication = 0;
  int fold = 0;
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Five replications of outcome-stratified 2-fold cross-validation; each fold
// serves once as train and once as test within its replication.
inline std::vector<FoldSplit> split_5x2_stratified(const Cohort& cohort,
                                                   std::uint64_t seed) {
  std::vector<std::size_t> events, censored;
  for (std::size_t i = 0; i < cohort.persons.size(); ++i)
    (cohort.persons[i].outcome_event ? events : censored).push_back(i);
  if (events.size() < 2 || censored.size() < 2)
    throw std::runtime_error(
        "split_5x2_stratified: need at least 2 events and 2 censored persons");
  std::vector<FoldSplit> out;
  Rng root(seed);
  for (int rep = 0; rep < 5; ++rep) {
    Rng rng = root.stream(static_cast<std::uint64_t>(rep));
    std::vector<std::size_t> ev = events;
    std::vector<std::size_t> cn = censored;
    rng.shuffle(ev);
    rng.shuffle(cn);
    std::vector<std::size_t> a, b;
    for (std::size_t i = 0; i < ev.size(); ++i)
      (i % 2 == 0 ? a : b).push_back(ev[i]);
    for (std::size_t i = 0; i < cn.size(); ++i)
      (i % 2 == 0 ? a : b).push_back(cn[i]);
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    FoldSplit s0{rep, 0, a, b};
    FoldSplit s1{rep, 1, b, a};
    out.push_back(std::move(s0));
    out.push_back(std::move(s1));
  }
  return out;
}

inline Cohort filter_by_sex(const Cohort& cohort, Sex sex) {
  Cohort out;
  out.index_year = cohort.index_year;
  out.index_month = cohort.index_month;
  out.horizon_days = cohort.horizon_days;
  for (const Person& p : cohort.persons)
    if (p.sex == sex) out.persons.push_back(p);
  return out;
}

inline double mean_age(const Cohort& cohort) {
  double s = 0;
  for (const Person& p : cohort.persons) s += p.age_years;
  return cohort.persons.empty() ? 0.0
                                : s / static_cast<double>(cohort.persons.size());
}

inline Cohort subset(const Cohort& cohort, const std::vector<std::size_t>& idx) {
  Cohort out;
  out.index_year = cohort.index_year;
  out.index_month = cohort.index_month;
  out.horizon_days = cohort.horizon_days;
  out.persons.reserve(idx.size());
  for (std::size_t i : idx) out.persons.push_back(cohort.persons[i]);
  return out;
}

}  // namespace deepcox
