#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepcox/cohort.hpp"
#include "deepcox/coxtrain.hpp"
#include "deepcox/util.hpp"

namespace deepcox {

// A perturbation is applied to the reference person: either one pre-specified
// predictor is changed, or a single coded event is added to the otherwise
// empty history (placed one month before the index date).
struct Perturbation {
  enum class Kind { set_predictor, add_code } kind = Kind::set_predictor;
  std::string label;
  // set_predictor: field in {age, dep, eth, diabetes, af, bp_med, ll_med,
  // apac_med}; value is the new value (for age/dep the per-unit step,
  // evaluated over a grid; for eth the category index 1..4; for flags 0/1).
  std::string field;
  double value = 0;
  // add_code
  std::string code;
  CodeKind code_kind = CodeKind::primary_diagnosis;
};

struct LocalHrRow {
  std::string label;
  std::string category;  // predictors | diagnoses_procedures | medications
  double mean_hr = 1;
  double ci_low = 1;
  double ci_high = 1;
  int n_models = 0;
  bool ci_available = false;
};

inline Person baseline_person(const CentringSpec& centring) {
  Person p;
  p.id = "reference";
  p.sex = Sex::female;
  p.age_years = centring.age_mean;
  p.ethnicity = Ethnicity::european;
  p.dep_quintile = centring.dep_reference;
  return p;
}

namespace detail {

// ages at which per-year steps of continuous predictors are evaluated
inline const std::vector<double> kAgeGrid = {35, 40, 45, 50, 55, 60, 65, 70};
inline const std::vector<int> kDepGrid = {1, 2, 3, 4};

inline double model_g(const RiskModel& model, const Person& person,
                      std::size_t max_seq_len = 100) {
  Vocabulary vocab;
  vocab.codes = model.vocab_codes;
  for (std::size_t i = 0; i < vocab.codes.size(); ++i)
    vocab.token_ids[vocab.codes[i]] = static_cast<std::int32_t>(i + 1);
  Cohort shell;
  shell.horizon_days = model.horizon_days;
  const CodeSequence seq = encode_history(person, vocab, shell, max_seq_len);
  const PredictorVector x = predictor_vector(person, model.centring);
  return predict_g(model, seq, x);
}

inline void apply_predictor(Person& p, const std::string& field, double value) {
  if (field == "age")
    p.age_years += value;
  else if (field == "dep")
    p.dep_quintile += static_cast<int>(value);
  else if (field == "eth")
    p.ethnicity = static_cast<Ethnicity>(static_cast<int>(value));
  else if (field == "diabetes")
    p.diabetes = value != 0;
  else if (field == "af")
    p.atrial_fibrillation = value != 0;
  else if (field == "bp_med")
    p.bp_lowering = value != 0;
  else if (field == "ll_med")
    p.lipid_lowering = value != 0;
  else if (field == "apac_med")
    p.antiplatelet_anticoagulant = value != 0;
  else
    throw std::invalid_argument("perturbation: unknown predictor field \"" +
                                field + "\"");
}

inline bool is_grid_field(const std::string& field) {
  return field == "age" || field == "dep";
}

}  // namespace detail

// Change in log relative risk under the perturbation, one value per
// independently trained run.  Continuous predictors (age, deprivation) are
// reported as the mean and range over a grid of starting values, since a
// nonlinear model has no single per-unit hazard ratio.
inline LocalHrRow local_hr(const std::vector<RiskModel>& runs,
                           const Perturbation& pert) {
  if (runs.empty()) throw std::invalid_argument("local_hr: no models");
  LocalHrRow row;
  row.label = pert.label;
  row.n_models = static_cast<int>(runs.size());
  if (pert.kind == Perturbation::Kind::set_predictor) {
    row.category = "predictors";
  } else {
    row.category = pert.code_kind == CodeKind::medication
                       ? "medications"
                       : "diagnoses_procedures";
  }

  if (pert.kind == Perturbation::Kind::add_code) {
    for (const RiskModel& m : runs) {
      bool known = false;
      for (const std::string& c : m.vocab_codes) known |= c == pert.code;
      if (!known)
        throw std::invalid_argument("local_hr: code \"" + pert.code +
                                    "\" not in model vocabulary");
    }
  }

  const bool grid =
      pert.kind == Perturbation::Kind::set_predictor &&
      detail::is_grid_field(pert.field);

  if (!grid) {
    std::vector<double> deltas;
    std::vector<double> hrs;
    for (const RiskModel& m : runs) {
      Person base = baseline_person(m.centring);
      Person perturbed = base;
      if (pert.kind == Perturbation::Kind::set_predictor) {
        detail::apply_predictor(perturbed, pert.field, pert.value);
      } else {
        CodeEvent e;
        // one month before the index date
        const long mth = month_index(2013, 1) - 1;
        e.year = static_cast<int>(mth / 12);
        e.month = static_cast<int>(mth % 12) + 1;
        e.code = pert.code;
        e.kind = pert.code_kind;
        perturbed.events.push_back(std::move(e));
      }
      const double d = detail::model_g(m, perturbed) - detail::model_g(m, base);
      if (!std::isfinite(d))
        throw std::runtime_error("local_hr: non-finite log relative risk");
      deltas.push_back(d);
      hrs.push_back(std::exp(d));
    }
    row.mean_hr = mean_of(hrs);
    if (runs.size() >= 2) {
      const double md = mean_of(deltas);
      const double sd = sample_sd(deltas);
      row.ci_low = std::exp(md - 1.96 * sd);
      row.ci_high = std::exp(md + 1.96 * sd);
      row.ci_available = true;
    } else {
      row.ci_low = row.ci_high = row.mean_hr;
      row.ci_available = false;
    }
    return row;
  }

  // grid fields: mean and range of the per-step hazard ratio across
  // starting values, each averaged over runs
  std::vector<double> per_start;
  auto eval_start = [&](double age_start, int dep_start) {
    double hr_sum = 0;
    for (const RiskModel& m : runs) {
      Person base = baseline_person(m.centring);
      if (pert.field == "age")
        base.age_years = age_start;
      else
        base.dep_quintile = dep_start;
      Person stepped = base;
      detail::apply_predictor(stepped, pert.field, pert.value);
      hr_sum += std::exp(detail::model_g(m, stepped) - detail::model_g(m, base));
    }
    per_start.push_back(hr_sum / static_cast<double>(runs.size()));
  };
  if (pert.field == "age")
    for (double a : detail::kAgeGrid) eval_start(a, 0);
  else
    for (int d : detail::kDepGrid) eval_start(0, d);

  row.mean_hr = mean_of(per_start);
  row.ci_low = *std::min_element(per_start.begin(), per_start.end());
  row.ci_high = *std::max_element(per_start.begin(), per_start.end());
  row.ci_available = true;  // range, not a sampling CI
  return row;
}

// Rows ranked within each category by descending mean hazard ratio, keeping
// the top k per category.
inline std::vector<LocalHrRow> hr_table(const std::vector<RiskModel>& runs,
                                        const std::vector<Perturbation>& perts,
                                        std::size_t top_k_per_category = 10) {
  if (perts.empty()) throw std::invalid_argument("hr_table: no perturbations");
  std::vector<LocalHrRow> rows;
  for (const Perturbation& p : perts) rows.push_back(local_hr(runs, p));
  std::stable_sort(rows.begin(), rows.end(),
                   [](const LocalHrRow& a, const LocalHrRow& b) {
                     if (a.category != b.category) return a.category < b.category;
                     return a.mean_hr > b.mean_hr;
                   });
  std::vector<LocalHrRow> out;
  std::string current;
  std::size_t kept = 0;
  for (LocalHrRow& r : rows) {
    if (r.category != current) {
      current = r.category;
      kept = 0;
    }
    if (kept < top_k_per_category) {
      out.push_back(std::move(r));
      ++kept;
    }
  }
  return out;
}

}  // namespace deepcox
