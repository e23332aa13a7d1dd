#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "deepcox/cohort.hpp"
#include "deepcox/coxtrain.hpp"
#include "deepcox/cph.hpp"
#include "deepcox/explain.hpp"
#include "deepcox/metrics.hpp"
#include "deepcox/synth.hpp"
#include "deepcox/util.hpp"

namespace deepcox {

inline const char* kVersion = "deepcox 0.1.0";

// Everything a run needs, echoed verbatim into every output directory.
// vocab_min_count defaults to a desk-scale value; national-scale runs use
// the documented production threshold of 500 carriers.
struct RunConfig {
  GeneratorConfig generator;
  NetConfig net;
  TrainConfig train;
  int vocab_min_count = 50;
  std::size_t max_seq_len = 100;
  bool brier_ipcw = true;
};

namespace cfgjson {

inline void merge_generator(GeneratorConfig& g, const nlohmann::json& j) {
  detail::check_keys(
      j, {"n_persons", "vocab_size", "mean_events_per_person", "true_betas",
          "code_effects", "sequence_effect", "effect_code_prevalence",
          "code_prevalence", "flag_prevalence", "baseline_hazard_per_day",
          "admin_days", "dropout_rate_per_day", "female_fraction", "seed",
          "age_reference", "dep_reference"});
  if (j.contains("n_persons")) g.n_persons = j["n_persons"].get<std::size_t>();
  if (j.contains("vocab_size")) g.vocab_size = j["vocab_size"].get<std::size_t>();
  if (j.contains("mean_events_per_person"))
    g.mean_events_per_person = j["mean_events_per_person"].get<double>();
  if (j.contains("true_betas"))
    g.true_betas = j["true_betas"].get<std::map<std::string, double>>();
  if (j.contains("code_effects"))
    g.code_effects = j["code_effects"].get<std::map<std::string, double>>();
  if (j.contains("sequence_effect")) {
    const auto& s = j["sequence_effect"];
    if (s.is_null()) {
      g.sequence_effect.reset();
    } else {
      detail::check_keys(s, {"code_a", "code_b", "log_hr"});
      SequenceEffect se;
      se.code_a = s.value("code_a", se.code_a);
      se.code_b = s.value("code_b", se.code_b);
      se.log_hr = s.value("log_hr", se.log_hr);
      g.sequence_effect = se;
    }
  }
  if (j.contains("effect_code_prevalence"))
    g.effect_code_prevalence = j["effect_code_prevalence"].get<double>();
  if (j.contains("code_prevalence"))
    g.code_prevalence = j["code_prevalence"].get<std::map<std::string, double>>();
  if (j.contains("flag_prevalence"))
    g.flag_prevalence = j["flag_prevalence"].get<std::map<std::string, double>>();
  if (j.contains("baseline_hazard_per_day"))
    g.baseline_hazard_per_day = j["baseline_hazard_per_day"].get<double>();
  if (j.contains("admin_days")) g.admin_days = j["admin_days"].get<long>();
  if (j.contains("dropout_rate_per_day"))
    g.dropout_rate_per_day = j["dropout_rate_per_day"].get<double>();
  if (j.contains("female_fraction"))
    g.female_fraction = j["female_fraction"].get<double>();
  if (j.contains("seed")) g.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("age_reference"))
    g.age_reference = j["age_reference"].get<double>();
  if (j.contains("dep_reference"))
    g.dep_reference = j["dep_reference"].get<int>();
}

inline nlohmann::ordered_json generator_to_json(const GeneratorConfig& g) {
  nlohmann::ordered_json j;
  j["n_persons"] = g.n_persons;
  j["vocab_size"] = g.vocab_size;
  j["mean_events_per_person"] = g.mean_events_per_person;
  j["true_betas"] = g.true_betas;
  j["code_effects"] = g.code_effects;
  if (g.sequence_effect)
    j["sequence_effect"] = {{"code_a", g.sequence_effect->code_a},
                            {"code_b", g.sequence_effect->code_b},
                            {"log_hr", g.sequence_effect->log_hr}};
  else
    j["sequence_effect"] = nullptr;
  j["effect_code_prevalence"] = g.effect_code_prevalence;
  j["code_prevalence"] = g.code_prevalence;
  j["flag_prevalence"] = g.flag_prevalence;
  j["baseline_hazard_per_day"] = g.baseline_hazard_per_day;
  j["admin_days"] = g.admin_days;
  j["dropout_rate_per_day"] = g.dropout_rate_per_day;
  j["female_fraction"] = g.female_fraction;
  j["seed"] = g.seed;
  j["age_reference"] = g.age_reference;
  j["dep_reference"] = g.dep_reference;
  return j;
}

inline void merge_net(NetConfig& n, const nlohmann::json& j) {
  detail::check_keys(
      j, {"embed_dim", "gru_layers", "dropout_rate", "predictor_dim", "seed"});
  if (j.contains("embed_dim")) n.embed_dim = j["embed_dim"].get<int>();
  if (j.contains("gru_layers")) n.gru_layers = j["gru_layers"].get<int>();
  if (j.contains("dropout_rate")) n.dropout_rate = j["dropout_rate"].get<double>();
  if (j.contains("predictor_dim"))
    n.predictor_dim = j["predictor_dim"].get<int>();
  if (j.contains("seed")) n.seed = j["seed"].get<std::uint64_t>();
}

inline nlohmann::ordered_json net_to_json(const NetConfig& n) {
  return {{"embed_dim", n.embed_dim},
          {"gru_layers", n.gru_layers},
          {"dropout_rate", n.dropout_rate},
          {"predictor_dim", n.predictor_dim},
          {"seed", n.seed}};
}

inline void merge_train(TrainConfig& t, const nlohmann::json& j) {
  detail::check_keys(j, {"batch_cases", "epochs", "learning_rate",
                         "adam_beta1", "adam_beta2", "adam_eps",
                         "ensemble_size", "seed"});
  if (j.contains("batch_cases")) t.batch_cases = j["batch_cases"].get<std::size_t>();
  if (j.contains("epochs")) t.epochs = j["epochs"].get<std::size_t>();
  if (j.contains("learning_rate")) t.learning_rate = j["learning_rate"].get<double>();
  if (j.contains("adam_beta1")) t.adam_beta1 = j["adam_beta1"].get<double>();
  if (j.contains("adam_beta2")) t.adam_beta2 = j["adam_beta2"].get<double>();
  if (j.contains("adam_eps")) t.adam_eps = j["adam_eps"].get<double>();
  if (j.contains("ensemble_size"))
    t.ensemble_size = j["ensemble_size"].get<std::size_t>();
  if (j.contains("seed")) t.seed = j["seed"].get<std::uint64_t>();
}

inline nlohmann::ordered_json train_to_json(const TrainConfig& t) {
  return {{"batch_cases", t.batch_cases},
          {"epochs", t.epochs},
          {"learning_rate", t.learning_rate},
          {"adam_beta1", t.adam_beta1},
          {"adam_beta2", t.adam_beta2},
          {"adam_eps", t.adam_eps},
          {"ensemble_size", t.ensemble_size},
          {"seed", t.seed}};
}

}  // namespace cfgjson

inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig cfg;
  detail::check_keys(j, {"preset", "generator", "net", "train",
                         "vocab_min_count", "max_seq_len", "brier_ipcw"});
  if (j.contains("preset"))
    cfg.generator = generator_preset(j["preset"].get<std::string>());
  if (j.contains("generator")) cfgjson::merge_generator(cfg.generator, j["generator"]);
  if (j.contains("net")) cfgjson::merge_net(cfg.net, j["net"]);
  if (j.contains("train")) cfgjson::merge_train(cfg.train, j["train"]);
  if (j.contains("vocab_min_count"))
    cfg.vocab_min_count = j["vocab_min_count"].get<int>();
  if (j.contains("max_seq_len")) cfg.max_seq_len = j["max_seq_len"].get<std::size_t>();
  if (j.contains("brier_ipcw")) cfg.brier_ipcw = j["brier_ipcw"].get<bool>();
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  return parse_run_config(nlohmann::json::parse(read_file(path)));
}

inline nlohmann::ordered_json run_config_to_json(const RunConfig& cfg) {
  nlohmann::ordered_json j;
  j["generator"] = cfgjson::generator_to_json(cfg.generator);
  j["net"] = cfgjson::net_to_json(cfg.net);
  j["train"] = cfgjson::train_to_json(cfg.train);
  j["vocab_min_count"] = cfg.vocab_min_count;
  j["max_seq_len"] = cfg.max_seq_len;
  j["brier_ipcw"] = cfg.brier_ipcw;
  return j;
}

// Tracks every file a command writes so a failing command leaves no partial
// output behind.
class OutputDir {
 public:
  explicit OutputDir(const std::string& dir) : dir_(dir) {
    std::filesystem::create_directories(dir_);
  }
  ~OutputDir() {
    if (committed_) return;
    for (const std::string& f : written_) {
      std::error_code ec;
      std::filesystem::remove(std::filesystem::path(dir_) / f, ec);
    }
  }
  std::string path(const std::string& name) const {
    return (std::filesystem::path(dir_) / name).string();
  }
  void write(const std::string& name, const std::string& content) {
    write_file(path(name), content);
    written_.push_back(name);
  }
  void note(const std::string& name) { written_.push_back(name); }
  void commit() { committed_ = true; }
  const std::vector<std::string>& files() const { return written_; }

 private:
  std::string dir_;
  std::vector<std::string> written_;
  bool committed_ = false;
};

inline void write_manifest(OutputDir& out, const std::string& command,
                           std::uint64_t seed, const RunConfig& cfg,
                           const std::map<std::string, std::string>& inputs) {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["version"] = kVersion;
  j["seed"] = seed;
  nlohmann::ordered_json in = nlohmann::ordered_json::object();
  for (const auto& [path, hash] : inputs) in[path] = hash;
  j["inputs"] = in;
  j["config"] = run_config_to_json(cfg);
  out.write("manifest.json", j.dump(2) + "\n");
}

inline std::string hash_of_file(const std::string& path) {
  return hex64(fnv1a64(read_file(path)));
}

// ---------------------------------------------------------------------------
// generate

inline void cmd_generate(const RunConfig& cfg, std::uint64_t seed,
                         const std::string& out_dir) {
  OutputDir out(out_dir);
  GeneratorConfig gc = cfg.generator;
  gc.seed = seed;
  auto [cohort, truth] = generate(gc);
  {
    std::ostringstream ss;
    save_cohort(cohort, ss);
    out.write("cohort.jsonl", ss.str());
  }
  {
    std::ostringstream ss;
    for (std::size_t i = 0; i < cohort.persons.size(); ++i) {
      nlohmann::ordered_json j;
      j["id"] = cohort.persons[i].id;
      j["g_star"] = truth.g_star[i];
      j["p5"] = truth.p5[i];
      ss << j.dump() << "\n";
    }
    out.write("truth.jsonl", ss.str());
  }
  RunConfig echo = cfg;
  echo.generator = gc;
  write_manifest(out, "generate", seed, echo, {});
  out.commit();
}

// ---------------------------------------------------------------------------
// model directory I/O

inline std::string s0_to_csv(const SurvivalCurve& s0) {
  std::string csv = "day,survival\n";
  for (std::size_t i = 0; i < s0.days.size(); ++i)
    csv += fmt_double(s0.days[i]) + "," + fmt_double(s0.survival[i], 17) + "\n";
  return csv;
}

inline SurvivalCurve s0_from_csv(const std::string& content) {
  SurvivalCurve s0;
  std::istringstream in(content);
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::size_t comma = line.find(',');
    s0.days.push_back(std::stod(line.substr(0, comma)));
    s0.survival.push_back(std::stod(line.substr(comma + 1)));
  }
  return s0;
}

inline void save_model(const RiskModel& model, Sex sex, OutputDir& out) {
  nlohmann::ordered_json j;
  j["format"] = "deepcox-model-v1";
  j["sex"] = sex_tag(sex);
  j["net"] = cfgjson::net_to_json(model.net_config);
  j["train"] = cfgjson::train_to_json(model.train_config);
  j["g_ref"] = model.g_ref;
  j["horizon_days"] = model.horizon_days;
  j["centring"] = {{"age_mean", model.centring.age_mean},
                   {"dep_reference", model.centring.dep_reference}};
  j["vocab"] = model.vocab_codes;
  j["members"] = model.members.size();
  out.write("model.json", j.dump(2) + "\n");
  out.write("s0.csv", s0_to_csv(model.s0));
  for (std::size_t m = 0; m < model.members.size(); ++m) {
    char name[48];
    std::snprintf(name, sizeof(name), "member_%03zu.json", m);
    out.write(name, params_to_json(model.members[m]).dump() + "\n");
  }
}

struct LoadedModel {
  RiskModel model;
  Sex sex = Sex::female;
};

inline LoadedModel load_model(const std::string& dir) {
  const auto j = nlohmann::json::parse(
      read_file((std::filesystem::path(dir) / "model.json").string()));
  if (j.value("format", "") != std::string("deepcox-model-v1"))
    throw std::runtime_error("load_model: unknown format in " + dir);
  LoadedModel lm;
  lm.sex = detail::parse_sex(j.at("sex").get<std::string>());
  cfgjson::merge_net(lm.model.net_config, j.at("net"));
  lm.model.net_config.predictor_dim = static_cast<int>(kPredictorDim);
  cfgjson::merge_train(lm.model.train_config, j.at("train"));
  lm.model.g_ref = j.at("g_ref").get<double>();
  lm.model.horizon_days = j.at("horizon_days").get<long>();
  lm.model.centring.age_mean = j.at("centring").at("age_mean").get<double>();
  lm.model.centring.dep_reference =
      j.at("centring").at("dep_reference").get<int>();
  lm.model.vocab_codes = j.at("vocab").get<std::vector<std::string>>();
  lm.model.s0 = s0_from_csv(
      read_file((std::filesystem::path(dir) / "s0.csv").string()));
  const std::size_t members = j.at("members").get<std::size_t>();
  for (std::size_t m = 0; m < members; ++m) {
    char name[48];
    std::snprintf(name, sizeof(name), "member_%03zu.json", m);
    lm.model.members.push_back(
        load_params((std::filesystem::path(dir) / name).string()));
  }
  return lm;
}

// ---------------------------------------------------------------------------
// train

inline RiskModel train_on_cohort(const Cohort& sex_cohort, const RunConfig& cfg,
                                 std::uint64_t seed) {
  if (sex_cohort.persons.empty())
    throw std::runtime_error("train: no persons after sex filter");
  const CentringSpec centring{mean_age(sex_cohort), 3};
  const Vocabulary vocab = build_vocabulary(sex_cohort, cfg.vocab_min_count);
  const EncodedCohort enc =
      encode_cohort(sex_cohort, vocab, centring, cfg.max_seq_len);
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  NetConfig nc = cfg.net;
  nc.predictor_dim = static_cast<int>(kPredictorDim);
  return train(enc, nc, tc);
}

inline void cmd_train(const std::string& cohort_path, Sex sex,
                      const RunConfig& cfg, std::uint64_t seed,
                      const std::string& out_dir) {
  const Cohort cohort = load_cohort(cohort_path);
  const Cohort mine = filter_by_sex(cohort, sex);
  RiskModel model = train_on_cohort(mine, cfg, seed);
  OutputDir out(out_dir);
  save_model(model, sex, out);
  write_manifest(out, "train", seed, cfg,
                 {{cohort_path, hash_of_file(cohort_path)}});
  out.commit();
}

// ---------------------------------------------------------------------------
// evaluate

inline MetricsReport compute_report(const std::vector<double>& g, double g_ref,
                                    const SurvivalCurve& s0,
                                    const std::vector<double>& times,
                                    const std::vector<std::uint8_t>& events,
                                    double horizon, bool ipcw) {
  MetricsReport r;
  r.harrell_c = harrell_c(g, times, events);
  r.d_statistic = d_statistic(g, times, events);
  r.r_squared = r_squared_from_d(r.d_statistic);
  r.integrated_brier =
      integrated_brier_from_curve(g, g_ref, s0, times, events, horizon, ipcw);
  std::vector<double> predicted(g.size());
  for (std::size_t i = 0; i < g.size(); ++i)
    predicted[i] = five_year_risk(g[i], g_ref, s0, horizon);
  r.calibration = calibration_deciles(predicted, times, events, horizon);
  r.discrimination = discrimination_deciles(predicted, times, events, horizon);
  return r;
}

inline std::string metrics_csv(const MetricsReport& r) {
  std::string csv = "metric,value\n";
  csv += "r_squared," + fmt_double(r.r_squared) + "\n";
  csv += "d_statistic," + fmt_double(r.d_statistic) + "\n";
  csv += "harrell_c," + fmt_double(r.harrell_c) + "\n";
  csv += "integrated_brier," + fmt_double(r.integrated_brier) + "\n";
  return csv;
}

inline std::string calibration_csv(const std::vector<CalibrationDecile>& rows) {
  std::string csv = "decile,mean_predicted,observed,n,events\n";
  for (const auto& r : rows)
    csv += std::to_string(r.decile) + "," + fmt_double(r.mean_predicted) + "," +
           fmt_double(r.observed) + "," + std::to_string(r.n) + "," +
           std::to_string(r.observed_events) + "\n";
  return csv;
}

inline std::string discrimination_csv(
    const std::vector<DiscriminationDecile>& rows) {
  std::string csv = "decile,event_share,events\n";
  for (const auto& r : rows)
    csv += std::to_string(r.decile) + "," + fmt_double(r.event_share) + "," +
           std::to_string(r.events) + "\n";
  return csv;
}

inline nlohmann::ordered_json report_to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["r_squared"] = r.r_squared;
  j["d_statistic"] = r.d_statistic;
  j["harrell_c"] = r.harrell_c;
  j["integrated_brier"] = r.integrated_brier;
  nlohmann::ordered_json cal = nlohmann::ordered_json::array();
  for (const auto& row : r.calibration)
    cal.push_back({{"decile", row.decile},
                   {"mean_predicted", row.mean_predicted},
                   {"observed", row.observed},
                   {"n", row.n},
                   {"events", row.observed_events}});
  j["calibration_deciles"] = cal;
  nlohmann::ordered_json dis = nlohmann::ordered_json::array();
  for (const auto& row : r.discrimination)
    dis.push_back({{"decile", row.decile},
                   {"event_share", row.event_share},
                   {"events", row.events}});
  j["discrimination_deciles"] = dis;
  return j;
}

// Sub-population keys for stratified qualitative assessment.
inline std::vector<std::pair<std::string, std::vector<std::size_t>>> stratify(
    const Cohort& cohort, const std::string& key) {
  if (key != "age15" && key != "ethnicity" && key != "dep" && key != "meds")
    throw std::invalid_argument("unknown stratify key \"" + key +
                                "\" (use age15|ethnicity|dep|meds)");
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < cohort.persons.size(); ++i) {
    const Person& p = cohort.persons[i];
    std::string tag;
    if (key == "age15") {
      tag = p.age_years < 45 ? "30-44" : (p.age_years < 60 ? "45-59" : "60-74");
    } else if (key == "ethnicity") {
      tag = kEthnicityTags[static_cast<std::size_t>(p.ethnicity)];
    } else if (key == "dep") {
      tag = "q" + std::to_string(p.dep_quintile);
    } else {
      tag = (p.bp_lowering || p.lipid_lowering || p.antiplatelet_anticoagulant)
                ? "on_meds"
                : "no_meds";
    }
    groups[tag].push_back(i);
  }
  return {groups.begin(), groups.end()};
}

inline void cmd_evaluate(const std::string& model_dir,
                         const std::string& cohort_path,
                         std::optional<Sex> sex_override, const RunConfig& cfg,
                         const std::string& out_dir,
                         const std::string& stratify_key = "") {
  const LoadedModel lm = load_model(model_dir);
  const Sex sex = sex_override.value_or(lm.sex);
  const Cohort cohort = filter_by_sex(load_cohort(cohort_path), sex);
  if (cohort.persons.empty())
    throw std::runtime_error("evaluate: no persons after sex filter");

  Vocabulary vocab;
  vocab.codes = lm.model.vocab_codes;
  for (std::size_t i = 0; i < vocab.codes.size(); ++i)
    vocab.token_ids[vocab.codes[i]] = static_cast<std::int32_t>(i + 1);
  const EncodedCohort enc =
      encode_cohort(cohort, vocab, lm.model.centring, cfg.max_seq_len);

  std::vector<double> g(enc.persons.size()), times(enc.persons.size());
  std::vector<std::uint8_t> events(enc.persons.size());
  for (std::size_t i = 0; i < enc.persons.size(); ++i) {
    g[i] = predict_g(lm.model, enc.persons[i].seq, enc.persons[i].x);
    times[i] = enc.persons[i].time;
    events[i] = enc.persons[i].event ? 1 : 0;
  }
  const double horizon = static_cast<double>(lm.model.horizon_days);
  const MetricsReport report = compute_report(
      g, lm.model.g_ref, lm.model.s0, times, events, horizon, cfg.brier_ipcw);

  OutputDir out(out_dir);
  out.write("metrics.csv", metrics_csv(report));
  out.write("metrics.json", report_to_json(report).dump(2) + "\n");
  out.write("calibration.csv", calibration_csv(report.calibration));
  out.write("discrimination.csv", discrimination_csv(report.discrimination));

  if (!stratify_key.empty()) {
    std::vector<double> predicted(g.size());
    for (std::size_t i = 0; i < g.size(); ++i)
      predicted[i] = five_year_risk(g[i], lm.model.g_ref, lm.model.s0, horizon);
    for (const auto& [tag, idx] : stratify(cohort, stratify_key)) {
      if (idx.size() < 10) continue;
      std::vector<double> ps, ts;
      std::vector<std::uint8_t> es;
      for (std::size_t i : idx) {
        ps.push_back(predicted[i]);
        ts.push_back(times[i]);
        es.push_back(events[i]);
      }
      bool any_event = false;
      for (auto e : es) any_event |= e != 0;
      if (!any_event) continue;
      out.write("calibration_" + stratify_key + "_" + tag + ".csv",
                calibration_csv(calibration_deciles(ps, ts, es, horizon)));
      out.write("discrimination_" + stratify_key + "_" + tag + ".csv",
                discrimination_csv(discrimination_deciles(ps, ts, es, horizon)));
    }
  }
  write_manifest(out, "evaluate", 0, cfg,
                 {{cohort_path, hash_of_file(cohort_path)},
                  {model_dir + "/model.json",
                   hash_of_file((std::filesystem::path(model_dir) / "model.json")
                                    .string())}});
  out.commit();
}

// ---------------------------------------------------------------------------
// compare: stratified 5x2 cross-validation of deep vs CPH

struct FoldMetrics {
  double r_squared = 0;
  double d_statistic = 0;
  double harrell_c = 0;
  double integrated_brier = 0;
};

struct ComparisonReport {
  std::vector<FoldMetrics> deep;  // 10 folds, replication-major
  std::vector<FoldMetrics> cph;
  std::map<std::string, FTestResult> f_tests;  // keyed by metric name
  std::vector<HazardRatioRow> cph_coefficients;  // full-data fit
};

namespace detail {

inline FoldMetrics fold_metrics(const std::vector<double>& g, double g_ref,
                                const SurvivalCurve& s0,
                                const std::vector<double>& times,
                                const std::vector<std::uint8_t>& events,
                                double horizon, bool ipcw) {
  FoldMetrics m;
  m.harrell_c = harrell_c(g, times, events);
  m.d_statistic = d_statistic(g, times, events);
  m.r_squared = r_squared_from_d(m.d_statistic);
  m.integrated_brier =
      integrated_brier_from_curve(g, g_ref, s0, times, events, horizon, ipcw);
  return m;
}

}  // namespace detail

inline ComparisonReport run_compare(const Cohort& sex_cohort,
                                    const RunConfig& cfg, std::uint64_t seed) {
  ComparisonReport report;
  const double horizon = static_cast<double>(sex_cohort.horizon_days);
  const std::vector<FoldSplit> splits = split_5x2_stratified(sex_cohort, seed);
  const Rng root(seed);

  for (const FoldSplit& split : splits) {
    const Cohort train_cohort = subset(sex_cohort, split.train);
    const Cohort test_cohort = subset(sex_cohort, split.test);

    const CentringSpec centring{mean_age(train_cohort), 3};
    const Vocabulary vocab =
        build_vocabulary(train_cohort, cfg.vocab_min_count);
    const EncodedCohort enc_train =
        encode_cohort(train_cohort, vocab, centring, cfg.max_seq_len);
    const EncodedCohort enc_test =
        encode_cohort(test_cohort, vocab, centring, cfg.max_seq_len);

    std::vector<double> test_times(enc_test.persons.size());
    std::vector<std::uint8_t> test_events(enc_test.persons.size());
    for (std::size_t i = 0; i < enc_test.persons.size(); ++i) {
      test_times[i] = enc_test.persons[i].time;
      test_events[i] = enc_test.persons[i].event ? 1 : 0;
    }

    // deep model
    TrainConfig tc = cfg.train;
    tc.seed = root.stream(split.replication * 2 + split.fold).next();
    NetConfig nc = cfg.net;
    nc.predictor_dim = static_cast<int>(kPredictorDim);
    const RiskModel deep = train(enc_train, nc, tc);
    std::vector<double> g_deep(enc_test.persons.size());
    for (std::size_t i = 0; i < enc_test.persons.size(); ++i)
      g_deep[i] =
          predict_g(deep, enc_test.persons[i].seq, enc_test.persons[i].x);
    report.deep.push_back(detail::fold_metrics(g_deep, deep.g_ref, deep.s0,
                                               test_times, test_events, horizon,
                                               cfg.brier_ipcw));

    // classical comparator on the same predictors
    const std::size_t p = kPredictorDim;
    std::vector<double> x_train(enc_train.persons.size() * p);
    std::vector<double> t_train(enc_train.persons.size());
    std::vector<std::uint8_t> e_train(enc_train.persons.size());
    for (std::size_t i = 0; i < enc_train.persons.size(); ++i) {
      for (std::size_t k = 0; k < p; ++k)
        x_train[i * p + k] = enc_train.persons[i].x[k];
      t_train[i] = enc_train.persons[i].time;
      e_train[i] = enc_train.persons[i].event ? 1 : 0;
    }
    CphModel cph = fit_cph(x_train, enc_train.persons.size(), p, t_train,
                           e_train, TieMethod::efron);
    cph.centring = centring;
    cph.horizon_days = sex_cohort.horizon_days;
    std::vector<double> g_cph(enc_test.persons.size());
    for (std::size_t i = 0; i < enc_test.persons.size(); ++i) {
      double eta = 0;
      for (std::size_t k = 0; k < p; ++k)
        eta += cph.beta[k] * enc_test.persons[i].x[k];
      g_cph[i] = eta;
    }
    report.cph.push_back(detail::fold_metrics(g_cph, 0.0, cph.baseline,
                                              test_times, test_events, horizon,
                                              cfg.brier_ipcw));
  }

  // combined 5x2 F tests on deep-minus-cph differences per metric
  auto collect = [&](auto pick, const char* name) {
    std::vector<std::array<double, 2>> diffs(5);
    for (std::size_t i = 0; i < 10; ++i)
      diffs[i / 2][i % 2] = pick(report.deep[i]) - pick(report.cph[i]);
    report.f_tests[name] = f_test_5x2(diffs);
  };
  collect([](const FoldMetrics& m) { return m.r_squared; }, "r_squared");
  collect([](const FoldMetrics& m) { return m.d_statistic; }, "d_statistic");
  collect([](const FoldMetrics& m) { return m.harrell_c; }, "harrell_c");
  collect([](const FoldMetrics& m) { return m.integrated_brier; },
          "integrated_brier");

  // hazard ratios from the full-data CPH fit
  {
    const CentringSpec centring{mean_age(sex_cohort), 3};
    const std::size_t n = sex_cohort.persons.size();
    const std::size_t p = kPredictorDim;
    std::vector<double> x(n * p);
    std::vector<double> t(n);
    std::vector<std::uint8_t> e(n);
    for (std::size_t i = 0; i < n; ++i) {
      const PredictorVector pv =
          predictor_vector(sex_cohort.persons[i], centring);
      for (std::size_t k = 0; k < p; ++k) x[i * p + k] = pv[k];
      t[i] = static_cast<double>(sex_cohort.persons[i].outcome_days);
      e[i] = sex_cohort.persons[i].outcome_event ? 1 : 0;
    }
    CphModel full = fit_cph(x, n, p, t, e, TieMethod::efron);
    report.cph_coefficients = hazard_ratios(full);
  }
  return report;
}

inline std::string folds_csv(const ComparisonReport& r) {
  std::string csv =
      "replication,fold,model,r_squared,d_statistic,harrell_c,integrated_brier\n";
  for (std::size_t i = 0; i < r.deep.size(); ++i) {
    for (int which = 0; which < 2; ++which) {
      const FoldMetrics& m = which == 0 ? r.deep[i] : r.cph[i];
      csv += std::to_string(i / 2) + "," + std::to_string(i % 2) + "," +
             (which == 0 ? "deep" : "cph") + "," + fmt_double(m.r_squared) +
             "," + fmt_double(m.d_statistic) + "," + fmt_double(m.harrell_c) +
             "," + fmt_double(m.integrated_brier) + "\n";
    }
  }
  return csv;
}

inline std::string ftests_csv(const ComparisonReport& r) {
  std::string csv = "metric,f,p_value\n";
  for (const char* name :
       {"r_squared", "d_statistic", "harrell_c", "integrated_brier"}) {
    const FTestResult& t = r.f_tests.at(name);
    csv += std::string(name) + "," + fmt_double(t.f) + "," +
           fmt_double(t.p_value) + "\n";
  }
  return csv;
}

inline std::string summary_csv(const ComparisonReport& r) {
  std::string csv = "model,metric,mean,ci_low,ci_high\n";
  auto emit = [&](const char* model, const std::vector<FoldMetrics>& folds,
                  const char* metric, auto pick) {
    std::vector<double> v;
    for (const FoldMetrics& m : folds) v.push_back(pick(m));
    const double mean = mean_of(v);
    const double half = 1.96 * sample_sd(v) / std::sqrt(10.0);
    csv += std::string(model) + "," + metric + "," + fmt_double(mean) + "," +
           fmt_double(mean - half) + "," + fmt_double(mean + half) + "\n";
  };
  for (const char* model : {"deep", "cph"}) {
    const auto& folds = std::string(model) == "deep" ? r.deep : r.cph;
    emit(model, folds, "r_squared",
         [](const FoldMetrics& m) { return m.r_squared; });
    emit(model, folds, "d_statistic",
         [](const FoldMetrics& m) { return m.d_statistic; });
    emit(model, folds, "harrell_c",
         [](const FoldMetrics& m) { return m.harrell_c; });
    emit(model, folds, "integrated_brier",
         [](const FoldMetrics& m) { return m.integrated_brier; });
  }
  return csv;
}

inline std::string coefficients_csv(const std::vector<HazardRatioRow>& rows) {
  std::string csv = "predictor,beta,se,hr,ci_low,ci_high\n";
  for (const auto& r : rows)
    csv += r.predictor + "," + fmt_double(r.beta) + "," + fmt_double(r.se) +
           "," + fmt_double(r.hr) + "," + fmt_double(r.ci_low) + "," +
           fmt_double(r.ci_high) + "\n";
  return csv;
}

inline void cmd_compare(const std::string& cohort_path, Sex sex,
                        const RunConfig& cfg, std::uint64_t seed,
                        const std::string& out_dir) {
  const Cohort cohort = filter_by_sex(load_cohort(cohort_path), sex);
  const ComparisonReport report = run_compare(cohort, cfg, seed);
  OutputDir out(out_dir);
  out.write("folds.csv", folds_csv(report));
  out.write("ftests.csv", ftests_csv(report));
  out.write("summary.csv", summary_csv(report));
  out.write("cph_coefficients.csv", coefficients_csv(report.cph_coefficients));
  write_manifest(out, "compare", seed, cfg,
                 {{cohort_path, hash_of_file(cohort_path)}});
  out.commit();
}

// ---------------------------------------------------------------------------
// explain

inline Perturbation perturbation_from_json(const nlohmann::json& j) {
  detail::check_keys(j, {"label", "kind", "field", "value", "code", "code_kind"});
  Perturbation p;
  p.label = j.at("label").get<std::string>();
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "set_predictor") {
    p.kind = Perturbation::Kind::set_predictor;
    p.field = j.at("field").get<std::string>();
    p.value = j.at("value").get<double>();
  } else if (kind == "add_code") {
    p.kind = Perturbation::Kind::add_code;
    p.code = j.at("code").get<std::string>();
    p.code_kind = detail::parse_kind(j.value("code_kind", "pd"));
  } else {
    throw std::runtime_error("perturbation kind must be set_predictor|add_code");
  }
  return p;
}

inline std::vector<Perturbation> load_perturbations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open perturbation file: " + path);
  std::vector<Perturbation> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(perturbation_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error("perturbations line " + std::to_string(line_no) +
                               ": " + e.what());
    }
  }
  return out;
}

inline constexpr std::size_t kNoExposureCount =
    static_cast<std::size_t>(-1);  // continuous fields have no carrier count

// how many cohort members carry the perturbed attribute, for the N column
inline std::size_t exposed_count(const Cohort& cohort, const Perturbation& p) {
  if (p.kind == Perturbation::Kind::set_predictor &&
      (p.field == "age" || p.field == "dep"))
    return kNoExposureCount;
  std::size_t n = 0;
  for (const Person& person : cohort.persons) {
    bool hit = false;
    if (p.kind == Perturbation::Kind::add_code) {
      for (const CodeEvent& e : person.events) hit |= e.code == p.code;
    } else if (p.field == "diabetes") {
      hit = person.diabetes;
    } else if (p.field == "af") {
      hit = person.atrial_fibrillation;
    } else if (p.field == "bp_med") {
      hit = person.bp_lowering;
    } else if (p.field == "ll_med") {
      hit = person.lipid_lowering;
    } else if (p.field == "apac_med") {
      hit = person.antiplatelet_anticoagulant;
    } else if (p.field == "eth") {
      hit = person.ethnicity == static_cast<Ethnicity>(static_cast<int>(p.value));
    } else {
      continue;  // continuous fields have no exposure count
    }
    n += hit;
  }
  return n;
}

inline std::string local_hr_csv(const std::vector<LocalHrRow>& rows,
                                const std::vector<std::size_t>& exposed) {
  std::string csv = "label,category,n_exposed,mean_hr,ci_low,ci_high,n_models\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const LocalHrRow& r = rows[i];
    const bool has_n = i < exposed.size() && exposed[i] != kNoExposureCount;
    csv += r.label + "," + r.category + "," +
           (has_n ? std::to_string(exposed[i]) : "") + "," +
           fmt_double(r.mean_hr) + "," + fmt_double(r.ci_low) + "," +
           fmt_double(r.ci_high) + "," + std::to_string(r.n_models) + "\n";
  }
  return csv;
}

inline void cmd_explain(const std::vector<std::string>& model_dirs,
                        const std::string& perturbation_path,
                        const std::string& cohort_path, const RunConfig& cfg,
                        const std::string& out_dir, std::size_t top_k) {
  if (model_dirs.empty()) throw std::runtime_error("explain: no model dirs");
  std::vector<RiskModel> runs;
  for (const std::string& d : model_dirs) runs.push_back(load_model(d).model);
  const std::vector<Perturbation> perts = load_perturbations(perturbation_path);
  if (perts.empty()) throw std::runtime_error("explain: no perturbations");
  const std::vector<LocalHrRow> rows = hr_table(runs, perts, top_k);

  std::vector<std::size_t> exposed;
  if (!cohort_path.empty()) {
    const Cohort cohort = load_cohort(cohort_path);
    std::map<std::string, const Perturbation*> by_label;
    for (const Perturbation& p : perts) by_label[p.label] = &p;
    for (const LocalHrRow& r : rows)
      exposed.push_back(exposed_count(cohort, *by_label.at(r.label)));
  }

  OutputDir out(out_dir);
  out.write("local_hr.csv", local_hr_csv(rows, exposed));
  std::map<std::string, std::string> inputs = {
      {perturbation_path, hash_of_file(perturbation_path)}};
  if (!cohort_path.empty())
    inputs[cohort_path] = hash_of_file(cohort_path);
  write_manifest(out, "explain", 0, cfg, inputs);
  out.commit();
}

// ---------------------------------------------------------------------------
// plot: deterministic SVG, no timestamps

namespace svgplot {

inline std::string header(int w, int h) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
         std::to_string(w) + "\" height=\"" + std::to_string(h) +
         "\" viewBox=\"0 0 " + std::to_string(w) + " " + std::to_string(h) +
         "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

inline std::string line(double x1, double y1, double x2, double y2,
                        const char* stroke, const char* extra = "") {
  return "<line x1=\"" + fmt_double(x1, 6) + "\" y1=\"" + fmt_double(y1, 6) +
         "\" x2=\"" + fmt_double(x2, 6) + "\" y2=\"" + fmt_double(y2, 6) +
         "\" stroke=\"" + stroke + "\" " + extra + "/>\n";
}

inline std::string circle(double x, double y, double r, const char* fill) {
  return "<circle cx=\"" + fmt_double(x, 6) + "\" cy=\"" + fmt_double(y, 6) +
         "\" r=\"" + fmt_double(r, 6) + "\" fill=\"" + fill + "\"/>\n";
}

inline std::string text(double x, double y, const std::string& s,
                        const char* anchor = "middle", int size = 11) {
  return "<text x=\"" + fmt_double(x, 6) + "\" y=\"" + fmt_double(y, 6) +
         "\" font-family=\"sans-serif\" font-size=\"" + std::to_string(size) +
         "\" text-anchor=\"" + std::string(anchor) + "\">" + s + "</text>\n";
}

}  // namespace svgplot

struct CalibrationCsvRow {
  int decile;
  double mean_predicted;
  double observed;
  std::size_t n;
  std::size_t events;
};

inline std::vector<CalibrationCsvRow> parse_calibration_csv(
    const std::string& content) {
  std::vector<CalibrationCsvRow> rows;
  std::istringstream in(content);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    CalibrationCsvRow r;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    ls >> r.decile >> r.mean_predicted >> r.observed >> r.n >> r.events;
    rows.push_back(r);
  }
  return rows;
}

// Mean estimated risk against the observed proportion per decile, with the
// identity line and 3-SE whiskers on the observed proportions.
inline std::string calibration_svg(const std::vector<CalibrationCsvRow>& rows) {
  if (rows.empty()) throw std::runtime_error("plot: empty calibration table");
  const int w = 480, h = 480, m = 56;
  double maxv = 0;
  for (const auto& r : rows)
    maxv = std::max({maxv, r.mean_predicted, r.observed});
  maxv = maxv <= 0 ? 1.0 : maxv * 1.15;
  auto X = [&](double v) { return m + v / maxv * (w - 2 * m); };
  auto Y = [&](double v) { return h - m - v / maxv * (h - 2 * m); };
  std::string svg = svgplot::header(w, h);
  svg += svgplot::line(m, h - m, w - m, h - m, "black");
  svg += svgplot::line(m, m, m, h - m, "black");
  svg += svgplot::line(X(0), Y(0), X(maxv), Y(maxv), "grey",
                       "stroke-dasharray=\"4 3\"");
  for (int tick = 0; tick <= 4; ++tick) {
    const double v = maxv * tick / 4.0;
    svg += svgplot::text(X(v), h - m + 16, fmt_double(v, 3));
    svg += svgplot::text(m - 8, Y(v) + 4, fmt_double(v, 3), "end");
  }
  for (const auto& r : rows) {
    const double se =
        r.n > 0 ? std::sqrt(std::max(r.observed * (1 - r.observed), 0.0) /
                            static_cast<double>(r.n))
                : 0.0;
    svg += svgplot::line(X(r.mean_predicted), Y(r.observed - 3 * se),
                         X(r.mean_predicted), Y(r.observed + 3 * se), "steelblue");
    svg += svgplot::circle(X(r.mean_predicted), Y(r.observed), 3.5, "steelblue");
  }
  svg += svgplot::text(w / 2.0, h - 16, "mean predicted five-year risk");
  svg += svgplot::text(16, h / 2.0, "observed proportion", "middle");
  svg += "</svg>\n";
  return svg;
}

struct DiscriminationCsvRow {
  int decile;
  double event_share;
  std::size_t events;
};

inline std::vector<DiscriminationCsvRow> parse_discrimination_csv(
    const std::string& content) {
  std::vector<DiscriminationCsvRow> rows;
  std::istringstream in(content);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    DiscriminationCsvRow r;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    ls >> r.decile >> r.event_share >> r.events;
    rows.push_back(r);
  }
  return rows;
}

// Dot chart of the share of all observed events per decile of predicted risk.
inline std::string discrimination_svg(
    const std::vector<DiscriminationCsvRow>& rows) {
  if (rows.empty()) throw std::runtime_error("plot: empty discrimination table");
  const int w = 480, h = 480, m = 56;
  double maxv = 0;
  for (const auto& r : rows) maxv = std::max(maxv, r.event_share);
  maxv = maxv <= 0 ? 1.0 : maxv * 1.15;
  auto X = [&](double d) { return m + (d - 0.5) / 10.0 * (w - 2 * m); };
  auto Y = [&](double v) { return h - m - v / maxv * (h - 2 * m); };
  std::string svg = svgplot::header(w, h);
  svg += svgplot::line(m, h - m, w - m, h - m, "black");
  svg += svgplot::line(m, m, m, h - m, "black");
  for (int tick = 0; tick <= 4; ++tick) {
    const double v = maxv * tick / 4.0;
    svg += svgplot::text(m - 8, Y(v) + 4, fmt_double(v, 3), "end");
  }
  for (const auto& r : rows) {
    svg += svgplot::text(X(r.decile), h - m + 16, std::to_string(r.decile));
    svg += svgplot::line(X(r.decile), Y(0), X(r.decile), Y(r.event_share),
                         "lightgrey");
    svg += svgplot::circle(X(r.decile), Y(r.event_share), 4, "firebrick");
  }
  svg += svgplot::text(w / 2.0, h - 16, "decile of predicted risk");
  svg += svgplot::text(16, h / 2.0, "share of events", "middle");
  svg += "</svg>\n";
  return svg;
}

inline void cmd_plot(const std::string& report_dir, const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::vector<std::pair<std::string, bool>> tables;  // name, is_calibration
  for (const auto& entry : fs::directory_iterator(report_dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("calibration", 0) == 0 && entry.path().extension() == ".csv")
      tables.push_back({name, true});
    if (name.rfind("discrimination", 0) == 0 &&
        entry.path().extension() == ".csv")
      tables.push_back({name, false});
  }
  std::sort(tables.begin(), tables.end());
  if (tables.empty())
    throw std::runtime_error("plot: no calibration/discrimination tables in " +
                             report_dir);
  OutputDir out(out_dir);
  for (const auto& [name, is_cal] : tables) {
    const std::string content =
        read_file((fs::path(report_dir) / name).string());
    const std::string stem = name.substr(0, name.size() - 4);
    if (is_cal)
      out.write(stem + ".svg", calibration_svg(parse_calibration_csv(content)));
    else
      out.write(stem + ".svg",
                discrimination_svg(parse_discrimination_csv(content)));
  }
  out.commit();
}

}  // namespace deepcox
