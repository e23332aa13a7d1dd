#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "deepcox/pipeline.hpp"

namespace {

deepcox::RunConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return deepcox::RunConfig{};
  return deepcox::load_run_config(path);
}

deepcox::Sex parse_sex_flag(const std::string& s) {
  if (s == "F") return deepcox::Sex::female;
  if (s == "M") return deepcox::Sex::male;
  throw std::runtime_error("--sex must be F or M");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deepcox: deep and classical Cox survival pipelines on coded "
               "longitudinal cohorts"};
  app.require_subcommand(1);

  std::string config_path, out_dir, cohort_path, sex = "F", preset;
  std::uint64_t seed = 1;

  auto* gen = app.add_subcommand("generate",
                                 "write a synthetic cohort with ground truth");
  gen->add_option("--config", config_path, "run config JSON");
  gen->add_option("--preset", preset, "generator preset (linear|sequence|cph|smoke)");
  gen->add_option("--seed", seed, "random seed");
  gen->add_option("--out", out_dir, "output directory")->required();

  auto* train = app.add_subcommand("train", "train the deep risk model");
  train->add_option("--cohort", cohort_path, "cohort JSONL")->required();
  train->add_option("--sex", sex, "F or M");
  train->add_option("--config", config_path, "run config JSON");
  train->add_option("--seed", seed, "random seed");
  train->add_option("--out", out_dir, "output model directory")->required();

  std::string model_dir, stratify_key, sex_override;
  auto* eval = app.add_subcommand("evaluate", "compute the metric report");
  eval->add_option("--model", model_dir, "model directory")->required();
  eval->add_option("--cohort", cohort_path, "cohort JSONL")->required();
  eval->add_option("--sex", sex_override, "override the model's sex filter");
  eval->add_option("--config", config_path, "run config JSON");
  eval->add_option("--stratify", stratify_key,
                   "sub-population key (age15|ethnicity|dep|meds)");
  eval->add_option("--out", out_dir, "output directory")->required();

  auto* compare = app.add_subcommand(
      "compare", "5x2 cross-validated deep vs CPH comparison");
  compare->add_option("--cohort", cohort_path, "cohort JSONL")->required();
  compare->add_option("--sex", sex, "F or M");
  compare->add_option("--config", config_path, "run config JSON");
  compare->add_option("--seed", seed, "random seed");
  compare->add_option("--out", out_dir, "output directory")->required();

  std::vector<std::string> model_dirs;
  std::string pert_path;
  std::size_t top_k = 10;
  auto* explain = app.add_subcommand(
      "explain", "local hazard ratios from repeated training runs");
  explain->add_option("--models", model_dirs, "model directories")->required();
  explain->add_option("--perturbations", pert_path, "perturbation JSONL")
      ->required();
  explain->add_option("--cohort", cohort_path,
                      "cohort JSONL for exposure counts");
  explain->add_option("--config", config_path, "run config JSON");
  explain->add_option("--top-k", top_k, "rows kept per category");
  explain->add_option("--out", out_dir, "output directory")->required();

  std::string report_dir;
  auto* plot = app.add_subcommand("plot", "render report tables as SVG");
  plot->add_option("--report", report_dir, "evaluate output directory")
      ->required();
  plot->add_option("--out", out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "%s\n", app.help().c_str());
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }

  try {
    const deepcox::RunConfig cfg = load_config_or_default(config_path);
    if (gen->parsed()) {
      deepcox::RunConfig g = cfg;
      if (!preset.empty()) {
        g.generator = deepcox::generator_preset(preset);
        if (!config_path.empty()) {
          const auto j = nlohmann::json::parse(deepcox::read_file(config_path));
          if (j.contains("generator"))
            deepcox::cfgjson::merge_generator(g.generator, j["generator"]);
        }
      }
      deepcox::cmd_generate(g, seed, out_dir);
    } else if (train->parsed()) {
      deepcox::cmd_train(cohort_path, parse_sex_flag(sex), cfg, seed, out_dir);
    } else if (eval->parsed()) {
      std::optional<deepcox::Sex> so;
      if (!sex_override.empty()) so = parse_sex_flag(sex_override);
      deepcox::cmd_evaluate(model_dir, cohort_path, so, cfg, out_dir,
                            stratify_key);
    } else if (compare->parsed()) {
      deepcox::cmd_compare(cohort_path, parse_sex_flag(sex), cfg, seed,
                           out_dir);
    } else if (explain->parsed()) {
      deepcox::cmd_explain(model_dirs, pert_path, cohort_path, cfg, out_dir,
                           top_k);
    } else if (plot->parsed()) {
      deepcox::cmd_plot(report_dir, out_dir);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
