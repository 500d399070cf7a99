// ensemble-lab: run the ensemble-equivalence experiments from the command line.
//
// Exit codes: 0 success, 1 invalid configuration, 2 runtime failure.

#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "ensemble_lab/config.hpp"
#include "ensemble_lab/experiments.hpp"

namespace ex = ensemble_lab::experiments;
namespace cfg = ensemble_lab::config;

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kRuntime = 2;

struct Overrides {
  std::map<std::string, std::string> values;  // plan key -> raw text
  std::string config_file;
  bool verbose = false;
};

void add_plan_options(CLI::App* app, Overrides& o) {
  const std::vector<std::pair<std::string, std::string>> flags{
      {"N", "system sizes: comma list or start:stop:factor"},
      {"m", "magnetization density"},
      {"mu", "canonical potential (default: matched)"},
      {"rho", "particle density of the spherical model"},
      {"h", "external field"},
      {"J", "coupling constant"},
      {"epsilon", "energy density"},
      {"beta", "inverse temperature (default: matched)"},
      {"observable", "phi1, phi1phi2, phi1sq, min_pair or clip_phi1"},
      {"target", "canonical or grand_canonical"},
      {"lambda", "Laplace parameters: comma list or start:stop:factor"},
      {"samples", "initial Monte Carlo budget per row"},
      {"sample-cap", "largest Monte Carlo budget per row"},
      {"trials", "random trials (ot-oracle-check)"},
      {"seed", "master seed"},
      {"out", "CSV output path; the JSON summary goes next to it"},
  };
  for (const auto& [flag, help] : flags) {
    std::string key = flag == "sample-cap" ? "sample_cap" : flag;
    app->add_option_function<std::string>(
        "--" + flag, [&o, key](const std::string& v) { o.values[key] = v; }, help);
  }
  app->add_option("--config", o.config_file, "plan file with [experiment] sections");
  app->add_flag("-v,--verbose", o.verbose, "report each finished row on stderr");
}

ex::ExperimentPlan build_plan(ex::ExperimentId id, const Overrides& o) {
  ex::ExperimentPlan p = ex::default_plan(id);
  if (!o.config_file.empty()) p = cfg::plan_from_file(cfg::load_file(o.config_file), id);
  for (const auto& [k, v] : o.values) cfg::apply_key(p, k, v);
  return p;
}

std::string default_output(ex::ExperimentId id) { return ex::cli_name(id) + ".csv"; }

int report_invalid(const std::vector<std::string>& diags) {
  for (const auto& d : diags) std::cerr << "invalid: " << d << '\n';
  return kInvalid;
}

int run_experiment(ex::ExperimentId id, const Overrides& o) {
  ex::ExperimentPlan plan;
  try {
    plan = build_plan(id, o);
  } catch (const cfg::ConfigError& e) {
    return report_invalid({e.what()});
  }
  if (const auto d = cfg::validate(plan); !d.empty()) return report_invalid(d);
  const std::string out = plan.output.empty() ? default_output(id) : plan.output;

  ex::Progress progress;
  if (o.verbose) progress = [](const std::string& msg) { std::cerr << msg << '\n'; };
  try {
    const auto res = ex::run(plan, progress);
    ex::write_outputs(res, out);
    const auto& s = res.summary;
    std::cout << ex::cli_name(id) << ": " << (s.pass ? "pass" : "fail");
    if (s.slope) {
      char buf[96];
      std::snprintf(buf, sizeof buf, ", slope %.4f +- %.4f", *s.slope, s.slope_stderr.value_or(0.0));
      std::cout << buf;
    }
    std::cout << ", " << res.table.rows.size() << " rows -> " << out << ", " << ex::summary_path_for(out) << '\n';
    return kOk;
  } catch (const ex::ExperimentBudgetError& e) {
    std::cerr << "error: " << e.what() << '\n';
    try {
      ex::RunResult partial;
      partial.table = e.partial();
      partial.summary.experiment_id = ex::to_key(id);
      partial.summary.params = ex::plan_to_json(plan);
      partial.summary.details["aborted"] = e.what();
      ex::write_outputs(partial, out);
      std::cerr << "partial table (" << partial.table.rows.size() << " rows) written to " << out << '\n';
    } catch (const std::exception& w) {
      std::cerr << "error: " << w.what() << '\n';
    }
    return kRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
}

int run_validate(const std::string& which, const Overrides& o) {
  std::vector<ex::ExperimentId> ids;
  if (!which.empty()) {
    const auto id = ex::parse_id(which);
    if (!id) return report_invalid({"experiment: unknown '" + which + "'"});
    ids.push_back(*id);
  }
  try {
    if (ids.empty()) {
      if (o.config_file.empty()) return report_invalid({"validate needs an experiment name or --config"});
      for (const auto& [section, entries] : cfg::load_file(o.config_file))
        if (!section.empty()) ids.push_back(*ex::parse_id(section));
      if (ids.empty()) return report_invalid({"config: no [experiment] sections in " + o.config_file});
    }
    std::vector<std::string> all;
    for (auto id : ids) {
      const auto d = cfg::validate(build_plan(id, o));
      all.insert(all.end(), d.begin(), d.end());
      if (d.empty()) std::cout << ex::cli_name(id) << ": ok\n";
    }
    if (!all.empty()) return report_invalid(all);
    return kOk;
  } catch (const cfg::ConfigError& e) {
    return report_invalid({e.what()});
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Equivalence-of-ensembles experiments for the paramagnet and the mean-field spherical model"};
  app.require_subcommand(1);
  app.set_help_flag("--help", "print this help");  // -h is the field strength

  auto* list = app.add_subcommand("list", "print the experiment ids");
  bool list_long = false;
  list->add_flag("-l,--long", list_long, "include a one-line description");

  Overrides validate_opts;
  std::string validate_target;
  auto* validate = app.add_subcommand("validate", "check a plan and print its diagnostics");
  validate->add_option("experiment", validate_target, "experiment to check (default: every section of --config)");
  add_plan_options(validate, validate_opts);

  std::map<ex::ExperimentId, Overrides> run_opts;
  std::map<CLI::App*, ex::ExperimentId> run_cmds;
  for (const auto& e : ex::all_experiments()) {
    auto* sub = app.add_subcommand(e.cli_name, e.summary);
    add_plan_options(sub, run_opts[e.id]);
    run_cmds[sub] = e.id;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kInvalid;
  }

  if (list->parsed()) {
    for (const auto& e : ex::all_experiments()) {
      std::cout << e.key;
      if (list_long) std::cout << "  (" << e.cli_name << ")  " << e.summary;
      std::cout << '\n';
    }
    return kOk;
  }
  if (validate->parsed()) return run_validate(validate_target, validate_opts);
  for (const auto& [sub, id] : run_cmds)
    if (sub->parsed()) return run_experiment(id, run_opts[id]);
  return kInvalid;
}
