// msdpm: simulate, fit, gamma, score and diagnose from the command line.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "msd/cli.hpp"

namespace {

std::optional<std::uint64_t> opt_seed(const CLI::Option* opt, std::uint64_t value) {
  if (opt->count() > 0) return value;
  return std::nullopt;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace msd::cli;
  CLI::App app{"Mixture of Gaussian factor models for mixed-scale longitudinal surveys"};
  app.require_subcommand(1);
  const std::vector<std::string> args(argv + 1, argv + argc);

  SimulateOptions sim;
  std::uint64_t sim_seed = 0;
  std::size_t sim_n = 0;
  auto* simulate = app.add_subcommand("simulate", "Generate a synthetic panel, its generating matrices and oracle gammas");
  simulate->add_option("--case", sim.case_id, "Data-generating case (1, 2 or 3)")->required();
  auto* sim_n_opt = simulate->add_option("--n", sim_n, "Number of subjects (cases 1-2; default 4000)");
  auto* sim_seed_opt = simulate->add_option("--seed", sim_seed, "Random seed");
  simulate->add_option("--out", sim.out, "Output directory")->required();
  simulate->add_option("--M", sim.oracle_draws, "Oracle population draws")->capture_default_str();
  simulate->add_option("--subpop", sim.subpops, "Oracle subpopulation (repeatable)")->capture_default_str();

  FitOptions fit;
  std::uint64_t fit_seed = 0;
  std::string fit_data;
  int burn = 0, iters = 0, thin = 0;
  auto* fitc = app.add_subcommand("fit", "Run the Gibbs sampler and write draws and traces");
  fitc->add_option("--data", fit_data, "Directory holding subjects.csv, observations.csv and schema.json");
  fitc->add_option("--subjects", fit.subjects, "Subject CSV");
  fitc->add_option("--observations", fit.observations, "Observation CSV");
  fitc->add_option("--schema", fit.schema, "Schema JSON");
  fitc->add_option("--config", fit.config, "Model config JSON");
  auto* fit_seed_opt = fitc->add_option("--seed", fit_seed, "Random seed");
  fitc->add_option("--chains", fit.chains, "Independent chains")->capture_default_str();
  fitc->add_option("--jobs", fit.jobs, "Chains run concurrently")->capture_default_str();
  fitc->add_option("--out", fit.out, "Output directory")->required();
  auto* burn_opt = fitc->add_option("--burn-in", burn, "Override burn-in sweeps");
  auto* iter_opt = fitc->add_option("--iterations", iters, "Override kept sweeps");
  auto* thin_opt = fitc->add_option("--thin", thin, "Override thinning");
  fitc->add_flag("--check", fit.check, "Check invariants after every sweep");

  GammaOptions gam;
  std::uint64_t gam_seed = 0;
  auto* gamma = app.add_subcommand("gamma", "Posterior-predictive Goodman-Kruskal gamma trajectories");
  gamma->add_option("--draws", gam.draws, "Draw file (repeatable to pool chains)")->required();
  gamma->add_option("--subpop", gam.subpops, "Subpopulation such as gender=1;race=2,3 (repeatable)");
  gamma->add_option("--R", gam.R, "Predictive subjects per draw")->capture_default_str();
  auto* gam_seed_opt = gamma->add_option("--seed", gam_seed, "Random seed");
  gamma->add_option("--out", gam.out, "Output CSV")->required();
  gamma->add_flag("--unadjusted", gam.unadjusted, "Use stick-breaking weights instead of survey-adjusted ones");

  ScoreOptions sco;
  auto* score = app.add_subcommand("score", "Mean absolute error of estimated against oracle gammas");
  score->add_option("--estimate", sco.estimate, "Trajectory CSV")->required();
  score->add_option("--oracle", sco.oracle, "Oracle CSV")->required();
  score->add_option("--out", sco.out, "Output CSV")->required();

  DiagnoseOptions dia;
  auto* diag = app.add_subcommand("diagnose", "Autocorrelations and running means from a trace CSV");
  diag->add_option("--trace", dia.trace, "Trace CSV")->required();
  diag->add_option("--out", dia.out, "Output JSON")->required();
  diag->add_option("--max-lag", dia.max_lag, "Largest lag")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (simulate->parsed()) {
      sim.seed = resolve_seed(opt_seed(sim_seed_opt, sim_seed));
      if (sim_n_opt->count() > 0) sim.n = sim_n;
      cmd_simulate(sim, args);
    } else if (fitc->parsed()) {
      fit.seed = resolve_seed(opt_seed(fit_seed_opt, fit_seed));
      if (!fit_data.empty()) {
        if (fit.subjects.empty()) fit.subjects = fit_data + "/subjects.csv";
        if (fit.observations.empty()) fit.observations = fit_data + "/observations.csv";
        if (fit.schema.empty()) fit.schema = fit_data + "/schema.json";
      }
      if (fit.subjects.empty() || fit.observations.empty() || fit.schema.empty()) {
        throw UsageError("fit needs --data or all of --subjects, --observations and --schema");
      }
      if (burn_opt->count() > 0) fit.burn_in = burn;
      if (iter_opt->count() > 0) fit.iterations = iters;
      if (thin_opt->count() > 0) fit.thin = thin;
      cmd_fit(fit, args);
    } else if (gamma->parsed()) {
      gam.seed = resolve_seed(opt_seed(gam_seed_opt, gam_seed));
      cmd_gamma(gam, args);
    } else if (score->parsed()) {
      cmd_score(sco, args);
    } else if (diag->parsed()) {
      cmd_diagnose(dia, args);
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const msd::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
