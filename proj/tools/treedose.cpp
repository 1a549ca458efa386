#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "commands.hpp"
#include "treedose/error.hpp"

namespace {

using treedose::FitArgs;
using treedose::LocoArgs;
using treedose::PdArgs;
using treedose::PredictArgs;
using treedose::SampleOverrides;
using treedose::SensArgs;
using treedose::SimulateArgs;

void add_sampling_options(CLI::App* sub, SampleOverrides& sample) {
    sub->add_option("--iterations", sample.iterations, "Total MCMC sweeps per chain");
    sub->add_option("--burn-in", sample.burn_in, "Sweeps discarded before retention");
    sub->add_option("--thin", sample.thin, "Keep every thin-th post-burn-in sweep");
    sub->add_option("--chains", sample.chains, "Number of independent chains");
    sub->add_option("--seed", sample.seed, "Master random seed");
    sub->parse_complete_callback([sub, &sample] { sample.seed_set = sub->count("--seed") > 0; });
}

void add_data_options(CLI::App* sub, std::string& data, std::string& covariates,
                      bool& normalize, std::string& control) {
    sub->add_option("--data", data, "Response table CSV (particle,replicate,dose[,time],response)")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--covariates", covariates, "Covariate table CSV (particle,<property>...)")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_flag("--normalize", normalize, "Divide responses by the control-dose mean per particle");
    sub->add_option("--control", control,
                    "Control dose for --normalize (default: lowest dose on the grid)");
}

void add_predict_options(CLI::App* sub, PredictArgs& args) {
    sub->add_option("--chain", args.chain, "Chain archive written by fit")
        ->required()
        ->check(CLI::ExistingFile);
    add_data_options(sub, args.data, args.covariates, args.normalize, args.control);
    sub->add_option("--out", args.out, "Output directory");
    sub->add_option("--level", args.level, "Credible band level in (0,1); default from the chain");
    sub->add_option("--max-draws", args.max_draws, "Cap on posterior draws used (0 = all)");
    sub->add_option("--seed", args.seed, "Seed for predictive noise draws");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Bayesian tree-structured dose-response analysis"};
    app.require_subcommand(1);
    app.footer("Output directory: --out flag, else the TREEDOSE_OUT environment variable,\n"
               "else the configured default. Inputs are never modified.");

    FitArgs fit;
    CLI::App* fit_cmd = app.add_subcommand(
        "fit", "Sample the posterior over trees and dose-response surfaces");
    add_data_options(fit_cmd, fit.data, fit.covariates, fit.normalize, fit.control);
    fit_cmd->add_option("--config", fit.config_path, "Run configuration file")
        ->check(CLI::ExistingFile);
    fit_cmd->add_option("--out", fit.out, "Output directory");
    add_sampling_options(fit_cmd, fit.sample);
    fit_cmd->callback([&fit] { treedose::cmd_fit(fit); });

    PredictArgs predict;
    CLI::App* predict_cmd = app.add_subcommand(
        "predict", "Posterior predictive profiles with credible bands for given particles");
    add_predict_options(predict_cmd, predict);
    predict_cmd->callback([&predict] { treedose::cmd_predict(predict, false); });

    PredictArgs ppc;
    CLI::App* ppc_cmd = app.add_subcommand(
        "ppc", "Posterior predictive check against the training responses");
    add_predict_options(ppc_cmd, ppc);
    ppc_cmd->callback([&ppc] { treedose::cmd_predict(ppc, true); });

    PdArgs pd;
    CLI::App* pd_cmd = app.add_subcommand(
        "pd", "Partial dependence of the response surface on one or two covariates");
    pd_cmd->add_option("--chain", pd.chain, "Chain archive written by fit")
        ->required()
        ->check(CLI::ExistingFile);
    pd_cmd->add_option("--vars", pd.vars, "One or two comma-separated covariate names")
        ->required();
    pd_cmd->add_option("--at", pd.at,
                       "Grid cell dose[,time] for two-variable surfaces (must lie on the grid)");
    pd_cmd->add_option("--out", pd.out, "Output directory");
    pd_cmd->add_option("--points", pd.points, "Grid points per covariate");
    pd_cmd->add_option("--max-draws", pd.max_draws, "Cap on posterior draws used (0 = all)");
    pd_cmd->callback([&pd] { treedose::cmd_pd(pd); });

    SensArgs sens;
    CLI::App* sens_cmd = app.add_subcommand(
        "sens", "Variance-based global sensitivity of the surface to the covariates");
    sens_cmd->add_option("--chain", sens.chain, "Chain archive written by fit")
        ->required()
        ->check(CLI::ExistingFile);
    sens_cmd->add_option("--out", sens.out, "Output directory");
    sens_cmd->add_option("--mode", sens.mode, "'averaged' over the grid or 'per-point'");
    sens_cmd->add_option("--base", sens.n_base, "Base sample count for the index estimator");
    sens_cmd->add_option("--max-draws", sens.max_draws, "Cap on posterior draws used (0 = all)");
    sens_cmd->add_option("--seed", sens.seed, "Seed for the quasi-random design");
    sens_cmd->add_flag("--include-noise", sens.include_noise,
                       "Add posterior-mean observation noise to the output variance");
    sens_cmd->callback([&sens] { treedose::cmd_sens(sens); });

    LocoArgs loco;
    CLI::App* loco_cmd = app.add_subcommand(
        "loco", "Leave-one-curve-out validation: refit without each particle and score it");
    add_data_options(loco_cmd, loco.data, loco.covariates, loco.normalize, loco.control);
    loco_cmd->add_option("--config", loco.config_path, "Run configuration file")
        ->check(CLI::ExistingFile);
    loco_cmd->add_option("--out", loco.out, "Output directory");
    add_sampling_options(loco_cmd, loco.sample);
    loco_cmd->callback([&loco] { treedose::cmd_loco(loco); });

    SimulateArgs simulate;
    CLI::App* sim_cmd = app.add_subcommand(
        "simulate", "Generate a synthetic dataset with known tree and surfaces");
    sim_cmd->add_option("--spec", simulate.spec_path, "Simulation spec file (defaults used if absent)")
        ->check(CLI::ExistingFile);
    sim_cmd->add_option("--out", simulate.out, "Output directory");
    sim_cmd->add_option("--seed", simulate.seed, "Override the spec's seed");
    sim_cmd->parse_complete_callback(
        [sim_cmd, &simulate] { simulate.seed_set = sim_cmd->count("--seed") > 0; });
    sim_cmd->callback([&simulate] { treedose::cmd_simulate(simulate); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const treedose::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const treedose::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
