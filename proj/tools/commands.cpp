#include "commands.hpp"

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "svg.hpp"
#include "treedose/analytics.hpp"
#include "treedose/error.hpp"

namespace treedose {

namespace {

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return "";
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

std::vector<std::string> split_list(const std::string& value) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= value.size()) {
        const auto comma = value.find(',', start);
        const std::string piece =
            trim(comma == std::string::npos ? value.substr(start)
                                            : value.substr(start, comma - start));
        if (!piece.empty()) out.push_back(piece);
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

double parse_double(const std::string& token, const std::string& context) {
    errno = 0;
    char* end = nullptr;
    const double v = std::strtod(token.c_str(), &end);
    if (token.empty() || end != token.c_str() + token.size() || errno == ERANGE ||
        !std::isfinite(v))
        throw ValidationError(context + ": cannot parse number '" + token + "'");
    return v;
}

std::string fmt(double v) { return format_value(v); }

std::string sanitize(const std::string& name) {
    std::string out;
    for (const char c : name)
        out.push_back(std::isalnum(static_cast<unsigned char>(c)) ? c : '_');
    return out.empty() ? "_" : out;
}

RunConfig load_or_default(const std::string& path) {
    return path.empty() ? RunConfig{} : load_config(path);
}

void apply_overrides(RunConfig& config, const SampleOverrides& sample) {
    if (sample.iterations >= 0) config.mcmc.iterations = sample.iterations;
    if (sample.burn_in >= 0) config.mcmc.burn_in = sample.burn_in;
    if (sample.thin >= 0) config.mcmc.thin = sample.thin;
    if (sample.chains >= 0) config.mcmc.n_chains = sample.chains;
    if (sample.seed_set) config.mcmc.seed = sample.seed;
    config.validate();
}

ExposureDataset load_inputs(const std::string& data, const std::string& covariates,
                            bool normalize, const std::string& control) {
    ExposureDataset dataset = load_dataset(data, covariates);
    if (normalize) dataset = normalize_baseline(dataset, control);
    return dataset;
}

std::vector<double> to_std(const Eigen::VectorXd& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
}

double sorted_quantile(std::vector<double> values, double q) {
    std::sort(values.begin(), values.end());
    const double h = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(h);
    if (lo + 1 >= values.size()) return values.back();
    return values[lo] + (values[lo + 1] - values[lo]) * (h - static_cast<double>(lo));
}

// Band plot in 1D, posterior-mean heatmap in 2D.
void profile_figure(const std::string& path, const std::string& title,
                    const std::vector<double>& dose, const std::vector<double>& time,
                    const PredictiveSummary& band,
                    const std::vector<ReplicateProfile>* observed) {
    if (time.empty()) {
        BandPlot plot;
        plot.title = title;
        plot.x_label = "dose";
        plot.y_label = "response";
        plot.x = dose;
        plot.mean = to_std(band.mean);
        plot.lower = to_std(band.lower);
        plot.upper = to_std(band.upper);
        if (observed != nullptr) {
            for (const ReplicateProfile& profile : *observed) {
                PointSeries series;
                for (std::size_t k = 0; k < profile.cells.size(); ++k) {
                    series.x.push_back(dose[static_cast<std::size_t>(profile.cells[k])]);
                    series.y.push_back(profile.values[static_cast<Eigen::Index>(k)]);
                }
                plot.points.push_back(std::move(series));
            }
        }
        write_text_file(path, render_band_plot(plot));
    } else {
        HeatMap map;
        map.title = title + " (posterior mean)";
        map.x_label = "dose";
        map.y_label = "time";
        map.x = dose;
        map.y = time;
        const auto nt = static_cast<Eigen::Index>(time.size());
        map.values.resize(nt, static_cast<Eigen::Index>(dose.size()));
        for (Eigen::Index dj = 0; dj < static_cast<Eigen::Index>(dose.size()); ++dj)
            for (Eigen::Index ti = 0; ti < nt; ++ti) map.values(ti, dj) = band.mean[dj * nt + ti];
        write_text_file(path, render_heatmap(map));
    }
}

// Column labels for flat grid cells: d<dose> or d<dose>_t<time>.
std::vector<std::string> cell_labels(const ChainArchive& archive) {
    std::vector<std::string> labels;
    if (archive.two_d()) {
        for (const double d : archive.dose_grid.values)
            for (const double t : archive.time_grid.values)
                labels.push_back("d" + fmt(d) + "_t" + fmt(t));
    } else {
        for (const double d : archive.dose_grid.values) labels.push_back("d" + fmt(d));
    }
    return labels;
}

int grid_lookup(const std::vector<double>& grid, double value, const std::string& axis) {
    for (std::size_t i = 0; i < grid.size(); ++i)
        if (std::abs(grid[i] - value) <= 1e-9 * std::max(1.0, std::abs(grid[i])))
            return static_cast<int>(i);
    throw ValidationError(axis + " " + fmt(value) + " is not on the " + axis + " grid");
}

int find_variable(const ChainArchive& archive, const std::string& name) {
    for (std::size_t j = 0; j < archive.property_names.size(); ++j)
        if (archive.property_names[j] == name) return static_cast<int>(j);
    std::string known;
    for (const std::string& p : archive.property_names)
        known += (known.empty() ? "" : ", ") + p;
    throw ValidationError("unknown variable name '" + name + "' (known: " + known + ")");
}

}  // namespace

std::string resolve_out_dir(const std::string& flag_value, const std::string& fallback) {
    if (!flag_value.empty()) return flag_value;
    if (const char* env = std::getenv("TREEDOSE_OUT"); env != nullptr && *env != '\0')
        return env;
    return fallback;
}

// ---- fit -------------------------------------------------------------------

void cmd_fit(const FitArgs& args) {
    RunConfig config = load_or_default(args.config_path);
    apply_overrides(config, args.sample);
    // Kept out of `config` so the archived chain is byte-identical wherever it is written.
    const std::string out_dir = resolve_out_dir(args.out, config.out_dir);

    const ExposureDataset data =
        load_inputs(args.data, args.covariates, args.normalize, args.control);
    const LikelihoodEngine engine = build_engine(data, config);
    std::cout << "fit: " << data.n_particles() << " particles, " << data.n_cells()
              << " grid cells, " << engine.coeff_count() << " spline coefficients\n";

    const std::vector<PosteriorChain> chains =
        run_chains(engine, data.model_covariates(), config.mcmc);
    const ChainArchive archive = make_archive(data, config, chains);

    const ReportPaths paths = prepare_report_dir(out_dir);
    const std::string chain_path = paths.chain + "/chain.bin";
    save_chain(chain_path, archive);
    save_config(paths.root + "/config.txt", config);

    std::vector<std::vector<std::string>> acceptance;
    std::array<long, 4> proposed_total{};
    std::array<long, 4> accepted_total{};
    for (const PosteriorChain& chain : chains) {
        for (int mv = 0; mv < 4; ++mv) {
            const long proposed = chain.moves.proposed[static_cast<std::size_t>(mv)];
            const long accepted = chain.moves.accepted[static_cast<std::size_t>(mv)];
            proposed_total[static_cast<std::size_t>(mv)] += proposed;
            accepted_total[static_cast<std::size_t>(mv)] += accepted;
            acceptance.push_back({std::to_string(chain.chain_id),
                                  move_name(static_cast<TreeMove>(mv)), std::to_string(proposed),
                                  std::to_string(accepted),
                                  fmt(proposed > 0 ? static_cast<double>(accepted) /
                                                         static_cast<double>(proposed)
                                                   : 0.0)});
        }
        acceptance.push_back({std::to_string(chain.chain_id), "numeric-reject",
                              std::to_string(chain.moves.numeric_rejects), "0", "0"});
    }
    write_csv(paths.tables + "/acceptance.csv", {"chain", "move", "proposed", "accepted", "rate"},
              acceptance);

    for (const PosteriorChain& chain : chains) {
        std::vector<std::vector<std::string>> rows;
        rows.reserve(chain.log_post_trace.size());
        long iteration = 0;
        for (const double v : chain.log_post_trace)
            rows.push_back({std::to_string(iteration++), fmt(v)});
        write_csv(paths.tables + "/trace_" + std::to_string(chain.chain_id) + ".csv",
                  {"iteration", "log_post"}, rows);
    }

    using Extract = double (*)(const ChainState&);
    std::vector<std::pair<std::string, Extract>> scalars = {
        {"sigma2", [](const ChainState& s) { return s.noise.sigma2; }},
        {"tau2", [](const ChainState& s) { return s.tau2; }},
        {"phi_d", [](const ChainState& s) { return s.noise.phi_d; }},
    };
    if (archive.two_d())
        scalars.emplace_back("phi_t", [](const ChainState& s) { return s.noise.phi_t; });
    scalars.emplace_back("log_post", [](const ChainState& s) { return s.log_post; });
    scalars.emplace_back("n_leaves",
                         [](const ChainState& s) { return static_cast<double>(s.tree.n_leaves()); });

    std::vector<std::vector<std::string>> rhat_rows, posterior_rows;
    for (const auto& [name, extract] : scalars) {
        std::vector<std::vector<double>> per_chain;
        std::vector<double> pooled;
        double ess_total = 0.0;
        for (const PosteriorChain& chain : chains) {
            std::vector<double> series;
            series.reserve(chain.draws.size());
            for (const ChainState& draw : chain.draws) series.push_back(extract(draw));
            const auto it = chain.ess.find(name);
            ess_total += it != chain.ess.end() ? it->second : effective_sample_size(series);
            pooled.insert(pooled.end(), series.begin(), series.end());
            per_chain.push_back(std::move(series));
        }
        const double rhat = split_rhat(per_chain);
        rhat_rows.push_back({name, fmt(rhat), fmt(ess_total)});

        double mean = 0.0;
        for (const double v : pooled) mean += v;
        mean /= static_cast<double>(pooled.size());
        double ss = 0.0;
        for (const double v : pooled) ss += (v - mean) * (v - mean);
        const double sd =
            pooled.size() > 1 ? std::sqrt(ss / static_cast<double>(pooled.size() - 1)) : 0.0;
        posterior_rows.push_back({name, fmt(mean), fmt(sd), fmt(sorted_quantile(pooled, 0.05)),
                                  fmt(sorted_quantile(pooled, 0.50)),
                                  fmt(sorted_quantile(pooled, 0.95))});
        std::cout << "  " << name << ": mean " << fmt(mean) << ", rhat " << fmt(rhat) << "\n";
    }
    write_csv(paths.tables + "/rhat.csv", {"parameter", "rhat", "ess"}, rhat_rows);
    write_csv(paths.tables + "/posterior.csv", {"parameter", "mean", "sd", "q05", "q50", "q95"},
              posterior_rows);

    long warning_count = 0;
    for (const PosteriorChain& chain : chains)
        for (const std::string& warning : chain.warnings) {
            std::cerr << "warning (chain " << chain.chain_id << "): " << warning << "\n";
            ++warning_count;
        }

    std::cout << "acceptance:";
    for (int mv = 0; mv < 4; ++mv) {
        const long proposed = proposed_total[static_cast<std::size_t>(mv)];
        std::cout << ' ' << move_name(static_cast<TreeMove>(mv)) << ' '
                  << fmt(proposed > 0 ? static_cast<double>(
                                            accepted_total[static_cast<std::size_t>(mv)]) /
                                            static_cast<double>(proposed)
                                      : 0.0);
    }
    std::cout << "\n";

    std::vector<std::pair<std::string, std::string>> manifest = {
        {"command", "fit"},
        {"data", args.data},
        {"covariates", args.covariates},
        {"normalized", args.normalize ? "true" : "false"},
        {"iterations", std::to_string(config.mcmc.iterations)},
        {"burn_in", std::to_string(config.mcmc.burn_in)},
        {"thin", std::to_string(config.mcmc.thin)},
        {"chains", std::to_string(config.mcmc.n_chains)},
        {"seed", std::to_string(config.mcmc.seed)},
        {"draws_per_chain", std::to_string(chains.front().draws.size())},
        {"warnings", std::to_string(warning_count)},
        {"chain_file", "chain/chain.bin"},
        {"config_file", "config.txt"},
        {"tables", "acceptance.csv posterior.csv rhat.csv trace_<chain>.csv"},
    };
    write_manifest(paths.root + "/run.manifest", manifest);
    std::cout << "wrote " << chain_path << "\n";
}

// ---- predict / ppc ---------------------------------------------------------

void cmd_predict(const PredictArgs& args, bool posterior_check) {
    const ChainArchive archive = load_chain(args.chain);
    const double level = args.level > 0.0 ? args.level : archive.config.level;
    const std::string out_dir = resolve_out_dir(args.out, archive.config.out_dir);
    const ExposureDataset data =
        load_inputs(args.data, args.covariates, args.normalize, args.control);

    if (data.dose_grid.values != archive.dose_grid.values ||
        data.time_grid.values != archive.time_grid.values)
        throw ValidationError(
            "grid mismatch: the dataset's dose/time grids differ from the archived chain's");
    if (data.property_names != archive.property_names)
        throw ValidationError("covariate mismatch: the dataset's properties differ from the "
                              "archived chain's");

    const ModelDraws model = pool_draws(archive, args.max_draws);
    const ReportPaths paths = prepare_report_dir(out_dir);
    Rng rng = make_stream(args.seed, 777);
    const Eigen::MatrixXd covariates = data.model_covariates();

    const bool two_d = archive.two_d();
    std::vector<std::string> pred_header = {"particle", "dose"};
    if (two_d) pred_header.push_back("time");
    pred_header.insert(pred_header.end(), {"mean", "lower", "upper"});

    std::vector<std::vector<std::string>> pred_rows, coverage_rows;
    double total_inside = 0.0, total_sse = 0.0;
    long total_n = 0;
    for (int i = 0; i < data.n_particles(); ++i) {
        const std::string& particle = data.particles[static_cast<std::size_t>(i)];
        const PredictiveSummary band =
            posterior_predictive(model, covariates.row(i).transpose(), level, true, rng);
        const FitScore score = score_profiles(band, data.responses[static_cast<std::size_t>(i)]);
        total_inside += score.coverage * static_cast<double>(score.n);
        total_sse += score.rmse * score.rmse * static_cast<double>(score.n);
        total_n += score.n;

        for (Eigen::Index c = 0; c < band.mean.size(); ++c) {
            std::vector<std::string> row = {particle, fmt(band.dose[static_cast<std::size_t>(c)])};
            if (two_d) row.push_back(fmt(band.time[static_cast<std::size_t>(c)]));
            row.insert(row.end(), {fmt(band.mean[c]), fmt(band.lower[c]), fmt(band.upper[c])});
            pred_rows.push_back(std::move(row));
        }
        coverage_rows.push_back(
            {particle, std::to_string(score.n), fmt(score.coverage), fmt(score.rmse)});

        profile_figure(paths.figures + "/predict_" + sanitize(particle) + ".svg",
                       particle + "  " + fmt(100.0 * level) + "% band",
                       archive.dose_grid.values, archive.time_grid.values, band,
                       &data.responses[static_cast<std::size_t>(i)]);
        std::cout << particle << ": coverage " << fmt(score.coverage) << ", rmse "
                  << fmt(score.rmse) << "\n";
    }
    const double overall =
        total_n > 0 ? total_inside / static_cast<double>(total_n) : 0.0;
    const double overall_rmse =
        total_n > 0 ? std::sqrt(total_sse / static_cast<double>(total_n)) : 0.0;
    coverage_rows.push_back({"(all)", std::to_string(total_n), fmt(overall), fmt(overall_rmse)});
    std::cout << "overall: coverage " << fmt(overall) << ", rmse " << fmt(overall_rmse) << "\n";

    write_csv(paths.tables + "/predictions.csv", pred_header, pred_rows);
    write_csv(paths.tables + "/coverage.csv", {"particle", "n", "coverage", "rmse"},
              coverage_rows);
    write_manifest(paths.root + "/run.manifest",
                   {{"command", posterior_check ? "ppc" : "predict"},
                    {"chain", args.chain},
                    {"data", args.data},
                    {"covariates", args.covariates},
                    {"level", fmt(level)},
                    {"draws", std::to_string(model.draws.size())},
                    {"seed", std::to_string(args.seed)},
                    {"coverage", fmt(overall)},
                    {"tables", "coverage.csv predictions.csv"},
                    {"figures", "predict_<particle>.svg"}});
}

// ---- partial dependence ----------------------------------------------------

void cmd_pd(const PdArgs& args) {
    const ChainArchive archive = load_chain(args.chain);
    const std::string out_dir = resolve_out_dir(args.out, archive.config.out_dir);
    const ModelDraws model = pool_draws(archive, args.max_draws);
    const int points = args.points > 0 ? args.points : archive.config.pd_points;
    const bool two_d = archive.two_d();

    const std::vector<std::string> names = split_list(args.vars);
    if (names.empty() || names.size() > 2)
        throw ValidationError("--vars takes one or two comma-separated variable names");

    const ReportPaths paths = prepare_report_dir(out_dir);
    const std::vector<std::string> labels = cell_labels(archive);

    if (names.size() == 1) {
        if (!args.at.empty())
            throw ValidationError("--at applies to two-variable surfaces only");
        const int var = find_variable(archive, names[0]);
        const std::vector<double> grid = covariate_grid(archive, var, points);
        const PartialDependence pd = partial_dependence(archive, model, var, grid);

        std::vector<std::string> header = {names[0]};
        header.insert(header.end(), labels.begin(), labels.end());
        std::vector<std::vector<std::string>> rows;
        for (Eigen::Index g = 0; g < pd.values.rows(); ++g) {
            std::vector<std::string> row = {fmt(grid[static_cast<std::size_t>(g)])};
            for (Eigen::Index c = 0; c < pd.values.cols(); ++c) row.push_back(fmt(pd.values(g, c)));
            rows.push_back(std::move(row));
        }
        write_csv(paths.tables + "/pd.csv", header, rows);

        HeatMap map;
        map.title = "marginal effect of " + names[0] + (two_d ? " (time mean)" : "");
        map.x_label = "dose";
        map.y_label = names[0];
        map.x = archive.dose_grid.values;
        map.y = grid;
        const auto nd = static_cast<Eigen::Index>(archive.dose_grid.size());
        const auto nt = static_cast<Eigen::Index>(two_d ? archive.time_grid.size() : 1);
        map.values.resize(pd.values.rows(), nd);
        for (Eigen::Index g = 0; g < pd.values.rows(); ++g)
            for (Eigen::Index dj = 0; dj < nd; ++dj) {
                double acc = 0.0;
                for (Eigen::Index ti = 0; ti < nt; ++ti) acc += pd.values(g, dj * nt + ti);
                map.values(g, dj) = acc / static_cast<double>(nt);
            }
        for (Eigen::Index i = 0; i < archive.covariates.rows(); ++i)
            map.rug_y.push_back(archive.covariates(i, var));
        write_text_file(paths.figures + "/pd.svg", render_heatmap(map));
    } else {
        if (args.at.empty())
            throw ValidationError("two-variable surfaces need --at dose" +
                                  std::string(two_d ? ",time" : ""));
        const std::vector<std::string> at_parts = split_list(args.at);
        if (two_d && at_parts.size() != 2)
            throw ValidationError("the chain has a time axis; use --at dose,time");
        if (!two_d && at_parts.size() != 1)
            throw ValidationError("single-axis chains take --at dose");
        const int di =
            grid_lookup(archive.dose_grid.values, parse_double(at_parts[0], "--at"), "dose");
        int cell = di;
        if (two_d) {
            const int ti =
                grid_lookup(archive.time_grid.values, parse_double(at_parts[1], "--at"), "time");
            cell = di * archive.time_grid.size() + ti;
        }

        const int var1 = find_variable(archive, names[0]);
        const int var2 = find_variable(archive, names[1]);
        const std::vector<double> grid1 = covariate_grid(archive, var1, points);
        const std::vector<double> grid2 = covariate_grid(archive, var2, points);
        const PartialDependence pd =
            partial_dependence_2var(archive, model, var1, var2, grid1, grid2, cell);

        std::vector<std::string> header = {names[0] + "\\" + names[1]};
        for (const double v : grid2) header.push_back(fmt(v));
        std::vector<std::vector<std::string>> rows;
        for (Eigen::Index a = 0; a < pd.values.rows(); ++a) {
            std::vector<std::string> row = {fmt(grid1[static_cast<std::size_t>(a)])};
            for (Eigen::Index b = 0; b < pd.values.cols(); ++b) row.push_back(fmt(pd.values(a, b)));
            rows.push_back(std::move(row));
        }
        write_csv(paths.tables + "/pd.csv", header, rows);

        HeatMap map;
        map.title = "joint effect of " + names[0] + " and " + names[1] + " at " +
                    labels[static_cast<std::size_t>(cell)];
        map.x_label = names[1];
        map.y_label = names[0];
        map.x = grid2;
        map.y = grid1;
        map.values = pd.values;
        for (Eigen::Index i = 0; i < archive.covariates.rows(); ++i) {
            map.mark_x.push_back(archive.covariates(i, var2));
            map.mark_y.push_back(archive.covariates(i, var1));
        }
        write_text_file(paths.figures + "/pd.svg", render_heatmap(map));
    }

    write_manifest(paths.root + "/run.manifest",
                   {{"command", "pd"},
                    {"chain", args.chain},
                    {"vars", args.vars},
                    {"at", args.at.empty() ? "-" : args.at},
                    {"points", std::to_string(points)},
                    {"draws", std::to_string(model.draws.size())},
                    {"tables", "pd.csv"},
                    {"figures", "pd.svg"}});
    std::cout << "wrote " << paths.tables << "/pd.csv and " << paths.figures << "/pd.svg\n";
}

// ---- sensitivity -----------------------------------------------------------

void cmd_sens(const SensArgs& args) {
    const ChainArchive archive = load_chain(args.chain);
    const std::string out_dir = resolve_out_dir(args.out, archive.config.out_dir);
    const ModelDraws model = pool_draws(archive, args.max_draws);
    const int n_base = args.n_base > 0 ? args.n_base : archive.config.sens_base;

    SensMode mode;
    if (args.mode == "averaged")
        mode = SensMode::Averaged;
    else if (args.mode == "per-point")
        mode = SensMode::PerPoint;
    else
        throw ValidationError("--mode must be 'averaged' or 'per-point'");

    Rng rng = make_stream(args.seed, 888);
    const SensitivityReport report =
        sensitivity_indices(archive, model, n_base, mode, rng, args.include_noise);

    const ReportPaths paths = prepare_report_dir(out_dir);
    std::vector<std::vector<std::string>> rows;
    for (std::size_t j = 0; j < report.variables.size(); ++j) {
        const bool flagged =
            std::find(report.flagged.begin(), report.flagged.end(), static_cast<int>(j)) !=
            report.flagged.end();
        rows.push_back({report.variables[j], fmt(report.s[static_cast<Eigen::Index>(j)]),
                        fmt(report.s_se[static_cast<Eigen::Index>(j)]),
                        fmt(report.t[static_cast<Eigen::Index>(j)]),
                        fmt(report.t_se[static_cast<Eigen::Index>(j)]), flagged ? "1" : "0"});
    }
    write_csv(paths.tables + "/sensitivity.csv",
              {"variable", "s", "s_se", "t", "t_se", "flagged"}, rows);

    if (mode == SensMode::PerPoint) {
        const std::vector<std::string> labels = cell_labels(archive);
        std::vector<std::vector<std::string>> cell_rows;
        for (std::size_t j = 0; j < report.variables.size(); ++j)
            for (std::size_t c = 0; c < labels.size(); ++c)
                cell_rows.push_back({report.variables[j], labels[c],
                                     fmt(report.s_cells(static_cast<Eigen::Index>(j),
                                                        static_cast<Eigen::Index>(c))),
                                     fmt(report.t_cells(static_cast<Eigen::Index>(j),
                                                        static_cast<Eigen::Index>(c)))});
        write_csv(paths.tables + "/sensitivity_cells.csv", {"variable", "cell", "s", "t"},
                  cell_rows);
    }

    BarChart chart;
    chart.title = "Sobol indices";
    chart.y_label = "index";
    chart.labels = report.variables;
    chart.first = to_std(report.s);
    chart.second = to_std(report.t);
    chart.first_err = to_std(report.s_se);
    chart.second_err = to_std(report.t_se);
    write_text_file(paths.figures + "/sensitivity.svg", render_bar_chart(chart));

    std::vector<std::size_t> order(report.variables.size());
    for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return report.s[static_cast<Eigen::Index>(a)] > report.s[static_cast<Eigen::Index>(b)];
    });
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
        const std::size_t j = order[rank];
        std::cout << rank + 1 << ". " << report.variables[j] << ": S "
                  << fmt(report.s[static_cast<Eigen::Index>(j)]) << ", T "
                  << fmt(report.t[static_cast<Eigen::Index>(j)]) << "\n";
    }
    if (!report.flagged.empty()) {
        std::cout << "inconsistent estimates (S above T beyond noise):";
        for (const int j : report.flagged)
            std::cout << ' ' << report.variables[static_cast<std::size_t>(j)];
        std::cout << "\n";
    }

    write_manifest(paths.root + "/run.manifest",
                   {{"command", "sens"},
                    {"chain", args.chain},
                    {"mode", args.mode},
                    {"n_base", std::to_string(n_base)},
                    {"include_noise", args.include_noise ? "true" : "false"},
                    {"draws", std::to_string(model.draws.size())},
                    {"seed", std::to_string(args.seed)},
                    {"tables", mode == SensMode::PerPoint
                                   ? "sensitivity.csv sensitivity_cells.csv"
                                   : "sensitivity.csv"},
                    {"figures", "sensitivity.svg"}});
}

// ---- leave-a-curve-out -----------------------------------------------------

void cmd_loco(const LocoArgs& args) {
    RunConfig config = load_or_default(args.config_path);
    apply_overrides(config, args.sample);
    const std::string out_dir = resolve_out_dir(args.out, config.out_dir);

    const ExposureDataset data =
        load_inputs(args.data, args.covariates, args.normalize, args.control);
    const LocoReport report = loco_validation(data, config);

    const ReportPaths paths = prepare_report_dir(out_dir);
    std::vector<std::vector<std::string>> fold_rows;
    std::vector<std::vector<std::string>> flag_rows;
    for (const LocoFold& fold : report.folds) {
        fold_rows.push_back({std::to_string(fold.index), fold.particle,
                             fold.failed ? "failed" : "ok", fmt(fold.coverage), fmt(fold.rmse),
                             fold.flagged ? "1" : "0", fold.message});
        if (fold.failed) {
            std::cout << fold.particle << ": failed (" << fold.message << ")\n";
            continue;
        }
        std::cout << fold.particle << ": coverage " << fmt(fold.coverage) << ", rmse "
                  << fmt(fold.rmse) << (fold.flagged ? "  << poorly predicted" : "") << "\n";
        if (fold.flagged) flag_rows.push_back({fold.particle});
        profile_figure(paths.figures + "/loco_" + sanitize(fold.particle) + ".svg",
                       fold.particle + " held out  " + fmt(100.0 * report.level) + "% band",
                       data.dose_grid.values, data.time_grid.values, fold.prediction,
                       &data.responses[static_cast<std::size_t>(fold.index)]);
    }
    write_csv(paths.tables + "/loco.csv",
              {"fold", "particle", "status", "coverage", "rmse", "flagged", "message"},
              fold_rows);
    write_csv(paths.tables + "/flagged.csv", {"particle"}, flag_rows);

    std::cout << "median coverage " << fmt(report.median_coverage) << " at level "
              << fmt(report.level) << "\n";
    if (flag_rows.empty())
        std::cout << "no poorly predicted particles\n";

    write_manifest(paths.root + "/run.manifest",
                   {{"command", "loco"},
                    {"data", args.data},
                    {"covariates", args.covariates},
                    {"folds", std::to_string(report.folds.size())},
                    {"flagged", std::to_string(flag_rows.size())},
                    {"median_coverage", fmt(report.median_coverage)},
                    {"level", fmt(report.level)},
                    {"seed", std::to_string(config.mcmc.seed)},
                    {"tables", "flagged.csv loco.csv"},
                    {"figures", "loco_<particle>.svg"}});
}

// ---- simulate --------------------------------------------------------------

void cmd_simulate(const SimulateArgs& args) {
    SimSpec spec = args.spec_path.empty() ? SimSpec{} : load_sim_spec(args.spec_path);
    if (args.seed_set) spec.seed = args.seed;

    const std::string out_dir = resolve_out_dir(args.out, "treedose-out");
    std::filesystem::create_directories(out_dir);

    Rng rng(spec.seed);
    const SimulatedData sim = simulate_dataset(spec, rng);
    save_responses(out_dir + "/data.csv", sim.dataset);
    save_covariates(out_dir + "/covariates.csv", sim.dataset);
    save_ground_truth(out_dir + "/truth.txt", sim.truth);

    std::ostringstream spec_text;
    spec_text << "particles = " << spec.n_particles << "\n";
    spec_text << "replicates = " << spec.n_replicates << "\n";
    spec_text << "doses = " << spec.n_doses << "\n";
    spec_text << "times = " << spec.n_times << "\n";
    spec_text << "properties = " << spec.n_properties << "\n";
    spec_text << "split_vars =";
    for (const int v : spec.split_vars) spec_text << ' ' << v;
    spec_text << "\n";
    spec_text << "sigma2 = " << fmt(spec.sigma2) << "\n";
    spec_text << "phi_d = " << fmt(spec.phi_d) << "\n";
    spec_text << "phi_t = " << fmt(spec.phi_t) << "\n";
    spec_text << "tau2 = " << fmt(spec.tau2) << "\n";
    spec_text << "family = " << (spec.family == SimSpec::Family::Sigmoid ? "sigmoid" : "spline")
              << "\n";
    spec_text << "isolated = " << (spec.isolated_particle ? "true" : "false") << "\n";
    spec_text << "seed = " << spec.seed << "\n";
    write_text_file(out_dir + "/spec.txt", spec_text.str());

    write_manifest(out_dir + "/run.manifest",
                   {{"command", "simulate"},
                    {"spec", args.spec_path.empty() ? "(defaults)" : args.spec_path},
                    {"seed", std::to_string(spec.seed)},
                    {"particles", std::to_string(spec.n_particles)},
                    {"leaves", std::to_string(sim.truth.tree.n_leaves())},
                    {"files", "covariates.csv data.csv spec.txt truth.txt"}});

    std::cout << "simulated " << spec.n_particles << " particles, "
              << sim.truth.tree.n_leaves() << " true leaves\n";
    std::cout << "wrote " << out_dir << "/data.csv, covariates.csv, truth.txt, spec.txt\n";
}

}  // namespace treedose
