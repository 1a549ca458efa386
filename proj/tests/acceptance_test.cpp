// End-to-end checks of the library's statistical and numerical guarantees:
// closed-form evidence, prior recovery, simulator consistency, structure and
// parameter recovery on synthetic data, predictive calibration, holdout
// behavior, variance decomposition, and bit-level reproducibility. Each check
// prints one PASS/FAIL line; the exit status is the number of failures.

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "treedose/analytics.hpp"

using namespace treedose;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string num(double v) {
    std::ostringstream out;
    out.precision(3);
    out << v;
    return out.str();
}

Eigen::VectorXd randn(int n, Rng& rng) {
    std::normal_distribution<double> normal;
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) v[i] = normal(rng);
    return v;
}

double runif(Rng& rng, double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int rint(Rng& rng, int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

double mean_of(const std::vector<double>& v) {
    double acc = 0.0;
    for (const double x : v) acc += x;
    return acc / static_cast<double>(v.size());
}

double var_of(const std::vector<double>& v) {
    const double m = mean_of(v);
    double acc = 0.0;
    for (const double x : v) acc += (x - m) * (x - m);
    return acc / static_cast<double>(v.size() - 1);
}

bool same_bits(double a, double b) {
    return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b);
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

// ---------------------------------------------------------------------------
// 1. The summary-statistic evidence equals the dense Gaussian log density
//    N(y; 0, sigma2 blockdiag(R) + tau2 B K^-1 B') on random small leaves.

Outcome check_evidence() {
    const auto start = Clock::now();
    Rng rng = make_stream(90101, 1);
    double worst = 0.0;

    for (int inst = 0; inst < 200; ++inst) {
        const int n_p = rint(rng, 1, 2);
        const int n_r = rint(rng, 1, 2);
        const int n_d = rint(rng, 2, 5);
        const int n_t = rint(rng, 1, 3);  // 1 = single axis

        Grid1D dose;
        dose.values.push_back(0.0);
        for (int i = 1; i < n_d; ++i)
            dose.values.push_back(dose.values.back() + 0.3 + runif(rng));
        Grid1D time;
        for (int i = 0; i < (n_t > 1 ? n_t : 0); ++i)
            time.values.push_back(static_cast<double>(i) + runif(rng, 0.0, 0.4));

        const int order = rint(rng, 2, 3);
        const double eta = (inst % 2 == 0) ? 1e-3 : 1.0;
        const SplineSystem system =
            n_t > 1 ? make_system_2d(dose, time, default_interior_knots(dose),
                                     default_interior_knots(time), order, 2, eta)
                    : make_system_1d(dose, default_interior_knots(dose), order, eta);
        const Eigen::MatrixXd full_design = design_matrix(system);
        const int m = system.coeff_count();
        const int n_cells = system.cell_count();

        Eigen::MatrixXd penalty = system.penalty;
        if (inst % 3 == 0) {
            const Eigen::MatrixXd a = Eigen::MatrixXd::NullaryExpr(
                m, m, [&rng]() { return runif(rng, -1.0, 1.0); });
            penalty = a.transpose() * a + 0.5 * Eigen::MatrixXd::Identity(m, m);
        }

        NoiseModel noise;
        noise.sigma2 = std::exp(runif(rng, -1.0, 1.0));
        noise.phi_d = runif(rng, 0.0, 0.9);
        noise.phi_t = runif(rng, 0.0, 0.9);
        const double tau2 = std::exp(runif(rng, -1.0, 1.0));
        const Eigen::MatrixXd corr_full =
            replicate_correlation(n_d, n_t > 1 ? n_t : 1, noise);

        std::vector<CopyBlock> copies;
        for (int c = 0; c < n_p * n_r; ++c) {
            std::vector<int> cells;
            for (int j = 0; j < n_cells; ++j)
                if (runif(rng) < 0.75 || (j == n_cells - 1 && cells.empty()))
                    cells.push_back(j);
            CopyBlock block;
            const int k = static_cast<int>(cells.size());
            block.design.resize(k, m);
            block.corr.resize(k, k);
            for (int u = 0; u < k; ++u) {
                block.design.row(u) = full_design.row(cells[static_cast<std::size_t>(u)]);
                for (int v = 0; v < k; ++v)
                    block.corr(u, v) = corr_full(cells[static_cast<std::size_t>(u)],
                                                 cells[static_cast<std::size_t>(v)]);
            }
            block.y = randn(k, rng);
            copies.push_back(std::move(block));
        }

        const double fast = node_log_marginal(copies, penalty, noise.sigma2, tau2);

        long n_tot = 0;
        for (const CopyBlock& block : copies) n_tot += block.y.size();
        Eigen::VectorXd y(n_tot);
        Eigen::MatrixXd stacked(n_tot, m);
        Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(n_tot, n_tot);
        long at = 0;
        for (const CopyBlock& block : copies) {
            const long k = block.y.size();
            y.segment(at, k) = block.y;
            stacked.middleRows(at, k) = block.design;
            cov.block(at, at, k, k) = noise.sigma2 * block.corr;
            at += k;
        }
        const Eigen::MatrixXd k_inv =
            penalty.llt().solve(Eigen::MatrixXd::Identity(m, m));
        cov += tau2 * stacked * k_inv * stacked.transpose();
        const Eigen::LLT<Eigen::MatrixXd> llt(cov);
        const double logdet =
            2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
        const double quad = y.dot(llt.solve(y));
        const double dense =
            -0.5 * (static_cast<double>(n_tot) * std::log(2.0 * M_PI) + logdet + quad);

        worst = std::max(worst, std::abs(fast - dense));
    }

    const double elapsed = seconds_since(start);
    Outcome out;
    out.pass = worst <= 1e-8 && elapsed < 10.0;
    out.detail = "max |dlog| " + num(worst) + ", " + num(elapsed) + " s";
    return out;
}

// ---------------------------------------------------------------------------
// 2. A Metropolis chain with the likelihood switched off reproduces the
//    tree-generating prior: leaf-count distributions agree in total variation
//    and put most of their mass on very small trees.

Outcome check_prior_recovery() {
    const auto start = Clock::now();
    Rng seed_rng = make_stream(90202, 1);
    Eigen::MatrixXd covariates(20, 3);
    for (int i = 0; i < covariates.rows(); ++i)
        for (int j = 0; j < covariates.cols(); ++j) covariates(i, j) = runif(seed_rng);

    const TreePriorParams params;  // alpha 0.95, nu 2
    const std::array<double, 4> probs{0.3, 0.3, 0.2, 0.2};
    const long n = 100000;

    std::map<int, long> direct, chain;
    Rng r1 = make_stream(90202, 2);
    for (long it = 0; it < n; ++it)
        ++direct[sample_tree_prior(covariates, params, r1).n_leaves()];

    Rng r2 = make_stream(90202, 3);
    Tree tree;
    for (long it = 0; it < n; ++it) {
        mh_prior_step(tree, covariates, probs, params, r2);
        ++chain[tree.n_leaves()];
    }

    double tv = 0.0;
    std::map<int, long> keys = direct;
    for (const auto& [k, v] : chain) keys.emplace(k, 0);
    for (const auto& [k, ignored] : keys) {
        const double p1 = static_cast<double>(direct.count(k) ? direct[k] : 0) / n;
        const double p2 = static_cast<double>(chain.count(k) ? chain[k] : 0) / n;
        tv += std::abs(p1 - p2);
    }
    tv *= 0.5;

    long small = 0;
    for (int k = 1; k <= 3; ++k) small += direct.count(k) ? direct[k] : 0;
    const double mass_small = static_cast<double>(small) / n;
    const long mode_2_3 = (direct.count(2) ? direct[2] : 0) + (direct.count(3) ? direct[3] : 0);
    const double elapsed = seconds_since(start);

    Outcome out;
    out.pass = tv <= 0.02 && mass_small >= 0.8 &&
               mode_2_3 > (direct.count(1) ? direct[1] : 0) && elapsed < 120.0;
    out.detail = "TV " + num(tv) + ", P(1-3 leaves) " + num(mass_small) + ", " +
                 num(elapsed) + " s";
    return out;
}

// ---------------------------------------------------------------------------
// 3. Joint-distribution simulator checks: drawing parameters from their
//    priors directly agrees with alternating data simulation and one full
//    conditional sweep, for every sampled component.

struct GewekeStats {
    std::vector<std::vector<double>> series;  // one per statistic
    void record(const Eigen::VectorXd& beta, double sigma2, double tau2, double phi_d,
                double phi_t) {
        const double bbar = beta.mean();
        const double vals[] = {bbar,       bbar * bbar,  sigma2, 1.0 / sigma2,
                               tau2,       1.0 / tau2,   phi_d,  phi_t};
        if (series.empty()) series.resize(std::size(vals));
        for (std::size_t j = 0; j < std::size(vals); ++j) series[j].push_back(vals[j]);
    }
};

Outcome check_conditionals() {
    const auto start = Clock::now();
    const int n_d = 5, n_t = 3, n_particles = 3, n_reps = 2;

    Grid1D dose, time;
    for (int i = 0; i < n_d; ++i) dose.values.push_back(static_cast<double>(i));
    for (int i = 0; i < n_t; ++i) time.values.push_back(static_cast<double>(i));
    const SplineSystem system =
        make_system_2d(dose, time, default_interior_knots(dose),
                       default_interior_knots(time), 2, 2, 1.0);
    const Eigen::MatrixXd design = design_matrix(system);
    const int m = system.coeff_count();

    std::vector<int> all_cells(static_cast<std::size_t>(system.cell_count()));
    for (std::size_t j = 0; j < all_cells.size(); ++j) all_cells[j] = static_cast<int>(j);
    std::vector<ObsCopy> copies;
    for (int i = 0; i < n_particles; ++i)
        for (int r = 0; r < n_reps; ++r) {
            ObsCopy copy;
            copy.particle = i;
            copy.cells = all_cells;
            copy.y = Eigen::VectorXd::Zero(system.cell_count());
            copies.push_back(std::move(copy));
        }
    std::vector<double> pos_d, pos_t;
    for (int i = 0; i < n_d; ++i) pos_d.push_back(static_cast<double>(i));
    for (int i = 0; i < n_t; ++i) pos_t.push_back(static_cast<double>(i));
    LikelihoodEngine engine(system, pos_d, pos_t, copies, n_particles);

    // Constant covariates: no split is possible, the tree stays a single leaf.
    const Eigen::MatrixXd covariates = Eigen::MatrixXd::Constant(n_particles, 1, 0.5);

    McmcConfig config;
    config.variance_priors = {3.0, 2.0, 3.0, 2.0};
    config.correlation_priors = default_correlation_priors(n_d, n_t);
    config.eta = 1.0;
    config.phi_grid = 201;
    const CorrelationPriorParams cp = config.correlation_priors;

    const Eigen::LLT<Eigen::MatrixXd> penalty_llt(system.penalty);

    auto draw_prior = [&](Rng& rng, Eigen::VectorXd& beta, NoiseModel& noise, double& tau2) {
        std::gamma_distribution<double> g_sigma(config.variance_priors.a_sigma,
                                                1.0 / config.variance_priors.b_sigma);
        std::gamma_distribution<double> g_tau(config.variance_priors.a_tau,
                                              1.0 / config.variance_priors.b_tau);
        noise.sigma2 = 1.0 / g_sigma(rng);
        tau2 = 1.0 / g_tau(rng);
        noise.phi_d = griddy_draw(
            [&](double phi) {
                return rowe_log_prior(phi, cp.count_d, cp.lambda01, cp.lambda02, cp.lambda03);
            },
            config.phi_grid, rng);
        noise.phi_t = griddy_draw(
            [&](double phi) {
                return rowe_log_prior(phi, cp.count_t, cp.gamma01, cp.gamma02, cp.gamma03);
            },
            config.phi_grid, rng);
        beta = std::sqrt(tau2) *
               penalty_llt.matrixL().transpose().solve(randn(m, rng));
    };

    auto draw_data = [&](Rng& rng, const Eigen::VectorXd& beta, const NoiseModel& noise) {
        const Eigen::MatrixXd corr = replicate_correlation(n_d, n_t, noise);
        const Eigen::MatrixXd chol = Eigen::LLT<Eigen::MatrixXd>(corr).matrixL();
        std::vector<Eigen::VectorXd> ys;
        for (std::size_t c = 0; c < copies.size(); ++c)
            ys.push_back(design * beta +
                         std::sqrt(noise.sigma2) * (chol * randn(system.cell_count(), rng)));
        return ys;
    };

    const long n_draws = 30000;
    GewekeStats marginal, successive;

    Rng rng_m = make_stream(90303, 1);
    for (long it = 0; it < n_draws; ++it) {
        Eigen::VectorXd beta;
        NoiseModel noise;
        double tau2 = 1.0;
        draw_prior(rng_m, beta, noise, tau2);
        marginal.record(beta, noise.sigma2, tau2, noise.phi_d, noise.phi_t);
    }

    Rng rng_s = make_stream(90303, 2);
    ChainState state;
    {
        Eigen::VectorXd beta;
        NoiseModel noise;
        double tau2 = 1.0;
        draw_prior(rng_s, beta, noise, tau2);
        state.tree.set_leaf_coeffs(0, beta);
        state.noise = noise;
        state.tau2 = tau2;
    }
    for (long it = 0; it < n_draws; ++it) {
        engine.set_responses(draw_data(rng_s, state.tree.leaf_coeffs(0), state.noise));
        engine.set_phi(state.noise.phi_d, state.noise.phi_t);
        gibbs_sweep(state, engine, covariates, config, rng_s);
        successive.record(state.tree.leaf_coeffs(0), state.noise.sigma2, state.tau2,
                          state.noise.phi_d, state.noise.phi_t);
    }

    const std::size_t n_stats = marginal.series.size();
    double min_p = 1.0;
    for (std::size_t j = 0; j < n_stats; ++j) {
        const std::vector<double>& a = marginal.series[j];
        const std::vector<double>& b = successive.series[j];
        const double se_a = std::sqrt(var_of(a) / static_cast<double>(a.size()));
        const double se_b = std::sqrt(var_of(b) / effective_sample_size(b));
        const double z = (mean_of(a) - mean_of(b)) / std::hypot(se_a, se_b);
        const double p = std::erfc(std::abs(z) / std::sqrt(2.0));
        min_p = std::min(min_p, p);
    }

    const double elapsed = seconds_since(start);
    const double threshold = 0.01 / static_cast<double>(n_stats);
    Outcome out;
    out.pass = min_p > threshold && elapsed < 300.0;
    out.detail = "min p " + num(min_p) + " over " + std::to_string(n_stats) +
                 " statistics (need > " + num(threshold) + "), " + num(elapsed) + " s";
    return out;
}

// ---------------------------------------------------------------------------
// Shared synthetic fit used by checks 4 and 6.

struct SyntheticFit {
    SimulatedData sim;
    ChainArchive archive;
};

const SyntheticFit& synthetic_fit() {
    static SyntheticFit fixture = [] {
        SimSpec spec;  // 24 particles, 4 replicates, 11 doses, 6 covariates, splits on 0 and 1
        spec.seed = 301;
        Rng rng(spec.seed);
        SyntheticFit fx;
        fx.sim = simulate_dataset(spec, rng);

        RunConfig config;
        config.mcmc.iterations = 10000;
        config.mcmc.burn_in = 5000;
        config.mcmc.thin = 5;
        config.mcmc.n_chains = 1;
        config.mcmc.seed = 12;
        // A small grow share keeps the first sweeps, where the noise variance
        // has not yet adapted to the still-structureless tree, from locking in
        // spurious splits that later structure would grow beneath.
        config.mcmc.move_probs = {0.05, 0.05, 0.7, 0.2};
        const LikelihoodEngine engine = build_engine(fx.sim.dataset, config);
        std::vector<PosteriorChain> chains =
            run_chains(engine, fx.sim.dataset.model_covariates(), config.mcmc);
        fx.archive = make_archive(fx.sim.dataset, config, std::move(chains));
        return fx;
    }();
    return fixture;
}

// 4. On data generated from a two-variable tree, the posterior splits on
//    those variables, ranks them first in the variance decomposition, and
//    leaves the response flat in every unused covariate.

Outcome check_structure_recovery() {
    const auto start = Clock::now();
    const SyntheticFit& fx = synthetic_fit();
    const std::vector<ChainState>& draws = fx.archive.chains.front().draws;

    long hits = 0;
    for (const ChainState& draw : draws) {
        bool has0 = false, has1 = false;
        for (const int node : draw.tree.internal_nodes()) {
            const int var = draw.tree.node(node).rule.var;
            has0 = has0 || var == 0;
            has1 = has1 || var == 1;
        }
        if (has0 && has1) ++hits;
    }
    const double split_frac = static_cast<double>(hits) / static_cast<double>(draws.size());

    const ModelDraws model = pool_draws(fx.archive, 500);
    Rng rng = make_stream(90404, 1);
    const SensitivityReport report =
        sensitivity_indices(fx.archive, model, 256, SensMode::Averaged, rng);
    std::vector<int> order(static_cast<std::size_t>(report.s.size()));
    for (std::size_t j = 0; j < order.size(); ++j) order[j] = static_cast<int>(j);
    std::sort(order.begin(), order.end(), [&](int a, int b) { return report.s[a] > report.s[b]; });
    const bool top2 = (order[0] == 0 && order[1] == 1) || (order[0] == 1 && order[1] == 0);

    double worst_flat = 0.0;
    for (int var = 2; var < 6; ++var) {
        const std::vector<double> grid = covariate_grid(fx.archive, var, 9);
        const PartialDependence pd = partial_dependence(fx.archive, model, var, grid);
        for (Eigen::Index c = 0; c < pd.values.cols(); ++c)
            worst_flat = std::max(worst_flat,
                                  pd.values.col(c).maxCoeff() - pd.values.col(c).minCoeff());
    }

    const double elapsed = seconds_since(start);
    Outcome out;
    out.pass = split_frac >= 0.90 && top2 && worst_flat <= 1e-12 && elapsed < 150.0;
    out.detail = "true-split fraction " + num(split_frac) + ", top-2 " +
                 (top2 ? "yes" : "NO") + ", unused-covariate spread " + num(worst_flat) +
                 ", " + num(elapsed) + " s";
    return out;
}

// ---------------------------------------------------------------------------
// 5. Posterior means of the noise variance and both correlation parameters
//    land near their generating values on two-axis synthetics, seed by seed.

Outcome check_parameter_recovery() {
    const auto start = Clock::now();
    int failures = 0;
    double worst_sigma_ratio = 1.0, worst_phi_err = 0.0;

    for (int s = 0; s < 10; ++s) {
        SimSpec spec;
        spec.n_particles = 12;
        spec.n_replicates = 3;
        spec.n_doses = 7;
        spec.n_times = 6;
        spec.n_properties = 3;
        spec.split_vars = {0};
        spec.sigma2 = 0.04;
        spec.phi_d = 0.3;
        spec.phi_t = 0.3;
        spec.seed = 500 + static_cast<std::uint64_t>(s);
        Rng rng(spec.seed);
        const SimulatedData sim = simulate_dataset(spec, rng);

        RunConfig config;
        config.order_d = 3;
        config.order_t = 3;
        config.knots_d = {70.0, 130.0};
        config.knots_t = {10.0, 18.0};
        config.mcmc.iterations = 1500;
        config.mcmc.burn_in = 750;
        config.mcmc.thin = 5;
        config.mcmc.n_chains = 1;
        config.mcmc.seed = 40 + static_cast<std::uint64_t>(s);
        const LikelihoodEngine engine = build_engine(sim.dataset, config);
        const std::vector<PosteriorChain> chains =
            run_chains(engine, sim.dataset.model_covariates(), config.mcmc);

        double sigma2 = 0.0, phi_d = 0.0, phi_t = 0.0;
        for (const ChainState& draw : chains.front().draws) {
            sigma2 += draw.noise.sigma2;
            phi_d += draw.noise.phi_d;
            phi_t += draw.noise.phi_t;
        }
        const double k = static_cast<double>(chains.front().draws.size());
        sigma2 /= k;
        phi_d /= k;
        phi_t /= k;

        const double ratio = sigma2 / spec.sigma2;
        worst_sigma_ratio = std::max({worst_sigma_ratio, ratio, 1.0 / ratio});
        worst_phi_err = std::max({worst_phi_err, std::abs(phi_d - spec.phi_d),
                                  std::abs(phi_t - spec.phi_t)});
        if (ratio > 1.5 || 1.0 / ratio > 1.5 || std::abs(phi_d - spec.phi_d) > 0.1 ||
            std::abs(phi_t - spec.phi_t) > 0.1)
            ++failures;
    }

    const double elapsed = seconds_since(start);
    Outcome out;
    out.pass = failures == 0;
    out.detail = "worst sigma2 ratio " + num(worst_sigma_ratio) + ", worst |phi error| " +
                 num(worst_phi_err) + " over 10 seeds, " + num(elapsed) + " s";
    return out;
}

// ---------------------------------------------------------------------------
// 6. Pointwise 90% predictive bands cover the training observations at close
//    to their nominal rate.

Outcome check_calibration() {
    const auto start = Clock::now();
    const SyntheticFit& fx = synthetic_fit();
    const ModelDraws model = pool_draws(fx.archive, 1000);
    Rng rng = make_stream(90606, 1);
    const Eigen::MatrixXd covariates = fx.sim.dataset.model_covariates();

    double inside = 0.0;
    long n = 0;
    for (int i = 0; i < fx.sim.dataset.n_particles(); ++i) {
        const PredictiveSummary band =
            posterior_predictive(model, covariates.row(i).transpose(), 0.90, true, rng);
        const FitScore score =
            score_profiles(band, fx.sim.dataset.responses[static_cast<std::size_t>(i)]);
        inside += score.coverage * static_cast<double>(score.n);
        n += score.n;
    }
    const double coverage = inside / static_cast<double>(n);

    const double elapsed = seconds_since(start);
    Outcome out;
    out.pass = coverage >= 0.85 && coverage <= 0.95;
    out.detail = "coverage " + num(coverage) + " over " + std::to_string(n) +
                 " observations, " + num(elapsed) + " s";
    return out;
}

// ---------------------------------------------------------------------------
// 7. Hold-out validation pinpoints a particle engineered to sit alone in
//    covariate space, while the remaining folds stay well predicted.

Outcome check_holdout() {
    const auto start = Clock::now();
    SimSpec spec;
    spec.n_particles = 8;
    spec.n_replicates = 2;
    spec.n_doses = 7;
    spec.n_properties = 2;
    spec.split_vars = {0, 1};
    spec.isolated_particle = true;
    spec.seed = 701;
    Rng rng(spec.seed);
    const SimulatedData sim = simulate_dataset(spec, rng);

    RunConfig config;
    config.mcmc.iterations = 1200;
    config.mcmc.burn_in = 600;
    config.mcmc.thin = 3;
    config.mcmc.n_chains = 1;
    config.mcmc.seed = 19;
    const LocoReport report = loco_validation(sim.dataset, config);

    bool any_failed = false;
    int flagged_others = 0;
    for (const LocoFold& fold : report.folds) {
        any_failed = any_failed || fold.failed;
        if (fold.index != 0 && fold.flagged) ++flagged_others;
    }
    const bool isolated_flagged = report.folds.front().flagged;

    const double elapsed = seconds_since(start);
    Outcome out;
    out.pass = !any_failed && isolated_flagged && report.median_coverage >= 0.80;
    out.detail = std::string("outlier flagged ") + (isolated_flagged ? "yes" : "NO") +
                 ", median coverage " + num(report.median_coverage) + ", other flags " +
                 std::to_string(flagged_others) + ", " + num(elapsed) + " s";
    return out;
}

// ---------------------------------------------------------------------------
// 8. The variance-decomposition estimator reproduces analytic indices of an
//    additive function, and a surface driven by one covariate attributes all
//    variance to it.

Outcome check_sensitivity() {
    const auto start = Clock::now();
    Rng rng = make_stream(90808, 1);
    const int n = 8192, p = 3;
    const Eigen::MatrixXd a = latin_hypercube(n, p, rng);
    const Eigen::MatrixXd b = latin_hypercube(n, p, rng);
    auto f = [](const Eigen::MatrixXd& u) {
        return Eigen::MatrixXd(u.col(0) + 2.0 * u.col(1));
    };
    const Eigen::MatrixXd fa = f(a), fb = f(b);
    std::vector<Eigen::MatrixXd> fab;
    for (int j = 0; j < p; ++j) {
        Eigen::MatrixXd abj = a;
        abj.col(j) = b.col(j);
        fab.push_back(f(abj));
    }
    const SobolColumns sobol = sobol_from_evaluations(fa, fb, fab);
    const double expect_s[] = {0.2, 0.8, 0.0};
    double worst = 0.0;
    for (int j = 0; j < p; ++j)
        worst = std::max({worst, std::abs(sobol.s(j, 0) - expect_s[j]),
                          std::abs(sobol.t(j, 0) - expect_s[j])});

    // One-covariate surface: a single split on the first covariate.
    RunConfig config;
    Grid1D dose;
    for (int i = 0; i < 5; ++i) dose.values.push_back(static_cast<double>(i));
    const SplineSystem system = build_system(dose, Grid1D{}, config);
    Tree tree = Tree().grow(0, SplitRule{0, 0.5});
    tree.set_leaf_coeffs(0, Eigen::VectorXd::Zero(system.coeff_count()));
    tree.set_leaf_coeffs(1, Eigen::VectorXd::Constant(system.coeff_count(), 4.0));

    ChainArchive archive;
    archive.config = config;
    archive.particles = {"a", "b"};
    archive.property_names = {"x1", "x2"};
    archive.log_scaled = {false, false};
    archive.covariates.resize(2, 2);
    archive.covariates << 0.2, 0.5, 0.8, 0.5;
    archive.dose_grid = dose;
    PosteriorChain chain;
    chain.config = config.mcmc;
    ChainState state;
    state.tree = tree;
    state.log_post = 0.0;
    chain.draws.push_back(state);
    archive.chains.push_back(std::move(chain));

    const ModelDraws model = pool_draws(archive, 0);
    Rng rng2 = make_stream(90808, 2);
    const SensitivityReport report =
        sensitivity_indices(archive, model, 4096, SensMode::Averaged, rng2);
    const bool single_ok = std::abs(report.s[0] - 1.0) <= 0.05 &&
                           std::abs(report.t[0] - 1.0) <= 0.05 && report.s[1] == 0.0 &&
                           report.t[1] == 0.0;

    const double elapsed = seconds_since(start);
    Outcome out;
    out.pass = worst <= 0.05 && single_ok;
    out.detail = "additive max |error| " + num(worst) + ", one-covariate S " +
                 num(report.s[0]) + " T " + num(report.t[0]) + ", " + num(elapsed) + " s";
    return out;
}

// ---------------------------------------------------------------------------
// 9. Fixed seeds give bit-identical chains however the work is scheduled, and
//    datasets and chain archives survive a save/load cycle unchanged.

bool states_identical(const ChainState& a, const ChainState& b) {
    if (a.tree.serialize() != b.tree.serialize()) return false;
    if (!same_bits(a.noise.sigma2, b.noise.sigma2) || !same_bits(a.noise.phi_d, b.noise.phi_d) ||
        !same_bits(a.noise.phi_t, b.noise.phi_t) || !same_bits(a.tau2, b.tau2) ||
        !same_bits(a.log_post, b.log_post))
        return false;
    return true;
}

Outcome check_determinism() {
    const auto start = Clock::now();
    SimSpec spec;
    spec.n_particles = 6;
    spec.n_replicates = 2;
    spec.n_doses = 6;
    spec.n_properties = 2;
    spec.split_vars = {0};
    spec.seed = 901;
    Rng rng(spec.seed);
    const SimulatedData sim = simulate_dataset(spec, rng);

    RunConfig config;
    config.mcmc.iterations = 300;
    config.mcmc.burn_in = 100;
    config.mcmc.thin = 2;
    config.mcmc.n_chains = 3;
    config.mcmc.seed = 9;
    const LikelihoodEngine engine = build_engine(sim.dataset, config);
    const Eigen::MatrixXd covariates = sim.dataset.model_covariates();

    const std::vector<PosteriorChain> run1 = run_chains(engine, covariates, config.mcmc);
    const std::vector<PosteriorChain> run2 = run_chains(engine, covariates, config.mcmc);

    bool identical = run1.size() == run2.size();
    for (std::size_t c = 0; identical && c < run1.size(); ++c) {
        identical = run1[c].draws.size() == run2[c].draws.size();
        for (std::size_t k = 0; identical && k < run1[c].draws.size(); ++k)
            identical = states_identical(run1[c].draws[k], run2[c].draws[k]);
    }

    // One chain at a time on this thread must reproduce the pooled run.
    bool thread_independent = identical;
    for (int c = 0; thread_independent && c < config.mcmc.n_chains; ++c) {
        const PosteriorChain solo = run_chain(engine, covariates, config.mcmc, c);
        thread_independent = solo.draws.size() == run1[static_cast<std::size_t>(c)].draws.size();
        for (std::size_t k = 0; thread_independent && k < solo.draws.size(); ++k)
            thread_independent =
                states_identical(solo.draws[k], run1[static_cast<std::size_t>(c)].draws[k]);
    }

    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "treedose_acceptance";
    fs::remove_all(dir);
    fs::create_directories(dir);

    const ChainArchive archive = make_archive(sim.dataset, config, run1);
    save_chain((dir / "chain1.bin").string(), archive);
    const ChainArchive reloaded = load_chain((dir / "chain1.bin").string());
    save_chain((dir / "chain2.bin").string(), reloaded);
    const bool chain_round_trip =
        slurp((dir / "chain1.bin").string()) == slurp((dir / "chain2.bin").string()) &&
        !slurp((dir / "chain1.bin").string()).empty();

    save_responses((dir / "data1.csv").string(), sim.dataset);
    save_covariates((dir / "covs1.csv").string(), sim.dataset);
    const ExposureDataset reread =
        load_dataset((dir / "data1.csv").string(), (dir / "covs1.csv").string());
    save_responses((dir / "data2.csv").string(), reread);
    save_covariates((dir / "covs2.csv").string(), reread);
    const bool data_round_trip =
        slurp((dir / "data1.csv").string()) == slurp((dir / "data2.csv").string()) &&
        slurp((dir / "covs1.csv").string()) == slurp((dir / "covs2.csv").string());
    fs::remove_all(dir);

    const double elapsed = seconds_since(start);
    Outcome out;
    out.pass = identical && thread_independent && chain_round_trip && data_round_trip;
    out.detail = std::string("reruns ") + (identical ? "identical" : "DIFFER") +
                 ", solo chains " + (thread_independent ? "identical" : "DIFFER") +
                 ", archive round-trip " + (chain_round_trip ? "exact" : "BROKEN") +
                 ", dataset round-trip " + (data_round_trip ? "exact" : "BROKEN") + ", " +
                 num(elapsed) + " s";
    return out;
}

}  // namespace

int main() {
    struct Check {
        const char* name;
        Outcome (*run)();
    };
    const Check checks[] = {
        {"leaf evidence equals the dense Gaussian log density", check_evidence},
        {"flat-likelihood tree chain reproduces its prior", check_prior_recovery},
        {"full conditionals pass joint-distribution checks", check_conditionals},
        {"posterior recovers the generating split structure", check_structure_recovery},
        {"posterior recovers noise and correlation parameters", check_parameter_recovery},
        {"90% predictive bands are calibrated on held-in data", check_calibration},
        {"hold-out validation isolates the engineered outlier", check_holdout},
        {"variance decomposition matches analytic indices", check_sensitivity},
        {"fixed seeds are bit-reproducible and archives round-trip", check_determinism},
    };

    int failures = 0;
    int index = 0;
    for (const Check& check : checks) {
        ++index;
        Outcome outcome;
        std::string error;
        try {
            outcome = check.run();
        } catch (const std::exception& e) {
            outcome.pass = false;
            error = e.what();
        }
        std::cout << (outcome.pass ? "PASS" : "FAIL") << "  " << index << ". " << check.name
                  << "  [" << (error.empty() ? outcome.detail : "exception: " + error) << "]"
                  << std::endl;
        if (!outcome.pass) ++failures;
    }
    return failures;
}
