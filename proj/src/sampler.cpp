#include "treedose/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <exception>
#include <limits>
#include <stdexcept>
#include <thread>
#include <unordered_map>

#include "treedose/draws.hpp"
#include "treedose/error.hpp"

namespace treedose {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double integrated_log_posterior(const ChainState& state, const LikelihoodEngine& engine,
                                const Eigen::MatrixXd& covariates, const McmcConfig& config) {
    const auto partition = leaf_partition(state.tree, covariates);
    return engine.partition_log_marginal(partition, state.noise.sigma2, state.tau2) +
           log_tree_prior(state.tree, covariates, config.tree_prior);
}

void refresh_leaf_coeffs(ChainState& state, LikelihoodEngine& engine,
                         const Eigen::MatrixXd& covariates, Rng& rng) {
    const auto partition = leaf_partition(state.tree, covariates);
    for (std::size_t r = 0; r < partition.size(); ++r) {
        const GaussianConditional g =
            engine.leaf_conditional(partition[r], state.noise.sigma2, state.tau2);
        state.tree.set_leaf_coeffs(static_cast<int>(r), g.sample(rng));
    }
}

// Pooled spread of replicate responses around their (particle, cell) means;
// falls back to overall spread when nothing is replicated.
double moments_sigma2(const LikelihoodEngine& engine) {
    const int n_cells = engine.system().cell_count();
    struct Acc {
        double sum = 0.0, sumsq = 0.0;
        long count = 0;
    };
    std::unordered_map<long, Acc> cells;
    double total = 0.0, totalsq = 0.0;
    for (int c = 0; c < engine.n_copies(); ++c) {
        const ObsCopy& obs = engine.copy(c);
        for (Eigen::Index i = 0; i < obs.y.size(); ++i) {
            const double y = obs.y(i);
            Acc& a = cells[static_cast<long>(obs.particle) * n_cells +
                           obs.cells[static_cast<std::size_t>(i)]];
            a.sum += y;
            a.sumsq += y * y;
            a.count += 1;
            total += y;
            totalsq += y * y;
        }
    }
    double ss = 0.0;
    long dof = 0;
    for (const auto& [key, a] : cells) {
        (void)key;
        if (a.count < 2) continue;
        ss += a.sumsq - a.sum * a.sum / static_cast<double>(a.count);
        dof += a.count - 1;
    }
    if (dof == 0) {
        const long n = engine.n_obs_total();
        if (n >= 2) {
            ss = totalsq - total * total / static_cast<double>(n);
            dof = n - 1;
        }
    }
    return dof > 0 ? ss / static_cast<double>(dof) : 0.0;
}

double sample_variance(const std::vector<double>& x) {
    const std::size_t n = x.size();
    if (n < 2) return 0.0;
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    return ss / static_cast<double>(n - 1);
}

}  // namespace

void McmcConfig::validate() const {
    if (iterations < 1) throw ValidationError("iterations must be positive");
    if (burn_in < 0) throw ValidationError("burn_in must be nonnegative");
    if (burn_in >= iterations) throw ValidationError("burn_in must be smaller than iterations");
    if (thin < 1) throw ValidationError("thin must be at least 1");
    double sum = 0.0;
    for (double p : move_probs) {
        if (!(p >= 0.0)) throw ValidationError("move probabilities must be nonnegative");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ValidationError("move probabilities must sum to 1");
    if (!(tree_prior.alpha > 0.0 && tree_prior.alpha < 1.0))
        throw ValidationError("tree prior alpha must lie in (0,1)");
    if (!(tree_prior.nu >= 0.0)) throw ValidationError("tree prior nu must be nonnegative");
    variance_priors.validate();
    if (!(eta > 0.0)) throw ValidationError("penalty corner anchor eta must be positive");
    if (n_chains < 1) throw ValidationError("n_chains must be at least 1");
    if (tree_steps_per_sweep < 1) throw ValidationError("tree_steps_per_sweep must be at least 1");
    if (phi_grid < 2) throw ValidationError("phi_grid needs at least two points");
}

long MoveCounts::total_proposed() const {
    long t = 0;
    for (long v : proposed) t += v;
    return t;
}

long MoveCounts::total_accepted() const {
    long t = 0;
    for (long v : accepted) t += v;
    return t;
}

CorrelationPriorParams resolve_correlation_priors(const CorrelationPriorParams& given,
                                                  const LikelihoodEngine& engine) {
    if (given.count_d != 0.0 || given.count_t != 0.0) return given;
    return default_correlation_priors(engine.n_dose(), engine.n_time());
}

std::vector<Eigen::VectorXd> betas_by_particle(const Tree& tree,
                                               const Eigen::MatrixXd& covariates) {
    std::vector<Eigen::VectorXd> out(static_cast<std::size_t>(covariates.rows()));
    for (Eigen::Index i = 0; i < covariates.rows(); ++i) {
        const int ordinal = tree.assign_leaf(covariates.row(i).transpose());
        out[static_cast<std::size_t>(i)] = tree.leaf_coeffs(ordinal);
    }
    return out;
}

ChainState initialize_state(LikelihoodEngine& engine, const Eigen::MatrixXd& covariates,
                            const McmcConfig& config, Rng& rng,
                            std::vector<std::string>* warnings) {
    config.validate();
    if (covariates.rows() != engine.n_particles())
        throw ValidationError("covariate rows disagree with the engine's particle count");

    ChainState state;
    state.tau2 = config.variance_priors.b_tau / (config.variance_priors.a_tau + 1.0);

    double s2 = moments_sigma2(engine);
    if (!(s2 > 1e-8) || !std::isfinite(s2)) {
        if (warnings)
            warnings->push_back("replicate spread is degenerate; noise variance floored at 1e-8");
        s2 = 1e-8;
    }
    state.noise.sigma2 = s2;
    state.noise.phi_d = config.update_phi ? 0.5 : 0.0;
    state.noise.phi_t = (config.update_phi && engine.two_d()) ? 0.5 : 0.0;
    engine.set_phi(state.noise.phi_d, state.noise.phi_t);

    // coefficients from their prior at the initial smoothing variance
    const GaussianConditional prior_draw = beta_conditional(
        LeafStats(engine.coeff_count()), engine.penalty(), 1.0, state.tau2);
    state.tree.set_leaf_coeffs(0, prior_draw.sample(rng));

    const auto partition = leaf_partition(state.tree, covariates);
    const double marginal =
        engine.partition_log_marginal(partition, state.noise.sigma2, state.tau2);
    const double prior = log_tree_prior(state.tree, covariates, config.tree_prior);
    if (!std::isfinite(marginal))
        throw NumericError("initial integrated likelihood is not finite; check the responses");
    if (!std::isfinite(prior))
        throw NumericError("initial tree prior is not finite; check the covariates");
    state.log_post = marginal + prior;
    return state;
}

bool mh_tree_step(ChainState& state, LikelihoodEngine& engine, const Eigen::MatrixXd& covariates,
                  const McmcConfig& config, Rng& rng, MoveCounts* counts) {
    MoveProposal prop =
        propose_move(state.tree, covariates, config.move_probs, config.tree_prior, rng);
    const std::size_t m = static_cast<std::size_t>(prop.move);
    if (counts) counts->proposed[m] += 1;
    if (prop.noop) return false;

    double log_acc = kNegInf;
    double cand_post = kNegInf;
    if (prop.log_ratio != kNegInf) {
        const double cand_prior = log_tree_prior(prop.candidate, covariates, config.tree_prior);
        if (cand_prior != kNegInf) {
            double cand_marginal;
            try {
                cand_marginal = engine.partition_log_marginal(
                    leaf_partition(prop.candidate, covariates), state.noise.sigma2, state.tau2);
            } catch (const NumericError&) {
                if (counts) counts->numeric_rejects += 1;
                return false;
            }
            cand_post = cand_marginal + cand_prior;
            log_acc = cand_post - state.log_post + prop.log_ratio;
        }
    }

    bool accept = log_acc >= 0.0;
    if (!accept && log_acc != kNegInf) accept = draw_uniform(rng) < std::exp(log_acc);
    if (!accept) return false;

    state.tree = std::move(prop.candidate);
    state.log_post = cand_post;
    refresh_leaf_coeffs(state, engine, covariates, rng);
    if (counts) counts->accepted[m] += 1;
    return true;
}

void gibbs_sweep(ChainState& state, LikelihoodEngine& engine, const Eigen::MatrixXd& covariates,
                 const McmcConfig& config, Rng& rng, MoveCounts* counts) {
    for (int s = 0; s < config.tree_steps_per_sweep; ++s)
        mh_tree_step(state, engine, covariates, config, rng, counts);

    refresh_leaf_coeffs(state, engine, covariates, rng);
    const auto betas = betas_by_particle(state.tree, covariates);

    const double resid = engine.residual_quad(betas);
    state.noise.sigma2 =
        draw_sigma2(engine.n_obs_total(), resid, config.variance_priors, rng);

    std::vector<Eigen::VectorXd> leaf_betas;
    const int n_leaves = state.tree.n_leaves();
    leaf_betas.reserve(static_cast<std::size_t>(n_leaves));
    for (int r = 0; r < n_leaves; ++r) leaf_betas.push_back(state.tree.leaf_coeffs(r));
    state.tau2 = draw_tau2(leaf_betas, engine.penalty(), config.variance_priors, rng);

    if (config.update_phi) {
        const CorrelationPriorParams cp =
            resolve_correlation_priors(config.correlation_priors, engine);
        const double phi_d = engine.draw_phi_axis(LikelihoodEngine::Axis::Dose, betas,
                                                  state.noise.sigma2, cp, config.phi_grid, rng);
        engine.set_phi(phi_d, engine.phi_t());
        state.noise.phi_d = phi_d;
        if (engine.two_d()) {
            const double phi_t = engine.draw_phi_axis(LikelihoodEngine::Axis::Time, betas,
                                                      state.noise.sigma2, cp, config.phi_grid, rng);
            engine.set_phi(phi_d, phi_t);
            state.noise.phi_t = phi_t;
        }
    }

    state.log_post = integrated_log_posterior(state, engine, covariates, config);
}

PosteriorChain run_chain(LikelihoodEngine engine, const Eigen::MatrixXd& covariates,
                         const McmcConfig& config, int chain_id) {
    config.validate();
    PosteriorChain chain;
    chain.seed = config.seed;
    chain.chain_id = chain_id;
    chain.config = config;

    Rng rng = make_stream(config.seed, static_cast<std::uint64_t>(chain_id));
    ChainState state = initialize_state(engine, covariates, config, rng, &chain.warnings);

    chain.log_post_trace.reserve(static_cast<std::size_t>(config.iterations));
    chain.draws.reserve(
        static_cast<std::size_t>((config.iterations - config.burn_in) / config.thin));
    for (long it = 0; it < config.iterations; ++it) {
        const bool sampling = it >= config.burn_in;
        gibbs_sweep(state, engine, covariates, config, rng, sampling ? &chain.moves : nullptr);
        chain.log_post_trace.push_back(state.log_post);
#ifndef NDEBUG
        if ((it + 1) % 1000 == 0) {
            const double fresh = integrated_log_posterior(state, engine, covariates, config);
            if (!(std::abs(fresh - state.log_post) <= 1e-6))
                throw std::logic_error("stale integrated-posterior cache");
        }
#endif
        if (sampling && (it - config.burn_in) % config.thin == config.thin - 1)
            chain.draws.push_back(state);
    }

    const auto scalar_ess = [&chain](double (*get)(const ChainState&)) {
        std::vector<double> v;
        v.reserve(chain.draws.size());
        for (const ChainState& d : chain.draws) v.push_back(get(d));
        return effective_sample_size(v);
    };
    chain.ess["sigma2"] = scalar_ess([](const ChainState& s) { return s.noise.sigma2; });
    chain.ess["tau2"] = scalar_ess([](const ChainState& s) { return s.tau2; });
    chain.ess["phi_d"] = scalar_ess([](const ChainState& s) { return s.noise.phi_d; });
    if (engine.two_d())
        chain.ess["phi_t"] = scalar_ess([](const ChainState& s) { return s.noise.phi_t; });
    return chain;
}

std::vector<PosteriorChain> run_chains(const LikelihoodEngine& engine,
                                       const Eigen::MatrixXd& covariates,
                                       const McmcConfig& config) {
    config.validate();
    const int n = config.n_chains;
    std::vector<PosteriorChain> out(static_cast<std::size_t>(n));
    if (n == 1) {
        out[0] = run_chain(engine, covariates, config, 0);
        return out;
    }
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(n));
    for (int c = 0; c < n; ++c) {
        pool.emplace_back([&, c] {
            try {
                out[static_cast<std::size_t>(c)] = run_chain(engine, covariates, config, c);
            } catch (...) {
                errors[static_cast<std::size_t>(c)] = std::current_exception();
            }
        });
    }
    for (std::thread& t : pool) t.join();
    for (const std::exception_ptr& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

double effective_sample_size(const std::vector<double>& draws) {
    const long n = static_cast<long>(draws.size());
    if (n < 4) return static_cast<double>(n);
    double mean = 0.0;
    for (double v : draws) mean += v;
    mean /= static_cast<double>(n);
    const auto gamma = [&](long k) {
        double s = 0.0;
        for (long i = 0; i + k < n; ++i)
            s += (draws[static_cast<std::size_t>(i)] - mean) *
                 (draws[static_cast<std::size_t>(i + k)] - mean);
        return s / static_cast<double>(n);
    };
    const double g0 = gamma(0);
    if (!(g0 > 0.0) || !std::isfinite(g0)) return static_cast<double>(n);
    // sum paired autocovariances while the pairs stay positive
    double iact = -1.0;
    for (long m = 0; 2 * m + 1 < n; ++m) {
        const double pair = gamma(2 * m) + gamma(2 * m + 1);
        if (!(pair > 0.0)) break;
        iact += 2.0 * pair / g0;
    }
    iact = std::max(iact, 1.0 / static_cast<double>(n));
    return static_cast<double>(n) / iact;
}

double split_rhat(const std::vector<std::vector<double>>& per_chain_draws) {
    long len = -1;
    for (const auto& c : per_chain_draws) {
        const long l = static_cast<long>(c.size());
        len = len < 0 ? l : std::min(len, l);
    }
    if (len < 0) return std::numeric_limits<double>::quiet_NaN();
    len -= len % 2;
    const long half = len / 2;
    if (half < 2) return std::numeric_limits<double>::quiet_NaN();

    std::vector<double> means, vars;
    for (const auto& c : per_chain_draws) {
        for (int part = 0; part < 2; ++part) {
            std::vector<double> h(c.begin() + part * half, c.begin() + (part + 1) * half);
            double m = 0.0;
            for (double v : h) m += v;
            means.push_back(m / static_cast<double>(half));
            vars.push_back(sample_variance(h));
        }
    }
    double w = 0.0;
    for (double v : vars) w += v;
    w /= static_cast<double>(vars.size());
    const double var_means = sample_variance(means);
    if (w <= 0.0) return var_means <= 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
    const double v_hat =
        (static_cast<double>(half - 1) / static_cast<double>(half)) * w + var_means;
    return std::sqrt(v_hat / w);
}

}  // namespace treedose
