#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "treedose/engine.hpp"
#include "treedose/likelihood.hpp"
#include "treedose/rng.hpp"
#include "treedose/tree.hpp"

namespace treedose {

// Posterior sampler: Metropolis-Hastings on the tree with the leaf
// coefficients integrated out, then Gibbs updates of the coefficients and
// the variance/correlation components, in the fixed sweep order
// tree -> beta -> sigma2 -> tau2 -> phi_d -> phi_t.

struct McmcConfig {
    long iterations = 160000;
    long burn_in = 80000;
    long thin = 10;
    std::array<double, 4> move_probs{0.1, 0.1, 0.6, 0.2};  // grow, prune, change, swap
    TreePriorParams tree_prior;
    VariancePriorParams variance_priors;
    // All-zero counts mean "derive identity-matrix defaults from the grids".
    CorrelationPriorParams correlation_priors;
    double eta = 1e-6;  // penalty corner anchor, echoed for provenance
    std::uint64_t seed = 1;
    int n_chains = 4;
    int tree_steps_per_sweep = 1;
    int phi_grid = 201;
    // false pins both correlation parameters at zero (independent replicate
    // noise); the griddy updates are skipped entirely.
    bool update_phi = true;

    void validate() const;
};

struct ChainState {
    Tree tree;  // leaf coefficient blocks live on the tree's leaves
    NoiseModel noise;
    double tau2 = 1.0;
    // Cached integrated log posterior of the tree block: the partition's
    // marginal likelihood plus the tree log prior under the current
    // variance state. Refreshed at the end of every sweep.
    double log_post = 0.0;
};

struct MoveCounts {
    std::array<long, 4> proposed{};  // indexed by TreeMove
    std::array<long, 4> accepted{};
    long numeric_rejects = 0;  // candidate marginal failed numerically

    long total_proposed() const;
    long total_accepted() const;
};

struct PosteriorChain {
    std::vector<ChainState> draws;       // post burn-in, thinned
    MoveCounts moves;                    // tallied over post-burn-in proposals
    std::vector<double> log_post_trace;  // one entry per iteration, full run
    std::map<std::string, double> ess;   // sigma2, tau2, phi_d (phi_t in 2D)
    std::vector<std::string> warnings;
    std::uint64_t seed = 0;
    int chain_id = 0;
    McmcConfig config;
};

// Explicit correlation-prior parameters pass through; all-zero counts are
// replaced by the identity-matrix defaults for the engine's grid sizes.
CorrelationPriorParams resolve_correlation_priors(const CorrelationPriorParams& given,
                                                  const LikelihoodEngine& engine);

// Per-particle coefficient vectors pulled off the leaves of a tree.
std::vector<Eigen::VectorXd> betas_by_particle(const Tree& tree,
                                               const Eigen::MatrixXd& covariates);

// Starting state: root-only tree, coefficients drawn from their prior at the
// initial tau2 = b_tau/(a_tau+1), noise variance from the method of moments
// on replicate spread (floored at 1e-8 with a warning when degenerate), and
// both correlation parameters at 0.5. Leaves the engine set to those phi.
ChainState initialize_state(LikelihoodEngine& engine, const Eigen::MatrixXd& covariates,
                            const McmcConfig& config, Rng& rng,
                            std::vector<std::string>* warnings = nullptr);

// One Metropolis-Hastings tree update with coefficients integrated out.
// Acceptance uses the candidate's marginal-plus-prior against the cached
// state.log_post plus the proposal ratio; on acceptance every leaf's
// coefficients are refreshed from their full conditionals. A numerical
// failure in the candidate marginal rejects and is counted separately.
// Returns whether the proposal was accepted.
bool mh_tree_step(ChainState& state, LikelihoodEngine& engine,
                  const Eigen::MatrixXd& covariates, const McmcConfig& config, Rng& rng,
                  MoveCounts* counts = nullptr);

// One full sweep in the fixed order; the engine's correlation state tracks
// state.noise throughout and log_post is refreshed at the end.
void gibbs_sweep(ChainState& state, LikelihoodEngine& engine,
                 const Eigen::MatrixXd& covariates, const McmcConfig& config, Rng& rng,
                 MoveCounts* counts = nullptr);

// One chain, deterministic given (config.seed, chain_id): the RNG stream is
// make_stream(seed, chain_id). Stores floor((iterations - burn_in)/thin)
// thinned draws, the full log-posterior trace, post-burn-in acceptance
// counts, and effective sample sizes of the scalar components.
PosteriorChain run_chain(LikelihoodEngine engine, const Eigen::MatrixXd& covariates,
                         const McmcConfig& config, int chain_id = 0);

// config.n_chains independent chains on ids 0..n-1, run on worker threads;
// results are identical to running each chain alone.
std::vector<PosteriorChain> run_chains(const LikelihoodEngine& engine,
                                       const Eigen::MatrixXd& covariates,
                                       const McmcConfig& config);

// Effective sample size by the initial-positive-sequence rule on paired
// autocovariances. A constant series reports its own length.
double effective_sample_size(const std::vector<double>& draws);

// Split-half potential scale reduction across chains; chains are truncated
// to a common even length.
double split_rhat(const std::vector<std::vector<double>>& per_chain_draws);

}  // namespace treedose
