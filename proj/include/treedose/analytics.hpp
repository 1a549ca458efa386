#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "treedose/datastore.hpp"

namespace treedose {

// Read-only analytics over a finished chain: posterior predictive bands,
// Friedman partial dependence, Sobol sensitivity indices, leave-a-curve-out
// validation, and synthetic-data generation.

// A chain archive flattened for evaluation: the rebuilt spline system with
// its full-grid design matrix, correlation positions, and the pooled draws
// of every stored chain.
struct ModelDraws {
    SplineSystem system;
    Eigen::MatrixXd design;  // n_cells x M
    std::vector<double> dose_values, time_values;  // grid axes, echoed in summaries
    std::vector<double> pos_d, pos_t;              // correlation positions
    std::vector<ChainState> draws;  // chain-major pooling order
    int n_properties = 0;
    int n_dose = 0;
    int n_time = 0;  // 0 in the single-axis case

    int n_cells() const { return static_cast<int>(design.rows()); }
};

// max_draws > 0 keeps an evenly strided subsample of the pooled draws (the
// predictive and sensitivity loops are linear in the draw count). Verifies
// that the stored trees match the archive's covariates and basis size.
ModelDraws pool_draws(const ChainArchive& archive, int max_draws = 0);

// Unit-diagonal correlation of the full grid under the separable structure,
// phi_d^|pos_u - pos_v| (times the same in t), dose-major.
Eigen::MatrixXd grid_correlation(const std::vector<double>& pos_d,
                                 const std::vector<double>& pos_t, double phi_d, double phi_t);

// Pointwise posterior predictive band over the training grid.
struct PredictiveSummary {
    std::vector<double> dose;  // axis values, echoed for table writers
    std::vector<double> time;  // empty in the single-axis case
    Eigen::VectorXd mean;      // per flat dose-major cell
    Eigen::VectorXd lower, upper;
    double level = 0.9;
    bool noisy = false;          // bands on y* rather than on the mean surface
    Eigen::MatrixXd samples;     // draws x cells, kept on request
};

// Per draw: route x_star to its leaf, take the spline mean, and (when noisy)
// add one Gaussian replicate-noise draw with covariance sigma2 * R; then
// summarize the pointwise mean and the equal-tailed level interval.
PredictiveSummary posterior_predictive(const ModelDraws& model, const Eigen::VectorXd& x_star,
                                       double level, bool noisy, Rng& rng,
                                       bool keep_samples = false);

// Coverage and RMSE of observed replicate profiles against a band.
struct FitScore {
    double coverage = 0.0;  // fraction of observations inside [lower, upper]
    double rmse = 0.0;      // against the band mean
    long n = 0;
};
FitScore score_profiles(const PredictiveSummary& summary,
                        const std::vector<ReplicateProfile>& profiles);

// Marginal-effect surfaces: model output averaged over the training
// particles with one (or two) covariates overridden.
struct PartialDependence {
    std::vector<int> vars;              // one or two covariate indices
    std::vector<double> grid1, grid2;   // evaluation values; grid2 empty for one variable
    // one variable:  |grid1| x n_cells surface
    // two variables: |grid1| x |grid2| slice at the fixed cell
    Eigen::MatrixXd values;
    int cell = -1;  // fixed flat cell for the two-variable slice
};

// Equispaced covariate grid over the observed (model-scale) range, so
// log-flagged covariates are spaced on their log scale.
std::vector<double> covariate_grid(const ChainArchive& archive, int var, int n_points);

PartialDependence partial_dependence(const ChainArchive& archive, const ModelDraws& model,
                                     int var, const std::vector<double>& s_grid);
PartialDependence partial_dependence_2var(const ChainArchive& archive, const ModelDraws& model,
                                          int var1, int var2, const std::vector<double>& grid1,
                                          const std::vector<double>& grid2, int cell);

// Latin hypercube on the unit cube: each column stratified into n bins with
// one point per bin, independently shuffled.
Eigen::MatrixXd latin_hypercube(int n, int p, Rng& rng);

// Saltelli/Jansen estimators from tabulated evaluations. fa, fb and each
// fab[j] are n x q (q output columns); column variance is pooled over fa and
// fb, with extra_variance added to the denominator (predictive-noise
// attenuation). Returns p x q index matrices, unclamped.
struct SobolColumns {
    Eigen::MatrixXd s, t;
};
SobolColumns sobol_from_evaluations(const Eigen::MatrixXd& fa, const Eigen::MatrixXd& fb,
                                    const std::vector<Eigen::MatrixXd>& fab,
                                    double extra_variance = 0.0);

enum class SensMode { Averaged, PerPoint };

struct SensitivityReport {
    SensMode mode = SensMode::Averaged;
    std::vector<std::string> variables;
    // Averaged: indices of the grid-averaged response. PerPoint: across-cell
    // means of the per-cell indices, with the full per-cell matrices kept.
    Eigen::VectorXd s, t;        // clamped to [0,1]
    Eigen::VectorXd s_se, t_se;  // bootstrap standard errors
    Eigen::MatrixXd s_cells, t_cells;  // p x n_cells, PerPoint mode only
    std::vector<int> flagged;    // variables with t < s - 2 se
};

// Uniform input distribution on the observed covariate hyper-rectangle
// (model scale); evaluations are posterior-mean spline surfaces, averaged
// over the pooled draws before the indices are formed. include_noise adds
// the posterior-mean sigma2 to the variance denominator.
SensitivityReport sensitivity_indices(const ChainArchive& archive, const ModelDraws& model,
                                      int n_base, SensMode mode, Rng& rng,
                                      bool include_noise = false);

// Leave-a-curve-out validation: refit without each particle in turn and
// score its held-out profile against the fold's noisy predictive band.
struct LocoFold {
    int index = 0;
    std::string particle;
    bool failed = false;
    std::string message;  // failure notice when failed
    double coverage = 0.0;
    double rmse = 0.0;
    bool flagged = false;  // coverage below two thirds of the nominal level
    PredictiveSummary prediction;
};

struct LocoReport {
    std::vector<LocoFold> folds;
    double median_coverage = 0.0;  // over the folds that ran
    double level = 0.9;
};

// Fold f refits with RNG stream 1000 + f off config.mcmc.seed, so results
// do not depend on fold order. Per-fold failures are recorded and skipped.
LocoReport loco_validation(const ExposureDataset& data, const RunConfig& config);

// Synthetic generator mirroring the model: a fixed tree over uniform
// covariates, one curve per leaf, Gaussian noise with the separable AR(1)
// correlation.
struct SimSpec {
    int n_particles = 24;
    int n_replicates = 4;
    int n_doses = 11;
    int n_times = 1;  // 1 = single axis
    int n_properties = 6;
    std::vector<int> split_vars = {0, 1};  // covariates the true tree uses
    double sigma2 = 0.04;
    double phi_d = 0.3;
    double phi_t = 0.3;
    double tau2 = 1.0;  // spline-family coefficient scale
    enum class Family { Sigmoid, Spline } family = Family::Sigmoid;
    // Plant one extreme-covariate particle in its own leaf with an outsized
    // curve (the lone-particle validation scenario).
    bool isolated_particle = false;
    std::uint64_t seed = 1;

    void validate() const;
};

struct GroundTruth {
    Tree tree;  // generating tree, structural rules only
    std::vector<Eigen::VectorXd> leaf_surfaces;  // true mean per flat cell, leaf order
    std::vector<int> leaf_of_particle;
    double sigma2 = 0.0;
    double phi_d = 0.0;
    double phi_t = 0.0;
};

struct SimulatedData {
    ExposureDataset dataset;
    GroundTruth truth;
};

SimulatedData simulate_dataset(const SimSpec& spec, Rng& rng);

// Flat key=value spec files for the command line; unknown keys rejected.
SimSpec parse_sim_spec(std::istream& in, const std::string& name);
SimSpec load_sim_spec(const std::string& path);

void save_ground_truth(const std::string& path, const GroundTruth& truth);

}  // namespace treedose
