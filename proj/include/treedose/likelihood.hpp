#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

#include "treedose/rng.hpp"

namespace treedose {

// Error covariance machinery and the closed-form conditionals of the
// spline-leaf regression model:
//
//   y_copy = B beta_leaf + eps,   eps ~ N(0, sigma2 * R),
//   beta_leaf ~ N(0, tau2 * K^-1),
//
// with R an AR(1) correlation over dose (Kronecker AR(1) x AR(1) over
// dose x time in 2D) and independent (particle, replicate) copies.

struct NoiseModel {
    double sigma2 = 1.0;
    double phi_d = 0.0;
    double phi_t = 0.0;  // unused in 1D

    void validate() const;
};

struct VariancePriorParams {
    double a_sigma = 1.0;
    double b_sigma = 1.0;
    double a_tau = 1.0;
    double b_tau = 1.0;

    void validate() const;
};

// Parameters of the conjugate correlation prior
//   p(phi) ∝ (1 - phi^2)^(-count/2)
//            * exp(-(l1 - phi*l2 + phi^2*l3) / (2 (1 - phi^2)))   on [0,1],
// one triple per axis. l1/l2/l3 are the diagonal, sub+super-diagonal, and
// interior-diagonal sums of a hyperparameter matrix; count is the
// normalizing exponent (n_D - 1 in 1D, n_T (n_D - 1) for the dose axis and
// n_D (n_T - 1) for the time axis in 2D).
struct CorrelationPriorParams {
    double lambda01 = 0.0, lambda02 = 0.0, lambda03 = 0.0;  // dose axis
    double gamma01 = 0.0, gamma02 = 0.0, gamma03 = 0.0;     // time axis
    double count_d = 0.0;
    double count_t = 0.0;
};

// Triple (l1, l2, l3) from a hyperparameter matrix: trace, sum of sub- plus
// super-diagonal, and trace excluding both end entries.
void rowe_sums(const Eigen::MatrixXd& m, double& l1, double& l2, double& l3);

// Identity hyperparameter matrices on both axes; n_t = 0 selects 1D.
CorrelationPriorParams default_correlation_priors(int n_d, int n_t);

// Unnormalized log prior density at phi in [0,1]; -infinity at phi = 1.
double rowe_log_prior(double phi, double count, double l1, double l2, double l3);

// Correlation matrix with entry phi^|u - v| over grid indices.
Eigen::MatrixXd ar1_matrix(int n, double phi);

// Markov correlation phi^|pos_u - pos_v| at arbitrary ordered positions:
// tridiagonal inverse (diag, off) and log determinant, all O(n).
struct MarkovInverse {
    Eigen::VectorXd diag;
    Eigen::VectorXd off;  // superdiagonal, size n-1
    double logdet = 0.0;
};
MarkovInverse markov_inverse(const std::vector<double>& positions, double phi);

// Separable correlation over a complete dose x time grid, dose-major:
// ar1(n_d, phi_d) Kronecker ar1(n_t, phi_t); 1D when n_t == 1 or 0.
Eigen::MatrixXd replicate_correlation(int n_d, int n_t, const NoiseModel& model);

// One (particle, replicate) observation block as the likelihood sees it.
struct CopyBlock {
    Eigen::VectorXd y;       // observed responses
    Eigen::MatrixXd design;  // rows of the full design at the observed cells
    Eigen::MatrixXd corr;    // unit-diagonal correlation of the observed cells
};

// Sufficient statistics of a leaf's copies under fixed correlation:
// everything the marginal and the beta conditional need.
struct LeafStats {
    Eigen::MatrixXd gram;     // sum of B' R^-1 B
    Eigen::VectorXd cross;    // sum of B' R^-1 y
    double quad = 0.0;        // sum of y' R^-1 y
    double logdet_corr = 0.0; // sum of log |R|
    long n_obs = 0;

    LeafStats() = default;
    explicit LeafStats(int m)
        : gram(Eigen::MatrixXd::Zero(m, m)), cross(Eigen::VectorXd::Zero(m)) {}
    void add(const LeafStats& other);
};

LeafStats copy_stats(const CopyBlock& copy);

// Log density of the stacked leaf observations with beta integrated out:
// N(0, sigma2 * blockdiag(R) + tau2 * B K^-1 B'). The summary form costs
// O(M^3) through the Woodbury identity regardless of observation count.
double leaf_log_marginal(const LeafStats& stats, const Eigen::MatrixXd& penalty,
                         double sigma2, double tau2);

// Same value from raw blocks; switches to direct dense evaluation when the
// leaf has no more observations than coefficients.
double node_log_marginal(const std::vector<CopyBlock>& copies, const Eigen::MatrixXd& penalty,
                         double sigma2, double tau2);

// Gaussian full conditional of a leaf coefficient vector:
// precision P = K/tau2 + gram/sigma2, mean P^-1 cross/sigma2.
struct GaussianConditional {
    Eigen::VectorXd mean;
    Eigen::MatrixXd precision;
    Eigen::LLT<Eigen::MatrixXd> chol;  // of precision

    Eigen::VectorXd sample(Rng& rng) const;
    Eigen::MatrixXd covariance() const;
};

GaussianConditional beta_conditional(const LeafStats& stats, const Eigen::MatrixXd& penalty,
                                     double sigma2, double tau2);

Eigen::VectorXd draw_beta(const std::vector<CopyBlock>& copies, const Eigen::MatrixXd& penalty,
                          double sigma2, double tau2, Rng& rng);

// sigma2 | rest ~ IG(a + n_total/2, b + resid_quad/2) with
// resid_quad = sum over copies of r' R^-1 r, r = y - B beta.
double draw_sigma2(long n_total, double resid_quad, const VariancePriorParams& priors, Rng& rng);

// tau2 | rest ~ IG(a + (n_leaves * M)/2, b + sum_r beta_r' K beta_r / 2).
double draw_tau2(const std::vector<Eigen::VectorXd>& leaf_betas, const Eigen::MatrixXd& penalty,
                 const VariancePriorParams& priors, Rng& rng);

// Griddy draw on [0,1]: log_weight evaluated at n_grid equispaced points, a
// point sampled proportionally, then a uniform draw within the point's cell
// (half cells at the ends). Throws NumericError when every weight vanishes.
double griddy_draw(const std::function<double(double)>& log_weight, int n_grid, Rng& rng);

}  // namespace treedose
