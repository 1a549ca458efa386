#include "treedose/likelihood.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "treedose/draws.hpp"
#include "treedose/error.hpp"

namespace treedose {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;
constexpr double kJitter = 1e-10;

// Cholesky with one jittered retry, then hard failure.
Eigen::LLT<Eigen::MatrixXd> chol_or_throw(const Eigen::MatrixXd& m, const char* what) {
    Eigen::LLT<Eigen::MatrixXd> llt(m);
    if (llt.info() == Eigen::Success) return llt;
    Eigen::MatrixXd bumped = m;
    bumped.diagonal().array() += kJitter;
    llt.compute(bumped);
    if (llt.info() == Eigen::Success) return llt;
    throw NumericError(std::string("Cholesky factorization failed for ") + what);
}

double logdet_from_llt(const Eigen::LLT<Eigen::MatrixXd>& llt) {
    return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

}  // namespace

void NoiseModel::validate() const {
    if (!(sigma2 > 0.0)) throw ValidationError("sigma2 must be positive");
    if (!(phi_d >= 0.0 && phi_d <= 1.0)) throw ValidationError("phi_d must lie in [0,1]");
    if (!(phi_t >= 0.0 && phi_t <= 1.0)) throw ValidationError("phi_t must lie in [0,1]");
}

void VariancePriorParams::validate() const {
    if (!(a_sigma > 0.0 && b_sigma > 0.0 && a_tau > 0.0 && b_tau > 0.0))
        throw ValidationError("variance prior parameters must be positive");
}

void rowe_sums(const Eigen::MatrixXd& m, double& l1, double& l2, double& l3) {
    if (m.rows() != m.cols() || m.rows() < 2)
        throw ValidationError("hyperparameter matrix must be square with side >= 2");
    const int n = static_cast<int>(m.rows());
    l1 = m.trace();
    l2 = 0.0;
    for (int v = 0; v + 1 < n; ++v) l2 += m(v, v + 1) + m(v + 1, v);
    l3 = 0.0;
    for (int v = 1; v + 1 < n; ++v) l3 += m(v, v);
}

CorrelationPriorParams default_correlation_priors(int n_d, int n_t) {
    if (n_d < 2) throw ValidationError("dose grid must have at least 2 points");
    CorrelationPriorParams p;
    double l1, l2, l3;
    rowe_sums(Eigen::MatrixXd::Identity(n_d, n_d), l1, l2, l3);
    p.lambda01 = l1;
    p.lambda02 = l2;
    p.lambda03 = l3;
    if (n_t == 0) {
        p.count_d = static_cast<double>(n_d - 1);
        p.count_t = 0.0;
        return p;
    }
    if (n_t < 2) throw ValidationError("time grid must have at least 2 points");
    rowe_sums(Eigen::MatrixXd::Identity(n_t, n_t), l1, l2, l3);
    p.gamma01 = l1;
    p.gamma02 = l2;
    p.gamma03 = l3;
    p.count_d = static_cast<double>(n_t) * static_cast<double>(n_d - 1);
    p.count_t = static_cast<double>(n_d) * static_cast<double>(n_t - 1);
    return p;
}

double rowe_log_prior(double phi, double count, double l1, double l2, double l3) {
    if (!(phi >= 0.0 && phi <= 1.0)) throw ValidationError("phi must lie in [0,1]");
    const double one_minus = 1.0 - phi * phi;
    if (one_minus <= 0.0) return -std::numeric_limits<double>::infinity();
    return -0.5 * count * std::log(one_minus) -
           (l1 - phi * l2 + phi * phi * l3) / (2.0 * one_minus);
}

Eigen::MatrixXd ar1_matrix(int n, double phi) {
    if (n < 1) throw ValidationError("ar1_matrix needs n >= 1");
    if (!(phi >= 0.0 && phi <= 1.0)) throw ValidationError("phi must lie in [0,1]");
    Eigen::MatrixXd r(n, n);
    for (int u = 0; u < n; ++u)
        for (int v = 0; v < n; ++v) r(u, v) = std::pow(phi, std::abs(u - v));
    return r;
}

MarkovInverse markov_inverse(const std::vector<double>& positions, double phi) {
    const int n = static_cast<int>(positions.size());
    if (n < 1) throw ValidationError("markov_inverse needs at least one position");
    if (!(phi >= 0.0 && phi < 1.0))
        throw ValidationError("markov_inverse needs phi in [0,1)");
    MarkovInverse out;
    out.diag = Eigen::VectorXd::Ones(n);
    out.off = Eigen::VectorXd::Zero(std::max(0, n - 1));
    // Innovation form: X_0 ~ N(0,1), X_i = rho_i X_{i-1} + e_i with
    // Var e_i = 1 - rho_i^2 and rho_i = phi^(gap). The precision is
    // tridiagonal and the determinant is the product of innovation variances.
    for (int i = 0; i + 1 < n; ++i) {
        const double gap = positions[static_cast<std::size_t>(i + 1)] -
                           positions[static_cast<std::size_t>(i)];
        if (!(gap > 0.0)) throw ValidationError("positions must be strictly increasing");
        const double rho = std::pow(phi, gap);
        const double v = 1.0 - rho * rho;
        out.logdet += std::log(v);
        out.off(i) = -rho / v;
        out.diag(i) += rho * rho / v;
        out.diag(i + 1) += 1.0 / v - 1.0;
    }
    return out;
}

Eigen::MatrixXd replicate_correlation(int n_d, int n_t, const NoiseModel& model) {
    model.validate();
    const Eigen::MatrixXd rd = ar1_matrix(n_d, model.phi_d);
    if (n_t <= 1) return rd;
    const Eigen::MatrixXd rt = ar1_matrix(n_t, model.phi_t);
    Eigen::MatrixXd r(n_d * n_t, n_d * n_t);
    for (int u = 0; u < n_d; ++u)
        for (int v = 0; v < n_t; ++v)
            for (int u2 = 0; u2 < n_d; ++u2)
                for (int v2 = 0; v2 < n_t; ++v2)
                    r(u * n_t + v, u2 * n_t + v2) = rd(u, u2) * rt(v, v2);
    return r;
}

void LeafStats::add(const LeafStats& other) {
    if (gram.size() == 0) {
        gram = other.gram;
        cross = other.cross;
    } else {
        gram += other.gram;
        cross += other.cross;
    }
    quad += other.quad;
    logdet_corr += other.logdet_corr;
    n_obs += other.n_obs;
}

LeafStats copy_stats(const CopyBlock& copy) {
    const Eigen::LLT<Eigen::MatrixXd> llt = chol_or_throw(copy.corr, "copy correlation");
    LeafStats s;
    const Eigen::MatrixXd rinv_design = llt.solve(copy.design);
    const Eigen::VectorXd rinv_y = llt.solve(copy.y);
    s.gram = copy.design.transpose() * rinv_design;
    s.cross = copy.design.transpose() * rinv_y;
    s.quad = copy.y.dot(rinv_y);
    s.logdet_corr = logdet_from_llt(llt);
    s.n_obs = copy.y.size();
    return s;
}

double leaf_log_marginal(const LeafStats& stats, const Eigen::MatrixXd& penalty,
                         double sigma2, double tau2) {
    const int m = static_cast<int>(penalty.rows());
    const double n = static_cast<double>(stats.n_obs);
    const Eigen::LLT<Eigen::MatrixXd> pen_llt = chol_or_throw(penalty, "penalty");
    // P = K/tau2 + gram/sigma2; Sigma^-1 and |Sigma| via Woodbury identities.
    Eigen::MatrixXd p = penalty / tau2 + stats.gram / sigma2;
    const Eigen::LLT<Eigen::MatrixXd> p_llt = chol_or_throw(p, "leaf marginal precision");
    const Eigen::VectorXd b = stats.cross / sigma2;
    const double quad_form = stats.quad / sigma2 - b.dot(p_llt.solve(b));
    const double logdet_prior_prec = logdet_from_llt(pen_llt) - m * std::log(tau2);
    const double logdet_sigma = n * std::log(sigma2) + stats.logdet_corr +
                                logdet_from_llt(p_llt) - logdet_prior_prec;
    return -0.5 * (n * kLogTwoPi + logdet_sigma + quad_form);
}

double node_log_marginal(const std::vector<CopyBlock>& copies, const Eigen::MatrixXd& penalty,
                         double sigma2, double tau2) {
    if (!(sigma2 > 0.0) || !(tau2 > 0.0))
        throw ValidationError("sigma2 and tau2 must be positive");
    long n_total = 0;
    for (const CopyBlock& c : copies) {
        if (c.design.rows() != c.y.size() || c.corr.rows() != c.y.size() ||
            c.design.cols() != penalty.rows())
            throw ValidationError("copy block dimensions disagree with the penalty");
        n_total += c.y.size();
    }
    if (n_total == 0) return 0.0;
    const int m = static_cast<int>(penalty.rows());

    if (n_total > m) {
        LeafStats stats(m);
        for (const CopyBlock& c : copies) stats.add(copy_stats(c));
        return leaf_log_marginal(stats, penalty, sigma2, tau2);
    }

    // Few observations: assemble the full covariance directly.
    Eigen::VectorXd y(n_total);
    Eigen::MatrixXd design(n_total, m);
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(n_total, n_total);
    long at = 0;
    for (const CopyBlock& c : copies) {
        const long k = c.y.size();
        y.segment(at, k) = c.y;
        design.middleRows(at, k) = c.design;
        cov.block(at, at, k, k) = sigma2 * c.corr;
        at += k;
    }
    const Eigen::LLT<Eigen::MatrixXd> pen_llt = chol_or_throw(penalty, "penalty");
    cov.noalias() += tau2 * design * pen_llt.solve(design.transpose());
    const Eigen::LLT<Eigen::MatrixXd> cov_llt = chol_or_throw(cov, "leaf covariance");
    const double quad_form = y.dot(cov_llt.solve(y));
    return -0.5 * (static_cast<double>(n_total) * kLogTwoPi + logdet_from_llt(cov_llt) +
                   quad_form);
}

Eigen::VectorXd GaussianConditional::sample(Rng& rng) const {
    Eigen::VectorXd z(mean.size());
    for (int i = 0; i < z.size(); ++i) z(i) = draw_normal(rng);
    // x = mean + L^-T z has covariance (L L^T)^-1 = P^-1
    return mean + chol.matrixU().solve(z);
}

Eigen::MatrixXd GaussianConditional::covariance() const {
    return chol.solve(Eigen::MatrixXd::Identity(mean.size(), mean.size()));
}

GaussianConditional beta_conditional(const LeafStats& stats, const Eigen::MatrixXd& penalty,
                                     double sigma2, double tau2) {
    GaussianConditional g;
    g.precision = penalty / tau2;
    if (stats.gram.size() > 0) g.precision += stats.gram / sigma2;
    g.chol = chol_or_throw(g.precision, "beta conditional precision");
    Eigen::VectorXd b = Eigen::VectorXd::Zero(penalty.rows());
    if (stats.cross.size() > 0) b = stats.cross / sigma2;
    g.mean = g.chol.solve(b);
    return g;
}

Eigen::VectorXd draw_beta(const std::vector<CopyBlock>& copies, const Eigen::MatrixXd& penalty,
                          double sigma2, double tau2, Rng& rng) {
    LeafStats stats(static_cast<int>(penalty.rows()));
    for (const CopyBlock& c : copies) stats.add(copy_stats(c));
    return beta_conditional(stats, penalty, sigma2, tau2).sample(rng);
}

double draw_sigma2(long n_total, double resid_quad, const VariancePriorParams& priors,
                   Rng& rng) {
    priors.validate();
    if (n_total < 0 || resid_quad < 0.0)
        throw ValidationError("negative observation count or residual quadratic form");
    return draw_inverse_gamma(rng, priors.a_sigma + 0.5 * static_cast<double>(n_total),
                              priors.b_sigma + 0.5 * resid_quad);
}

double draw_tau2(const std::vector<Eigen::VectorXd>& leaf_betas, const Eigen::MatrixXd& penalty,
                 const VariancePriorParams& priors, Rng& rng) {
    priors.validate();
    double quad = 0.0;
    for (const Eigen::VectorXd& beta : leaf_betas) {
        if (beta.size() != penalty.rows())
            throw ValidationError("leaf coefficient size disagrees with the penalty");
        quad += beta.dot(penalty * beta);
    }
    const double shape =
        priors.a_tau + 0.5 * static_cast<double>(leaf_betas.size()) *
                           static_cast<double>(penalty.rows());
    return draw_inverse_gamma(rng, shape, priors.b_tau + 0.5 * quad);
}

double griddy_draw(const std::function<double(double)>& log_weight, int n_grid, Rng& rng) {
    if (n_grid < 2) throw ValidationError("griddy grid needs at least 2 points");
    const double h = 1.0 / static_cast<double>(n_grid - 1);
    std::vector<double> lw(static_cast<std::size_t>(n_grid));
    double max_lw = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n_grid; ++i) {
        double v = log_weight(static_cast<double>(i) * h);
        if (std::isnan(v)) v = -std::numeric_limits<double>::infinity();
        lw[static_cast<std::size_t>(i)] = v;
        max_lw = std::max(max_lw, v);
    }
    if (!std::isfinite(max_lw))
        throw NumericError(
            "all correlation grid weights vanished; responses may need rescaling");
    double total = 0.0;
    for (double& v : lw) {
        v = std::exp(v - max_lw);
        total += v;
    }
    const double u = draw_uniform(rng) * total;
    double cum = 0.0;
    int pick = n_grid - 1;
    for (int i = 0; i < n_grid; ++i) {
        cum += lw[static_cast<std::size_t>(i)];
        if (u < cum) {
            pick = i;
            break;
        }
    }
    const double center = static_cast<double>(pick) * h;
    const double lo = std::max(0.0, center - 0.5 * h);
    const double hi = std::min(1.0, center + 0.5 * h);
    return lo + (hi - lo) * draw_uniform(rng);
}

}  // namespace treedose
