#include "treedose/engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "treedose/error.hpp"

namespace treedose {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// y = T x for the tridiagonal matrix T encoded by a MarkovInverse.
Eigen::MatrixXd tridiag_apply(const MarkovInverse& t, const Eigen::MatrixXd& x) {
    const int n = static_cast<int>(t.diag.size());
    Eigen::MatrixXd y(n, x.cols());
    for (int i = 0; i < n; ++i) {
        y.row(i) = t.diag(i) * x.row(i);
        if (i > 0) y.row(i) += t.off(i - 1) * x.row(i - 1);
        if (i + 1 < n) y.row(i) += t.off(i) * x.row(i + 1);
    }
    return y;
}

Eigen::MatrixXd kron(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    Eigen::MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j)
            out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    return out;
}

}  // namespace

std::vector<double> axis_positions(const Grid1D& grid, CorrDistance mode) {
    grid.validate();
    if (mode == CorrDistance::Raw) return grid.values;
    std::vector<double> pos(grid.values.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<double>(i);
    return pos;
}

LikelihoodEngine::LikelihoodEngine(SplineSystem system, std::vector<double> positions_d,
                                   std::vector<double> positions_t, std::vector<ObsCopy> copies,
                                   int n_particles)
    : system_(std::move(system)), pos_d_(std::move(positions_d)), pos_t_(std::move(positions_t)) {
    if (n_particles < 1) throw ValidationError("need at least one particle");
    if (static_cast<Eigen::Index>(pos_d_.size()) != system_.basis_d.rows())
        throw ValidationError("dose positions disagree with the dose basis");
    if (system_.two_d()) {
        if (static_cast<Eigen::Index>(pos_t_.size()) != system_.basis_t.rows())
            throw ValidationError("time positions disagree with the time basis");
    } else if (!pos_t_.empty()) {
        throw ValidationError("time positions given for a one-dimensional system");
    }
    penalty_ = system_.penalty;
    full_design_ = design_matrix(system_);
    const int n_cells = system_.cell_count();

    by_particle_.assign(static_cast<std::size_t>(n_particles), {});
    copies_.reserve(copies.size());
    for (ObsCopy& obs : copies) {
        if (obs.particle < 0 || obs.particle >= n_particles)
            throw ValidationError("copy references an unknown particle");
        if (obs.cells.empty()) throw ValidationError("copy observes no cells");
        if (static_cast<Eigen::Index>(obs.cells.size()) != obs.y.size())
            throw ValidationError("copy responses disagree with its cell list");
        for (std::size_t i = 0; i < obs.cells.size(); ++i) {
            if (obs.cells[i] < 0 || obs.cells[i] >= n_cells)
                throw ValidationError("copy cell index out of range");
            if (i > 0 && obs.cells[i] <= obs.cells[i - 1])
                throw ValidationError("copy cells must be strictly increasing");
        }
        CopyRecord rec;
        rec.complete = static_cast<int>(obs.cells.size()) == n_cells;
        rec.design.resize(static_cast<Eigen::Index>(obs.cells.size()), full_design_.cols());
        for (std::size_t i = 0; i < obs.cells.size(); ++i)
            rec.design.row(static_cast<Eigen::Index>(i)) = full_design_.row(obs.cells[i]);
        if (rec.complete && system_.two_d()) {
            const int nd = static_cast<int>(pos_d_.size());
            const int nt = static_cast<int>(pos_t_.size());
            rec.ymat.resize(nd, nt);
            for (int u = 0; u < nd; ++u)
                for (int v = 0; v < nt; ++v) rec.ymat(u, v) = obs.y(u * nt + v);
        }
        n_obs_total_ += obs.y.size();
        by_particle_[static_cast<std::size_t>(obs.particle)].push_back(
            static_cast<int>(copies_.size()));
        rec.obs = std::move(obs);
        copies_.push_back(std::move(rec));
    }
    set_phi(0.0, 0.0);
}

void LikelihoodEngine::set_phi(double phi_d, double phi_t) {
    if (!(phi_d >= 0.0 && phi_d < 1.0)) throw ValidationError("phi_d must lie in [0,1)");
    if (system_.two_d() && !(phi_t >= 0.0 && phi_t < 1.0))
        throw ValidationError("phi_t must lie in [0,1)");
    phi_d_ = phi_d;
    phi_t_ = system_.two_d() ? phi_t : 0.0;
    for (CopyRecord& rec : copies_) rebuild_copy(rec);
    stats_by_particle_.assign(by_particle_.size(), LeafStats(coeff_count()));
    for (std::size_t i = 0; i < by_particle_.size(); ++i)
        for (int c : by_particle_[i])
            stats_by_particle_[i].add(copies_[static_cast<std::size_t>(c)].stats);
}

void LikelihoodEngine::rebuild_copy(CopyRecord& rec) {
    if (!system_.two_d()) {
        // Any dose subset of a Markov correlation is Markov again, so the
        // tridiagonal inverse applies to partial profiles too.
        std::vector<double> psub(rec.obs.cells.size());
        for (std::size_t i = 0; i < psub.size(); ++i)
            psub[i] = pos_d_[static_cast<std::size_t>(rec.obs.cells[i])];
        const MarkovInverse minv = markov_inverse(psub, phi_d_);
        const Eigen::MatrixXd rinv_design = tridiag_apply(minv, rec.design);
        const Eigen::VectorXd rinv_y = tridiag_apply(minv, rec.obs.y);
        rec.stats.gram = rec.design.transpose() * rinv_design;
        rec.stats.cross = rec.design.transpose() * rinv_y;
        rec.stats.quad = rec.obs.y.dot(rinv_y);
        rec.stats.logdet_corr = minv.logdet;
        rec.stats.n_obs = rec.obs.y.size();
        return;
    }
    if (rec.complete) {
        // Separable grid: all statistics factor over the two axes.
        const MarkovInverse mind = markov_inverse(pos_d_, phi_d_);
        const MarkovInverse mint = markov_inverse(pos_t_, phi_t_);
        const int nd = static_cast<int>(pos_d_.size());
        const int nt = static_cast<int>(pos_t_.size());
        const Eigen::MatrixXd rdinv_bd = tridiag_apply(mind, system_.basis_d);
        const Eigen::MatrixXd rtinv_bt = tridiag_apply(mint, system_.basis_t);
        const Eigen::MatrixXd gd = system_.basis_d.transpose() * rdinv_bd;
        const Eigen::MatrixXd gt = system_.basis_t.transpose() * rtinv_bt;
        rec.stats.gram = kron(gd, gt);
        const Eigen::MatrixXd u = rdinv_bd.transpose() * rec.ymat * rtinv_bt;
        rec.stats.cross.resize(u.rows() * u.cols());
        for (int l = 0; l < u.rows(); ++l)
            for (int m = 0; m < u.cols(); ++m) rec.stats.cross(l * u.cols() + m) = u(l, m);
        const Eigen::MatrixXd z =
            tridiag_apply(mint, tridiag_apply(mind, rec.ymat).transpose()).transpose();
        rec.stats.quad = (z.array() * rec.ymat.array()).sum();
        rec.stats.logdet_corr = nt * mind.logdet + nd * mint.logdet;
        rec.stats.n_obs = rec.obs.y.size();
        return;
    }
    CopyBlock block;
    block.y = rec.obs.y;
    block.design = rec.design;
    block.corr = copy_correlation(static_cast<int>(&rec - copies_.data()));
    rec.stats = copy_stats(block);
}

Eigen::MatrixXd LikelihoodEngine::copy_correlation(int c) const {
    const CopyRecord& rec = copies_[static_cast<std::size_t>(c)];
    const int k = static_cast<int>(rec.obs.cells.size());
    Eigen::MatrixXd corr(k, k);
    const int nt = system_.two_d() ? static_cast<int>(pos_t_.size()) : 1;
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j <= i; ++j) {
            const int ci = rec.obs.cells[static_cast<std::size_t>(i)];
            const int cj = rec.obs.cells[static_cast<std::size_t>(j)];
            const double dd = std::abs(pos_d_[static_cast<std::size_t>(ci / nt)] -
                                       pos_d_[static_cast<std::size_t>(cj / nt)]);
            double v = std::pow(phi_d_, dd);
            if (system_.two_d()) {
                const double dt = std::abs(pos_t_[static_cast<std::size_t>(ci % nt)] -
                                           pos_t_[static_cast<std::size_t>(cj % nt)]);
                v *= std::pow(phi_t_, dt);
            }
            corr(i, j) = v;
            corr(j, i) = v;
        }
    }
    corr.diagonal().setOnes();
    return corr;
}

void LikelihoodEngine::set_responses(const std::vector<Eigen::VectorXd>& ys) {
    if (ys.size() != copies_.size())
        throw ValidationError("response replacement needs one vector per copy");
    for (std::size_t c = 0; c < copies_.size(); ++c) {
        CopyRecord& rec = copies_[c];
        if (ys[c].size() != rec.obs.y.size())
            throw ValidationError("replacement responses disagree with the copy layout");
        rec.obs.y = ys[c];
        if (rec.ymat.size() > 0) {
            const int nt = static_cast<int>(pos_t_.size());
            for (int u = 0; u < rec.ymat.rows(); ++u)
                for (int v = 0; v < nt; ++v) rec.ymat(u, v) = rec.obs.y(u * nt + v);
        }
    }
    set_phi(phi_d_, phi_t_);
}

LeafStats LikelihoodEngine::accumulate(const std::vector<int>& particles) const {
    LeafStats stats(coeff_count());
    for (int i : particles) {
        if (i < 0 || i >= n_particles()) throw ValidationError("particle index out of range");
        stats.add(stats_by_particle_[static_cast<std::size_t>(i)]);
    }
    return stats;
}

double LikelihoodEngine::leaf_marginal(const std::vector<int>& particles, double sigma2,
                                       double tau2) const {
    return leaf_log_marginal(accumulate(particles), penalty_, sigma2, tau2);
}

double LikelihoodEngine::partition_log_marginal(const std::vector<std::vector<int>>& partition,
                                                double sigma2, double tau2) const {
    double total = 0.0;
    for (const auto& leaf : partition) total += leaf_marginal(leaf, sigma2, tau2);
    return total;
}

GaussianConditional LikelihoodEngine::leaf_conditional(const std::vector<int>& particles,
                                                       double sigma2, double tau2) const {
    return beta_conditional(accumulate(particles), penalty_, sigma2, tau2);
}

double LikelihoodEngine::residual_quad(
    const std::vector<Eigen::VectorXd>& beta_by_particle) const {
    if (static_cast<int>(beta_by_particle.size()) != n_particles())
        throw ValidationError("need one coefficient vector per particle");
    double total = 0.0;
    for (int i = 0; i < n_particles(); ++i) {
        const LeafStats& s = stats_by_particle_[static_cast<std::size_t>(i)];
        if (s.n_obs == 0) continue;
        const Eigen::VectorXd& beta = beta_by_particle[static_cast<std::size_t>(i)];
        total += s.quad - 2.0 * beta.dot(s.cross) + beta.dot(s.gram * beta);
    }
    return total;
}

Eigen::VectorXd LikelihoodEngine::copy_residual(
    const CopyRecord& rec, const std::vector<Eigen::VectorXd>& beta_by_particle) const {
    return rec.obs.y -
           rec.design * beta_by_particle[static_cast<std::size_t>(rec.obs.particle)];
}

double LikelihoodEngine::draw_phi_axis(Axis axis,
                                       const std::vector<Eigen::VectorXd>& beta_by_particle,
                                       double sigma2, const CorrelationPriorParams& priors,
                                       int n_grid, Rng& rng) const {
    if (static_cast<int>(beta_by_particle.size()) != n_particles())
        throw ValidationError("need one coefficient vector per particle");
    if (!(sigma2 > 0.0)) throw ValidationError("sigma2 must be positive");
    if (axis == Axis::Time && !system_.two_d())
        throw ValidationError("time correlation undefined for a one-dimensional system");

    const bool dose_axis = axis == Axis::Dose;
    const double count = dose_axis ? priors.count_d : priors.count_t;
    const double l1 = dose_axis ? priors.lambda01 : priors.gamma01;
    const double l2 = dose_axis ? priors.lambda02 : priors.gamma02;
    const double l3 = dose_axis ? priors.lambda03 : priors.gamma03;
    const std::vector<double>& scan_pos = dose_axis ? pos_d_ : pos_t_;
    const std::vector<double>& other_pos = dose_axis ? pos_t_ : pos_d_;
    const double other_phi = dose_axis ? phi_t_ : phi_d_;

    // Per-copy scan inputs: everything phi-independent is precomputed so a
    // grid point costs O(axis length) per copy.
    struct Scan {
        // fast path: diagonal and superdiagonal of W = M Rother^-1 M', so
        // the quadratic form is a weighted sum against the tridiagonal
        // inverse of the scanned axis
        Eigen::VectorXd wdiag, woff;
        double const_logdet = 0.0;
        int reps = 0;                    // multiplier for the scanned log det
        std::vector<double> positions;   // nonempty: private (subset) scan axis
        // partial 2D copies fall back to dense evaluation per grid point
        Eigen::VectorXd r;
        const CopyRecord* rec = nullptr;
    };
    std::vector<Scan> scans;
    scans.reserve(copies_.size());
    for (const CopyRecord& rec : copies_) {
        Scan s;
        const Eigen::VectorXd r = copy_residual(rec, beta_by_particle);
        if (!system_.two_d()) {
            s.wdiag = r.array().square();
            s.woff.resize(std::max<Eigen::Index>(0, r.size() - 1));
            for (int i = 0; i + 1 < r.size(); ++i) s.woff(i) = r(i) * r(i + 1);
            s.reps = 1;
            if (!rec.complete) {
                s.positions.resize(rec.obs.cells.size());
                for (std::size_t i = 0; i < s.positions.size(); ++i)
                    s.positions[i] = pos_d_[static_cast<std::size_t>(rec.obs.cells[i])];
            }
        } else if (rec.complete) {
            const int nd = static_cast<int>(pos_d_.size());
            const int nt = static_cast<int>(pos_t_.size());
            Eigen::MatrixXd ymat(nd, nt);
            for (int u = 0; u < nd; ++u)
                for (int v = 0; v < nt; ++v) ymat(u, v) = r(u * nt + v);
            const MarkovInverse other = markov_inverse(other_pos, other_phi);
            Eigen::MatrixXd m;  // rows indexed by the scanned axis
            if (dose_axis) {
                m = std::move(ymat);
                s.reps = nt;
                s.const_logdet = nd * other.logdet;
            } else {
                m = ymat.transpose();
                s.reps = nd;
                s.const_logdet = nt * other.logdet;
            }
            const Eigen::MatrixXd w = m * tridiag_apply(other, m.transpose());
            s.wdiag = w.diagonal();
            s.woff.resize(w.rows() - 1);
            for (int i = 0; i + 1 < w.rows(); ++i) s.woff(i) = w(i, i + 1);
        } else {
            s.r = r;
            s.rec = &rec;
        }
        scans.push_back(std::move(s));
    }

    const auto log_weight = [&](double phi) -> double {
        if (phi >= 1.0) return kNegInf;
        double lw = rowe_log_prior(phi, count, l1, l2, l3);
        if (!std::isfinite(lw)) return kNegInf;
        const MarkovInverse shared = markov_inverse(scan_pos, phi);
        for (const Scan& s : scans) {
            if (s.rec != nullptr) {
                // dense partial-copy evaluation at this grid point
                const CopyRecord& rec = *s.rec;
                const int k = static_cast<int>(rec.obs.cells.size());
                const int nt = static_cast<int>(pos_t_.size());
                Eigen::MatrixXd corr(k, k);
                for (int i = 0; i < k; ++i)
                    for (int j = 0; j <= i; ++j) {
                        const int ci = rec.obs.cells[static_cast<std::size_t>(i)];
                        const int cj = rec.obs.cells[static_cast<std::size_t>(j)];
                        const double dd = std::abs(pos_d_[static_cast<std::size_t>(ci / nt)] -
                                                   pos_d_[static_cast<std::size_t>(cj / nt)]);
                        const double dt = std::abs(pos_t_[static_cast<std::size_t>(ci % nt)] -
                                                   pos_t_[static_cast<std::size_t>(cj % nt)]);
                        const double pd = dose_axis ? phi : phi_d_;
                        const double pt = dose_axis ? phi_t_ : phi;
                        const double v = std::pow(pd, dd) * std::pow(pt, dt);
                        corr(i, j) = v;
                        corr(j, i) = v;
                    }
                corr.diagonal().setOnes();
                Eigen::LLT<Eigen::MatrixXd> llt(corr);
                if (llt.info() != Eigen::Success) return kNegInf;
                const double logdet =
                    2.0 * llt.matrixLLT().diagonal().array().log().sum();
                lw += -0.5 * (logdet + s.r.dot(llt.solve(s.r)) / sigma2);
                continue;
            }
            const MarkovInverse own =
                s.positions.empty() ? MarkovInverse{} : markov_inverse(s.positions, phi);
            const MarkovInverse& minv = s.positions.empty() ? shared : own;
            double quad = 0.0;
            for (int i = 0; i < s.wdiag.size(); ++i) quad += minv.diag(i) * s.wdiag(i);
            for (int i = 0; i < s.woff.size(); ++i) quad += 2.0 * minv.off(i) * s.woff(i);
            lw += -0.5 * (s.reps * minv.logdet + s.const_logdet + quad / sigma2);
        }
        return lw;
    };

    return griddy_draw(log_weight, n_grid, rng);
}

}  // namespace treedose
