#pragma once

#include <Eigen/Dense>
#include <vector>

#include "treedose/basis.hpp"
#include "treedose/likelihood.hpp"
#include "treedose/rng.hpp"

namespace treedose {

// Correlation distance semantics: grid positions by index (doses evenly
// spaced on their design scale) or by raw coordinate values.
enum class CorrDistance { Index, Raw };

std::vector<double> axis_positions(const Grid1D& grid, CorrDistance mode);

// One (particle, replicate) observation block. `cells` are flat dose-major
// grid indices (dose index * n_T + time index in 2D), strictly increasing;
// a copy observing every cell takes the fast correlation paths.
struct ObsCopy {
    int particle = 0;
    Eigen::VectorXd y;
    std::vector<int> cells;
};

// Likelihood state bound to one dataset: per-copy sufficient statistics
// under the current correlation parameters, aggregated per particle so leaf
// quantities are sums over the particles a tree routes together.
class LikelihoodEngine {
  public:
    LikelihoodEngine(SplineSystem system, std::vector<double> positions_d,
                     std::vector<double> positions_t, std::vector<ObsCopy> copies,
                     int n_particles);

    // Rebuild per-copy statistics; phi values must lie in [0,1).
    void set_phi(double phi_d, double phi_t);
    double phi_d() const { return phi_d_; }
    double phi_t() const { return phi_t_; }

    int n_particles() const { return static_cast<int>(by_particle_.size()); }
    long n_obs_total() const { return n_obs_total_; }
    int n_dose() const { return static_cast<int>(pos_d_.size()); }
    int n_time() const { return static_cast<int>(pos_t_.size()); }  // 0 in 1D
    int coeff_count() const { return static_cast<int>(penalty_.rows()); }
    bool two_d() const { return system_.two_d(); }
    const SplineSystem& system() const { return system_; }
    const Eigen::MatrixXd& penalty() const { return penalty_; }
    const Eigen::MatrixXd& full_design() const { return full_design_; }
    int n_copies() const { return static_cast<int>(copies_.size()); }
    const ObsCopy& copy(int c) const { return copies_[static_cast<std::size_t>(c)].obs; }

    // Dense correlation of one copy's observed cells under current phi.
    Eigen::MatrixXd copy_correlation(int c) const;

    // Replace all responses (same copy layout); statistics are rebuilt.
    void set_responses(const std::vector<Eigen::VectorXd>& ys);

    LeafStats accumulate(const std::vector<int>& particles) const;
    double leaf_marginal(const std::vector<int>& particles, double sigma2, double tau2) const;
    double partition_log_marginal(const std::vector<std::vector<int>>& partition, double sigma2,
                                  double tau2) const;
    GaussianConditional leaf_conditional(const std::vector<int>& particles, double sigma2,
                                         double tau2) const;

    // Sum over copies of r' R^-1 r with r = y - B beta_particle, evaluated
    // from the cached statistics.
    double residual_quad(const std::vector<Eigen::VectorXd>& beta_by_particle) const;

    // Griddy draw of one correlation parameter from its full conditional
    // given residuals; the other axis stays at its current value.
    enum class Axis { Dose, Time };
    double draw_phi_axis(Axis axis, const std::vector<Eigen::VectorXd>& beta_by_particle,
                         double sigma2, const CorrelationPriorParams& priors, int n_grid,
                         Rng& rng) const;

  private:
    struct CopyRecord {
        ObsCopy obs;
        bool complete = false;
        Eigen::MatrixXd design;  // rows of the full design at observed cells
        Eigen::MatrixXd ymat;    // n_D x n_T reshape (complete 2D copies only)
        LeafStats stats;
    };

    void rebuild_copy(CopyRecord& rec);
    Eigen::VectorXd copy_residual(const CopyRecord& rec,
                                  const std::vector<Eigen::VectorXd>& beta_by_particle) const;

    SplineSystem system_;
    std::vector<double> pos_d_, pos_t_;
    Eigen::MatrixXd penalty_;
    Eigen::MatrixXd full_design_;
    std::vector<CopyRecord> copies_;
    std::vector<std::vector<int>> by_particle_;  // copy ids per particle
    std::vector<LeafStats> stats_by_particle_;
    long n_obs_total_ = 0;
    double phi_d_ = 0.0;
    double phi_t_ = 0.0;
};

}  // namespace treedose
