#pragma once

#include <Eigen/Dense>
#include <vector>

#include "treedose/grid.hpp"

namespace treedose {

// Uniform B-spline bases on the escalation grids plus the random-walk
// penalty matrices used as spline-coefficient prior precisions.
//
// Conventions used throughout:
//   * "order" counts polynomial pieces the classical way: order 4 = cubic.
//   * Boundary knots are repeated `order` times (clamped basis), so an
//     interior-knot vector of length m yields m + order basis functions.
//   * 2D coefficient stacking is dose-major: coefficient (l, m) of a
//     (Md, Mt) tensor basis lives at flat index l * Mt + m. Every
//     Kronecker-structured object in the project honours this ordering.

// Basis matrix of shape grid.size() x (interior_knots.size() + order),
// evaluated by the Cox-de Boor recursion. Rows are a partition of unity.
Eigen::MatrixXd build_basis(const Grid1D& grid, const std::vector<double>& interior_knots,
                            int order);

// Knots at every interior grid point (the default placement).
std::vector<double> default_interior_knots(const Grid1D& grid);

// First-order random-walk penalty: tridiagonal with 2 on the interior
// diagonal, -1 off-diagonal, and 1 + eta in the two corners.
Eigen::MatrixXd penalty_1d(int size, double eta);

// Lattice extension of the random-walk penalty: graph Laplacian of the
// size_d x size_t four-neighbour lattice (dose-major), with eta added on the
// diagonal at the four lattice corners.
Eigen::MatrixXd penalty_2d(int size_d, int size_t, double eta);

struct SplineSystem {
    int order_d = 0;
    int order_t = 0;  // 0 in the 1D case
    std::vector<double> interior_knots_d;
    std::vector<double> interior_knots_t;
    Eigen::MatrixXd basis_d;  // n_D x Md
    Eigen::MatrixXd basis_t;  // n_T x Mt, empty in 1D
    Eigen::MatrixXd penalty;  // M x M, symmetric positive definite
    double eta = 0.0;

    bool two_d() const { return basis_t.size() > 0; }
    int coeff_count() const {
        return static_cast<int>(two_d() ? basis_d.cols() * basis_t.cols() : basis_d.cols());
    }
    int cell_count() const {
        return static_cast<int>(two_d() ? basis_d.rows() * basis_t.rows() : basis_d.rows());
    }
};

SplineSystem make_system_1d(const Grid1D& dose, std::vector<double> dose_knots, int order,
                            double eta);
SplineSystem make_system_2d(const Grid1D& dose, const Grid1D& time,
                            std::vector<double> dose_knots, std::vector<double> time_knots,
                            int order_d, int order_t, double eta);

// Observation design matrix. 1D: basis_d itself. 2D: row-wise Kronecker
// combination with rows ordered dose-major (all times for dose d1, then d2,
// ...), shape (n_D * n_T) x (Md * Mt).
Eigen::MatrixXd design_matrix(const SplineSystem& system);

}  // namespace treedose
