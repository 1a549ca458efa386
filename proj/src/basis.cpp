#include "treedose/basis.hpp"

#include <algorithm>
#include <cmath>

namespace treedose {

namespace {

// Index of the knot span containing x: largest k with knots[k] <= x and
// knots[k] < knots[k+1]. x == domain max maps to the last non-degenerate
// span so the clamped basis sums to one at the right endpoint.
int find_span(const std::vector<double>& knots, int order, double x) {
    const int n_basis = static_cast<int>(knots.size()) - order;
    int lo = order - 1;        // first valid span start
    int hi = n_basis;          // one past last valid span start
    if (x >= knots[static_cast<std::size_t>(n_basis)]) return n_basis - 1;
    while (hi - lo > 1) {
        const int mid = (lo + hi) / 2;
        if (x < knots[static_cast<std::size_t>(mid)])
            hi = mid;
        else
            lo = mid;
    }
    return lo;
}

}  // namespace

Eigen::MatrixXd build_basis(const Grid1D& grid, const std::vector<double>& interior_knots,
                            int order) {
    grid.validate();
    if (order < 1) throw ValidationError("spline order must be >= 1");
    const double lo = grid.min();
    const double hi = grid.max();
    for (std::size_t i = 0; i < interior_knots.size(); ++i) {
        if (!(interior_knots[i] > lo && interior_knots[i] < hi))
            throw ValidationError("interior knot outside the open grid domain");
        if (i > 0 && !(interior_knots[i] >= interior_knots[i - 1]))
            throw ValidationError("interior knots must be nondecreasing");
    }

    // Clamped knot vector: `order` copies of each boundary.
    std::vector<double> knots;
    knots.reserve(interior_knots.size() + 2 * static_cast<std::size_t>(order));
    knots.insert(knots.end(), static_cast<std::size_t>(order), lo);
    knots.insert(knots.end(), interior_knots.begin(), interior_knots.end());
    knots.insert(knots.end(), static_cast<std::size_t>(order), hi);

    const int n_basis = static_cast<int>(interior_knots.size()) + order;
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(grid.size(), n_basis);

    // Cox-de Boor triangular recurrence; only the `order` functions alive on
    // the containing span are nonzero.
    std::vector<double> left(static_cast<std::size_t>(order)), right(static_cast<std::size_t>(order)),
        vals(static_cast<std::size_t>(order));
    for (int row = 0; row < grid.size(); ++row) {
        const double x = grid.values[static_cast<std::size_t>(row)];
        const int span = find_span(knots, order, x);
        vals[0] = 1.0;
        for (int j = 1; j < order; ++j) {
            left[static_cast<std::size_t>(j)] = x - knots[static_cast<std::size_t>(span + 1 - j)];
            right[static_cast<std::size_t>(j)] = knots[static_cast<std::size_t>(span + j)] - x;
            double saved = 0.0;
            for (int r = 0; r < j; ++r) {
                const double denom =
                    right[static_cast<std::size_t>(r + 1)] + left[static_cast<std::size_t>(j - r)];
                const double term = denom > 0.0 ? vals[static_cast<std::size_t>(r)] / denom : 0.0;
                vals[static_cast<std::size_t>(r)] = saved + right[static_cast<std::size_t>(r + 1)] * term;
                saved = left[static_cast<std::size_t>(j - r)] * term;
            }
            vals[static_cast<std::size_t>(j)] = saved;
        }
        for (int j = 0; j < order; ++j) out(row, span - order + 1 + j) = vals[static_cast<std::size_t>(j)];
    }
    return out;
}

std::vector<double> default_interior_knots(const Grid1D& grid) {
    grid.validate();
    return {grid.values.begin() + 1, grid.values.end() - 1};
}

Eigen::MatrixXd penalty_1d(int size, double eta) {
    if (size < 2) throw ValidationError("penalty_1d needs size >= 2");
    Eigen::MatrixXd k = Eigen::MatrixXd::Zero(size, size);
    for (int i = 0; i < size; ++i) {
        k(i, i) = 2.0;
        if (i > 0) k(i, i - 1) = -1.0;
        if (i + 1 < size) k(i, i + 1) = -1.0;
    }
    k(0, 0) = 1.0 + eta;
    k(size - 1, size - 1) = 1.0 + eta;
    return k;
}

Eigen::MatrixXd penalty_2d(int size_d, int size_t_, double eta) {
    if (size_d < 2 || size_t_ < 2) throw ValidationError("penalty_2d needs both sides >= 2");
    const int m = size_d * size_t_;
    Eigen::MatrixXd k = Eigen::MatrixXd::Zero(m, m);
    auto flat = [size_t_](int l, int t) { return l * size_t_ + t; };
    for (int l = 0; l < size_d; ++l) {
        for (int t = 0; t < size_t_; ++t) {
            const int u = flat(l, t);
            int neighbours = 0;
            auto link = [&](int l2, int t2) {
                if (l2 < 0 || l2 >= size_d || t2 < 0 || t2 >= size_t_) return;
                k(u, flat(l2, t2)) = -1.0;
                ++neighbours;
            };
            link(l - 1, t);
            link(l + 1, t);
            link(l, t - 1);
            link(l, t + 1);
            k(u, u) = static_cast<double>(neighbours);
            const bool corner = (l == 0 || l == size_d - 1) && (t == 0 || t == size_t_ - 1);
            if (corner) k(u, u) += eta;
        }
    }
    return k;
}

SplineSystem make_system_1d(const Grid1D& dose, std::vector<double> dose_knots, int order,
                            double eta) {
    SplineSystem s;
    s.order_d = order;
    s.interior_knots_d = std::move(dose_knots);
    s.basis_d = build_basis(dose, s.interior_knots_d, order);
    s.penalty = penalty_1d(static_cast<int>(s.basis_d.cols()), eta);
    s.eta = eta;
    return s;
}

SplineSystem make_system_2d(const Grid1D& dose, const Grid1D& time,
                            std::vector<double> dose_knots, std::vector<double> time_knots,
                            int order_d, int order_t, double eta) {
    SplineSystem s;
    s.order_d = order_d;
    s.order_t = order_t;
    s.interior_knots_d = std::move(dose_knots);
    s.interior_knots_t = std::move(time_knots);
    s.basis_d = build_basis(dose, s.interior_knots_d, order_d);
    s.basis_t = build_basis(time, s.interior_knots_t, order_t);
    s.penalty = penalty_2d(static_cast<int>(s.basis_d.cols()),
                           static_cast<int>(s.basis_t.cols()), eta);
    s.eta = eta;
    return s;
}

Eigen::MatrixXd design_matrix(const SplineSystem& system) {
    if (!system.two_d()) return system.basis_d;
    const int nd = static_cast<int>(system.basis_d.rows());
    const int nt = static_cast<int>(system.basis_t.rows());
    const int md = static_cast<int>(system.basis_d.cols());
    const int mt = static_cast<int>(system.basis_t.cols());
    Eigen::MatrixXd out(nd * nt, md * mt);
    for (int u = 0; u < nd; ++u)
        for (int v = 0; v < nt; ++v)
            for (int l = 0; l < md; ++l)
                for (int m = 0; m < mt; ++m)
                    out(u * nt + v, l * mt + m) = system.basis_d(u, l) * system.basis_t(v, m);
    return out;
}

}  // namespace treedose
