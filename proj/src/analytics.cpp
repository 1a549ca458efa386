#include "treedose/analytics.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "treedose/basis.hpp"
#include "treedose/draws.hpp"
#include "treedose/error.hpp"

namespace treedose {

namespace {

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return "";
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

double need_double(const std::string& token, const std::string& context) {
    const std::string t = trim(token);
    errno = 0;
    char* end = nullptr;
    const double v = std::strtod(t.c_str(), &end);
    if (t.empty() || end != t.c_str() + t.size() || errno == ERANGE || !std::isfinite(v))
        throw ValidationError(context + ": cannot parse number '" + token + "'");
    return v;
}

long need_int(const std::string& token, const std::string& context) {
    const std::string t = trim(token);
    errno = 0;
    char* end = nullptr;
    const long v = std::strtol(t.c_str(), &end, 10);
    if (t.empty() || end != t.c_str() + t.size() || errno == ERANGE ||
        std::llabs(v) > 1000000000L)
        throw ValidationError(context + ": cannot parse integer '" + token + "'");
    return v;
}

std::uint64_t need_seed(const std::string& token, const std::string& context) {
    const std::string t = trim(token);
    errno = 0;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(t.c_str(), &end, 10);
    if (t.empty() || t[0] == '-' || end != t.c_str() + t.size() || errno == ERANGE)
        throw ValidationError(context + ": cannot parse seed '" + token + "'");
    return static_cast<std::uint64_t>(v);
}

std::vector<std::string> list_tokens(const std::string& value) {
    std::vector<std::string> out;
    std::string cur;
    for (const char c : value) {
        if (c == ' ' || c == '\t' || c == ',') {
            if (!cur.empty()) out.push_back(std::exchange(cur, {}));
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

Eigen::MatrixXd drop_row(const Eigen::MatrixXd& m, int row) {
    Eigen::MatrixXd out(m.rows() - 1, m.cols());
    out.topRows(row) = m.topRows(row);
    out.bottomRows(m.rows() - 1 - row) = m.bottomRows(m.rows() - 1 - row);
    return out;
}

// Linear interpolation on pre-sorted values; q in [0, 1].
double at_quantile(const std::vector<double>& sorted, double q) {
    const double h = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(h);
    if (lo + 1 >= sorted.size()) return sorted.back();
    return sorted[lo] + (sorted[lo + 1] - sorted[lo]) * (h - static_cast<double>(lo));
}

// Model surfaces for a batch of covariate rows: leaf coefficients are
// averaged over the pooled draws, then mapped through out_basis in one
// product, so cost is dominated by the tree routings.
Eigen::MatrixXd mean_surface_rows(const ModelDraws& model, const Eigen::MatrixXd& inputs,
                                  const Eigen::MatrixXd& out_basis) {
    const auto n = inputs.rows();
    const int m = model.system.coeff_count();
    Eigen::MatrixXd coeff(n, m);
    Eigen::VectorXd acc(m), x;
    for (Eigen::Index i = 0; i < n; ++i) {
        acc.setZero();
        x = inputs.row(i).transpose();
        for (const ChainState& draw : model.draws)
            acc += draw.tree.leaf_coeffs(draw.tree.assign_leaf(x));
        coeff.row(i) = acc / static_cast<double>(model.draws.size());
    }
    return coeff * out_basis.transpose();
}

double sample_sd(const Eigen::VectorXd& v) {
    if (v.size() < 2) return 0.0;
    const double mean = v.mean();
    return std::sqrt((v.array() - mean).square().sum() / static_cast<double>(v.size() - 1));
}

}  // namespace

// ---- pooled draws ----------------------------------------------------------

ModelDraws pool_draws(const ChainArchive& archive, int max_draws) {
    if (max_draws < 0) throw ValidationError("pool_draws: max_draws must be nonnegative");
    ModelDraws model;
    model.system = build_system(archive.dose_grid, archive.time_grid, archive.config);
    model.design = design_matrix(model.system);
    model.dose_values = archive.dose_grid.values;
    model.time_values = archive.time_grid.values;
    model.pos_d = axis_positions(archive.dose_grid, archive.config.distance);
    if (archive.two_d()) model.pos_t = axis_positions(archive.time_grid, archive.config.distance);
    model.n_properties = static_cast<int>(archive.property_names.size());
    model.n_dose = archive.dose_grid.size();
    model.n_time = archive.two_d() ? archive.time_grid.size() : 0;

    for (const PosteriorChain& chain : archive.chains)
        model.draws.insert(model.draws.end(), chain.draws.begin(), chain.draws.end());
    if (model.draws.empty()) throw ValidationError("the chain archive holds no posterior draws");

    const int m = model.system.coeff_count();
    for (const ChainState& draw : model.draws) {
        for (int i = 0; i < draw.tree.node_count(); ++i) {
            const TreeNode& node = draw.tree.node(i);
            if (node.is_leaf()) {
                if (node.coeffs.size() != m)
                    throw ValidationError(
                        "archive mismatch: a stored leaf carries " +
                        std::to_string(node.coeffs.size()) + " coefficients but the grids give " +
                        std::to_string(m) + " basis functions");
            } else if (node.rule.var < 0 || node.rule.var >= model.n_properties) {
                throw ValidationError("archive mismatch: a stored tree splits on covariate " +
                                      std::to_string(node.rule.var) + " but only " +
                                      std::to_string(model.n_properties) + " are recorded");
            }
        }
    }

    if (max_draws > 0 && static_cast<int>(model.draws.size()) > max_draws) {
        std::vector<ChainState> kept;
        kept.reserve(static_cast<std::size_t>(max_draws));
        const std::size_t total = model.draws.size();
        for (int k = 0; k < max_draws; ++k)
            kept.push_back(std::move(
                model.draws[static_cast<std::size_t>(k) * total / static_cast<std::size_t>(max_draws)]));
        model.draws = std::move(kept);
    }
    return model;
}

Eigen::MatrixXd grid_correlation(const std::vector<double>& pos_d,
                                 const std::vector<double>& pos_t, double phi_d, double phi_t) {
    if (pos_d.empty()) throw ValidationError("grid correlation needs dose positions");
    const int nd = static_cast<int>(pos_d.size());
    const int nt = pos_t.empty() ? 1 : static_cast<int>(pos_t.size());
    const int n = nd * nt;
    Eigen::MatrixXd corr(n, n);
    for (int u = 0; u < n; ++u) {
        const int ud = u / nt, ut = u % nt;
        for (int v = 0; v <= u; ++v) {
            const int vd = v / nt, vt = v % nt;
            double c = std::pow(phi_d, std::abs(pos_d[ud] - pos_d[vd]));
            if (!pos_t.empty()) c *= std::pow(phi_t, std::abs(pos_t[ut] - pos_t[vt]));
            corr(u, v) = c;
            corr(v, u) = c;
        }
    }
    return corr;
}

// ---- posterior predictive --------------------------------------------------

PredictiveSummary posterior_predictive(const ModelDraws& model, const Eigen::VectorXd& x_star,
                                       double level, bool noisy, Rng& rng, bool keep_samples) {
    if (static_cast<int>(x_star.size()) != model.n_properties)
        throw ValidationError("predictive input has " + std::to_string(x_star.size()) +
                              " covariates; the chain was trained with " +
                              std::to_string(model.n_properties));
    if (!(level > 0.0 && level < 1.0))
        throw ValidationError("band level must lie strictly between 0 and 1");

    PredictiveSummary out;
    out.level = level;
    out.noisy = noisy;
    if (model.n_time > 0) {
        for (const double d : model.dose_values)
            for (const double t : model.time_values) {
                out.dose.push_back(d);
                out.time.push_back(t);
            }
    } else {
        out.dose = model.dose_values;
    }

    const int n = model.n_cells();
    const auto n_draws = static_cast<Eigen::Index>(model.draws.size());
    Eigen::MatrixXd samples(n_draws, n);
    // Noise factors recur across draws because the correlation parameters
    // live on a fixed grid; cache a bounded number of Cholesky factors.
    std::map<std::pair<double, double>, Eigen::MatrixXd> factors;
    Eigen::VectorXd z(n);
    for (Eigen::Index d = 0; d < n_draws; ++d) {
        const ChainState& state = model.draws[static_cast<std::size_t>(d)];
        Eigen::VectorXd mu =
            model.design * state.tree.leaf_coeffs(state.tree.assign_leaf(x_star));
        if (noisy && state.noise.sigma2 > 0.0) {
            const std::pair<double, double> key{state.noise.phi_d, state.noise.phi_t};
            Eigen::MatrixXd fresh;
            const Eigen::MatrixXd* chol = nullptr;
            const auto it = factors.find(key);
            if (it != factors.end()) {
                chol = &it->second;
            } else {
                Eigen::LLT<Eigen::MatrixXd> llt(
                    grid_correlation(model.pos_d, model.pos_t, key.first, key.second));
                if (llt.info() != Eigen::Success)
                    throw NumericError("replicate correlation failed to factor");
                if (factors.size() < 256)
                    chol = &factors.emplace(key, Eigen::MatrixXd(llt.matrixL())).first->second;
                else
                    chol = &(fresh = llt.matrixL());
            }
            for (int i = 0; i < n; ++i) z[i] = draw_normal(rng);
            mu += std::sqrt(state.noise.sigma2) * (*chol * z);
        }
        samples.row(d) = mu;
    }

    out.mean = samples.colwise().mean();
    out.lower.resize(n);
    out.upper.resize(n);
    std::vector<double> column(static_cast<std::size_t>(n_draws));
    for (int j = 0; j < n; ++j) {
        for (Eigen::Index d = 0; d < n_draws; ++d)
            column[static_cast<std::size_t>(d)] = samples(d, j);
        std::sort(column.begin(), column.end());
        out.lower[j] = at_quantile(column, 0.5 * (1.0 - level));
        out.upper[j] = at_quantile(column, 0.5 * (1.0 + level));
    }
    if (keep_samples) out.samples = std::move(samples);
    return out;
}

FitScore score_profiles(const PredictiveSummary& summary,
                        const std::vector<ReplicateProfile>& profiles) {
    FitScore score;
    long inside = 0;
    double sse = 0.0;
    for (const ReplicateProfile& profile : profiles) {
        for (std::size_t k = 0; k < profile.cells.size(); ++k) {
            const int cell = profile.cells[k];
            if (cell < 0 || cell >= summary.mean.size())
                throw ValidationError("observed profile lies outside the prediction grid");
            const double y = profile.values[static_cast<Eigen::Index>(k)];
            ++score.n;
            if (y >= summary.lower[cell] && y <= summary.upper[cell]) ++inside;
            const double r = y - summary.mean[cell];
            sse += r * r;
        }
    }
    if (score.n > 0) {
        score.coverage = static_cast<double>(inside) / static_cast<double>(score.n);
        score.rmse = std::sqrt(sse / static_cast<double>(score.n));
    }
    return score;
}

// ---- partial dependence ----------------------------------------------------

std::vector<double> covariate_grid(const ChainArchive& archive, int var, int n_points) {
    if (var < 0 || var >= static_cast<int>(archive.property_names.size()))
        throw ValidationError("unknown covariate index " + std::to_string(var));
    if (n_points < 1) throw ValidationError("covariate grid needs at least one point");
    const double lo = archive.covariates.col(var).minCoeff();
    const double hi = archive.covariates.col(var).maxCoeff();
    if (n_points == 1) return {0.5 * (lo + hi)};
    std::vector<double> grid(static_cast<std::size_t>(n_points));
    const double step = (hi - lo) / static_cast<double>(n_points - 1);
    for (int i = 0; i < n_points; ++i) grid[static_cast<std::size_t>(i)] = lo + step * i;
    grid.back() = hi;
    return grid;
}

PartialDependence partial_dependence(const ChainArchive& archive, const ModelDraws& model,
                                     int var, const std::vector<double>& s_grid) {
    if (var < 0 || var >= model.n_properties)
        throw ValidationError("unknown covariate index " + std::to_string(var));
    if (s_grid.empty()) throw ValidationError("empty partial-dependence grid");

    const auto n_inputs = archive.covariates.rows();
    const int m = model.system.coeff_count();
    const double scale = static_cast<double>(model.draws.size()) * static_cast<double>(n_inputs);

    PartialDependence pd;
    pd.vars = {var};
    pd.grid1 = s_grid;
    Eigen::MatrixXd coeff(static_cast<Eigen::Index>(s_grid.size()), m);
    Eigen::VectorXd acc(m), x;
    for (std::size_t g = 0; g < s_grid.size(); ++g) {
        acc.setZero();
        for (Eigen::Index i = 0; i < n_inputs; ++i) {
            x = archive.covariates.row(i).transpose();
            x[var] = s_grid[g];
            for (const ChainState& draw : model.draws)
                acc += draw.tree.leaf_coeffs(draw.tree.assign_leaf(x));
        }
        coeff.row(static_cast<Eigen::Index>(g)) = acc / scale;
    }
    pd.values = coeff * model.design.transpose();
    return pd;
}

PartialDependence partial_dependence_2var(const ChainArchive& archive, const ModelDraws& model,
                                          int var1, int var2, const std::vector<double>& grid1,
                                          const std::vector<double>& grid2, int cell) {
    if (var1 < 0 || var1 >= model.n_properties || var2 < 0 || var2 >= model.n_properties)
        throw ValidationError("unknown covariate index");
    if (grid1.empty() || grid2.empty()) throw ValidationError("empty partial-dependence grid");
    if (cell < 0 || cell >= model.n_cells())
        throw ValidationError("grid cell " + std::to_string(cell) + " is out of range");

    const auto n_inputs = archive.covariates.rows();
    const double scale = static_cast<double>(model.draws.size()) * static_cast<double>(n_inputs);
    const Eigen::RowVectorXd basis_row = model.design.row(cell);

    PartialDependence pd;
    pd.vars = {var1, var2};
    pd.grid1 = grid1;
    pd.grid2 = grid2;
    pd.cell = cell;
    pd.values.resize(static_cast<Eigen::Index>(grid1.size()),
                     static_cast<Eigen::Index>(grid2.size()));
    Eigen::VectorXd acc(model.system.coeff_count()), x;
    for (std::size_t a = 0; a < grid1.size(); ++a) {
        for (std::size_t b = 0; b < grid2.size(); ++b) {
            acc.setZero();
            for (Eigen::Index i = 0; i < n_inputs; ++i) {
                x = archive.covariates.row(i).transpose();
                x[var1] = grid1[a];
                x[var2] = grid2[b];
                for (const ChainState& draw : model.draws)
                    acc += draw.tree.leaf_coeffs(draw.tree.assign_leaf(x));
            }
            pd.values(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
                basis_row.dot(acc / scale);
        }
    }
    return pd;
}

// ---- sensitivity -----------------------------------------------------------

Eigen::MatrixXd latin_hypercube(int n, int p, Rng& rng) {
    if (n < 1 || p < 1) throw ValidationError("hypercube dimensions must be positive");
    Eigen::MatrixXd u(n, p);
    std::vector<int> strata(static_cast<std::size_t>(n));
    for (int j = 0; j < p; ++j) {
        for (int i = 0; i < n; ++i) strata[static_cast<std::size_t>(i)] = i;
        for (int i = n - 1; i > 0; --i)
            std::swap(strata[static_cast<std::size_t>(i)],
                      strata[draw_index(rng, static_cast<std::size_t>(i) + 1)]);
        for (int i = 0; i < n; ++i)
            u(i, j) = (static_cast<double>(strata[static_cast<std::size_t>(i)]) +
                       draw_uniform(rng)) /
                      static_cast<double>(n);
    }
    return u;
}

SobolColumns sobol_from_evaluations(const Eigen::MatrixXd& fa, const Eigen::MatrixXd& fb,
                                    const std::vector<Eigen::MatrixXd>& fab,
                                    double extra_variance) {
    const auto n = fa.rows();
    const auto q = fa.cols();
    if (n < 2) throw ValidationError("variance estimation needs at least two evaluations");
    if (fb.rows() != n || fb.cols() != q)
        throw ValidationError("evaluation tables have mismatched shapes");
    if (fab.empty()) throw ValidationError("no recombined evaluation tables");
    for (const Eigen::MatrixXd& t : fab)
        if (t.rows() != n || t.cols() != q)
            throw ValidationError("evaluation tables have mismatched shapes");
    if (extra_variance < 0.0) throw ValidationError("extra variance must be nonnegative");

    const auto p = static_cast<Eigen::Index>(fab.size());
    SobolColumns out;
    out.s.resize(p, q);
    out.t.resize(p, q);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (Eigen::Index c = 0; c < q; ++c) {
        const double mean = (fa.col(c).sum() + fb.col(c).sum()) / static_cast<double>(2 * n);
        const double var = ((fa.col(c).array() - mean).square().sum() +
                            (fb.col(c).array() - mean).square().sum()) /
                               static_cast<double>(2 * n - 1) +
                           extra_variance;
        for (Eigen::Index j = 0; j < p; ++j) {
            if (var <= 0.0) {
                out.s(j, c) = 0.0;
                out.t(j, c) = 0.0;
                continue;
            }
            const Eigen::ArrayXd delta = fab[static_cast<std::size_t>(j)].col(c).array();
            out.s(j, c) =
                (fb.col(c).array() * (delta - fa.col(c).array())).sum() * inv_n / var;
            out.t(j, c) =
                (fa.col(c).array() - delta).square().sum() * inv_n / (2.0 * var);
        }
    }
    return out;
}

SensitivityReport sensitivity_indices(const ChainArchive& archive, const ModelDraws& model,
                                      int n_base, SensMode mode, Rng& rng, bool include_noise) {
    if (n_base < 16) throw ValidationError("sensitivity needs at least 16 base samples");
    const int p = model.n_properties;
    const auto n = static_cast<Eigen::Index>(n_base);

    Eigen::RowVectorXd lo(p), span(p);
    for (int j = 0; j < p; ++j) {
        lo[j] = archive.covariates.col(j).minCoeff();
        span[j] = archive.covariates.col(j).maxCoeff() - lo[j];
    }
    const auto to_range = [&](const Eigen::MatrixXd& u) -> Eigen::MatrixXd {
        return (u.array().rowwise() * span.array()).rowwise() + lo.array();
    };

    const Eigen::MatrixXd a = to_range(latin_hypercube(n_base, p, rng));
    const Eigen::MatrixXd b = to_range(latin_hypercube(n_base, p, rng));

    Eigen::MatrixXd out_basis;
    if (mode == SensMode::Averaged)
        out_basis = model.design.colwise().mean();
    else
        out_basis = model.design;

    const Eigen::MatrixXd fa = mean_surface_rows(model, a, out_basis);
    const Eigen::MatrixXd fb = mean_surface_rows(model, b, out_basis);
    std::vector<Eigen::MatrixXd> fab(static_cast<std::size_t>(p));
    for (int j = 0; j < p; ++j) {
        Eigen::MatrixXd mixed = a;
        mixed.col(j) = b.col(j);
        fab[static_cast<std::size_t>(j)] = mean_surface_rows(model, mixed, out_basis);
    }

    double extra = 0.0;
    if (include_noise) {
        for (const ChainState& draw : model.draws) extra += draw.noise.sigma2;
        extra /= static_cast<double>(model.draws.size());
    }

    const auto headline = [&](const SobolColumns& cols) -> std::pair<Eigen::VectorXd, Eigen::VectorXd> {
        if (mode == SensMode::Averaged) return {cols.s.col(0), cols.t.col(0)};
        return {cols.s.rowwise().mean(), cols.t.rowwise().mean()};
    };

    const SobolColumns cols = sobol_from_evaluations(fa, fb, fab, extra);
    auto [s_raw, t_raw] = headline(cols);

    // Bootstrap over evaluation rows, resampling the same rows in every
    // table so the pairing structure of the estimators is preserved.
    const int n_boot = 100;
    Eigen::MatrixXd s_boot(n_boot, p), t_boot(n_boot, p);
    Eigen::MatrixXd fa_b(n, fa.cols()), fb_b(n, fa.cols());
    std::vector<Eigen::MatrixXd> fab_b(static_cast<std::size_t>(p),
                                       Eigen::MatrixXd(n, fa.cols()));
    for (int rep = 0; rep < n_boot; ++rep) {
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto pick = static_cast<Eigen::Index>(
                draw_index(rng, static_cast<std::size_t>(n)));
            fa_b.row(i) = fa.row(pick);
            fb_b.row(i) = fb.row(pick);
            for (int j = 0; j < p; ++j)
                fab_b[static_cast<std::size_t>(j)].row(i) =
                    fab[static_cast<std::size_t>(j)].row(pick);
        }
        const auto [s_rep, t_rep] = headline(sobol_from_evaluations(fa_b, fb_b, fab_b, extra));
        s_boot.row(rep) = s_rep;
        t_boot.row(rep) = t_rep;
    }

    SensitivityReport report;
    report.mode = mode;
    report.variables = archive.property_names;
    report.s_se.resize(p);
    report.t_se.resize(p);
    Eigen::VectorXd diff_se(p);
    for (int j = 0; j < p; ++j) {
        report.s_se[j] = sample_sd(s_boot.col(j));
        report.t_se[j] = sample_sd(t_boot.col(j));
        diff_se[j] = sample_sd((s_boot.col(j) - t_boot.col(j)).eval());
    }
    // The total index bounds the first-order index from above; a gap beyond
    // bootstrap noise flags an under-resolved estimate.
    for (int j = 0; j < p; ++j)
        if (s_raw[j] - t_raw[j] > 2.0 * diff_se[j]) report.flagged.push_back(j);

    report.s = s_raw.cwiseMax(0.0).cwiseMin(1.0);
    report.t = t_raw.cwiseMax(0.0).cwiseMin(1.0);
    if (mode == SensMode::PerPoint) {
        report.s_cells = cols.s.cwiseMax(0.0).cwiseMin(1.0);
        report.t_cells = cols.t.cwiseMax(0.0).cwiseMin(1.0);
    }
    return report;
}

// ---- leave-a-curve-out -----------------------------------------------------

LocoReport loco_validation(const ExposureDataset& data, const RunConfig& config) {
    data.validate();
    config.validate();
    if (data.n_particles() < 3)
        throw ValidationError("leave-a-curve-out needs at least 3 particles");

    const Eigen::MatrixXd model_cov = data.model_covariates();
    LocoReport report;
    report.level = config.level;
    for (int f = 0; f < data.n_particles(); ++f) {
        LocoFold fold;
        fold.index = f;
        fold.particle = data.particles[static_cast<std::size_t>(f)];
        try {
            ExposureDataset sub = data;
            sub.particles.erase(sub.particles.begin() + f);
            sub.covariates = drop_row(sub.covariates, f);
            sub.responses.erase(sub.responses.begin() + f);
            sub.validate();

            RunConfig fold_config = config;
            std::uint64_t stream = config.mcmc.seed + 1000 + static_cast<std::uint64_t>(f);
            fold_config.mcmc.seed = splitmix64(stream);
            const LikelihoodEngine engine = build_engine(sub, fold_config);
            ChainArchive archive =
                make_archive(sub, fold_config, run_chains(engine, sub.model_covariates(),
                                                          fold_config.mcmc));
            const ModelDraws model = pool_draws(archive);

            Rng rng = make_stream(fold_config.mcmc.seed, 999);
            fold.prediction = posterior_predictive(model, model_cov.row(f).transpose(),
                                                   config.level, true, rng);
            const FitScore score =
                score_profiles(fold.prediction, data.responses[static_cast<std::size_t>(f)]);
            fold.coverage = score.coverage;
            fold.rmse = score.rmse;
            fold.flagged = score.coverage < (2.0 / 3.0) * config.level;
        } catch (const std::exception& err) {
            fold.failed = true;
            fold.message = err.what();
        }
        report.folds.push_back(std::move(fold));
    }

    std::vector<double> coverages;
    for (const LocoFold& fold : report.folds)
        if (!fold.failed) coverages.push_back(fold.coverage);
    if (coverages.empty()) {
        report.median_coverage = std::numeric_limits<double>::quiet_NaN();
    } else {
        std::sort(coverages.begin(), coverages.end());
        const std::size_t mid = coverages.size() / 2;
        report.median_coverage = coverages.size() % 2 == 1
                                     ? coverages[mid]
                                     : 0.5 * (coverages[mid - 1] + coverages[mid]);
    }
    return report;
}

// ---- synthetic data --------------------------------------------------------

void SimSpec::validate() const {
    if (n_particles < 2) throw ValidationError("simulation needs at least 2 particles");
    if (isolated_particle && n_particles < 3)
        throw ValidationError("an isolated particle needs at least 2 companions");
    if (n_replicates < 1) throw ValidationError("simulation needs at least 1 replicate");
    if (n_doses < 2) throw ValidationError("simulation needs at least 2 dose levels");
    if (n_times < 1) throw ValidationError("the time-level count must be positive");
    if (n_properties < 1) throw ValidationError("simulation needs at least 1 covariate");
    std::set<int> seen;
    for (const int v : split_vars) {
        if (v < 0 || v >= n_properties)
            throw ValidationError("split variable " + std::to_string(v) + " is out of range");
        if (!seen.insert(v).second)
            throw ValidationError("split variable " + std::to_string(v) + " is listed twice");
    }
    if (isolated_particle && split_vars.empty())
        throw ValidationError("an isolated particle needs a split variable");
    if (!(sigma2 >= 0.0) || !std::isfinite(sigma2))
        throw ValidationError("sigma2 must be finite and nonnegative");
    if (!(phi_d >= 0.0 && phi_d < 1.0)) throw ValidationError("phi_d must lie in [0, 1)");
    if (!(phi_t >= 0.0 && phi_t < 1.0)) throw ValidationError("phi_t must lie in [0, 1)");
    if (!(tau2 > 0.0) || !std::isfinite(tau2))
        throw ValidationError("tau2 must be finite and positive");
}

SimulatedData simulate_dataset(const SimSpec& spec, Rng& rng) {
    spec.validate();
    const bool two_d = spec.n_times >= 2;
    const int n_cells = spec.n_doses * (two_d ? spec.n_times : 1);

    SimulatedData sim;
    ExposureDataset& data = sim.dataset;
    data.dose_grid.values.resize(static_cast<std::size_t>(spec.n_doses));
    for (int i = 0; i < spec.n_doses; ++i)
        data.dose_grid.values[static_cast<std::size_t>(i)] =
            200.0 * i / static_cast<double>(spec.n_doses - 1);
    if (two_d) {
        data.time_grid.values.resize(static_cast<std::size_t>(spec.n_times));
        for (int i = 0; i < spec.n_times; ++i)
            data.time_grid.values[static_cast<std::size_t>(i)] =
                4.0 + 20.0 * i / static_cast<double>(spec.n_times - 1);
    }

    int width = 1;
    for (int rest = spec.n_particles; rest >= 10; rest /= 10) ++width;
    char buf[32];
    for (int i = 0; i < spec.n_particles; ++i) {
        std::snprintf(buf, sizeof buf, "p%0*d", width, i + 1);
        data.particles.emplace_back(buf);
    }
    for (int j = 0; j < spec.n_properties; ++j)
        data.property_names.push_back("prop" + std::to_string(j + 1));
    data.log_scaled.assign(static_cast<std::size_t>(spec.n_properties), false);

    // Covariates mimic material-class descriptors and take a handful of
    // distinct values. A split variable has one group at 0.45 and one at
    // 0.55, with the first member of each group pulled out to 0.2 / 0.8 so
    // the observed range straddles the boundary; group labels come from the
    // bits of one shared permutation, which keeps nested subgroups balanced.
    // The group boundary is then the only threshold with a large likelihood
    // payoff (an in-group cut separates particles that share a surface),
    // which keeps structure recovery well posed. The remaining variables are
    // two-valued with independently shuffled halves, so every admissible
    // threshold on them cuts off a label-independent half.
    data.covariates.resize(spec.n_particles, spec.n_properties);
    std::vector<int> order(static_cast<std::size_t>(spec.n_particles));
    for (int i = 0; i < spec.n_particles; ++i) order[static_cast<std::size_t>(i)] = i;
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<int> split_pos(static_cast<std::size_t>(spec.n_properties), -1);
    for (std::size_t k = 0; k < spec.split_vars.size(); ++k)
        split_pos[static_cast<std::size_t>(spec.split_vars[k])] = static_cast<int>(k);
    std::vector<int> half(order);
    for (int j = 0; j < spec.n_properties; ++j) {
        const int k = split_pos[static_cast<std::size_t>(j)];
        if (k < 0) {
            std::shuffle(half.begin(), half.end(), rng);
            for (int i = 0; i < spec.n_particles; ++i)
                data.covariates(i, j) = 2 * half[static_cast<std::size_t>(i)] <
                                                spec.n_particles
                                            ? 0.45
                                            : 0.55;
            continue;
        }
        bool low_seen = false;
        bool high_seen = false;
        for (int i = 0; i < spec.n_particles; ++i) {
            const bool high = (order[static_cast<std::size_t>(i)] >> k) & 1;
            bool& seen = high ? high_seen : low_seen;
            data.covariates(i, j) = high ? (seen ? 0.55 : 0.8) : (seen ? 0.45 : 0.2);
            seen = true;
        }
    }
    if (spec.isolated_particle) data.covariates(0, spec.split_vars[0]) = 5.0;

    // Generating tree: the isolation split first when requested, then each
    // remaining split variable applied to the most populous splittable leaf
    // at the group boundary.
    Tree tree;
    std::size_t next_var = 0;
    if (spec.isolated_particle) {
        double threshold = -std::numeric_limits<double>::infinity();
        for (int i = 1; i < spec.n_particles; ++i)
            threshold = std::max(threshold, data.covariates(i, spec.split_vars[0]));
        tree = tree.grow(0, SplitRule{spec.split_vars[0], threshold});
        next_var = 1;
    }
    for (; next_var < spec.split_vars.size(); ++next_var) {
        const int var = spec.split_vars[next_var];
        const auto partition = leaf_partition(tree, data.covariates);
        int best = -1;
        for (std::size_t l = 0; l < partition.size(); ++l) {
            if (split_values(data.covariates, partition[l], var).empty()) continue;
            if (best < 0 || partition[l].size() > partition[static_cast<std::size_t>(best)].size())
                best = static_cast<int>(l);
        }
        if (best < 0) continue;  // variable constant within every leaf
        const auto values =
            split_values(data.covariates, partition[static_cast<std::size_t>(best)], var);
        // The group boundary sits at 0.5; fall back to the median when the
        // leaf only sees one side of it.
        double threshold = values[values.size() / 2];
        for (auto it = values.rbegin(); it != values.rend(); ++it) {
            if (*it < 0.5) {
                threshold = *it;
                break;
            }
        }
        tree = tree.grow(tree.leaf_nodes()[static_cast<std::size_t>(best)],
                         SplitRule{var, threshold});
    }

    GroundTruth& truth = sim.truth;
    truth.tree = tree;
    truth.sigma2 = spec.sigma2;
    truth.phi_d = spec.phi_d;
    truth.phi_t = two_d ? spec.phi_t : 0.0;
    for (int i = 0; i < spec.n_particles; ++i)
        truth.leaf_of_particle.push_back(
            tree.assign_leaf(data.covariates.row(i).transpose()));
    const int iso_leaf = spec.isolated_particle ? truth.leaf_of_particle[0] : -1;

    const int n_leaves = tree.n_leaves();
    if (spec.family == SimSpec::Family::Sigmoid) {
        const double d_lo = data.dose_grid.values.front();
        const double d_hi = data.dose_grid.values.back();
        const double width_d = (d_hi - d_lo) / 8.0;
        for (int l = 0; l < n_leaves; ++l) {
            const double amp = l == iso_leaf ? 16.0 : 2.0 * (l + 1);
            const double mid =
                d_lo + (d_hi - d_lo) *
                           (0.3 + (n_leaves > 1 ? 0.4 * l / static_cast<double>(n_leaves - 1) : 0.0));
            Eigen::VectorXd surface(n_cells);
            for (int di = 0; di < spec.n_doses; ++di) {
                const double base =
                    amp / (1.0 + std::exp(-(data.dose_grid.values[static_cast<std::size_t>(di)] - mid) /
                                          width_d));
                if (two_d) {
                    const double t_lo = data.time_grid.values.front();
                    const double t_hi = data.time_grid.values.back();
                    for (int ti = 0; ti < spec.n_times; ++ti) {
                        const double ramp =
                            0.25 + 0.75 *
                                       (data.time_grid.values[static_cast<std::size_t>(ti)] - t_lo) /
                                       (t_hi - t_lo);
                        surface[di * spec.n_times + ti] = base * ramp;
                    }
                } else {
                    surface[di] = base;
                }
            }
            truth.leaf_surfaces.push_back(std::move(surface));
        }
    } else {
        // Smooth random curves from the coefficient prior; a unit corner
        // anchor keeps the overall level proper.
        const SplineSystem system =
            two_d ? make_system_2d(data.dose_grid, data.time_grid,
                                   default_interior_knots(data.dose_grid),
                                   default_interior_knots(data.time_grid), 4, 4, 1.0)
                  : make_system_1d(data.dose_grid, default_interior_knots(data.dose_grid), 4, 1.0);
        const Eigen::MatrixXd design = design_matrix(system);
        const Eigen::LLT<Eigen::MatrixXd> llt(system.penalty);
        if (llt.info() != Eigen::Success)
            throw NumericError("coefficient penalty failed to factor");
        Eigen::VectorXd z(system.coeff_count());
        for (int l = 0; l < n_leaves; ++l) {
            for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = draw_normal(rng);
            Eigen::VectorXd beta = llt.matrixU().solve(z) * std::sqrt(spec.tau2);
            if (l == iso_leaf) beta *= 8.0;
            truth.leaf_surfaces.push_back(design * beta);
        }
    }

    Eigen::MatrixXd noise_chol;
    if (spec.sigma2 > 0.0) {
        const std::vector<double> pos_d = axis_positions(data.dose_grid, CorrDistance::Index);
        const std::vector<double> pos_t =
            two_d ? axis_positions(data.time_grid, CorrDistance::Index) : std::vector<double>{};
        const Eigen::LLT<Eigen::MatrixXd> llt(
            grid_correlation(pos_d, pos_t, truth.phi_d, truth.phi_t));
        if (llt.info() != Eigen::Success)
            throw NumericError("replicate correlation failed to factor");
        noise_chol = llt.matrixL();
    }

    std::vector<int> all_cells(static_cast<std::size_t>(n_cells));
    for (int c = 0; c < n_cells; ++c) all_cells[static_cast<std::size_t>(c)] = c;
    const double noise_sd = std::sqrt(spec.sigma2);
    Eigen::VectorXd z(n_cells);
    data.responses.resize(static_cast<std::size_t>(spec.n_particles));
    for (int i = 0; i < spec.n_particles; ++i) {
        const Eigen::VectorXd& surface =
            truth.leaf_surfaces[static_cast<std::size_t>(truth.leaf_of_particle[static_cast<std::size_t>(i)])];
        for (int r = 0; r < spec.n_replicates; ++r) {
            ReplicateProfile profile;
            profile.replicate = "r" + std::to_string(r + 1);
            profile.cells = all_cells;
            profile.values = surface;
            if (spec.sigma2 > 0.0) {
                for (int c = 0; c < n_cells; ++c) z[c] = draw_normal(rng);
                profile.values += noise_sd * (noise_chol * z);
            }
            data.responses[static_cast<std::size_t>(i)].push_back(std::move(profile));
        }
    }
    data.has_tray = false;
    data.validate();
    return sim;
}

SimSpec parse_sim_spec(std::istream& in, const std::string& name) {
    SimSpec spec;
    std::set<std::string> seen;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string where = name + " line " + std::to_string(line_no);
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ValidationError(where + ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ValidationError(where + ": missing key");
        if (!seen.insert(key).second)
            throw ValidationError(where + ": duplicate key '" + key + "'");

        if (key == "particles") {
            spec.n_particles = static_cast<int>(need_int(value, where));
        } else if (key == "replicates") {
            spec.n_replicates = static_cast<int>(need_int(value, where));
        } else if (key == "doses") {
            spec.n_doses = static_cast<int>(need_int(value, where));
        } else if (key == "times") {
            spec.n_times = static_cast<int>(need_int(value, where));
        } else if (key == "properties") {
            spec.n_properties = static_cast<int>(need_int(value, where));
        } else if (key == "split_vars") {
            spec.split_vars.clear();
            for (const std::string& token : list_tokens(value))
                spec.split_vars.push_back(static_cast<int>(need_int(token, where)));
        } else if (key == "sigma2") {
            spec.sigma2 = need_double(value, where);
        } else if (key == "phi_d") {
            spec.phi_d = need_double(value, where);
        } else if (key == "phi_t") {
            spec.phi_t = need_double(value, where);
        } else if (key == "tau2") {
            spec.tau2 = need_double(value, where);
        } else if (key == "seed") {
            spec.seed = need_seed(value, where);
        } else if (key == "family") {
            if (value == "sigmoid")
                spec.family = SimSpec::Family::Sigmoid;
            else if (value == "spline")
                spec.family = SimSpec::Family::Spline;
            else
                throw ValidationError(where + ": family must be 'sigmoid' or 'spline'");
        } else if (key == "isolated") {
            if (value == "true" || value == "1")
                spec.isolated_particle = true;
            else if (value == "false" || value == "0")
                spec.isolated_particle = false;
            else
                throw ValidationError(where + ": isolated must be true or false");
        } else {
            throw ValidationError(where + ": unknown key '" + key + "'");
        }
    }
    spec.validate();
    return spec;
}

SimSpec load_sim_spec(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open " + path);
    return parse_sim_spec(in, path);
}

void save_ground_truth(const std::string& path, const GroundTruth& truth) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + path);
    out << "treedose-truth 1\n";
    out << "sigma2 " << format_value(truth.sigma2) << "\n";
    out << "phi_d " << format_value(truth.phi_d) << "\n";
    out << "phi_t " << format_value(truth.phi_t) << "\n";
    out << "tree " << truth.tree.serialize() << "\n";
    out << "particle-leaves";
    for (const int leaf : truth.leaf_of_particle) out << ' ' << leaf;
    out << "\n";
    out << "surfaces " << truth.leaf_surfaces.size() << "\n";
    for (const Eigen::VectorXd& surface : truth.leaf_surfaces) {
        for (Eigen::Index i = 0; i < surface.size(); ++i) {
            if (i > 0) out << ' ';
            out << format_value(surface[i]);
        }
        out << "\n";
    }
    if (!out.good()) throw ValidationError("failed writing " + path);
}

}  // namespace treedose
