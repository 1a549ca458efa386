#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "treedose/engine.hpp"
#include "treedose/sampler.hpp"

namespace treedose {

// Dataset ingestion, control-well normalization, run configuration, and
// chain/report persistence. Loaders are single-threaded; the structures they
// return are immutable values, safe to share across worker threads.

// One replicate's observations on the shared grid. `cells` are flat
// dose-major indices (dose index * n_T + time index in 2D), strictly
// increasing; absent cells are the missing-data mask.
struct ReplicateProfile {
    std::string replicate;   // identifier from the data file
    std::string tray;        // empty when the file carries no tray column
    std::vector<int> cells;
    Eigen::VectorXd values;
};

struct ExposureDataset {
    std::vector<std::string> particles;       // row order of `covariates`
    std::vector<std::string> property_names;  // covariate columns
    std::vector<bool> log_scaled;             // columns the model takes logs of
    Eigen::MatrixXd covariates;               // raw values, particles x properties
    Grid1D dose_grid;
    Grid1D time_grid;  // empty values in the single-axis case
    std::vector<std::vector<ReplicateProfile>> responses;  // [particle][replicate]
    bool has_tray = false;

    bool two_d() const { return !time_grid.values.empty(); }
    int n_particles() const { return static_cast<int>(particles.size()); }
    int n_properties() const { return static_cast<int>(property_names.size()); }
    int n_cells() const {
        return dose_grid.size() * (two_d() ? time_grid.size() : 1);
    }
    int particle_index(const std::string& id) const;  // -1 when unknown

    // Covariates as the model sees them: log-flagged columns replaced by
    // their natural logs.
    Eigen::MatrixXd model_covariates() const;

    // Invariants: finite covariates (positive where log-flagged), valid
    // grids, well-formed cell lists, finite responses, and at least one
    // fully observed replicate per particle.
    void validate() const;
};

// Long-format responses CSV with header
//   particle,replicate,dose[,time],response[,tray]
// plus a covariates CSV `particle,<prop1>,...` taking an optional
// `#log: <names>` directive line. Doses and times are deduplicated into the
// shared grids; a constant or absent time column selects the single-axis
// model. Every parse or consistency error names the offending line.
ExposureDataset load_dataset(const std::string& responses_path,
                             const std::string& covariates_path);

// Writers matching the loader's schemas exactly, so save -> load is the
// identity (doubles are printed in shortest exact form).
void save_responses(const std::string& path, const ExposureDataset& dataset);
void save_covariates(const std::string& path, const ExposureDataset& dataset);

// Subtract each tray's mean control response from every response in the
// tray, where the controls are the zero-exposure rows (restricted to one
// designated particle when `control_particle` is nonempty). Datasets without
// a tray column form a single global group. Applying it twice is a no-op up
// to roundoff; a tray without controls is an error.
ExposureDataset normalize_baseline(const ExposureDataset& dataset,
                                   const std::string& control_particle = "");

// Everything a run needs beyond the data: sampler settings, spline and
// correlation-distance choices, analytics defaults, output location.
struct RunConfig {
    McmcConfig mcmc;
    int order_d = 4;  // cubic B-splines unless overridden
    int order_t = 4;
    std::vector<double> knots_d;  // empty = every interior grid point
    std::vector<double> knots_t;
    CorrDistance distance = CorrDistance::Index;
    double level = 0.90;   // predictive band coverage
    int sens_base = 2000;  // hypercube rows per sensitivity estimate
    int pd_points = 25;    // partial-dependence evaluation points per axis
    std::string out_dir = "treedose-out";

    void validate() const;
};

// Flat `key = value` text; `#` starts a comment, blank lines are skipped.
// Every key has a baked-in default, so an empty file yields RunConfig{}.
// Unknown and duplicated keys are rejected with their line numbers.
RunConfig load_config(const std::string& path);
RunConfig parse_config(std::istream& in, const std::string& name);

// Canonical `key = value` listing covering every key the parser accepts;
// parse(render(config)) == config.
std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& config);
void save_config(const std::string& path, const RunConfig& config);

// Spline system on the configured knots and orders; a time grid with no
// values selects the single-axis system.
SplineSystem build_system(const Grid1D& dose, const Grid1D& time, const RunConfig& config);

// Likelihood engine over the dataset's observation copies, ordered by
// particle then stored replicate order.
LikelihoodEngine build_engine(const ExposureDataset& dataset, const RunConfig& config);

// A finished run: the sampled chains plus the training summary analytics
// need without the raw data (grids, covariates on the model scale, labels).
struct ChainArchive {
    RunConfig config;
    std::vector<std::string> particles;
    std::vector<std::string> property_names;
    std::vector<bool> log_scaled;
    Eigen::MatrixXd covariates;  // model scale
    Grid1D dose_grid;
    Grid1D time_grid;  // empty values in the single-axis case
    std::vector<PosteriorChain> chains;

    bool two_d() const { return !time_grid.values.empty(); }
};

ChainArchive make_archive(const ExposureDataset& dataset, const RunConfig& config,
                          std::vector<PosteriorChain> chains);

// Versioned text container. save -> load -> save reproduces the first file
// byte for byte, and chain blocks can be appended to an existing archive
// without rewriting it.
void save_chain(const std::string& path, const ChainArchive& archive);
void append_chains(const std::string& path, const std::vector<PosteriorChain>& chains);
ChainArchive load_chain(const std::string& path);

// Report directory skeleton: <root>/tables, <root>/figures, <root>/chain.
struct ReportPaths {
    std::string root;
    std::string tables;
    std::string figures;
    std::string chain;
};
ReportPaths prepare_report_dir(const std::string& out_dir);

// Tidy CSV with minimal quoting (fields containing commas, quotes, or
// newlines are quoted; embedded quotes doubled).
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

// Run manifest in the same flat key-value format as the config files.
void write_manifest(const std::string& path,
                    const std::vector<std::pair<std::string, std::string>>& entries);

// Shortest decimal form that parses back to exactly the same double.
std::string format_value(double v);

}  // namespace treedose
