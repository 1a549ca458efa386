#include "treedose/datastore.hpp"

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "treedose/error.hpp"

using namespace treedose;

namespace {

struct TempDir {
    std::filesystem::path path;

    TempDir() {
        static int counter = 0;
        path = std::filesystem::temp_directory_path() /
               ("treedose-ds-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    out << content;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

// 1D, two particles, tray column, one log-scaled covariate; rows shuffled.
const char* kResponses1D =
    "# toy assay\n"
    "particle,replicate,dose,response,tray\n"
    "zno,1,0.5,6.0,A\n"
    "zno,1,0,5.1,A\n"
    "zno,1,1,7.2,A\n"
    "zno,2,1,7.0,B\n"
    "zno,2,0,4.9,B\n"
    "zno,2,0.5,5.8,B\n"
    "cuo,1,0,5.0,A\n"
    "cuo,1,0.5,8.1,A\n"
    "cuo,1,1,9.5,A\n";

const char* kCovariates =
    "particle,size,charge\n"
    "#log: size\n"
    "zno,20,-1.5\n"
    "cuo,35,0.8\n";

ExposureDataset toy_1d(const TempDir& dir) {
    write_file(dir.file("r.csv"), kResponses1D);
    write_file(dir.file("c.csv"), kCovariates);
    return load_dataset(dir.file("r.csv"), dir.file("c.csv"));
}

// 2D, second replicate of particle a missing one cell.
const char* kResponses2D =
    "particle,replicate,dose,time,response\n"
    "a,1,0,2,1.0\n"
    "a,1,0,4,1.1\n"
    "a,1,0,8,1.2\n"
    "a,1,1,2,2.0\n"
    "a,1,1,4,2.1\n"
    "a,1,1,8,2.2\n"
    "a,2,0,2,1.05\n"
    "a,2,0,4,1.15\n"
    "a,2,0,8,1.25\n"
    "a,2,1,2,2.05\n"
    "a,2,1,4,2.15\n"
    "b,1,0,2,3.0\n"
    "b,1,0,4,3.1\n"
    "b,1,0,8,3.2\n"
    "b,1,1,2,4.0\n"
    "b,1,1,4,4.1\n"
    "b,1,1,8,4.2\n";

const char* kCovariates2D =
    "particle,size\n"
    "a,10\n"
    "b,30\n";

ExposureDataset toy_2d(const TempDir& dir) {
    write_file(dir.file("r2.csv"), kResponses2D);
    write_file(dir.file("c2.csv"), kCovariates2D);
    return load_dataset(dir.file("r2.csv"), dir.file("c2.csv"));
}

bool same_dataset(const ExposureDataset& a, const ExposureDataset& b) {
    if (a.particles != b.particles || a.property_names != b.property_names ||
        a.log_scaled != b.log_scaled || a.has_tray != b.has_tray)
        return false;
    if (a.covariates != b.covariates) return false;
    if (a.dose_grid.values != b.dose_grid.values || a.time_grid.values != b.time_grid.values)
        return false;
    if (a.responses.size() != b.responses.size()) return false;
    for (std::size_t p = 0; p < a.responses.size(); ++p) {
        if (a.responses[p].size() != b.responses[p].size()) return false;
        for (std::size_t r = 0; r < a.responses[p].size(); ++r) {
            const auto& x = a.responses[p][r];
            const auto& y = b.responses[p][r];
            if (x.replicate != y.replicate || x.tray != y.tray || x.cells != y.cells) return false;
            if (x.values.size() != y.values.size()) return false;
            for (Eigen::Index i = 0; i < x.values.size(); ++i)
                if (x.values(i) != y.values(i)) return false;
        }
    }
    return true;
}

}  // namespace

TEST_CASE("a small long-format file loads grids, covariates, and flags") {
    TempDir dir;
    const ExposureDataset ds = toy_1d(dir);

    CHECK(ds.particles == std::vector<std::string>{"zno", "cuo"});
    CHECK(ds.property_names == std::vector<std::string>{"size", "charge"});
    CHECK(ds.log_scaled == std::vector<bool>{true, false});
    CHECK(!ds.two_d());
    CHECK(ds.has_tray);
    CHECK(ds.dose_grid.values == std::vector<double>{0.0, 0.5, 1.0});
    CHECK(ds.n_cells() == 3);

    REQUIRE(ds.responses.size() == 2);
    REQUIRE(ds.responses[0].size() == 2);  // zno replicates 1 and 2
    REQUIRE(ds.responses[1].size() == 1);
    const auto& rep = ds.responses[0][0];
    CHECK(rep.replicate == "1");
    CHECK(rep.tray == "A");
    CHECK(rep.cells == std::vector<int>{0, 1, 2});
    // rows arrived shuffled; values must follow the sorted cells
    CHECK(rep.values(0) == 5.1);
    CHECK(rep.values(1) == 6.0);
    CHECK(rep.values(2) == 7.2);
    CHECK(ds.responses[0][1].tray == "B");

    CHECK(ds.covariates(0, 0) == 20.0);
    CHECK(ds.covariates(1, 1) == 0.8);
    const Eigen::MatrixXd model = ds.model_covariates();
    CHECK(model(0, 0) == doctest::Approx(std::log(20.0)).epsilon(1e-15));
    CHECK(model(0, 1) == -1.5);
}

TEST_CASE("a dose-by-time file builds the tensor grid and missing-cell mask") {
    TempDir dir;
    const ExposureDataset ds = toy_2d(dir);

    CHECK(ds.two_d());
    CHECK(ds.dose_grid.values == std::vector<double>{0.0, 1.0});
    CHECK(ds.time_grid.values == std::vector<double>{2.0, 4.0, 8.0});
    CHECK(ds.n_cells() == 6);
    CHECK(!ds.has_tray);

    const auto& complete = ds.responses[0][0];
    CHECK(complete.cells == std::vector<int>{0, 1, 2, 3, 4, 5});
    const auto& partial = ds.responses[0][1];
    CHECK(partial.cells == std::vector<int>{0, 1, 2, 3, 4});  // dose 1, time 8 missing
    CHECK(partial.values(4) == 2.15);
}

TEST_CASE("a constant time column collapses to the single-axis model") {
    TempDir dir;
    write_file(dir.file("r.csv"),
               "particle,replicate,dose,time,response\n"
               "a,1,0,24,1.0\n"
               "a,1,1,24,2.0\n"
               "a,1,2,24,3.0\n");
    write_file(dir.file("c.csv"), "particle,x\na,1\n");
    const ExposureDataset ds = load_dataset(dir.file("r.csv"), dir.file("c.csv"));
    CHECK(!ds.two_d());
    CHECK(ds.n_cells() == 3);
    CHECK(ds.responses[0][0].cells == std::vector<int>{0, 1, 2});
}

TEST_CASE("loader errors name the offending lines") {
    TempDir dir;
    write_file(dir.file("c.csv"), "particle,x\na,1\nb,2\n");

    SUBCASE("unknown particle") {
        write_file(dir.file("r.csv"),
                   "particle,replicate,dose,response\n"
                   "a,1,0,1\n"
                   "a,1,1,2\n"
                   "zzz,1,0,3\n");
        try {
            load_dataset(dir.file("r.csv"), dir.file("c.csv"));
            FAIL("expected a validation error");
        } catch (const ValidationError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("line 4") != std::string::npos);
            CHECK(msg.find("zzz") != std::string::npos);
        }
    }
    SUBCASE("non-numeric field") {
        write_file(dir.file("r.csv"),
                   "particle,replicate,dose,response\n"
                   "a,1,0,1\n"
                   "a,1,1,oops\n");
        try {
            load_dataset(dir.file("r.csv"), dir.file("c.csv"));
            FAIL("expected a validation error");
        } catch (const ValidationError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("line 3") != std::string::npos);
            CHECK(msg.find("response") != std::string::npos);
            CHECK(msg.find("oops") != std::string::npos);
        }
    }
    SUBCASE("ragged grid: no replicate covers the shared doses") {
        write_file(dir.file("r.csv"),
                   "particle,replicate,dose,response\n"
                   "a,1,0,1\n"
                   "a,1,1,2\n"
                   "b,1,0,1\n"
                   "b,1,2,2\n");  // grid is {0,1,2}; neither a nor b is complete
        try {
            load_dataset(dir.file("r.csv"), dir.file("c.csv"));
            FAIL("expected a validation error");
        } catch (const ValidationError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("ragged") != std::string::npos);
            CHECK(msg.find("line 2") != std::string::npos);
        }
    }
    SUBCASE("duplicate observation") {
        write_file(dir.file("r.csv"),
                   "particle,replicate,dose,response\n"
                   "a,1,0,1\n"
                   "a,1,1,2\n"
                   "b,1,0,1\n"
                   "b,1,1,2\n"
                   "a,1,0,9\n");
        CHECK_THROWS_WITH_AS(load_dataset(dir.file("r.csv"), dir.file("c.csv")),
                             doctest::Contains("line 6"), ValidationError);
    }
    SUBCASE("covariate particle with no responses") {
        write_file(dir.file("r.csv"),
                   "particle,replicate,dose,response\n"
                   "a,1,0,1\n"
                   "a,1,1,2\n");
        CHECK_THROWS_WITH_AS(load_dataset(dir.file("r.csv"), dir.file("c.csv")),
                             doctest::Contains("'b' has no response rows"), ValidationError);
    }
    SUBCASE("tray must be constant within a replicate") {
        write_file(dir.file("r.csv"),
                   "particle,replicate,dose,response,tray\n"
                   "a,1,0,1,A\n"
                   "a,1,1,2,B\n"
                   "b,1,0,1,A\n"
                   "b,1,1,2,A\n");
        CHECK_THROWS_WITH_AS(load_dataset(dir.file("r.csv"), dir.file("c.csv")),
                             doctest::Contains("line 3"), ValidationError);
    }
    SUBCASE("a single dose level cannot form a grid") {
        write_file(dir.file("r.csv"),
                   "particle,replicate,dose,response\n"
                   "a,1,0,1\n"
                   "b,1,0,1\n");
        CHECK_THROWS_AS(load_dataset(dir.file("r.csv"), dir.file("c.csv")), ValidationError);
    }
    SUBCASE("unknown response column") {
        write_file(dir.file("r.csv"),
                   "particle,replicate,dose,response,wells\n"
                   "a,1,0,1,w\n");
        CHECK_THROWS_WITH_AS(load_dataset(dir.file("r.csv"), dir.file("c.csv")),
                             doctest::Contains("wells"), ValidationError);
    }
}

TEST_CASE("covariate file errors name lines and properties") {
    TempDir dir;
    write_file(dir.file("r.csv"),
               "particle,replicate,dose,response\n"
               "a,1,0,1\n"
               "a,1,1,2\n");

    SUBCASE("log directive with an unknown property") {
        write_file(dir.file("c.csv"), "particle,x\n#log: y\na,1\n");
        CHECK_THROWS_WITH_AS(load_dataset(dir.file("r.csv"), dir.file("c.csv")),
                             doctest::Contains("'y'"), ValidationError);
    }
    SUBCASE("log-scaled property must be positive") {
        write_file(dir.file("c.csv"), "particle,x\n#log: x\na,-3\n");
        try {
            load_dataset(dir.file("r.csv"), dir.file("c.csv"));
            FAIL("expected a validation error");
        } catch (const ValidationError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("line 3") != std::string::npos);
            CHECK(msg.find("positive") != std::string::npos);
        }
    }
    SUBCASE("duplicate particle row") {
        write_file(dir.file("c.csv"), "particle,x\na,1\na,2\n");
        CHECK_THROWS_WITH_AS(load_dataset(dir.file("r.csv"), dir.file("c.csv")),
                             doctest::Contains("line 3"), ValidationError);
    }
    SUBCASE("second log directive") {
        write_file(dir.file("c.csv"), "particle,x\n#log: x\n#log: x\na,1\n");
        CHECK_THROWS_WITH_AS(load_dataset(dir.file("r.csv"), dir.file("c.csv")),
                             doctest::Contains("second"), ValidationError);
    }
}

TEST_CASE("dataset save and reload is the identity") {
    TempDir dir;
    SUBCASE("single axis with trays and log flags") {
        const ExposureDataset ds = toy_1d(dir);
        save_responses(dir.file("r_out.csv"), ds);
        save_covariates(dir.file("c_out.csv"), ds);
        const ExposureDataset back = load_dataset(dir.file("r_out.csv"), dir.file("c_out.csv"));
        CHECK(same_dataset(ds, back));
    }
    SUBCASE("dose by time with a masked cell") {
        const ExposureDataset ds = toy_2d(dir);
        save_responses(dir.file("r_out.csv"), ds);
        save_covariates(dir.file("c_out.csv"), ds);
        const ExposureDataset back = load_dataset(dir.file("r_out.csv"), dir.file("c_out.csv"));
        CHECK(same_dataset(ds, back));
    }
}

TEST_CASE("baseline normalization subtracts per-tray control means") {
    TempDir dir;
    const ExposureDataset ds = toy_1d(dir);
    const ExposureDataset norm = normalize_baseline(ds);

    // tray A controls: zno rep 1 at dose 0 (5.1) and cuo at dose 0 (5.0);
    // tray B control: zno rep 2 at dose 0 (4.9)
    const double mean_a = (5.1 + 5.0) / 2.0;
    CHECK(norm.responses[0][0].values(0) == doctest::Approx(5.1 - mean_a).epsilon(1e-15));
    CHECK(norm.responses[0][0].values(2) == doctest::Approx(7.2 - mean_a).epsilon(1e-15));
    CHECK(norm.responses[0][1].values(0) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(norm.responses[0][1].values(1) == doctest::Approx(5.8 - 4.9).epsilon(1e-15));
    CHECK(norm.responses[1][0].values(2) == doctest::Approx(9.5 - mean_a).epsilon(1e-15));
}

TEST_CASE("responses equal to their control mean normalize to zero") {
    TempDir dir;
    write_file(dir.file("r.csv"),
               "particle,replicate,dose,response\n"
               "a,1,0,3\n"
               "a,1,1,3\n"
               "b,1,0,3\n"
               "b,1,1,3\n");
    write_file(dir.file("c.csv"), "particle,x\na,1\nb,2\n");
    const ExposureDataset norm =
        normalize_baseline(load_dataset(dir.file("r.csv"), dir.file("c.csv")));
    for (const auto& particle : norm.responses)
        for (const auto& rep : particle)
            for (Eigen::Index i = 0; i < rep.values.size(); ++i) CHECK(rep.values(i) == 0.0);
}

TEST_CASE("normalization is idempotent") {
    TempDir dir;
    const ExposureDataset once = normalize_baseline(toy_1d(dir));
    const ExposureDataset twice = normalize_baseline(once);
    for (std::size_t p = 0; p < once.responses.size(); ++p)
        for (std::size_t r = 0; r < once.responses[p].size(); ++r) {
            const auto& a = once.responses[p][r].values;
            const auto& b = twice.responses[p][r].values;
            CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
        }
}

TEST_CASE("normalization failure modes") {
    TempDir dir;
    SUBCASE("tray without control rows") {
        write_file(dir.file("r.csv"),
                   "particle,replicate,dose,response,tray\n"
                   "a,1,0,1,A\n"
                   "a,1,0.5,1.4,A\n"
                   "a,1,1,2,A\n"
                   "b,1,0.5,1,B\n"  // tray B never sees dose 0
                   "b,1,1,2,B\n"
                   "b,2,0,0.8,A\n"
                   "b,2,0.5,0.9,A\n"
                   "b,2,1,2,A\n");
        write_file(dir.file("c.csv"), "particle,x\na,1\nb,2\n");
        const ExposureDataset ds = load_dataset(dir.file("r.csv"), dir.file("c.csv"));
        CHECK_THROWS_WITH_AS(normalize_baseline(ds), doctest::Contains("tray 'B'"),
                             ValidationError);
    }
    SUBCASE("no zero-exposure level in the grid") {
        write_file(dir.file("r.csv"),
                   "particle,replicate,dose,response\n"
                   "a,1,0.5,1\n"
                   "a,1,1,2\n");
        write_file(dir.file("c.csv"), "particle,x\na,1\n");
        const ExposureDataset ds = load_dataset(dir.file("r.csv"), dir.file("c.csv"));
        CHECK_THROWS_WITH_AS(normalize_baseline(ds), doctest::Contains("zero-exposure"),
                             ValidationError);
    }
    SUBCASE("designated control particle") {
        TempDir d2;
        const ExposureDataset ds = toy_1d(d2);
        // restrict controls to cuo: tray A mean becomes 5.0, tray B has no cuo rows
        CHECK_THROWS_WITH_AS(normalize_baseline(ds, "cuo"), doctest::Contains("tray 'B'"),
                             ValidationError);
        CHECK_THROWS_WITH_AS(normalize_baseline(ds, "ghost"), doctest::Contains("ghost"),
                             ValidationError);
    }
}

TEST_CASE("an empty config yields the documented defaults") {
    TempDir dir;
    write_file(dir.file("empty.cfg"), "");
    const RunConfig cfg = load_config(dir.file("empty.cfg"));
    CHECK(cfg.mcmc.iterations == 160000);
    CHECK(cfg.mcmc.burn_in == 80000);
    CHECK(cfg.mcmc.thin == 10);
    CHECK(cfg.mcmc.move_probs == std::array<double, 4>{0.1, 0.1, 0.6, 0.2});
    CHECK(cfg.mcmc.tree_prior.alpha == 0.95);
    CHECK(cfg.mcmc.tree_prior.nu == 2.0);
    CHECK(cfg.mcmc.variance_priors.a_sigma == 1.0);
    CHECK(cfg.mcmc.variance_priors.b_tau == 1.0);
    CHECK(cfg.mcmc.correlation_priors.lambda01 == 0.0);  // identity defaults derived later
    CHECK(cfg.mcmc.eta == 1e-6);
    CHECK(cfg.mcmc.update_phi);
    CHECK(cfg.order_d == 4);
    CHECK(cfg.knots_d.empty());
    CHECK(cfg.distance == CorrDistance::Index);
    CHECK(cfg.level == 0.90);
    CHECK(config_entries(cfg) == config_entries(RunConfig{}));
}

TEST_CASE("config files parse comments, lists, and enums") {
    TempDir dir;
    write_file(dir.file("run.cfg"),
               "# run settings\n"
               "iterations = 400\n"
               "burn_in = 100   # half of its usual share\n"
               "thin=3\n"
               "knots_d = 0.5 1.5 2.5\n"
               "distance = raw\n"
               "correlation = independent\n"
               "out_dir = results/run one\n"
               "\n"
               "level = 0.5\n");
    const RunConfig cfg = load_config(dir.file("run.cfg"));
    CHECK(cfg.mcmc.iterations == 400);
    CHECK(cfg.mcmc.burn_in == 100);
    CHECK(cfg.mcmc.thin == 3);
    CHECK(cfg.knots_d == std::vector<double>{0.5, 1.5, 2.5});
    CHECK(cfg.distance == CorrDistance::Raw);
    CHECK(!cfg.mcmc.update_phi);
    CHECK(cfg.out_dir == "results/run one");
    CHECK(cfg.level == 0.5);
}

TEST_CASE("config round trip preserves every field") {
    TempDir dir;
    RunConfig cfg;
    cfg.mcmc.iterations = 777;
    cfg.mcmc.burn_in = 111;
    cfg.mcmc.seed = 123456789012345ULL;
    cfg.mcmc.move_probs = {0.25, 0.25, 0.25, 0.25};
    cfg.mcmc.eta = 1e-3;
    cfg.mcmc.update_phi = false;
    cfg.mcmc.correlation_priors.lambda02 = 0.5;
    cfg.order_d = 2;
    cfg.order_t = 3;
    cfg.knots_d = {0.1, 0.7};
    cfg.distance = CorrDistance::Raw;
    cfg.level = 0.8;
    cfg.sens_base = 64;
    cfg.pd_points = 7;
    cfg.out_dir = "elsewhere";
    save_config(dir.file("run.cfg"), cfg);
    const RunConfig back = load_config(dir.file("run.cfg"));
    CHECK(config_entries(back) == config_entries(cfg));
}

TEST_CASE("config rejections") {
    TempDir dir;
    SUBCASE("unknown key") {
        write_file(dir.file("run.cfg"), "iterations = 100\nitterations = 200\n");
        try {
            load_config(dir.file("run.cfg"));
            FAIL("expected a validation error");
        } catch (const ValidationError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("itterations") != std::string::npos);
            CHECK(msg.find("line 2") != std::string::npos);
        }
    }
    SUBCASE("duplicate key") {
        write_file(dir.file("run.cfg"), "thin = 2\nthin = 4\n");
        CHECK_THROWS_WITH_AS(load_config(dir.file("run.cfg")), doctest::Contains("duplicate"),
                             ValidationError);
    }
    SUBCASE("burn-in at least as large as iterations") {
        write_file(dir.file("run.cfg"), "iterations = 100\nburn_in = 100\n");
        CHECK_THROWS_AS(load_config(dir.file("run.cfg")), ValidationError);
    }
    SUBCASE("bad enum value") {
        write_file(dir.file("run.cfg"), "distance = euclidean\n");
        CHECK_THROWS_WITH_AS(load_config(dir.file("run.cfg")), doctest::Contains("distance"),
                             ValidationError);
    }
    SUBCASE("missing equals sign") {
        write_file(dir.file("run.cfg"), "thin 4\n");
        CHECK_THROWS_WITH_AS(load_config(dir.file("run.cfg")), doctest::Contains("key = value"),
                             ValidationError);
    }
    SUBCASE("unreadable file") {
        CHECK_THROWS_AS(load_config(dir.file("missing.cfg")), ValidationError);
    }
}

TEST_CASE("engines built from datasets mirror their grids and knots") {
    TempDir dir;
    SUBCASE("defaults put a cubic basis function on every interior dose") {
        std::string rows = "particle,replicate,dose,response\n";
        for (int d = 0; d < 11; ++d)
            rows += "a,1," + std::to_string(d) + "," + std::to_string(d) + ".5\n";
        for (int d = 0; d < 11; ++d)
            rows += "b,1," + std::to_string(d) + "," + std::to_string(d) + ".25\n";
        write_file(dir.file("r.csv"), rows);
        write_file(dir.file("c.csv"), "particle,x\na,1\nb,2\n");
        const ExposureDataset ds = load_dataset(dir.file("r.csv"), dir.file("c.csv"));
        const RunConfig cfg;
        const LikelihoodEngine engine = build_engine(ds, cfg);
        CHECK(engine.n_dose() == 11);
        CHECK(engine.coeff_count() == 13);  // 9 interior knots + order 4
        CHECK(engine.n_copies() == 2);
        CHECK(!engine.two_d());
        const double marginal = engine.leaf_marginal({0, 1}, 1.0, 1.0);
        CHECK(std::isfinite(marginal));
    }
    SUBCASE("dose-by-time datasets produce tensor engines") {
        const ExposureDataset ds = toy_2d(dir);
        const RunConfig cfg;
        const LikelihoodEngine engine = build_engine(ds, cfg);
        CHECK(engine.two_d());
        CHECK(engine.n_dose() == 2);
        CHECK(engine.n_time() == 3);
        CHECK(engine.n_copies() == 3);
        // 2 doses leave no interior dose knots (Md = 4); 3 times leave one
        // interior time knot (Mt = 5)
        CHECK(engine.coeff_count() == 20);
    }
}

TEST_CASE("chain archives round-trip losslessly and byte-identically") {
    TempDir dir;
    const ExposureDataset ds = toy_1d(dir);
    RunConfig cfg;
    cfg.mcmc.iterations = 30;
    cfg.mcmc.burn_in = 10;
    cfg.mcmc.thin = 2;
    cfg.mcmc.n_chains = 2;
    cfg.mcmc.seed = 7;
    LikelihoodEngine engine = build_engine(ds, cfg);
    const Eigen::MatrixXd cov = ds.model_covariates();
    ChainArchive arc = make_archive(ds, cfg, run_chains(engine, cov, cfg.mcmc));
    REQUIRE(arc.chains.size() == 2);
    REQUIRE(arc.chains[0].draws.size() == 10);

    const std::string first = dir.file("chain.bin");
    const std::string second = dir.file("chain2.bin");
    save_chain(first, arc);
    const ChainArchive back = load_chain(first);
    save_chain(second, back);
    CHECK(read_file(first) == read_file(second));

    CHECK(config_entries(back.config) == config_entries(arc.config));
    CHECK(back.particles == arc.particles);
    CHECK(back.property_names == arc.property_names);
    CHECK(back.log_scaled == arc.log_scaled);
    CHECK(back.covariates == arc.covariates);
    CHECK(back.dose_grid.values == arc.dose_grid.values);
    CHECK(back.time_grid.values == arc.time_grid.values);
    REQUIRE(back.chains.size() == arc.chains.size());
    for (std::size_t c = 0; c < arc.chains.size(); ++c) {
        const auto& x = arc.chains[c];
        const auto& y = back.chains[c];
        CHECK(y.chain_id == x.chain_id);
        CHECK(y.seed == x.seed);
        CHECK(y.moves.proposed == x.moves.proposed);
        CHECK(y.moves.accepted == x.moves.accepted);
        CHECK(y.moves.numeric_rejects == x.moves.numeric_rejects);
        CHECK(y.ess == x.ess);
        CHECK(y.warnings == x.warnings);
        CHECK(y.log_post_trace == x.log_post_trace);
        REQUIRE(y.draws.size() == x.draws.size());
        for (std::size_t i = 0; i < x.draws.size(); ++i) {
            CHECK(y.draws[i].noise.sigma2 == x.draws[i].noise.sigma2);
            CHECK(y.draws[i].noise.phi_d == x.draws[i].noise.phi_d);
            CHECK(y.draws[i].noise.phi_t == x.draws[i].noise.phi_t);
            CHECK(y.draws[i].tau2 == x.draws[i].tau2);
            CHECK(y.draws[i].log_post == x.draws[i].log_post);
            CHECK(y.draws[i].tree.serialize() == x.draws[i].tree.serialize());
        }
    }
}

TEST_CASE("chain blocks can be appended without rewriting the archive") {
    TempDir dir;
    const ExposureDataset ds = toy_1d(dir);
    RunConfig cfg;
    cfg.mcmc.iterations = 20;
    cfg.mcmc.burn_in = 5;
    cfg.mcmc.thin = 3;
    cfg.mcmc.n_chains = 2;
    cfg.mcmc.seed = 11;
    const LikelihoodEngine engine = build_engine(ds, cfg);
    const Eigen::MatrixXd cov = ds.model_covariates();
    std::vector<PosteriorChain> chains = run_chains(engine, cov, cfg.mcmc);

    ChainArchive both = make_archive(ds, cfg, chains);
    ChainArchive first_only = make_archive(ds, cfg, {chains[0]});

    const std::string full = dir.file("full.bin");
    const std::string grown = dir.file("grown.bin");
    save_chain(full, both);
    save_chain(grown, first_only);
    append_chains(grown, {chains[1]});
    CHECK(read_file(full) == read_file(grown));
    CHECK(load_chain(grown).chains.size() == 2);
}

TEST_CASE("chain archive rejects foreign and truncated files") {
    TempDir dir;
    SUBCASE("wrong magic") {
        write_file(dir.file("x.bin"), "something else\n");
        CHECK_THROWS_WITH_AS(load_chain(dir.file("x.bin")), doctest::Contains("version"),
                             ValidationError);
        CHECK_THROWS_AS(append_chains(dir.file("x.bin"), {}), ValidationError);
    }
    SUBCASE("truncation") {
        write_file(dir.file("x.bin"), "treedose-chain 1\nconfig 3\niterations = 100\n");
        CHECK_THROWS_WITH_AS(load_chain(dir.file("x.bin")), doctest::Contains("truncated"),
                             ValidationError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_chain(dir.file("nope.bin")), ValidationError);
    }
}

TEST_CASE("pinned correlations stay at zero through a run") {
    TempDir dir;
    const ExposureDataset ds = toy_1d(dir);
    RunConfig cfg;
    cfg.mcmc.iterations = 20;
    cfg.mcmc.burn_in = 4;
    cfg.mcmc.thin = 2;
    cfg.mcmc.n_chains = 1;
    cfg.mcmc.update_phi = false;
    const LikelihoodEngine engine = build_engine(ds, cfg);
    const auto chains = run_chains(engine, ds.model_covariates(), cfg.mcmc);
    for (const auto& draw : chains[0].draws) {
        CHECK(draw.noise.phi_d == 0.0);
        CHECK(draw.noise.phi_t == 0.0);
    }
}

TEST_CASE("report skeleton, csv writer, and manifest") {
    TempDir dir;
    const ReportPaths paths = prepare_report_dir(dir.file("out"));
    CHECK(std::filesystem::is_directory(paths.tables));
    CHECK(std::filesystem::is_directory(paths.figures));
    CHECK(std::filesystem::is_directory(paths.chain));

    const std::string table = (std::filesystem::path(paths.tables) / "t.csv").string();
    write_csv(table, {"name", "value"}, {{"plain", "1.5"}, {"with,comma", "say \"hi\""}});
    CHECK(read_file(table) ==
          "name,value\nplain,1.5\n\"with,comma\",\"say \"\"hi\"\"\"\n");
    CHECK_THROWS_AS(write_csv(table, {"a"}, {{"1", "2"}}), ValidationError);

    const std::string manifest = dir.file("out/run.manifest");
    write_manifest(manifest, {{"command", "fit"}, {"chains", "4"}});
    CHECK(read_file(manifest) == "command = fit\nchains = 4\n");
}

TEST_CASE("shortest-form doubles parse back exactly") {
    CHECK(format_value(0.1) == "0.1");
    CHECK(format_value(160000.0) == "160000");
    for (double v : {1e-6, 3.141592653589793, 2.2250738585072014e-308, -7.5e22}) {
        const std::string s = format_value(v);
        CHECK(std::stod(s) == v);
    }
}
