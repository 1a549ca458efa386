#pragma once

#include <cstdint>
#include <string>

namespace treedose {

// Sampler settings a command may override on top of the config file.
struct SampleOverrides {
    long iterations = -1;
    long burn_in = -1;
    long thin = -1;
    int chains = -1;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

struct FitArgs {
    std::string data, covariates, config_path, out;
    SampleOverrides sample;
    bool normalize = false;
    std::string control;
};

struct PredictArgs {
    std::string chain, data, covariates, out;
    double level = -1.0;  // negative = the archive's configured level
    int max_draws = 4000;
    std::uint64_t seed = 1;
    bool normalize = false;
    std::string control;
};

struct PdArgs {
    std::string chain, vars, at, out;
    int points = -1;  // non-positive = the archive's configured count
    int max_draws = 1000;
};

struct SensArgs {
    std::string chain, out;
    std::string mode = "averaged";
    int n_base = -1;  // non-positive = the archive's configured count
    int max_draws = 1000;
    std::uint64_t seed = 1;
    bool include_noise = false;
};

struct LocoArgs {
    std::string data, covariates, config_path, out;
    SampleOverrides sample;
    bool normalize = false;
    std::string control;
};

struct SimulateArgs {
    std::string spec_path, out;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

void cmd_fit(const FitArgs& args);
void cmd_predict(const PredictArgs& args, bool posterior_check);
void cmd_pd(const PdArgs& args);
void cmd_sens(const SensArgs& args);
void cmd_loco(const LocoArgs& args);
void cmd_simulate(const SimulateArgs& args);

// --out flag, then the TREEDOSE_OUT environment variable, then the fallback.
std::string resolve_out_dir(const std::string& flag_value, const std::string& fallback);

}  // namespace treedose
