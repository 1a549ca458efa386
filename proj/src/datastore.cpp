#include "treedose/datastore.hpp"

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>
#include <utility>

#include "treedose/basis.hpp"
#include "treedose/error.hpp"

namespace treedose {

namespace {

std::string trim(const std::string& s) {
    const char* ws = " \t\r\n";
    const std::size_t a = s.find_first_not_of(ws);
    if (a == std::string::npos) return "";
    const std::size_t b = s.find_last_not_of(ws);
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        if (comma == std::string::npos) {
            out.push_back(trim(line.substr(start)));
            break;
        }
        out.push_back(trim(line.substr(start, comma - start)));
        start = comma + 1;
    }
    return out;
}

std::vector<std::string> split_words(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ' ' || c == '\t' || c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

double parse_double(const std::string& tok, const std::string& where) {
    const std::string t = trim(tok);
    const char* begin = t.c_str();
    char* end = nullptr;
    const double v = std::strtod(begin, &end);
    if (end == begin || *end != '\0')
        throw ValidationError(where + ": expected a number, got '" + tok + "'");
    return v;
}

long parse_long(const std::string& tok, const std::string& where) {
    const std::string t = trim(tok);
    const char* begin = t.c_str();
    char* end = nullptr;
    errno = 0;
    const long v = std::strtol(begin, &end, 10);
    if (end == begin || *end != '\0' || errno == ERANGE)
        throw ValidationError(where + ": expected an integer, got '" + tok + "'");
    return v;
}

std::uint64_t parse_seed(const std::string& tok, const std::string& where) {
    const std::string t = trim(tok);
    const char* begin = t.c_str();
    char* end = nullptr;
    errno = 0;
    const unsigned long long v = std::strtoull(begin, &end, 10);
    if (end == begin || *end != '\0' || errno == ERANGE || t.find('-') != std::string::npos)
        throw ValidationError(where + ": expected a nonnegative integer, got '" + tok + "'");
    return static_cast<std::uint64_t>(v);
}

std::string line_ref(const std::string& file, int line) {
    return file + " line " + std::to_string(line);
}

// Physical lines of a text file, 1-based, with trailing '\r' stripped.
std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open '" + path + "'");
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

struct CovariateTable {
    std::vector<std::string> particles;
    std::vector<int> particle_lines;  // where each particle id appeared
    std::vector<std::string> property_names;
    std::vector<bool> log_scaled;
    Eigen::MatrixXd values;
};

CovariateTable load_covariates(const std::string& path) {
    const auto lines = read_lines(path);
    CovariateTable tab;
    std::vector<std::string> log_names;
    int directive_line = 0;
    bool have_header = false;
    std::vector<std::vector<std::string>> rows;
    std::vector<int> row_lines;
    std::unordered_map<std::string, int> first_seen;

    for (int i = 0; i < static_cast<int>(lines.size()); ++i) {
        const int no = i + 1;
        const std::string raw = trim(lines[static_cast<std::size_t>(i)]);
        if (raw.empty()) continue;
        if (raw.rfind("#log:", 0) == 0) {
            if (directive_line)
                throw ValidationError(line_ref(path, no) + ": second #log: directive (first at line " +
                                      std::to_string(directive_line) + ")");
            directive_line = no;
            log_names = split_words(raw.substr(5));
            continue;
        }
        if (raw[0] == '#') continue;
        const auto fields = split_csv(raw);
        if (!have_header) {
            if (fields.size() < 2 || fields[0] != "particle")
                throw ValidationError(line_ref(path, no) +
                                      ": header must be 'particle,<prop1>,...'");
            tab.property_names.assign(fields.begin() + 1, fields.end());
            for (std::size_t j = 0; j < tab.property_names.size(); ++j) {
                if (tab.property_names[j].empty())
                    throw ValidationError(line_ref(path, no) + ": empty property name");
                for (std::size_t k = 0; k < j; ++k)
                    if (tab.property_names[k] == tab.property_names[j])
                        throw ValidationError(line_ref(path, no) + ": duplicate property '" +
                                              tab.property_names[j] + "'");
            }
            have_header = true;
            continue;
        }
        if (fields.size() != tab.property_names.size() + 1)
            throw ValidationError(line_ref(path, no) + ": expected " +
                                  std::to_string(tab.property_names.size() + 1) +
                                  " fields, got " + std::to_string(fields.size()));
        if (fields[0].empty())
            throw ValidationError(line_ref(path, no) + ": empty particle identifier");
        const auto ins = first_seen.emplace(fields[0], no);
        if (!ins.second)
            throw ValidationError(line_ref(path, no) + ": duplicate particle '" + fields[0] +
                                  "' (first at line " + std::to_string(ins.first->second) + ")");
        tab.particles.push_back(fields[0]);
        tab.particle_lines.push_back(no);
        rows.push_back(fields);
        row_lines.push_back(no);
    }
    if (!have_header) throw ValidationError(path + ": no header line found");
    if (tab.particles.empty()) throw ValidationError(path + ": no particle rows");

    tab.log_scaled.assign(tab.property_names.size(), false);
    for (const auto& name : log_names) {
        const auto it =
            std::find(tab.property_names.begin(), tab.property_names.end(), name);
        if (it == tab.property_names.end())
            throw ValidationError(line_ref(path, directive_line) + ": #log: names unknown property '" +
                                  name + "'");
        tab.log_scaled[static_cast<std::size_t>(it - tab.property_names.begin())] = true;
    }

    tab.values.resize(static_cast<Eigen::Index>(rows.size()),
                      static_cast<Eigen::Index>(tab.property_names.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t j = 0; j < tab.property_names.size(); ++j) {
            const std::string where =
                line_ref(path, row_lines[r]) + ", property '" + tab.property_names[j] + "'";
            const double v = parse_double(rows[r][j + 1], where);
            if (!std::isfinite(v)) throw ValidationError(where + ": value is not finite");
            if (tab.log_scaled[j] && !(v > 0.0))
                throw ValidationError(where + ": log-scaled property must be positive");
            tab.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = v;
        }
    }
    return tab;
}

int grid_index(const std::vector<double>& sorted_values, double v) {
    const auto it = std::lower_bound(sorted_values.begin(), sorted_values.end(), v);
    return static_cast<int>(it - sorted_values.begin());
}

std::string join_values(const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out.push_back(' ');
        out += format_value(v[i]);
    }
    return out;
}

std::string csv_escape(const std::string& field) {
    if (field.find_first_of(",\"\n") == std::string::npos) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out.push_back('"');
    return out;
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write '" + path + "'");
    return out;
}

void finish_out(std::ofstream& out, const std::string& path) {
    out.flush();
    if (!out) throw ValidationError("write to '" + path + "' failed");
}

}  // namespace

std::string format_value(double v) {
    char buf[40];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

int ExposureDataset::particle_index(const std::string& id) const {
    for (std::size_t i = 0; i < particles.size(); ++i)
        if (particles[i] == id) return static_cast<int>(i);
    return -1;
}

Eigen::MatrixXd ExposureDataset::model_covariates() const {
    Eigen::MatrixXd m = covariates;
    for (std::size_t j = 0; j < log_scaled.size(); ++j)
        if (log_scaled[j])
            m.col(static_cast<Eigen::Index>(j)) =
                m.col(static_cast<Eigen::Index>(j)).array().log();
    return m;
}

void ExposureDataset::validate() const {
    if (particles.empty()) throw ValidationError("dataset has no particles");
    if (property_names.empty()) throw ValidationError("dataset has no covariate properties");
    if (log_scaled.size() != property_names.size())
        throw ValidationError("log-scale flags disagree with the property count");
    if (covariates.rows() != static_cast<Eigen::Index>(particles.size()) ||
        covariates.cols() != static_cast<Eigen::Index>(property_names.size()))
        throw ValidationError("covariate matrix shape disagrees with the labels");
    for (Eigen::Index i = 0; i < covariates.rows(); ++i)
        for (Eigen::Index j = 0; j < covariates.cols(); ++j) {
            const double v = covariates(i, j);
            if (!std::isfinite(v))
                throw ValidationError("covariate '" + property_names[static_cast<std::size_t>(j)] +
                                      "' of particle '" + particles[static_cast<std::size_t>(i)] +
                                      "' is not finite");
            if (log_scaled[static_cast<std::size_t>(j)] && !(v > 0.0))
                throw ValidationError("log-scaled covariate '" +
                                      property_names[static_cast<std::size_t>(j)] +
                                      "' of particle '" + particles[static_cast<std::size_t>(i)] +
                                      "' must be positive");
        }
    dose_grid.validate();
    if (two_d()) time_grid.validate();
    if (responses.size() != particles.size())
        throw ValidationError("response blocks disagree with the particle count");
    const int cells = n_cells();
    for (std::size_t p = 0; p < responses.size(); ++p) {
        bool complete = false;
        if (responses[p].empty())
            throw ValidationError("particle '" + particles[p] + "' has no replicates");
        for (const auto& rep : responses[p]) {
            if (rep.values.size() != static_cast<Eigen::Index>(rep.cells.size()))
                throw ValidationError("particle '" + particles[p] + "' replicate '" +
                                      rep.replicate + "': values disagree with cells");
            if (rep.cells.empty())
                throw ValidationError("particle '" + particles[p] + "' replicate '" +
                                      rep.replicate + "' has no observations");
            for (std::size_t c = 0; c < rep.cells.size(); ++c) {
                if (rep.cells[c] < 0 || rep.cells[c] >= cells)
                    throw ValidationError("particle '" + particles[p] + "' replicate '" +
                                          rep.replicate + "': cell index out of range");
                if (c && rep.cells[c] <= rep.cells[c - 1])
                    throw ValidationError("particle '" + particles[p] + "' replicate '" +
                                          rep.replicate + "': cells must increase strictly");
                if (!std::isfinite(rep.values(static_cast<Eigen::Index>(c))))
                    throw ValidationError("particle '" + particles[p] + "' replicate '" +
                                          rep.replicate + "': response is not finite");
            }
            if (static_cast<int>(rep.cells.size()) == cells) complete = true;
            if (!has_tray && !rep.tray.empty())
                throw ValidationError("tray label present but the dataset reports no tray column");
        }
        if (!complete)
            throw ValidationError("particle '" + particles[p] +
                                  "' has no fully observed replicate on the shared grid");
    }
}

ExposureDataset load_dataset(const std::string& responses_path,
                             const std::string& covariates_path) {
    CovariateTable tab = load_covariates(covariates_path);

    const auto lines = read_lines(responses_path);
    bool have_header = false;
    int col_particle = -1, col_replicate = -1, col_dose = -1, col_time = -1, col_response = -1,
        col_tray = -1;
    std::size_t n_columns = 0;

    struct Row {
        int particle;
        std::string replicate;
        double dose;
        double time;
        double response;
        std::string tray;
        int line;
    };
    std::vector<Row> rows;
    std::vector<double> doses, times;

    for (int i = 0; i < static_cast<int>(lines.size()); ++i) {
        const int no = i + 1;
        const std::string raw = trim(lines[static_cast<std::size_t>(i)]);
        if (raw.empty() || raw[0] == '#') continue;
        const auto fields = split_csv(raw);
        if (!have_header) {
            for (std::size_t j = 0; j < fields.size(); ++j) {
                const std::string& name = fields[j];
                int* slot = nullptr;
                if (name == "particle") slot = &col_particle;
                else if (name == "replicate") slot = &col_replicate;
                else if (name == "dose") slot = &col_dose;
                else if (name == "time") slot = &col_time;
                else if (name == "response") slot = &col_response;
                else if (name == "tray") slot = &col_tray;
                if (!slot)
                    throw ValidationError(line_ref(responses_path, no) + ": unknown column '" +
                                          name + "'");
                if (*slot >= 0)
                    throw ValidationError(line_ref(responses_path, no) + ": duplicate column '" +
                                          name + "'");
                *slot = static_cast<int>(j);
            }
            if (col_particle < 0 || col_replicate < 0 || col_dose < 0 || col_response < 0)
                throw ValidationError(line_ref(responses_path, no) +
                                      ": header needs particle, replicate, dose and response");
            n_columns = fields.size();
            have_header = true;
            continue;
        }
        if (fields.size() != n_columns)
            throw ValidationError(line_ref(responses_path, no) + ": expected " +
                                  std::to_string(n_columns) + " fields, got " +
                                  std::to_string(fields.size()));
        Row row;
        row.line = no;
        const std::string& id = fields[static_cast<std::size_t>(col_particle)];
        const auto pi = std::find(tab.particles.begin(), tab.particles.end(), id);
        if (pi == tab.particles.end())
            throw ValidationError(line_ref(responses_path, no) + ": unknown particle '" + id +
                                  "' (not in the covariates file)");
        row.particle = static_cast<int>(pi - tab.particles.begin());
        row.replicate = fields[static_cast<std::size_t>(col_replicate)];
        if (row.replicate.empty())
            throw ValidationError(line_ref(responses_path, no) + ": empty replicate identifier");
        row.dose = parse_double(fields[static_cast<std::size_t>(col_dose)],
                                line_ref(responses_path, no) + ", column 'dose'");
        row.time = col_time >= 0
                       ? parse_double(fields[static_cast<std::size_t>(col_time)],
                                      line_ref(responses_path, no) + ", column 'time'")
                       : 0.0;
        row.response = parse_double(fields[static_cast<std::size_t>(col_response)],
                                    line_ref(responses_path, no) + ", column 'response'");
        if (!std::isfinite(row.dose) || !std::isfinite(row.time))
            throw ValidationError(line_ref(responses_path, no) + ": exposure value is not finite");
        if (!std::isfinite(row.response))
            throw ValidationError(line_ref(responses_path, no) + ": response is not finite");
        if (col_tray >= 0) row.tray = fields[static_cast<std::size_t>(col_tray)];
        doses.push_back(row.dose);
        times.push_back(row.time);
        rows.push_back(std::move(row));
    }
    if (!have_header) throw ValidationError(responses_path + ": no header line found");
    if (rows.empty()) throw ValidationError(responses_path + ": no data rows");

    std::sort(doses.begin(), doses.end());
    doses.erase(std::unique(doses.begin(), doses.end()), doses.end());
    std::sort(times.begin(), times.end());
    times.erase(std::unique(times.begin(), times.end()), times.end());
    if (doses.size() < 2)
        throw ValidationError(responses_path + ": needs at least two distinct dose levels");
    const bool two_d = col_time >= 0 && times.size() >= 2;

    ExposureDataset ds;
    ds.particles = std::move(tab.particles);
    ds.property_names = std::move(tab.property_names);
    ds.log_scaled = std::move(tab.log_scaled);
    ds.covariates = std::move(tab.values);
    ds.dose_grid = Grid1D(doses);
    if (two_d) ds.time_grid = Grid1D(times);
    ds.has_tray = col_tray >= 0;
    ds.responses.resize(ds.particles.size());

    const int n_t = two_d ? static_cast<int>(times.size()) : 1;

    struct Pending {
        ReplicateProfile profile;
        std::vector<std::pair<int, double>> obs;  // cell -> value
        std::map<int, int> cell_lines;
        int first_line = 0;
    };
    std::vector<std::vector<Pending>> pending(ds.particles.size());
    std::vector<std::unordered_map<std::string, int>> rep_index(ds.particles.size());
    std::vector<int> first_particle_line(ds.particles.size(), 0);

    for (const auto& row : rows) {
        const std::size_t p = static_cast<std::size_t>(row.particle);
        if (!first_particle_line[p]) first_particle_line[p] = row.line;
        auto& index = rep_index[p];
        const auto ins = index.emplace(row.replicate, static_cast<int>(pending[p].size()));
        if (ins.second) {
            Pending fresh;
            fresh.profile.replicate = row.replicate;
            fresh.profile.tray = row.tray;
            fresh.first_line = row.line;
            pending[p].push_back(std::move(fresh));
        }
        Pending& rep = pending[p][static_cast<std::size_t>(ins.first->second)];
        if (rep.profile.tray != row.tray)
            throw ValidationError(line_ref(responses_path, row.line) + ": tray '" + row.tray +
                                  "' disagrees with line " + std::to_string(rep.first_line) +
                                  " for the same replicate");
        const int di = grid_index(doses, row.dose);
        const int cell = two_d ? di * n_t + grid_index(times, row.time) : di;
        const auto dup = rep.cell_lines.emplace(cell, row.line);
        if (!dup.second)
            throw ValidationError(line_ref(responses_path, row.line) +
                                  ": duplicate observation (first at line " +
                                  std::to_string(dup.first->second) + ")");
        rep.obs.emplace_back(cell, row.response);
    }

    const int cells = ds.n_cells();
    for (std::size_t p = 0; p < pending.size(); ++p) {
        if (pending[p].empty())
            throw ValidationError(line_ref(covariates_path, tab.particle_lines[p]) +
                                  ": particle '" + ds.particles[p] + "' has no response rows");
        bool complete = false;
        std::size_t best = 0;
        for (auto& rep : pending[p]) {
            std::sort(rep.obs.begin(), rep.obs.end());
            rep.profile.cells.reserve(rep.obs.size());
            rep.profile.values.resize(static_cast<Eigen::Index>(rep.obs.size()));
            for (std::size_t c = 0; c < rep.obs.size(); ++c) {
                rep.profile.cells.push_back(rep.obs[c].first);
                rep.profile.values(static_cast<Eigen::Index>(c)) = rep.obs[c].second;
            }
            best = std::max(best, rep.obs.size());
            if (static_cast<int>(rep.obs.size()) == cells) complete = true;
            ds.responses[p].push_back(std::move(rep.profile));
        }
        if (!complete)
            throw ValidationError(
                line_ref(responses_path, first_particle_line[p]) + ": particle '" +
                ds.particles[p] + "' is observed on a ragged grid: no replicate covers all " +
                std::to_string(cells) + " grid cells (best covers " + std::to_string(best) + ")");
    }

    ds.validate();
    return ds;
}

void save_responses(const std::string& path, const ExposureDataset& dataset) {
    std::ofstream out = open_out(path);
    out << "particle,replicate,dose";
    if (dataset.two_d()) out << ",time";
    out << ",response";
    if (dataset.has_tray) out << ",tray";
    out << '\n';
    const int n_t = dataset.two_d() ? dataset.time_grid.size() : 1;
    for (std::size_t p = 0; p < dataset.particles.size(); ++p) {
        for (const auto& rep : dataset.responses[p]) {
            for (std::size_t c = 0; c < rep.cells.size(); ++c) {
                const int cell = rep.cells[c];
                out << csv_escape(dataset.particles[p]) << ',' << csv_escape(rep.replicate) << ','
                    << format_value(dataset.dose_grid.values[static_cast<std::size_t>(cell / n_t)]);
                if (dataset.two_d())
                    out << ','
                        << format_value(
                               dataset.time_grid.values[static_cast<std::size_t>(cell % n_t)]);
                out << ',' << format_value(rep.values(static_cast<Eigen::Index>(c)));
                if (dataset.has_tray) out << ',' << csv_escape(rep.tray);
                out << '\n';
            }
        }
    }
    finish_out(out, path);
}

void save_covariates(const std::string& path, const ExposureDataset& dataset) {
    std::ofstream out = open_out(path);
    out << "particle";
    for (const auto& name : dataset.property_names) out << ',' << csv_escape(name);
    out << '\n';
    bool any_log = false;
    for (bool f : dataset.log_scaled) any_log = any_log || f;
    if (any_log) {
        out << "#log:";
        for (std::size_t j = 0; j < dataset.property_names.size(); ++j)
            if (dataset.log_scaled[j]) out << ' ' << dataset.property_names[j];
        out << '\n';
    }
    for (std::size_t i = 0; i < dataset.particles.size(); ++i) {
        out << csv_escape(dataset.particles[i]);
        for (Eigen::Index j = 0; j < dataset.covariates.cols(); ++j)
            out << ',' << format_value(dataset.covariates(static_cast<Eigen::Index>(i), j));
        out << '\n';
    }
    finish_out(out, path);
}

ExposureDataset normalize_baseline(const ExposureDataset& dataset,
                                   const std::string& control_particle) {
    dataset.validate();
    int control_index = -1;
    if (!control_particle.empty()) {
        control_index = dataset.particle_index(control_particle);
        if (control_index < 0)
            throw ValidationError("control particle '" + control_particle +
                                  "' is not in the dataset");
    }
    const auto& dv = dataset.dose_grid.values;
    const auto zero = std::find(dv.begin(), dv.end(), 0.0);
    if (zero == dv.end())
        throw ValidationError("no zero-exposure rows: the dose grid has no 0 level");
    const int zero_dose = static_cast<int>(zero - dv.begin());
    const int n_t = dataset.two_d() ? dataset.time_grid.size() : 1;
    const int lo = zero_dose * n_t;
    const int hi = lo + n_t;  // control cells are [lo, hi)

    std::map<std::string, std::pair<double, long>> control;  // tray -> (sum, count)
    for (std::size_t p = 0; p < dataset.responses.size(); ++p) {
        if (control_index >= 0 && static_cast<int>(p) != control_index) continue;
        for (const auto& rep : dataset.responses[p]) {
            for (std::size_t c = 0; c < rep.cells.size(); ++c) {
                if (rep.cells[c] < lo || rep.cells[c] >= hi) continue;
                auto& acc = control[dataset.has_tray ? rep.tray : std::string()];
                acc.first += rep.values(static_cast<Eigen::Index>(c));
                acc.second += 1;
            }
        }
    }

    ExposureDataset out = dataset;
    for (std::size_t p = 0; p < out.responses.size(); ++p) {
        for (auto& rep : out.responses[p]) {
            const std::string key = out.has_tray ? rep.tray : std::string();
            const auto it = control.find(key);
            if (it == control.end() || it->second.second == 0)
                throw ValidationError(out.has_tray
                                          ? "tray '" + key + "' has no zero-exposure control rows"
                                          : "dataset has no zero-exposure control rows");
            rep.values.array() -= it->second.first / static_cast<double>(it->second.second);
        }
    }
    return out;
}

void RunConfig::validate() const {
    mcmc.validate();
    if (order_d < 1 || order_t < 1) throw ValidationError("spline orders must be at least 1");
    for (const auto* knots : {&knots_d, &knots_t})
        for (std::size_t i = 1; i < knots->size(); ++i)
            if (!((*knots)[i] > (*knots)[i - 1]))
                throw ValidationError("interior knots must increase strictly");
    if (!(level > 0.0 && level < 1.0))
        throw ValidationError("predictive level must lie in (0,1)");
    if (sens_base < 2) throw ValidationError("sens_base must be at least 2");
    if (pd_points < 2) throw ValidationError("pd_points must be at least 2");
    if (out_dir.empty()) throw ValidationError("out_dir must not be empty");
}

namespace {

void apply_key(RunConfig& cfg, const std::string& key, const std::string& value,
               const std::string& where) {
    const auto as_double = [&] { return parse_double(value, where); };
    const auto as_long = [&] { return parse_long(value, where); };
    const auto as_int = [&] { return static_cast<int>(parse_long(value, where)); };
    const auto as_list = [&] {
        std::vector<double> out;
        for (const auto& tok : split_words(value)) out.push_back(parse_double(tok, where));
        return out;
    };

    if (key == "iterations") cfg.mcmc.iterations = as_long();
    else if (key == "burn_in") cfg.mcmc.burn_in = as_long();
    else if (key == "thin") cfg.mcmc.thin = as_long();
    else if (key == "seed") cfg.mcmc.seed = parse_seed(value, where);
    else if (key == "n_chains") cfg.mcmc.n_chains = as_int();
    else if (key == "tree_steps_per_sweep") cfg.mcmc.tree_steps_per_sweep = as_int();
    else if (key == "phi_grid") cfg.mcmc.phi_grid = as_int();
    else if (key == "move_grow") cfg.mcmc.move_probs[0] = as_double();
    else if (key == "move_prune") cfg.mcmc.move_probs[1] = as_double();
    else if (key == "move_change") cfg.mcmc.move_probs[2] = as_double();
    else if (key == "move_swap") cfg.mcmc.move_probs[3] = as_double();
    else if (key == "alpha") cfg.mcmc.tree_prior.alpha = as_double();
    else if (key == "nu") cfg.mcmc.tree_prior.nu = as_double();
    else if (key == "a_sigma") cfg.mcmc.variance_priors.a_sigma = as_double();
    else if (key == "b_sigma") cfg.mcmc.variance_priors.b_sigma = as_double();
    else if (key == "a_tau") cfg.mcmc.variance_priors.a_tau = as_double();
    else if (key == "b_tau") cfg.mcmc.variance_priors.b_tau = as_double();
    else if (key == "eta") cfg.mcmc.eta = as_double();
    else if (key == "lambda1") cfg.mcmc.correlation_priors.lambda01 = as_double();
    else if (key == "lambda2") cfg.mcmc.correlation_priors.lambda02 = as_double();
    else if (key == "lambda3") cfg.mcmc.correlation_priors.lambda03 = as_double();
    else if (key == "gamma1") cfg.mcmc.correlation_priors.gamma01 = as_double();
    else if (key == "gamma2") cfg.mcmc.correlation_priors.gamma02 = as_double();
    else if (key == "gamma3") cfg.mcmc.correlation_priors.gamma03 = as_double();
    else if (key == "count_d") cfg.mcmc.correlation_priors.count_d = as_double();
    else if (key == "count_t") cfg.mcmc.correlation_priors.count_t = as_double();
    else if (key == "correlation") {
        if (value == "ar1") cfg.mcmc.update_phi = true;
        else if (value == "independent") cfg.mcmc.update_phi = false;
        else throw ValidationError(where + ": correlation must be 'ar1' or 'independent'");
    } else if (key == "order_d") cfg.order_d = as_int();
    else if (key == "order_t") cfg.order_t = as_int();
    else if (key == "knots_d") cfg.knots_d = as_list();
    else if (key == "knots_t") cfg.knots_t = as_list();
    else if (key == "distance") {
        if (value == "index") cfg.distance = CorrDistance::Index;
        else if (value == "raw") cfg.distance = CorrDistance::Raw;
        else throw ValidationError(where + ": distance must be 'index' or 'raw'");
    } else if (key == "level") cfg.level = as_double();
    else if (key == "sens_base") cfg.sens_base = as_int();
    else if (key == "pd_points") cfg.pd_points = as_int();
    else if (key == "out_dir") {
        if (value.empty()) throw ValidationError(where + ": out_dir must not be empty");
        cfg.out_dir = value;
    } else {
        throw ValidationError(where + ": unknown key '" + key + "'");
    }
}

}  // namespace

RunConfig parse_config(std::istream& in, const std::string& name) {
    RunConfig cfg;
    std::map<std::string, int> seen;
    std::string line;
    int no = 0;
    while (std::getline(in, line)) {
        ++no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ValidationError(line_ref(name, no) + ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ValidationError(line_ref(name, no) + ": empty key");
        const auto ins = seen.emplace(key, no);
        if (!ins.second)
            throw ValidationError(line_ref(name, no) + ": duplicate key '" + key +
                                  "' (first at line " + std::to_string(ins.first->second) + ")");
        apply_key(cfg, key, value, line_ref(name, no));
    }
    cfg.validate();
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open '" + path + "'");
    return parse_config(in, path);
}

std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& config) {
    std::vector<std::pair<std::string, std::string>> e;
    const auto& m = config.mcmc;
    e.emplace_back("iterations", std::to_string(m.iterations));
    e.emplace_back("burn_in", std::to_string(m.burn_in));
    e.emplace_back("thin", std::to_string(m.thin));
    e.emplace_back("seed", std::to_string(m.seed));
    e.emplace_back("n_chains", std::to_string(m.n_chains));
    e.emplace_back("tree_steps_per_sweep", std::to_string(m.tree_steps_per_sweep));
    e.emplace_back("phi_grid", std::to_string(m.phi_grid));
    e.emplace_back("move_grow", format_value(m.move_probs[0]));
    e.emplace_back("move_prune", format_value(m.move_probs[1]));
    e.emplace_back("move_change", format_value(m.move_probs[2]));
    e.emplace_back("move_swap", format_value(m.move_probs[3]));
    e.emplace_back("alpha", format_value(m.tree_prior.alpha));
    e.emplace_back("nu", format_value(m.tree_prior.nu));
    e.emplace_back("a_sigma", format_value(m.variance_priors.a_sigma));
    e.emplace_back("b_sigma", format_value(m.variance_priors.b_sigma));
    e.emplace_back("a_tau", format_value(m.variance_priors.a_tau));
    e.emplace_back("b_tau", format_value(m.variance_priors.b_tau));
    e.emplace_back("eta", format_value(m.eta));
    e.emplace_back("lambda1", format_value(m.correlation_priors.lambda01));
    e.emplace_back("lambda2", format_value(m.correlation_priors.lambda02));
    e.emplace_back("lambda3", format_value(m.correlation_priors.lambda03));
    e.emplace_back("gamma1", format_value(m.correlation_priors.gamma01));
    e.emplace_back("gamma2", format_value(m.correlation_priors.gamma02));
    e.emplace_back("gamma3", format_value(m.correlation_priors.gamma03));
    e.emplace_back("count_d", format_value(m.correlation_priors.count_d));
    e.emplace_back("count_t", format_value(m.correlation_priors.count_t));
    e.emplace_back("correlation", m.update_phi ? "ar1" : "independent");
    e.emplace_back("order_d", std::to_string(config.order_d));
    e.emplace_back("order_t", std::to_string(config.order_t));
    e.emplace_back("knots_d", join_values(config.knots_d));
    e.emplace_back("knots_t", join_values(config.knots_t));
    e.emplace_back("distance", config.distance == CorrDistance::Index ? "index" : "raw");
    e.emplace_back("level", format_value(config.level));
    e.emplace_back("sens_base", std::to_string(config.sens_base));
    e.emplace_back("pd_points", std::to_string(config.pd_points));
    e.emplace_back("out_dir", config.out_dir);
    return e;
}

void save_config(const std::string& path, const RunConfig& config) {
    std::ofstream out = open_out(path);
    for (const auto& [key, value] : config_entries(config)) out << key << " = " << value << '\n';
    finish_out(out, path);
}

SplineSystem build_system(const Grid1D& dose, const Grid1D& time, const RunConfig& config) {
    const std::vector<double> kd =
        config.knots_d.empty() ? default_interior_knots(dose) : config.knots_d;
    if (time.values.empty()) return make_system_1d(dose, kd, config.order_d, config.mcmc.eta);
    const std::vector<double> kt =
        config.knots_t.empty() ? default_interior_knots(time) : config.knots_t;
    return make_system_2d(dose, time, kd, kt, config.order_d, config.order_t, config.mcmc.eta);
}

LikelihoodEngine build_engine(const ExposureDataset& dataset, const RunConfig& config) {
    dataset.validate();
    config.validate();
    SplineSystem system = build_system(dataset.dose_grid, dataset.time_grid, config);
    std::vector<double> pos_d = axis_positions(dataset.dose_grid, config.distance);
    std::vector<double> pos_t;
    if (dataset.two_d()) pos_t = axis_positions(dataset.time_grid, config.distance);
    std::vector<ObsCopy> copies;
    for (std::size_t p = 0; p < dataset.responses.size(); ++p)
        for (const auto& rep : dataset.responses[p]) {
            ObsCopy copy;
            copy.particle = static_cast<int>(p);
            copy.y = rep.values;
            copy.cells = rep.cells;
            copies.push_back(std::move(copy));
        }
    return LikelihoodEngine(std::move(system), std::move(pos_d), std::move(pos_t),
                            std::move(copies), dataset.n_particles());
}

ChainArchive make_archive(const ExposureDataset& dataset, const RunConfig& config,
                          std::vector<PosteriorChain> chains) {
    ChainArchive arc;
    arc.config = config;
    arc.particles = dataset.particles;
    arc.property_names = dataset.property_names;
    arc.log_scaled = dataset.log_scaled;
    arc.covariates = dataset.model_covariates();
    arc.dose_grid = dataset.dose_grid;
    arc.time_grid = dataset.time_grid;
    arc.chains = std::move(chains);
    return arc;
}

namespace {

constexpr const char* kChainMagic = "treedose-chain 1";

void write_chain_block(std::ofstream& out, const PosteriorChain& chain) {
    out << "chain " << chain.chain_id << ' ' << chain.seed << '\n';
    out << "moves";
    for (long v : chain.moves.proposed) out << ' ' << v;
    for (long v : chain.moves.accepted) out << ' ' << v;
    out << ' ' << chain.moves.numeric_rejects << '\n';
    out << "ess " << chain.ess.size() << '\n';
    for (const auto& [key, value] : chain.ess) out << key << ' ' << format_value(value) << '\n';
    out << "warnings " << chain.warnings.size() << '\n';
    for (std::string w : chain.warnings) {
        std::replace(w.begin(), w.end(), '\n', ' ');
        out << w << '\n';
    }
    out << "trace " << chain.log_post_trace.size() << '\n';
    for (double v : chain.log_post_trace) out << format_value(v) << '\n';
    out << "draws " << chain.draws.size() << '\n';
    for (const auto& draw : chain.draws) {
        out << format_value(draw.noise.sigma2) << ' ' << format_value(draw.noise.phi_d) << ' '
            << format_value(draw.noise.phi_t) << ' ' << format_value(draw.tau2) << ' '
            << format_value(draw.log_post) << '\n';
        out << draw.tree.serialize() << '\n';
    }
}

// Sequential reader with line numbers for error messages.
struct LineReader {
    std::ifstream in;
    std::string name;
    int no = 0;

    std::string next(const char* what) {
        std::string line;
        if (!std::getline(in, line))
            throw ValidationError(name + ": truncated archive, expected " + std::string(what));
        ++no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return line;
    }
    bool peek_eof() { return in.peek() == std::ifstream::traits_type::eof(); }
    std::string where() const { return line_ref(name, no); }
};

std::vector<std::string> expect_tokens(LineReader& lr, const char* head, int count_after) {
    const std::string line = lr.next(head);
    const auto tokens = split_words(line);
    if (tokens.empty() || tokens[0] != head || static_cast<int>(tokens.size()) != count_after + 1)
        throw ValidationError(lr.where() + ": expected '" + head + "' record, got '" + line + "'");
    return tokens;
}

PosteriorChain read_chain_block(LineReader& lr, const McmcConfig& config) {
    PosteriorChain chain;
    chain.config = config;
    {
        const auto tok = expect_tokens(lr, "chain", 2);
        chain.chain_id = static_cast<int>(parse_long(tok[1], lr.where()));
        chain.seed = parse_seed(tok[2], lr.where());
    }
    {
        const auto tok = expect_tokens(lr, "moves", 9);
        for (int i = 0; i < 4; ++i)
            chain.moves.proposed[static_cast<std::size_t>(i)] =
                parse_long(tok[static_cast<std::size_t>(1 + i)], lr.where());
        for (int i = 0; i < 4; ++i)
            chain.moves.accepted[static_cast<std::size_t>(i)] =
                parse_long(tok[static_cast<std::size_t>(5 + i)], lr.where());
        chain.moves.numeric_rejects = parse_long(tok[9], lr.where());
    }
    {
        const auto tok = expect_tokens(lr, "ess", 1);
        const long n = parse_long(tok[1], lr.where());
        for (long i = 0; i < n; ++i) {
            const std::string line = lr.next("ess entry");
            const std::size_t sp = line.find(' ');
            if (sp == std::string::npos)
                throw ValidationError(lr.where() + ": malformed ess entry");
            chain.ess[line.substr(0, sp)] = parse_double(line.substr(sp + 1), lr.where());
        }
    }
    {
        const auto tok = expect_tokens(lr, "warnings", 1);
        const long n = parse_long(tok[1], lr.where());
        for (long i = 0; i < n; ++i) chain.warnings.push_back(lr.next("warning"));
    }
    {
        const auto tok = expect_tokens(lr, "trace", 1);
        const long n = parse_long(tok[1], lr.where());
        chain.log_post_trace.reserve(static_cast<std::size_t>(n));
        for (long i = 0; i < n; ++i)
            chain.log_post_trace.push_back(parse_double(lr.next("trace value"), lr.where()));
    }
    {
        const auto tok = expect_tokens(lr, "draws", 1);
        const long n = parse_long(tok[1], lr.where());
        chain.draws.reserve(static_cast<std::size_t>(n));
        for (long i = 0; i < n; ++i) {
            const auto vals = split_words(lr.next("draw scalars"));
            if (vals.size() != 5)
                throw ValidationError(lr.where() + ": draw record needs 5 scalars");
            ChainState state;
            state.noise.sigma2 = parse_double(vals[0], lr.where());
            state.noise.phi_d = parse_double(vals[1], lr.where());
            state.noise.phi_t = parse_double(vals[2], lr.where());
            state.tau2 = parse_double(vals[3], lr.where());
            state.log_post = parse_double(vals[4], lr.where());
            try {
                state.tree = Tree::deserialize(lr.next("tree"));
            } catch (const std::exception& e) {
                throw ValidationError(lr.where() + ": bad tree record: " + e.what());
            }
            chain.draws.push_back(std::move(state));
        }
    }
    return chain;
}

}  // namespace

void save_chain(const std::string& path, const ChainArchive& archive) {
    std::ofstream out = open_out(path);
    out << kChainMagic << '\n';
    const auto entries = config_entries(archive.config);
    out << "config " << entries.size() << '\n';
    for (const auto& [key, value] : entries) out << key << " = " << value << '\n';
    out << "particles " << archive.particles.size() << '\n';
    for (const auto& id : archive.particles) out << id << '\n';
    out << "properties " << archive.property_names.size() << '\n';
    for (std::size_t j = 0; j < archive.property_names.size(); ++j)
        out << (archive.log_scaled[j] ? 1 : 0) << ' ' << archive.property_names[j] << '\n';
    out << "covariates" << '\n';
    for (Eigen::Index i = 0; i < archive.covariates.rows(); ++i) {
        for (Eigen::Index j = 0; j < archive.covariates.cols(); ++j) {
            if (j) out << ' ';
            out << format_value(archive.covariates(i, j));
        }
        out << '\n';
    }
    out << "dose-grid " << join_values(archive.dose_grid.values) << '\n';
    out << "time-grid " << join_values(archive.time_grid.values) << '\n';
    for (const auto& chain : archive.chains) write_chain_block(out, chain);
    finish_out(out, path);
}

void append_chains(const std::string& path, const std::vector<PosteriorChain>& chains) {
    {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ValidationError("cannot open '" + path + "'");
        std::string magic;
        std::getline(in, magic);
        if (!magic.empty() && magic.back() == '\r') magic.pop_back();
        if (magic != kChainMagic)
            throw ValidationError(path + ": not a chain archive or version mismatch");
    }
    std::ofstream out(path, std::ios::binary | std::ios::app);
    if (!out) throw ValidationError("cannot write '" + path + "'");
    for (const auto& chain : chains) write_chain_block(out, chain);
    finish_out(out, path);
}

ChainArchive load_chain(const std::string& path) {
    LineReader lr;
    lr.in.open(path, std::ios::binary);
    lr.name = path;
    if (!lr.in) throw ValidationError("cannot open '" + path + "'");
    if (lr.next("magic header") != kChainMagic)
        throw ValidationError(path + ": not a chain archive or version mismatch");

    ChainArchive arc;
    {
        const auto tok = expect_tokens(lr, "config", 1);
        const long n = parse_long(tok[1], lr.where());
        std::ostringstream buffer;
        for (long i = 0; i < n; ++i) buffer << lr.next("config entry") << '\n';
        std::istringstream config_in(buffer.str());
        arc.config = parse_config(config_in, path + " (embedded config)");
    }
    {
        const auto tok = expect_tokens(lr, "particles", 1);
        const long n = parse_long(tok[1], lr.where());
        for (long i = 0; i < n; ++i) arc.particles.push_back(lr.next("particle id"));
    }
    {
        const auto tok = expect_tokens(lr, "properties", 1);
        const long n = parse_long(tok[1], lr.where());
        for (long i = 0; i < n; ++i) {
            const std::string line = lr.next("property");
            const std::size_t sp = line.find(' ');
            if (sp == std::string::npos || (line[0] != '0' && line[0] != '1'))
                throw ValidationError(lr.where() + ": malformed property record");
            arc.log_scaled.push_back(line[0] == '1');
            arc.property_names.push_back(line.substr(sp + 1));
        }
    }
    {
        if (lr.next("covariates") != "covariates")
            throw ValidationError(lr.where() + ": expected 'covariates' record");
        arc.covariates.resize(static_cast<Eigen::Index>(arc.particles.size()),
                              static_cast<Eigen::Index>(arc.property_names.size()));
        for (Eigen::Index i = 0; i < arc.covariates.rows(); ++i) {
            const auto vals = split_words(lr.next("covariate row"));
            if (vals.size() != arc.property_names.size())
                throw ValidationError(lr.where() + ": covariate row has wrong arity");
            for (Eigen::Index j = 0; j < arc.covariates.cols(); ++j)
                arc.covariates(i, j) = parse_double(vals[static_cast<std::size_t>(j)], lr.where());
        }
    }
    {
        const std::string line = lr.next("dose-grid");
        if (line.rfind("dose-grid ", 0) != 0)
            throw ValidationError(lr.where() + ": expected 'dose-grid' record");
        std::vector<double> vals;
        for (const auto& tok : split_words(line.substr(10)))
            vals.push_back(parse_double(tok, lr.where()));
        arc.dose_grid = Grid1D(vals);
    }
    {
        const std::string line = lr.next("time-grid");
        if (line.rfind("time-grid", 0) != 0)
            throw ValidationError(lr.where() + ": expected 'time-grid' record");
        std::vector<double> vals;
        if (line.size() > 9)
            for (const auto& tok : split_words(line.substr(9)))
                vals.push_back(parse_double(tok, lr.where()));
        if (!vals.empty()) arc.time_grid = Grid1D(vals);
    }
    while (!lr.peek_eof()) arc.chains.push_back(read_chain_block(lr, arc.config.mcmc));
    return arc;
}

ReportPaths prepare_report_dir(const std::string& out_dir) {
    namespace fs = std::filesystem;
    ReportPaths paths;
    paths.root = out_dir;
    paths.tables = (fs::path(out_dir) / "tables").string();
    paths.figures = (fs::path(out_dir) / "figures").string();
    paths.chain = (fs::path(out_dir) / "chain").string();
    std::error_code ec;
    for (const auto& dir : {paths.root, paths.tables, paths.figures, paths.chain}) {
        fs::create_directories(dir, ec);
        if (ec) throw ValidationError("cannot create directory '" + dir + "': " + ec.message());
    }
    return paths;
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
    std::ofstream out = open_out(path);
    for (std::size_t j = 0; j < header.size(); ++j) {
        if (j) out << ',';
        out << csv_escape(header[j]);
    }
    out << '\n';
    for (const auto& row : rows) {
        if (row.size() != header.size())
            throw ValidationError("csv row arity disagrees with the header in '" + path + "'");
        for (std::size_t j = 0; j < row.size(); ++j) {
            if (j) out << ',';
            out << csv_escape(row[j]);
        }
        out << '\n';
    }
    finish_out(out, path);
}

void write_manifest(const std::string& path,
                    const std::vector<std::pair<std::string, std::string>>& entries) {
    std::ofstream out = open_out(path);
    for (const auto& [key, value] : entries) out << key << " = " << value << '\n';
    finish_out(out, path);
}

}  // namespace treedose
