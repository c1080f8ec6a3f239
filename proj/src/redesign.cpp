#include "car/redesign.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace car::sim {

namespace {

std::string trim(std::string s) {
    auto not_space = [](unsigned char c) { return !std::isspace(c); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
    return s;
}

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    bool quoted = false;
    for (char c : line) {
        if (c == '"') quoted = !quoted;
        if (c == ',' && !quoted) {
            out.push_back(trim(field));
            field.clear();
        } else {
            field += c;
        }
    }
    out.push_back(trim(field));
    return out;
}

}  // namespace

std::size_t CsvTable::column(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw InvalidInput("CSV has no column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
}

std::vector<double> CsvTable::numeric(const std::string& name) const {
    const std::size_t c = column(name);
    std::vector<double> out;
    out.reserve(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const std::string& cell = rows[r][c];
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(cell, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (cell.empty() || used != cell.size() || !std::isfinite(v)) {
            throw InvalidInput("CSV row " + std::to_string(r + 2) + " column '" + name + "': not a finite number");
        }
        out.push_back(v);
    }
    return out;
}

CsvTable read_csv(std::istream& in) {
    CsvTable t;
    std::string line;
    bool have_header = false;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        auto fields = split_line(line);
        if (!have_header) {
            t.header = std::move(fields);
            have_header = true;
            continue;
        }
        if (fields.size() != t.header.size()) {
            throw InvalidInput("CSV line " + std::to_string(line_no) + ": expected " + std::to_string(t.header.size()) +
                               " fields, got " + std::to_string(fields.size()));
        }
        t.rows.push_back(std::move(fields));
    }
    if (!have_header) throw InvalidInput("CSV is empty");
    return t;
}

CsvTable read_csv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open CSV '" + path + "'");
    return read_csv(in);
}

std::string to_string(Scaling s) {
    switch (s) {
        case Scaling::unit_variance: return "unit_variance";
        case Scaling::standardize: return "standardize";
        case Scaling::none: return "none";
    }
    return "none";
}

Scaling scaling_from_string(const std::string& s) {
    if (s == "unit_variance") return Scaling::unit_variance;
    if (s == "standardize") return Scaling::standardize;
    if (s == "none") return Scaling::none;
    throw InvalidInput("unknown scaling '" + s + "'");
}

std::vector<Unit> load_units(const CsvTable& table, const RedesignSpec& spec) {
    if (spec.columns.empty()) throw InvalidInput("columns: at least one covariate column required");
    if (table.rows.empty()) throw InvalidInput("CSV has no data rows");
    const std::size_t n = table.rows.size();
    std::vector<std::vector<double>> cols;
    for (const auto& name : spec.columns) {
        auto v = table.numeric(name);
        if (spec.scaling != Scaling::none && n >= 2) {
            double mean = 0.0;
            for (double x : v) mean += x;
            mean /= static_cast<double>(n);
            double ss = 0.0;
            for (double x : v) ss += (x - mean) * (x - mean);
            const double sd = std::sqrt(ss / static_cast<double>(n - 1));
            const double shift = spec.scaling == Scaling::standardize ? mean : 0.0;
            const double factor = sd > 0.0 ? 1.0 / sd : 1.0;
            for (double& x : v) x = (x - shift) * factor;
        }
        cols.push_back(std::move(v));
    }
    std::vector<std::vector<double>> extra;
    for (const auto& name : spec.extra_columns) extra.push_back(table.numeric(name));
    std::vector<Unit> units(n);
    for (std::size_t r = 0; r < n; ++r) {
        for (const auto& c : cols) units[r].raw.push_back(c[r]);
        for (const auto& c : extra) units[r].extra.push_back(c[r]);
    }
    return units;
}

ExperimentResult redesign_from_table(const CsvTable& table, const RedesignSpec& spec, unsigned threads) {
    ExperimentSpec exp = spec.experiment;
    auto units = load_units(table, spec);
    const auto rows = static_cast<std::int64_t>(units.size());
    if (exp.sample_sizes.empty()) exp.sample_sizes = {rows};
    if (!spec.resample) {
        for (auto s : exp.sample_sizes) {
            if (s > rows) {
                throw InvalidInput("sample_sizes: prefix " + std::to_string(s) + " exceeds the " + std::to_string(rows) +
                                   " CSV rows");
            }
        }
    }
    exp.generator = spec.resample ? CovariateGenerator::resample(std::move(units)) : CovariateGenerator::sequence(std::move(units));
    exp.map = maps::FeatureMap::identity(spec.columns.size());
    return run_experiment(exp, threads);
}

ExperimentResult redesign_from_csv(const RedesignSpec& spec, unsigned threads) {
    return redesign_from_table(read_csv_file(spec.csv_path), spec, threads);
}

}  // namespace car::sim
