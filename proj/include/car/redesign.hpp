// redesign.hpp
#pragma once
#include <string>
#include <vector>

#include "car/simlab.hpp"

namespace car::sim {

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name) const;
    // Numeric values of one column; throws InvalidInput naming row and column.
    std::vector<double> numeric(const std::string& name) const;
};

CsvTable read_csv(std::istream& in);
CsvTable read_csv_file(const std::string& path);

enum class Scaling { unit_variance, standardize, none };

std::string to_string(Scaling s);
Scaling scaling_from_string(const std::string& s);

struct RedesignSpec {
    std::string csv_path;
    std::vector<std::string> columns;        // key covariates, balanced in this order
    std::vector<std::string> extra_columns;  // read by additional covariates with use_extra
    Scaling scaling = Scaling::unit_variance;
    bool resample = false;  // draw rows with replacement instead of using enrollment order
    // rho, policies, sample sizes (prefix lengths), replications, additional,
    // seed. generator and map are filled from the CSV.
    ExperimentSpec experiment;
};

// Scaled rows ready for a generator; scale factors use the sample SD (n - 1)
// and leave constant columns unscaled.
std::vector<Unit> load_units(const CsvTable& table, const RedesignSpec& spec);

ExperimentResult redesign_from_csv(const RedesignSpec& spec, unsigned threads = 0);
ExperimentResult redesign_from_table(const CsvTable& table, const RedesignSpec& spec, unsigned threads = 0);

}  // namespace car::sim
