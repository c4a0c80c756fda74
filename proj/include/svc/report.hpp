#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "svc/calibrate.hpp"
#include "svc/merge.hpp"
#include "svc/spectral.hpp"

namespace svc {

struct VectorAnalysis {
    std::vector<double> s;         // 0 when not retained
    std::vector<bool> retained;
    double gamma = 1.0;
};

struct MatrixAnalysis {
    std::size_t rows = 0;  // flattened orientation
    std::size_t cols = 0;
    SubspaceOverlapReport overlap;
    std::vector<CrossTermMatrix> cross_terms;  // per subspace
    std::vector<double> gamma;                 // calibration factor per subspace
};

struct ParameterAnalysis {
    std::string name;
    std::vector<std::uint64_t> shape;
    std::string kind;  // matrix | vector | scalar | empty | excluded
    std::optional<MatrixAnalysis> matrix;
    std::optional<VectorAnalysis> vec;
};

struct AnalysisReport {
    std::string command;
    MergeMethod method;
    std::size_t tasks = 0;
    CalibrationConfig calibration;
    double lambda = 1.0;
    std::vector<ParameterAnalysis> parameters;  // sorted by name
};

AnalysisReport analyze_store(std::span<const DeltaStore> task_deltas, const MergedDelta& merged,
                             const CalibrationConfig& cfg, std::span<const std::string> include,
                             std::span<const std::string> exclude, unsigned threads);

// Versioned JSON document ("schema": 1).
std::string report_to_json(const AnalysisReport& report);

// Flat rows: parameter,r,sigma,sigma_star,gap,gamma,min_s,max_s,mean_s.
std::string report_to_csv(const AnalysisReport& report);

void write_text_atomic(const std::string& text, const std::filesystem::path& path);

}  // namespace svc
