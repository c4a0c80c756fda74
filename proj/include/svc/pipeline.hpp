#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "svc/calibrate.hpp"
#include "svc/merge.hpp"

namespace svc {

// One CLI invocation. Identical configs produce byte-identical outputs.
struct RunConfig {
    enum class Command { Merge, Analyze, Calibrate };

    Command command = Command::Merge;
    std::filesystem::path pretrained_path;
    std::vector<std::filesystem::path> model_paths;  // task order
    std::filesystem::path merged_path;               // calibrate input
    std::filesystem::path out_path;
    std::filesystem::path report_path;
    std::filesystem::path csv_path;
    MergeMethod method;
    bool apply_svc = false;
    std::optional<double> alpha;  // default 1/K
    std::optional<std::size_t> target_task;
    ResponseBasis basis = ResponseBasis::ColumnSpace;
    double lambda = 1.0;
    std::vector<std::string> include;
    std::vector<std::string> exclude;
    bool verbose = false;
    unsigned threads = 0;  // 0 = hardware
};

// Each returns a process exit status: 0 success, 1 usage error, 2 data error,
// 3 numerical failure. Failures print one machine-parsable line to stderr
// ("error: <Kind>: <message>") and never leave partial output files behind.
int run_merge(const RunConfig& cfg);
int run_analyze(const RunConfig& cfg);
int run_calibrate(const RunConfig& cfg);

int run(const RunConfig& cfg);

}  // namespace svc
