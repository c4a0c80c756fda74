#include "svc/pipeline.hpp"

#include <cstdio>
#include <exception>
#include <iostream>

#include "svc/errors.hpp"
#include "svc/report.hpp"
#include "svc/tensor_store.hpp"

namespace svc {

namespace {

struct LoadedInputs {
    TensorStore pretrained;
    std::vector<DeltaStore> deltas;
};

LoadedInputs load_inputs(const RunConfig& cfg) {
    if (cfg.pretrained_path.empty()) {
        throw UsageError("a pre-trained checkpoint path is required");
    }
    if (cfg.model_paths.empty()) {
        throw UsageError("at least one fine-tuned model path is required");
    }
    LoadedInputs inputs{load_checkpoint(cfg.pretrained_path), {}};
    inputs.deltas.reserve(cfg.model_paths.size());
    for (const auto& path : cfg.model_paths) {
        inputs.deltas.push_back(compute_deltas(inputs.pretrained, load_checkpoint(path)));
    }
    return inputs;
}

CalibrationConfig make_calibration(const RunConfig& cfg, std::size_t task_count) {
    CalibrationConfig calibration;
    calibration.alpha = cfg.alpha.value_or(1.0 / static_cast<double>(task_count));
    if (cfg.target_task) {
        calibration.mode = CalibrationMode::Preference;
        calibration.target_task = *cfg.target_task;
        if (calibration.target_task >= task_count) {
            throw UsageError("target task " + std::to_string(calibration.target_task) +
                             " out of range for " + std::to_string(task_count) + " models");
        }
    }
    calibration.basis = cfg.basis;
    return calibration;
}

void emit_report(const RunConfig& cfg, const char* command,
                 std::span<const DeltaStore> deltas, const MergedDelta& merged,
                 const CalibrationConfig& calibration, bool want_csv) {
    if (cfg.report_path.empty() && !want_csv) return;
    AnalysisReport report =
        analyze_store(deltas, merged, calibration, cfg.include, cfg.exclude, cfg.threads);
    report.command = command;
    report.lambda = cfg.lambda;
    if (!cfg.report_path.empty()) {
        write_text_atomic(report_to_json(report), cfg.report_path);
    }
    if (want_csv) {
        const std::string csv = report_to_csv(report);
        if (cfg.csv_path.empty()) {
            std::fwrite(csv.data(), 1, csv.size(), stdout);
        } else {
            write_text_atomic(csv, cfg.csv_path);
        }
    }
}

void print_parameter_summaries(const TensorStore& store) {
    for (std::size_t p = 0; p < store.size(); ++p) {
        const TensorEntry& entry = store.entry_at(p);
        std::string shape = "[";
        for (std::size_t d = 0; d < entry.shape.size(); ++d) {
            if (d > 0) shape += ',';
            shape += std::to_string(entry.shape[d]);
        }
        shape += ']';
        std::cout << store.name_at(p) << " shape=" << shape
                  << " dtype=" << dtype_name(entry.dtype) << " numel=" << entry.numel() << "\n";
    }
}

template <typename Fn>
int guarded(Fn&& fn) {
    try {
        fn();
        return 0;
    } catch (const Error& e) {
        std::cerr << "error: " << e.kind() << ": " << e.what() << std::endl;
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: Unexpected: " << e.what() << std::endl;
        return kExitData;
    }
}

}  // namespace

int run_merge(const RunConfig& cfg) {
    return guarded([&] {
        if (cfg.out_path.empty()) {
            throw UsageError("merge requires an output path");
        }
        LoadedInputs inputs = load_inputs(cfg);
        const MergedDelta base = merge_deltas(inputs.deltas, cfg.method);
        const CalibrationConfig calibration = make_calibration(cfg, inputs.deltas.size());

        MergedDelta final_delta =
            cfg.apply_svc
                ? calibrate_store(inputs.deltas, base, calibration, cfg.include, cfg.exclude,
                                  cfg.threads)
                : base;
        const TensorStore weights = assemble_weights(inputs.pretrained, final_delta, cfg.lambda);
        write_checkpoint(weights, cfg.out_path);
        emit_report(cfg, "merge", inputs.deltas, base, calibration, /*want_csv=*/false);
        if (cfg.verbose) print_parameter_summaries(weights);
    });
}

int run_analyze(const RunConfig& cfg) {
    return guarded([&] {
        LoadedInputs inputs = load_inputs(cfg);
        const MergedDelta merged = merge_deltas(inputs.deltas, cfg.method);
        const CalibrationConfig calibration = make_calibration(cfg, inputs.deltas.size());
        emit_report(cfg, "analyze", inputs.deltas, merged, calibration, /*want_csv=*/true);
        if (cfg.verbose) print_parameter_summaries(merged.deltas);
    });
}

int run_calibrate(const RunConfig& cfg) {
    return guarded([&] {
        if (cfg.merged_path.empty()) {
            throw UsageError("calibrate requires the merged checkpoint path");
        }
        if (cfg.out_path.empty()) {
            throw UsageError("calibrate requires an output path");
        }
        LoadedInputs inputs = load_inputs(cfg);

        MergedDelta merged;
        merged.method = cfg.method;
        merged.task_count = inputs.deltas.size();
        merged.deltas = compute_deltas(inputs.pretrained, load_checkpoint(cfg.merged_path));

        const CalibrationConfig calibration = make_calibration(cfg, inputs.deltas.size());
        const MergedDelta calibrated = calibrate_store(inputs.deltas, merged, calibration,
                                                       cfg.include, cfg.exclude, cfg.threads);
        const TensorStore weights = assemble_weights(inputs.pretrained, calibrated, cfg.lambda);
        write_checkpoint(weights, cfg.out_path);
        emit_report(cfg, "calibrate", inputs.deltas, merged, calibration, /*want_csv=*/false);
        if (cfg.verbose) print_parameter_summaries(weights);
    });
}

int run(const RunConfig& cfg) {
    switch (cfg.command) {
        case RunConfig::Command::Merge: return run_merge(cfg);
        case RunConfig::Command::Analyze: return run_analyze(cfg);
        case RunConfig::Command::Calibrate: return run_calibrate(cfg);
    }
    std::cerr << "error: UsageError: unknown command" << std::endl;
    return kExitUsage;
}

}  // namespace svc
