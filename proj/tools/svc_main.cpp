// Merges fine-tuned checkpoints in weight space and calibrates the singular
// values of the merged update. Subcommands: merge, analyze, calibrate.

#include <map>
#include <string>

#include <CLI11.hpp>

#include "svc/pipeline.hpp"

namespace {

void add_common_options(CLI::App* cmd, svc::RunConfig& cfg, std::string& method,
                        std::string& dare_base, bool with_merge_knobs) {
    cmd->add_option("--pretrained", cfg.pretrained_path, "Pre-trained checkpoint")->required();
    cmd->add_option("models", cfg.model_paths, "Fine-tuned checkpoints, in task order")
        ->required();
    if (with_merge_knobs) {
        cmd->add_option("--method", method, "Base merge: sum, average, ties, dare")
            ->check(CLI::IsMember({"sum", "average", "ties", "dare"}));
        cmd->add_option("--ties-trim", cfg.method.ties_trim_fraction,
                        "TIES: fraction of entries kept per task, in (0,1]")
            ->check(CLI::Range(1e-12, 1.0));
        cmd->add_option("--dare-drop", cfg.method.dare_drop_rate,
                        "DARE: per-entry drop probability, in [0,1)")
            ->check(CLI::Range(0.0, 1.0 - 1e-12));
        cmd->add_option("--dare-base", dare_base, "DARE: base merge, sum or average")
            ->check(CLI::IsMember({"sum", "average"}));
        cmd->add_option("--seed", cfg.method.seed, "Seed for randomized merges");
    }
    cmd->add_option("--alpha", cfg.alpha, "Calibration floor in (0,1]; default 1/K")
        ->check(CLI::Range(1e-12, 1.0));
    cmd->add_option("--target-task", cfg.target_task,
                    "Calibrate for this task only (0-based index)");
    cmd->add_flag_callback(
        "--row-space", [&cfg] { cfg.basis = svc::ResponseBasis::RowSpace; },
        "Measure overlap with right singular vectors instead of left");
    cmd->add_option("--include", cfg.include, "Calibrate only parameters matching these globs");
    cmd->add_option("--exclude", cfg.exclude, "Never calibrate parameters matching these globs");
    cmd->add_option("--report", cfg.report_path, "Write the JSON diagnostic report here");
    cmd->add_option("--threads", cfg.threads, "Worker threads (0 = hardware)");
    cmd->add_flag("--verbose", cfg.verbose, "Print a per-parameter summary line");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Weight-space model merging with singular value calibration"};
    app.require_subcommand(1);

    svc::RunConfig cfg;
    std::string method = "sum";
    std::string dare_base = "sum";

    CLI::App* merge = app.add_subcommand("merge", "Merge checkpoints into one");
    add_common_options(merge, cfg, method, dare_base, /*with_merge_knobs=*/true);
    merge->add_option("--out", cfg.out_path, "Output checkpoint path")->required();
    merge->add_flag("--svc", cfg.apply_svc, "Calibrate singular values after the base merge");
    merge->add_option("--lambda", cfg.lambda, "Scale applied to the merged update");

    CLI::App* analyze = app.add_subcommand("analyze", "Report subspace overlap diagnostics");
    add_common_options(analyze, cfg, method, dare_base, /*with_merge_knobs=*/true);
    analyze->add_option("--csv", cfg.csv_path, "Write the flat CSV here (default: stdout)");

    CLI::App* calibrate =
        app.add_subcommand("calibrate", "Calibrate a previously merged checkpoint");
    add_common_options(calibrate, cfg, method, dare_base, /*with_merge_knobs=*/false);
    calibrate->add_option("--merged", cfg.merged_path, "Merged checkpoint to calibrate")
        ->required();
    calibrate->add_option("--out", cfg.out_path, "Output checkpoint path")->required();
    calibrate->add_option("--lambda", cfg.lambda, "Scale applied to the calibrated update");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    static const std::map<std::string, svc::MergeTag> kMethods = {
        {"sum", svc::MergeTag::Sum},
        {"average", svc::MergeTag::Average},
        {"ties", svc::MergeTag::Ties},
        {"dare", svc::MergeTag::Dare},
    };
    cfg.method.tag = kMethods.at(method);
    cfg.method.dare_base = dare_base == "average" ? svc::DareBase::Average : svc::DareBase::Sum;

    if (merge->parsed()) {
        cfg.command = svc::RunConfig::Command::Merge;
    } else if (analyze->parsed()) {
        cfg.command = svc::RunConfig::Command::Analyze;
    } else {
        cfg.command = svc::RunConfig::Command::Calibrate;
    }
    return svc::run(cfg);
}
