#include "svc/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "svc/errors.hpp"
#include "svc/glob.hpp"
#include "svc/parallel.hpp"

namespace svc {

using nlohmann::json;

namespace {

ParameterAnalysis analyze_parameter(const std::string& name, const TensorEntry& entry,
                                    std::span<const DeltaStore> task_deltas,
                                    const CalibrationConfig& cfg, bool selected) {
    ParameterAnalysis out;
    out.name = name;
    out.shape = entry.shape;
    if (!selected) {
        out.kind = "excluded";
        return out;
    }
    if (entry.numel() == 0) {
        out.kind = "empty";
        return out;
    }
    if (entry.shape.empty()) {
        out.kind = "scalar";
        return out;
    }

    std::vector<std::vector<double>> task_values;
    task_values.reserve(task_deltas.size());
    for (std::size_t i = 0; i < task_deltas.size(); ++i) {
        task_values.push_back(task_deltas[i].at(name).as_f64());
    }

    if (entry.shape.size() == 1) {
        out.kind = "vector";
        VectorAnalysis vec;
        vec.s.assign(task_deltas.size(), 0.0);
        vec.retained.assign(task_deltas.size(), false);
        const std::vector<double> merged_vec = entry.as_f64();
        std::vector<double> retained_s;
        for (std::size_t i = 0; i < task_values.size(); ++i) {
            const double norm_sq = norm2_sq(task_values[i]);
            const double floor = cfg.response_eps * std::max(1.0, std::sqrt(norm_sq));
            if (std::sqrt(norm_sq) <= floor) continue;
            vec.retained[i] = true;
            vec.s[i] = dot(merged_vec, task_values[i]) / norm_sq;
            retained_s.push_back(vec.s[i]);
        }
        if (cfg.mode == CalibrationMode::Preference) {
            vec.gamma = vec.retained[cfg.target_task]
                            ? 1.0 / std::max(cfg.alpha, vec.s[cfg.target_task])
                            : 1.0;
        } else if (!retained_s.empty()) {
            vec.gamma = calibration_factor(retained_s, cfg.alpha);
        }
        out.vec = std::move(vec);
        return out;
    }

    out.kind = "matrix";
    MatrixAnalysis analysis;
    std::size_t cols = 1;
    for (std::size_t d = 1; d < entry.shape.size(); ++d) {
        cols *= static_cast<std::size_t>(entry.shape[d]);
    }
    analysis.rows = static_cast<std::size_t>(entry.shape[0]);
    analysis.cols = cols;

    std::vector<Matrix> flats;
    flats.reserve(task_values.size());
    for (auto& values : task_values) {
        flats.emplace_back(analysis.rows, analysis.cols, std::move(values));
    }
    const Matrix merged_flat(analysis.rows, analysis.cols, entry.as_f64());

    const SpectralDecomposition decomp = svd(merged_flat, cfg.svd);
    analysis.overlap = gap_report(decomp, flats, cfg.response_eps, cfg.noise_floor);

    // Cross terms per subspace, from the same column-space responses.
    std::vector<double> u_col(analysis.rows);
    std::vector<SubspaceResponse> responses(flats.size());
    for (std::size_t r = 0; r < decomp.rank(); ++r) {
        for (std::size_t i = 0; i < analysis.rows; ++i) u_col[i] = decomp.u(i, r);
        for (std::size_t i = 0; i < flats.size(); ++i) {
            responses[i] = subspace_response(u_col, flats[i], r + 1, static_cast<int>(i));
        }
        analysis.cross_terms.push_back(cross_term_matrix(responses));
    }

    // The gamma the configured calibration would apply.
    const CalibrationResult calibrated = calibrate_matrix(flats, merged_flat, cfg);
    analysis.gamma = calibrated.gamma;

    out.matrix = std::move(analysis);
    return out;
}

}  // namespace

AnalysisReport analyze_store(std::span<const DeltaStore> task_deltas, const MergedDelta& merged,
                             const CalibrationConfig& cfg, std::span<const std::string> include,
                             std::span<const std::string> exclude, unsigned threads) {
    if (task_deltas.empty()) {
        throw EmptyTaskList("analysis needs at least one task delta store");
    }
    cfg.validate(task_deltas.size());

    AnalysisReport report;
    report.method = merged.method;
    report.tasks = merged.task_count;
    report.calibration = cfg;

    std::vector<std::size_t> order(merged.deltas.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return merged.deltas.name_at(a) < merged.deltas.name_at(b);
    });

    report.parameters.resize(order.size());
    parallel_for(order.size(), threads, [&](std::size_t k) {
        const std::size_t p = order[k];
        const std::string& name = merged.deltas.name_at(p);
        const bool selected = selected_by_patterns(name, include, exclude);
        try {
            report.parameters[k] = analyze_parameter(name, merged.deltas.entry_at(p), task_deltas,
                                                     cfg, selected);
        } catch (const Error& e) {
            throw Error(e.kind(), "parameter '" + name + "': " + e.what(), e.exit_code());
        }
    });
    return report;
}

namespace {

json stats_to_json(const SubspaceStats& stats, const CrossTermMatrix& cross, double gamma,
                   std::size_t r) {
    json row;
    row["r"] = r;
    row["sigma"] = stats.sigma;
    row["sigma_star"] = stats.sigma_star;
    row["gap"] = stats.gap;
    row["gamma"] = gamma;
    row["below_noise_floor"] = stats.below_noise_floor;
    row["s"] = stats.s;
    row["gamma_opt"] = stats.gamma_opt;
    row["interference"] = stats.interference;
    row["response_norm_sq"] = stats.response_norm_sq;
    row["retained"] = stats.retained;
    json terms = json::array();
    for (std::size_t i = 0; i < cross.tasks; ++i) {
        json term_row = json::array();
        for (std::size_t j = 0; j < cross.tasks; ++j) term_row.push_back(cross.at(i, j));
        terms.push_back(std::move(term_row));
    }
    row["cross_terms"] = std::move(terms);
    return row;
}

std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    char buffer[64];
    const auto [ptr, ec] = std::to_chars(buffer, buffer + sizeof(buffer), v);
    return std::string(buffer, ptr);
}

std::string csv_escape(const std::string& field) {
    if (field.find_first_of(",\"\n\r") == std::string::npos) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

}  // namespace

std::string report_to_json(const AnalysisReport& report) {
    json doc;
    doc["schema"] = 1;
    doc["command"] = report.command;
    doc["method"] = std::string(merge_tag_name(report.method.tag));
    if (report.method.tag == MergeTag::Ties) {
        doc["ties_trim_fraction"] = report.method.ties_trim_fraction;
    }
    if (report.method.tag == MergeTag::Dare) {
        doc["dare_drop_rate"] = report.method.dare_drop_rate;
        doc["dare_base"] =
            report.method.dare_base == DareBase::Sum ? "sum" : "average";
    }
    doc["seed"] = report.method.seed;
    doc["tasks"] = report.tasks;
    doc["alpha"] = report.calibration.alpha;
    doc["mode"] =
        report.calibration.mode == CalibrationMode::Preference ? "preference" : "aggregate";
    if (report.calibration.mode == CalibrationMode::Preference) {
        doc["target_task"] = report.calibration.target_task;
    }
    doc["basis"] = report.calibration.basis == ResponseBasis::RowSpace ? "row" : "column";
    doc["epsilon_resp"] = report.calibration.response_eps;
    doc["sigma_noise_floor"] = report.calibration.noise_floor;
    doc["lambda"] = report.lambda;

    json params(json::value_t::object);
    for (const ParameterAnalysis& param : report.parameters) {
        json entry;
        entry["shape"] = param.shape;
        entry["kind"] = param.kind;
        if (param.matrix) {
            entry["rows"] = param.matrix->rows;
            entry["cols"] = param.matrix->cols;
            entry["rank"] = param.matrix->overlap.subspaces.size();
            entry["task_delta_fro"] = param.matrix->overlap.task_delta_fro;
            json subspaces = json::array();
            for (std::size_t r = 0; r < param.matrix->overlap.subspaces.size(); ++r) {
                subspaces.push_back(stats_to_json(param.matrix->overlap.subspaces[r],
                                                  param.matrix->cross_terms[r],
                                                  param.matrix->gamma[r], r + 1));
            }
            entry["subspaces"] = std::move(subspaces);
        }
        if (param.vec) {
            entry["s"] = param.vec->s;
            entry["retained"] = param.vec->retained;
            entry["gamma"] = param.vec->gamma;
        }
        params[param.name] = std::move(entry);
    }
    doc["parameters"] = std::move(params);
    return doc.dump();
}

std::string report_to_csv(const AnalysisReport& report) {
    std::string out = "parameter,r,sigma,sigma_star,gap,gamma,min_s,max_s,mean_s\n";
    for (const ParameterAnalysis& param : report.parameters) {
        if (!param.matrix) continue;
        const auto& subspaces = param.matrix->overlap.subspaces;
        for (std::size_t r = 0; r < subspaces.size(); ++r) {
            const SubspaceStats& stats = subspaces[r];
            double min_s = std::numeric_limits<double>::quiet_NaN();
            double max_s = min_s;
            double mean_s = min_s;
            std::vector<double> retained_s;
            for (std::size_t i = 0; i < stats.s.size(); ++i) {
                if (stats.retained[i]) retained_s.push_back(stats.s[i]);
            }
            if (!retained_s.empty()) {
                min_s = *std::min_element(retained_s.begin(), retained_s.end());
                max_s = *std::max_element(retained_s.begin(), retained_s.end());
                mean_s = ordered_sum(retained_s) / static_cast<double>(retained_s.size());
            }
            out += csv_escape(param.name);
            out += ',' + std::to_string(r + 1);
            out += ',' + format_double(stats.sigma);
            out += ',' + format_double(stats.sigma_star);
            out += ',' + format_double(stats.gap);
            out += ',' + format_double(param.matrix->gamma[r]);
            out += ',' + format_double(min_s);
            out += ',' + format_double(max_s);
            out += ',' + format_double(mean_s);
            out += '\n';
        }
    }
    return out;
}

void write_text_atomic(const std::string& text, const std::filesystem::path& path) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream file(tmp, std::ios::binary | std::ios::trunc);
        if (!file) {
            throw IoFailure("cannot open '" + tmp.string() + "' for writing");
        }
        file.write(text.data(), static_cast<std::streamsize>(text.size()));
        if (!file) {
            std::error_code ec;
            std::filesystem::remove(tmp, ec);
            throw IoFailure("write failed for '" + tmp.string() + "'");
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw IoFailure("cannot rename '" + tmp.string() + "' to '" + path.string() + "'");
    }
}

}  // namespace svc
