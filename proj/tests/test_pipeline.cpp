#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "support/test_helpers.hpp"
#include "svc/pipeline.hpp"
#include "svc/report.hpp"
#include "svc/tensor_store.hpp"

using namespace svc;
namespace fs = std::filesystem;
using svctest::TestRng;

namespace {

struct TempDir {
    fs::path path;

    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

TensorStore make_pretrained(TestRng& rng, Dtype dtype = Dtype::F32) {
    TensorStore store;
    store.add("layer0.weight",
              TensorEntry::from_f64(dtype, {6, 4}, svctest::random_vector(rng, 24)));
    store.add("layer1.weight",
              TensorEntry::from_f64(dtype, {8, 3}, svctest::random_vector(rng, 24)));
    store.add("layer1.bias", TensorEntry::from_f64(dtype, {5}, svctest::random_vector(rng, 5)));
    return store;
}

TensorStore perturbed(const TensorStore& base, TestRng& rng, double scale = 0.5) {
    TensorStore out;
    for (std::size_t p = 0; p < base.size(); ++p) {
        const TensorEntry& entry = base.entry_at(p);
        std::vector<double> values = entry.as_f64();
        for (double& v : values) v += rng.uniform(-scale, scale);
        out.add(base.name_at(p), TensorEntry::from_f64(entry.dtype, entry.shape, values));
    }
    return out;
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
    std::ifstream file(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(file), std::istreambuf_iterator<char>()};
}

double max_rel_diff(const TensorStore& a, const TensorStore& b) {
    double worst = 0.0;
    for (std::size_t p = 0; p < a.size(); ++p) {
        const auto va = a.entry_at(p).as_f64();
        const auto vb = b.at(a.name_at(p)).as_f64();
        for (std::size_t e = 0; e < va.size(); ++e) {
            const double denom = std::max({1.0, std::abs(va[e]), std::abs(vb[e])});
            worst = std::max(worst, std::abs(va[e] - vb[e]) / denom);
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("merge of one model with svc is a no-op chain") {
    TempDir dir("svc-pipe-single");
    TestRng rng(3);
    const TensorStore pre = make_pretrained(rng);
    const TensorStore ft = perturbed(pre, rng);
    write_checkpoint(pre, dir.path / "pre.st");
    write_checkpoint(ft, dir.path / "ft.st");

    RunConfig cfg;
    cfg.command = RunConfig::Command::Merge;
    cfg.pretrained_path = dir.path / "pre.st";
    cfg.model_paths = {dir.path / "ft.st"};
    cfg.out_path = dir.path / "out.st";
    cfg.apply_svc = true;
    cfg.alpha = 0.5;
    REQUIRE(run_merge(cfg) == 0);

    const TensorStore out = load_checkpoint(dir.path / "out.st");
    CHECK(max_rel_diff(out, ft) <= 1e-6);
}

TEST_CASE("merging two identical models with svc recovers one of them") {
    TempDir dir("svc-pipe-dup");
    TestRng rng(5);
    const TensorStore pre = make_pretrained(rng);
    const TensorStore ft = perturbed(pre, rng);
    write_checkpoint(pre, dir.path / "pre.st");
    write_checkpoint(ft, dir.path / "ft.st");

    RunConfig cfg;
    cfg.command = RunConfig::Command::Merge;
    cfg.pretrained_path = dir.path / "pre.st";
    cfg.model_paths = {dir.path / "ft.st", dir.path / "ft.st"};
    cfg.out_path = dir.path / "out.st";
    cfg.apply_svc = true;
    cfg.alpha = 0.5;
    REQUIRE(run_merge(cfg) == 0);

    CHECK(max_rel_diff(load_checkpoint(dir.path / "out.st"), ft) <= 1e-6);
}

TEST_CASE("lambda zero returns the pre-trained checkpoint") {
    TempDir dir("svc-pipe-lambda0");
    TestRng rng(7);
    const TensorStore pre = make_pretrained(rng);
    const TensorStore ft = perturbed(pre, rng);
    write_checkpoint(pre, dir.path / "pre.st");
    write_checkpoint(ft, dir.path / "ft.st");

    RunConfig cfg;
    cfg.command = RunConfig::Command::Merge;
    cfg.pretrained_path = dir.path / "pre.st";
    cfg.model_paths = {dir.path / "ft.st"};
    cfg.out_path = dir.path / "out.st";
    cfg.lambda = 0.0;
    REQUIRE(run_merge(cfg) == 0);

    CHECK(load_checkpoint(dir.path / "out.st") == pre);
}

TEST_CASE("identical configs produce byte-identical outputs") {
    TempDir dir("svc-pipe-determinism");
    TestRng rng(9);
    const TensorStore pre = make_pretrained(rng);
    write_checkpoint(pre, dir.path / "pre.st");
    write_checkpoint(perturbed(pre, rng), dir.path / "m1.st");
    write_checkpoint(perturbed(pre, rng), dir.path / "m2.st");

    RunConfig cfg;
    cfg.command = RunConfig::Command::Merge;
    cfg.pretrained_path = dir.path / "pre.st";
    cfg.model_paths = {dir.path / "m1.st", dir.path / "m2.st"};
    cfg.method.tag = MergeTag::Dare;
    cfg.method.dare_drop_rate = 0.4;
    cfg.method.seed = 42;
    cfg.apply_svc = true;
    cfg.report_path = dir.path / "report.json";

    cfg.out_path = dir.path / "out1.st";
    cfg.threads = 1;
    REQUIRE(run_merge(cfg) == 0);
    const auto bytes1 = read_bytes(dir.path / "out1.st");
    const auto report1 = read_bytes(dir.path / "report.json");

    cfg.out_path = dir.path / "out2.st";
    cfg.threads = 4;
    REQUIRE(run_merge(cfg) == 0);
    CHECK(read_bytes(dir.path / "out2.st") == bytes1);
    CHECK(read_bytes(dir.path / "report.json") == report1);
}

TEST_CASE("analyze emits a schema-1 report whose invariants re-check") {
    TempDir dir("svc-pipe-analyze");
    TestRng rng(11);
    const TensorStore pre = make_pretrained(rng);
    write_checkpoint(pre, dir.path / "pre.st");
    write_checkpoint(perturbed(pre, rng), dir.path / "m1.st");
    write_checkpoint(perturbed(pre, rng), dir.path / "m2.st");

    RunConfig cfg;
    cfg.command = RunConfig::Command::Analyze;
    cfg.pretrained_path = dir.path / "pre.st";
    cfg.model_paths = {dir.path / "m1.st", dir.path / "m2.st"};
    cfg.report_path = dir.path / "report.json";
    cfg.csv_path = dir.path / "report.csv";
    REQUIRE(run_analyze(cfg) == 0);

    std::ifstream file(dir.path / "report.json");
    const nlohmann::json doc = nlohmann::json::parse(file);
    CHECK(doc.at("schema") == 1);
    CHECK(doc.at("tasks") == 2);
    CHECK(doc.at("alpha") == doctest::Approx(0.5));
    REQUIRE(doc.at("parameters").is_object());

    for (const auto& [name, param] : doc.at("parameters").items()) {
        if (param.at("kind") != "matrix") continue;
        for (const auto& row : param.at("subspaces")) {
            const double sigma = row.at("sigma");
            const double sigma_star = row.at("sigma_star");
            const double gap = row.at("gap");
            CHECK(std::abs(gap - (sigma - sigma_star)) <= 1e-12 * std::max(1.0, sigma));
            for (const double i_e : row.at("interference").get<std::vector<double>>()) {
                CHECK(i_e >= 0.0);
            }
            for (const double g : row.at("gamma_opt").get<std::vector<double>>()) {
                CHECK(g >= 0.0);
            }
            const auto cross = row.at("cross_terms");
            const auto norms = row.at("response_norm_sq").get<std::vector<double>>();
            const auto retained = row.at("retained").get<std::vector<bool>>();
            REQUIRE(cross.size() == 2);
            for (std::size_t i = 0; i < 2; ++i) {
                CHECK(std::abs(cross[i][i].get<double>() - norms[i]) <=
                      1e-12 * std::max(1.0, norms[i]));
                for (std::size_t j = 0; j < 2; ++j) {
                    CHECK(cross[i][j].get<double>() == cross[j][i].get<double>());
                }
            }
            CHECK(retained.size() == 2);
        }
    }

    // CSV header is pinned.
    std::ifstream csv(dir.path / "report.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "parameter,r,sigma,sigma_star,gap,gamma,min_s,max_s,mean_s");
}

TEST_CASE("analyze gaps: zero for K=1, sigma/2 for duplicates") {
    TempDir dir("svc-pipe-gaps");
    TestRng rng(13);
    const TensorStore pre = make_pretrained(rng);
    const TensorStore ft = perturbed(pre, rng);
    write_checkpoint(pre, dir.path / "pre.st");
    write_checkpoint(ft, dir.path / "ft.st");

    RunConfig cfg;
    cfg.command = RunConfig::Command::Analyze;
    cfg.pretrained_path = dir.path / "pre.st";
    cfg.model_paths = {dir.path / "ft.st"};
    cfg.report_path = dir.path / "single.json";
    REQUIRE(run_analyze(cfg) == 0);

    auto gaps_of = [&](const fs::path& path) {
        std::ifstream file(path);
        const nlohmann::json doc = nlohmann::json::parse(file);
        std::vector<std::pair<double, double>> out;  // (sigma, gap)
        for (const auto& [name, param] : doc.at("parameters").items()) {
            if (param.at("kind") != "matrix") continue;
            for (const auto& row : param.at("subspaces")) {
                if (row.at("below_noise_floor").get<bool>()) continue;
                out.emplace_back(row.at("sigma").get<double>(), row.at("gap").get<double>());
            }
        }
        return out;
    };
    for (const auto& [sigma, gap] : gaps_of(dir.path / "single.json")) {
        CHECK(std::abs(gap) <= 1e-9 * std::max(1.0, sigma));
    }

    cfg.model_paths = {dir.path / "ft.st", dir.path / "ft.st"};
    cfg.report_path = dir.path / "dup.json";
    REQUIRE(run_analyze(cfg) == 0);
    for (const auto& [sigma, gap] : gaps_of(dir.path / "dup.json")) {
        CHECK(gap == doctest::Approx(sigma / 2.0).epsilon(1e-8));
    }
}

TEST_CASE("calibrate subcommand matches merge --svc") {
    TempDir dir("svc-pipe-calibrate");
    TestRng rng(17);
    const TensorStore pre = make_pretrained(rng, Dtype::F64);
    write_checkpoint(pre, dir.path / "pre.st");
    write_checkpoint(perturbed(pre, rng), dir.path / "m1.st");
    write_checkpoint(perturbed(pre, rng), dir.path / "m2.st");

    RunConfig base;
    base.pretrained_path = dir.path / "pre.st";
    base.model_paths = {dir.path / "m1.st", dir.path / "m2.st"};

    // Plain sum merge, no calibration.
    RunConfig plain = base;
    plain.command = RunConfig::Command::Merge;
    plain.out_path = dir.path / "merged.st";
    REQUIRE(run_merge(plain) == 0);

    // Same merge with calibration applied inline.
    RunConfig svc_merge = base;
    svc_merge.command = RunConfig::Command::Merge;
    svc_merge.apply_svc = true;
    svc_merge.out_path = dir.path / "merged-svc.st";
    REQUIRE(run_merge(svc_merge) == 0);

    // Calibrating the plain merge afterwards is equivalent.
    RunConfig post = base;
    post.command = RunConfig::Command::Calibrate;
    post.merged_path = dir.path / "merged.st";
    post.out_path = dir.path / "calibrated.st";
    REQUIRE(run_calibrate(post) == 0);

    CHECK(max_rel_diff(load_checkpoint(dir.path / "calibrated.st"),
                       load_checkpoint(dir.path / "merged-svc.st")) <= 1e-9);
}

TEST_CASE("calibrate with everything excluded reproduces the merged input") {
    TempDir dir("svc-pipe-excluded");
    TestRng rng(19);
    const TensorStore pre = make_pretrained(rng, Dtype::F32);
    write_checkpoint(pre, dir.path / "pre.st");
    write_checkpoint(perturbed(pre, rng), dir.path / "m1.st");
    write_checkpoint(perturbed(pre, rng), dir.path / "m2.st");

    RunConfig merge_cfg;
    merge_cfg.command = RunConfig::Command::Merge;
    merge_cfg.pretrained_path = dir.path / "pre.st";
    merge_cfg.model_paths = {dir.path / "m1.st", dir.path / "m2.st"};
    merge_cfg.out_path = dir.path / "merged.st";
    REQUIRE(run_merge(merge_cfg) == 0);

    RunConfig post = merge_cfg;
    post.command = RunConfig::Command::Calibrate;
    post.merged_path = dir.path / "merged.st";
    post.out_path = dir.path / "calibrated.st";
    post.exclude = {"*"};
    REQUIRE(run_calibrate(post) == 0);

    CHECK(load_checkpoint(dir.path / "calibrated.st") ==
          load_checkpoint(dir.path / "merged.st"));
}

TEST_CASE("error paths exit nonzero and never leave partial outputs") {
    TempDir dir("svc-pipe-errors");

    SUBCASE("missing pre-trained file is a data error") {
        RunConfig cfg;
        cfg.command = RunConfig::Command::Merge;
        cfg.pretrained_path = dir.path / "absent.st";
        cfg.model_paths = {dir.path / "absent2.st"};
        cfg.out_path = dir.path / "out.st";
        CHECK(run_merge(cfg) == 2);
        CHECK(!fs::exists(dir.path / "out.st"));
    }
    SUBCASE("missing output path is a usage error") {
        TestRng rng(23);
        const TensorStore pre = make_pretrained(rng);
        write_checkpoint(pre, dir.path / "pre.st");
        RunConfig cfg;
        cfg.command = RunConfig::Command::Merge;
        cfg.pretrained_path = dir.path / "pre.st";
        cfg.model_paths = {dir.path / "pre.st"};
        CHECK(run_merge(cfg) == 1);
    }
    SUBCASE("out-of-range target task is a usage error") {
        TestRng rng(29);
        const TensorStore pre = make_pretrained(rng);
        write_checkpoint(pre, dir.path / "pre.st");
        write_checkpoint(perturbed(pre, rng), dir.path / "m1.st");
        RunConfig cfg;
        cfg.command = RunConfig::Command::Merge;
        cfg.pretrained_path = dir.path / "pre.st";
        cfg.model_paths = {dir.path / "m1.st"};
        cfg.out_path = dir.path / "out.st";
        cfg.apply_svc = true;
        cfg.target_task = 5;
        CHECK(run_merge(cfg) == 1);
        CHECK(!fs::exists(dir.path / "out.st"));
    }
    SUBCASE("non-finite weights are a numerical failure") {
        TestRng rng(41);
        const TensorStore pre = make_pretrained(rng);
        write_checkpoint(pre, dir.path / "pre.st");
        TensorStore inf_model = pre;
        {
            TensorStore rebuilt;
            for (std::size_t p = 0; p < pre.size(); ++p) {
                TensorEntry entry = pre.entry_at(p);
                std::vector<double> values = entry.as_f64();
                values[0] = std::numeric_limits<double>::infinity();
                rebuilt.add(pre.name_at(p),
                            TensorEntry::from_f64(entry.dtype, entry.shape, values));
            }
            inf_model = rebuilt;
        }
        write_checkpoint(inf_model, dir.path / "inf.st");
        RunConfig cfg;
        cfg.command = RunConfig::Command::Merge;
        cfg.pretrained_path = dir.path / "pre.st";
        cfg.model_paths = {dir.path / "inf.st"};
        cfg.out_path = dir.path / "out.st";
        CHECK(run_merge(cfg) == 3);
        CHECK(!fs::exists(dir.path / "out.st"));
    }
    SUBCASE("mismatched checkpoints are a data error") {
        TestRng rng(31);
        const TensorStore pre = make_pretrained(rng);
        write_checkpoint(pre, dir.path / "pre.st");
        TensorStore other;
        other.add("unrelated", TensorEntry::from_f64(Dtype::F32, {2}, {1.0, 2.0}));
        write_checkpoint(other, dir.path / "other.st");
        RunConfig cfg;
        cfg.command = RunConfig::Command::Merge;
        cfg.pretrained_path = dir.path / "pre.st";
        cfg.model_paths = {dir.path / "other.st"};
        cfg.out_path = dir.path / "out.st";
        CHECK(run_merge(cfg) == 2);
        CHECK(!fs::exists(dir.path / "out.st"));
    }
}

TEST_CASE("preference mode restricted to the target's column space") {
    // Two tasks on disjoint diagonal blocks; calibrating for task 0 leaves
    // the rows spanned by task 0's column space equal to task 0's delta.
    TempDir dir("svc-pipe-preference");
    TestRng rng(37);
    const auto blocks = svctest::block_diagonal_pair(rng, 3, 4, 3, 4);

    TensorStore pre;
    pre.add("w", TensorEntry::from_f64(Dtype::F64, {6, 8}, std::vector<double>(48, 0.0)));
    TensorStore m1;
    m1.add("w", TensorEntry::from_f64(Dtype::F64, {6, 8},
                                      {blocks[0].values().begin(), blocks[0].values().end()}));
    TensorStore m2;
    m2.add("w", TensorEntry::from_f64(Dtype::F64, {6, 8},
                                      {blocks[1].values().begin(), blocks[1].values().end()}));
    write_checkpoint(pre, dir.path / "pre.st");
    write_checkpoint(m1, dir.path / "m1.st");
    write_checkpoint(m2, dir.path / "m2.st");

    RunConfig merge_cfg;
    merge_cfg.command = RunConfig::Command::Merge;
    merge_cfg.pretrained_path = dir.path / "pre.st";
    merge_cfg.model_paths = {dir.path / "m1.st", dir.path / "m2.st"};
    merge_cfg.out_path = dir.path / "merged.st";
    REQUIRE(run_merge(merge_cfg) == 0);

    RunConfig cfg = merge_cfg;
    cfg.command = RunConfig::Command::Calibrate;
    cfg.merged_path = dir.path / "merged.st";
    cfg.out_path = dir.path / "out.st";
    cfg.alpha = 0.5;
    cfg.target_task = 0;
    REQUIRE(run_calibrate(cfg) == 0);

    const TensorStore out = load_checkpoint(dir.path / "out.st");
    const auto w = out.at("w").as_f64();
    // Task 0 occupies rows 0..2; those rows must match its delta.
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 8; ++j) {
            CHECK(std::abs(w[i * 8 + j] - blocks[0](i, j)) <= 1e-6);
        }
    }
}
