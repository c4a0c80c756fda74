#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "support/test_helpers.hpp"
#include "svc/errors.hpp"
#include "svc/tensor_store.hpp"

using namespace svc;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
    static const fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / "svc-tensor-tests";
        fs::create_directories(d);
        return d;
    }();
    return dir / name;
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
    std::ifstream file(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(file), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    file.write(reinterpret_cast<const char*>(bytes.data()),
               static_cast<std::streamsize>(bytes.size()));
}

// Raw container bytes: 8-byte LE header length, JSON header, payload.
std::vector<std::uint8_t> raw_file(const std::string& header,
                                   const std::vector<std::uint8_t>& payload) {
    std::vector<std::uint8_t> bytes;
    const std::uint64_t len = header.size();
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
    bytes.insert(bytes.end(), header.begin(), header.end());
    bytes.insert(bytes.end(), payload.begin(), payload.end());
    return bytes;
}

std::vector<std::uint8_t> f32_payload(const std::vector<float>& values) {
    std::vector<std::uint8_t> bytes(values.size() * 4);
    std::memcpy(bytes.data(), values.data(), bytes.size());
    return bytes;
}

}  // namespace

TEST_CASE("hand-written single-tensor file decodes") {
    const auto path = temp_file("single.safetensors");
    const std::string header =
        R"({"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}})";
    write_bytes(path, raw_file(header, f32_payload({1.0f, 2.0f, 3.0f, 4.0f})));

    const TensorStore store = load_checkpoint(path);
    REQUIRE(store.size() == 1);
    const TensorEntry& w = store.at("w");
    CHECK(w.dtype == Dtype::F32);
    CHECK(w.shape == std::vector<std::uint64_t>{2, 2});
    const auto values = w.as_f64();
    CHECK(values == std::vector<double>{1.0, 2.0, 3.0, 4.0});
}

TEST_CASE("empty header round-trips as empty store") {
    const auto path = temp_file("empty.safetensors");
    write_bytes(path, raw_file("{}", {}));
    CHECK(load_checkpoint(path).empty());

    const auto out = temp_file("empty-out.safetensors");
    write_checkpoint(TensorStore{}, out);
    CHECK(load_checkpoint(out).empty());
}

TEST_CASE("write then load is identity, load then write is byte identity") {
    svctest::TestRng rng(41);
    const auto path = temp_file("fixture3.safetensors");

    TensorStore store;
    store.add("a.weight", TensorEntry::from_f64(Dtype::F32, {3, 2},
                                                svctest::random_vector(rng, 6)));
    store.add("a.bias", TensorEntry::from_f64(Dtype::F64, {2}, svctest::random_vector(rng, 2)));
    store.add("scale", TensorEntry::from_f64(Dtype::F64, {}, {0.5}));
    store.metadata()["note"] = "three tensor fixture";

    write_checkpoint(store, path);
    const TensorStore loaded = load_checkpoint(path);
    CHECK(loaded == store);

    const auto again = temp_file("fixture3-rewrite.safetensors");
    write_checkpoint(loaded, again);
    CHECK(read_bytes(again) == read_bytes(path));
}

TEST_CASE("single F64 zero tensor reloads exactly") {
    TensorStore store;
    store.add("z", TensorEntry::from_f64(Dtype::F64, {1}, {0.0}));
    const auto path = temp_file("zero-value.safetensors");
    write_checkpoint(store, path);
    const TensorStore loaded = load_checkpoint(path);
    CHECK(loaded == store);
    CHECK(loaded.at("z").as_f64() == std::vector<double>{0.0});
}

TEST_CASE("random stores round-trip bit-exactly") {
    svctest::TestRng rng(7);
    for (int i = 0; i < 30; ++i) {
        const TensorStore store =
            svctest::random_store(rng, rng.uniform_index(0, 6), i % 3 == 0);
        const auto path = temp_file("roundtrip.safetensors");
        write_checkpoint(store, path);
        CHECK(load_checkpoint(path) == store);
    }
}

TEST_CASE("zero-sized tensors are permitted and round-trip") {
    TensorStore store;
    store.add("empty", TensorEntry::from_f64(Dtype::F32, {0, 4}, {}));
    const auto path = temp_file("zero.safetensors");
    write_checkpoint(store, path);
    const TensorStore loaded = load_checkpoint(path);
    CHECK(loaded.at("empty").numel() == 0);
    CHECK(loaded == store);
}

TEST_CASE("load rejects malformed input") {
    const auto path = temp_file("bad.safetensors");

    SUBCASE("too short for the length prefix") {
        write_bytes(path, {1, 2, 3});
        CHECK_THROWS_AS(load_checkpoint(path), MalformedHeader);
    }
    SUBCASE("header length exceeds file") {
        std::vector<std::uint8_t> bytes(8, 0);
        bytes[0] = 200;
        write_bytes(path, bytes);
        CHECK_THROWS_AS(load_checkpoint(path), MalformedHeader);
    }
    SUBCASE("invalid JSON") {
        write_bytes(path, raw_file("{not json", {}));
        CHECK_THROWS_AS(load_checkpoint(path), MalformedHeader);
    }
    SUBCASE("header is not an object") {
        write_bytes(path, raw_file("[1,2]", {}));
        CHECK_THROWS_AS(load_checkpoint(path), MalformedHeader);
    }
    SUBCASE("missing fields") {
        write_bytes(path, raw_file(R"({"w":{"dtype":"F32"}})", {}));
        CHECK_THROWS_AS(load_checkpoint(path), MalformedHeader);
    }
    SUBCASE("negative shape entry") {
        write_bytes(path, raw_file(
            R"({"w":{"dtype":"F32","shape":[-1],"data_offsets":[0,4]}})", f32_payload({1.0f})));
        CHECK_THROWS_AS(load_checkpoint(path), MalformedHeader);
    }
    SUBCASE("unsupported dtype") {
        write_bytes(path, raw_file(
            R"({"w":{"dtype":"I64","shape":[1],"data_offsets":[0,8]}})",
            std::vector<std::uint8_t>(8, 0)));
        CHECK_THROWS_AS(load_checkpoint(path), UnsupportedDtype);
    }
    SUBCASE("offsets inconsistent with shape") {
        write_bytes(path, raw_file(
            R"({"w":{"dtype":"F32","shape":[2],"data_offsets":[0,4]}})", f32_payload({1.0f})));
        CHECK_THROWS_AS(load_checkpoint(path), ShapeDataMismatch);
    }
    SUBCASE("offsets beyond payload") {
        write_bytes(path, raw_file(
            R"({"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}})", {}));
        CHECK_THROWS_AS(load_checkpoint(path), ShapeDataMismatch);
    }
    SUBCASE("reversed offsets") {
        write_bytes(path, raw_file(
            R"({"w":{"dtype":"F32","shape":[1],"data_offsets":[4,0]}})", f32_payload({1.0f})));
        CHECK_THROWS_AS(load_checkpoint(path), ShapeDataMismatch);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_checkpoint(temp_file("does-not-exist")), IoFailure);
    }
}

TEST_CASE("metadata survives the round-trip") {
    const auto path = temp_file("meta.safetensors");
    const std::string header =
        R"({"__metadata__":{"format":"pt","rev":"2"},)"
        R"("w":{"dtype":"F64","shape":[1],"data_offsets":[0,8]}})";
    std::vector<std::uint8_t> payload(8, 0);
    write_bytes(path, raw_file(header, payload));

    const TensorStore store = load_checkpoint(path);
    REQUIRE(store.metadata().size() == 2);
    CHECK(store.metadata().at("format") == "pt");

    const auto out = temp_file("meta-out.safetensors");
    write_checkpoint(store, out);
    CHECK(load_checkpoint(out).metadata() == store.metadata());
}

TEST_CASE("compute_deltas basics") {
    TensorStore pre;
    pre.add("w", TensorEntry::from_f64(Dtype::F32, {2}, {1.0, 2.0}));
    TensorStore ft;
    ft.add("w", TensorEntry::from_f64(Dtype::F32, {2}, {3.0, 5.0}));

    SUBCASE("elementwise difference, promoted to F64") {
        const DeltaStore deltas = compute_deltas(pre, ft);
        const TensorEntry& d = deltas.at("w");
        CHECK(d.dtype == Dtype::F64);
        CHECK(d.as_f64() == std::vector<double>{2.0, 3.0});
    }
    SUBCASE("identical stores give all-zero deltas") {
        const DeltaStore deltas = compute_deltas(pre, pre);
        for (double v : deltas.at("w").as_f64()) CHECK(v == 0.0);
    }
    SUBCASE("parameter set mismatch is a hard error") {
        TensorStore extra = ft;
        extra.add("extra", TensorEntry::from_f64(Dtype::F32, {1}, {1.0}));
        CHECK_THROWS_AS(compute_deltas(pre, extra), ParameterSetMismatch);

        TensorStore renamed;
        renamed.add("w2", TensorEntry::from_f64(Dtype::F32, {2}, {3.0, 5.0}));
        CHECK_THROWS_AS(compute_deltas(pre, renamed), ParameterSetMismatch);
    }
    SUBCASE("shape mismatch names the parameter") {
        TensorStore reshaped;
        reshaped.add("w", TensorEntry::from_f64(Dtype::F32, {1, 2}, {3.0, 5.0}));
        CHECK_THROWS_AS(compute_deltas(pre, reshaped), ShapeMismatch);
        try {
            compute_deltas(pre, reshaped);
        } catch (const Error& e) {
            CHECK(std::string(e.what()).find("'w'") != std::string::npos);
        }
    }
}

TEST_CASE("delta reconstruction is exact in F64") {
    // Exactness needs the inputs on a shared grid; full-mantissa doubles can
    // lose a final bit to the subtraction itself.
    svctest::TestRng rng(11);
    TensorStore pre;
    TensorStore ft;
    const auto values_pre = svctest::random_grid_vector(rng, 24);
    const auto values_ft = svctest::random_grid_vector(rng, 24);
    pre.add("w", TensorEntry::from_f64(Dtype::F64, {4, 6}, values_pre));
    ft.add("w", TensorEntry::from_f64(Dtype::F64, {4, 6}, values_ft));

    const DeltaStore deltas = compute_deltas(pre, ft);
    const auto d = deltas.at("w").as_f64();
    for (std::size_t i = 0; i < d.size(); ++i) {
        CHECK(d[i] + values_pre[i] == values_ft[i]);
    }
}

TEST_CASE("duplicate parameter names are rejected") {
    TensorStore store;
    store.add("w", TensorEntry::from_f64(Dtype::F64, {1}, {1.0}));
    CHECK_THROWS_AS(store.add("w", TensorEntry::from_f64(Dtype::F64, {1}, {2.0})),
                    DuplicateParameter);
}
