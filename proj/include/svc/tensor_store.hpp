#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace svc {

enum class Dtype { F32, F64 };

std::size_t dtype_size(Dtype dtype);
std::string_view dtype_name(Dtype dtype);
std::optional<Dtype> parse_dtype(std::string_view name);

// One named tensor: raw little-endian payload plus dtype/shape metadata.
struct TensorEntry {
    Dtype dtype = Dtype::F64;
    std::vector<std::uint64_t> shape;
    std::vector<std::uint8_t> data;

    std::uint64_t numel() const;  // throws ShapeDataMismatch on overflow
    std::size_t byte_size() const noexcept { return data.size(); }
    std::vector<double> as_f64() const;

    // Casts values to the entry dtype (round to nearest even for F32).
    static TensorEntry from_f64(Dtype dtype, std::vector<std::uint64_t> shape,
                                std::span<const double> values);
    static TensorEntry from_f64(Dtype dtype, std::vector<std::uint64_t> shape,
                                std::initializer_list<double> values) {
        return from_f64(dtype, std::move(shape),
                        std::span<const double>(values.begin(), values.size()));
    }

    friend bool operator==(const TensorEntry&, const TensorEntry&) = default;
};

// Ordered collection of uniquely named tensors; mirrors one checkpoint file.
class TensorStore {
public:
    void add(std::string name, TensorEntry entry);
    bool contains(std::string_view name) const;
    const TensorEntry& at(std::string_view name) const;

    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }
    const std::string& name_at(std::size_t i) const { return names_[i]; }
    const TensorEntry& entry_at(std::size_t i) const { return entries_[i]; }

    const std::map<std::string, std::string>& metadata() const noexcept { return metadata_; }
    std::map<std::string, std::string>& metadata() noexcept { return metadata_; }

    // Entry-set equality (names, dtypes, shapes, bytes, metadata); iteration
    // order is not part of the value.
    bool operator==(const TensorStore& other) const;

private:
    std::vector<std::string> names_;
    std::vector<TensorEntry> entries_;
    std::map<std::string, std::size_t, std::less<>> index_;
    std::map<std::string, std::string> metadata_;
};

// Holds per-parameter differences against a pre-trained store, always F64.
using DeltaStore = TensorStore;

// Container format: 8-byte little-endian header length, UTF-8 JSON header
// mapping tensor names to {dtype, shape, data_offsets}, then row-major
// little-endian payloads. Offsets are relative to the end of the header.
TensorStore load_checkpoint(const std::filesystem::path& path);

// Writes with lexicographically sorted header keys and contiguous payloads,
// via a temp file and atomic rename.
void write_checkpoint(const TensorStore& store, const std::filesystem::path& path);

DeltaStore compute_deltas(const TensorStore& pretrained, const TensorStore& finetuned);

}  // namespace svc
