#include "svc/tensor_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "svc/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian; big-endian hosts are unsupported");
static_assert(sizeof(float) == 4 && sizeof(double) == 8);

namespace svc {

using nlohmann::json;

std::size_t dtype_size(Dtype dtype) {
    return dtype == Dtype::F32 ? 4 : 8;
}

std::string_view dtype_name(Dtype dtype) {
    return dtype == Dtype::F32 ? "F32" : "F64";
}

std::optional<Dtype> parse_dtype(std::string_view name) {
    if (name == "F32") return Dtype::F32;
    if (name == "F64") return Dtype::F64;
    return std::nullopt;
}

std::uint64_t TensorEntry::numel() const {
    std::uint64_t count = 1;
    for (std::uint64_t dim : shape) {
        if (dim != 0 && count > std::numeric_limits<std::uint64_t>::max() / dim) {
            throw ShapeDataMismatch("tensor shape overflows element count");
        }
        count *= dim;
    }
    return count;
}

std::vector<double> TensorEntry::as_f64() const {
    const std::uint64_t count = numel();
    std::vector<double> out(count);
    if (dtype == Dtype::F64) {
        std::memcpy(out.data(), data.data(), count * sizeof(double));
    } else {
        for (std::uint64_t i = 0; i < count; ++i) {
            float v;
            std::memcpy(&v, data.data() + i * sizeof(float), sizeof(float));
            out[i] = static_cast<double>(v);
        }
    }
    return out;
}

TensorEntry TensorEntry::from_f64(Dtype dtype, std::vector<std::uint64_t> shape,
                                  std::span<const double> values) {
    TensorEntry entry;
    entry.dtype = dtype;
    entry.shape = std::move(shape);
    if (entry.numel() != values.size()) {
        throw ShapeDataMismatch("value count does not match tensor shape");
    }
    entry.data.resize(values.size() * dtype_size(dtype));
    if (dtype == Dtype::F64) {
        std::memcpy(entry.data.data(), values.data(), entry.data.size());
    } else {
        for (std::size_t i = 0; i < values.size(); ++i) {
            const float v = static_cast<float>(values[i]);
            std::memcpy(entry.data.data() + i * sizeof(float), &v, sizeof(float));
        }
    }
    return entry;
}

void TensorStore::add(std::string name, TensorEntry entry) {
    if (index_.contains(name)) {
        throw DuplicateParameter("parameter '" + name + "' already present");
    }
    if (entry.numel() * dtype_size(entry.dtype) != entry.data.size()) {
        throw ShapeDataMismatch("parameter '" + name + "': buffer size does not match shape");
    }
    index_.emplace(name, entries_.size());
    names_.push_back(std::move(name));
    entries_.push_back(std::move(entry));
}

bool TensorStore::contains(std::string_view name) const {
    return index_.find(name) != index_.end();
}

const TensorEntry& TensorStore::at(std::string_view name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
        throw ParameterSetMismatch("parameter '" + std::string(name) + "' not found");
    }
    return entries_[it->second];
}

bool TensorStore::operator==(const TensorStore& other) const {
    if (size() != other.size() || metadata_ != other.metadata_) return false;
    for (std::size_t i = 0; i < size(); ++i) {
        auto it = other.index_.find(names_[i]);
        if (it == other.index_.end()) return false;
        if (!(entries_[i] == other.entries_[it->second])) return false;
    }
    return true;
}

namespace {

std::uint64_t read_u64_le(const std::uint8_t* bytes) {
    std::uint64_t value = 0;
    for (int i = 7; i >= 0; --i) value = (value << 8) | bytes[i];
    return value;
}

}  // namespace

TensorStore load_checkpoint(const std::filesystem::path& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) {
        throw IoFailure("cannot open checkpoint '" + path.string() + "'");
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(file)),
                                    std::istreambuf_iterator<char>());
    if (file.bad()) {
        throw IoFailure("read failed for checkpoint '" + path.string() + "'");
    }
    if (bytes.size() < 8) {
        throw MalformedHeader("checkpoint shorter than the 8-byte length prefix");
    }
    const std::uint64_t header_len = read_u64_le(bytes.data());
    if (header_len > bytes.size() - 8) {
        throw MalformedHeader("header length " + std::to_string(header_len) +
                              " exceeds file size");
    }

    json header;
    try {
        header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + header_len);
    } catch (const json::exception& e) {
        throw MalformedHeader(std::string("header is not valid JSON: ") + e.what());
    }
    if (!header.is_object()) {
        throw MalformedHeader("header must be a JSON object");
    }

    const std::uint8_t* payload = bytes.data() + 8 + header_len;
    const std::uint64_t payload_size = bytes.size() - 8 - header_len;

    TensorStore store;
    for (const auto& [name, info] : header.items()) {
        if (name == "__metadata__") {
            if (!info.is_object()) {
                throw MalformedHeader("__metadata__ must be an object");
            }
            for (const auto& [key, value] : info.items()) {
                if (!value.is_string()) {
                    throw MalformedHeader("__metadata__ values must be strings");
                }
                store.metadata()[key] = value.get<std::string>();
            }
            continue;
        }
        if (!info.is_object() || !info.contains("dtype") || !info.contains("shape") ||
            !info.contains("data_offsets")) {
            throw MalformedHeader("tensor '" + name +
                                  "' needs dtype, shape and data_offsets fields");
        }
        if (!info["dtype"].is_string()) {
            throw MalformedHeader("tensor '" + name + "': dtype must be a string");
        }
        const auto dtype = parse_dtype(info["dtype"].get<std::string>());
        if (!dtype) {
            throw UnsupportedDtype("tensor '" + name + "': dtype '" +
                                   info["dtype"].get<std::string>() + "' not supported");
        }

        TensorEntry entry;
        entry.dtype = *dtype;
        if (!info["shape"].is_array()) {
            throw MalformedHeader("tensor '" + name + "': shape must be an array");
        }
        for (const auto& dim : info["shape"]) {
            if (!dim.is_number_unsigned()) {
                throw MalformedHeader("tensor '" + name +
                                      "': shape entries must be non-negative integers");
            }
            entry.shape.push_back(dim.get<std::uint64_t>());
        }
        const auto& offsets = info["data_offsets"];
        if (!offsets.is_array() || offsets.size() != 2 || !offsets[0].is_number_unsigned() ||
            !offsets[1].is_number_unsigned()) {
            throw MalformedHeader("tensor '" + name +
                                  "': data_offsets must be two non-negative integers");
        }
        const std::uint64_t begin = offsets[0].get<std::uint64_t>();
        const std::uint64_t end = offsets[1].get<std::uint64_t>();
        const std::uint64_t expected = entry.numel() * dtype_size(entry.dtype);
        if (begin > end || end > payload_size || end - begin != expected) {
            throw ShapeDataMismatch("tensor '" + name + "': data_offsets [" +
                                    std::to_string(begin) + ", " + std::to_string(end) +
                                    ") inconsistent with shape (" + std::to_string(expected) +
                                    " bytes expected)");
        }
        entry.data.assign(payload + begin, payload + end);
        store.add(name, std::move(entry));
    }
    return store;
}

void write_checkpoint(const TensorStore& store, const std::filesystem::path& path) {
    // Header keys sorted lexicographically; payloads laid out in that order.
    std::vector<std::size_t> order(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return store.name_at(a) < store.name_at(b);
    });

    json header(json::value_t::object);
    if (!store.metadata().empty()) {
        header["__metadata__"] = store.metadata();
    }
    std::uint64_t offset = 0;
    for (std::size_t i : order) {
        const TensorEntry& entry = store.entry_at(i);
        json info;
        info["dtype"] = std::string(dtype_name(entry.dtype));
        info["shape"] = entry.shape;
        info["data_offsets"] = {offset, offset + entry.byte_size()};
        header[store.name_at(i)] = std::move(info);
        offset += entry.byte_size();
    }

    std::string header_text;
    try {
        header_text = header.dump();
    } catch (const json::exception& e) {
        throw IoFailure(std::string("cannot serialize checkpoint header: ") + e.what());
    }

    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream file(tmp, std::ios::binary | std::ios::trunc);
        if (!file) {
            throw IoFailure("cannot open '" + tmp.string() + "' for writing");
        }
        const std::uint64_t header_len = header_text.size();
        std::uint8_t prefix[8];
        for (int i = 0; i < 8; ++i) prefix[i] = static_cast<std::uint8_t>(header_len >> (8 * i));
        file.write(reinterpret_cast<const char*>(prefix), 8);
        file.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
        for (std::size_t i : order) {
            const auto& data = store.entry_at(i).data;
            file.write(reinterpret_cast<const char*>(data.data()),
                       static_cast<std::streamsize>(data.size()));
        }
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

DeltaStore compute_deltas(const TensorStore& pretrained, const TensorStore& finetuned) {
    if (pretrained.size() != finetuned.size()) {
        throw ParameterSetMismatch("pre-trained store has " + std::to_string(pretrained.size()) +
                                   " parameters, fine-tuned has " +
                                   std::to_string(finetuned.size()));
    }
    DeltaStore deltas;
    for (std::size_t i = 0; i < pretrained.size(); ++i) {
        const std::string& name = pretrained.name_at(i);
        const TensorEntry& pre = pretrained.entry_at(i);
        if (!finetuned.contains(name)) {
            throw ParameterSetMismatch("parameter '" + name + "' missing from fine-tuned store");
        }
        const TensorEntry& ft = finetuned.at(name);
        if (ft.shape != pre.shape) {
            throw ShapeMismatch("parameter '" + name + "': shapes differ between stores");
        }
        std::vector<double> diff = ft.as_f64();
        const std::vector<double> base = pre.as_f64();
        for (std::size_t k = 0; k < diff.size(); ++k) {
            diff[k] -= base[k];
            if (!std::isfinite(diff[k])) {
                throw NonFiniteInput("parameter '" + name + "': non-finite delta value");
            }
        }
        deltas.add(name, TensorEntry::from_f64(Dtype::F64, pre.shape, diff));
    }
    return deltas;
}

}  // namespace svc
