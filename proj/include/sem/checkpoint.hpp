#pragma once

#include <boost/crc.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "backbone.hpp"

namespace sem {

// Layout:
//   "SEMCKPT1" | version:u8 | record* | crc32:u32le
//   record := name_len:u32le | name | dtype:u8 | rank:u8 | extents:u64le[rank] | data (little-endian)
inline constexpr char kCheckpointMagic[8] = {'S', 'E', 'M', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

inline std::size_t dtype_size(DType d) {
    switch (d) {
        case DType::f32: return 4;
        case DType::f64: return 8;
        case DType::u8: return 1;
    }
    return 0;
}

template <typename T>
constexpr DType dtype_of() {
    if constexpr (std::is_same_v<T, float>) return DType::f32;
    else if constexpr (std::is_same_v<T, double>) return DType::f64;
    else return DType::u8;
}

struct CheckpointRecord {
    std::string name;
    DType dtype = DType::f32;
    Shape shape;
    std::vector<std::uint8_t> bytes;  // little-endian element data
};

inline std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
    boost::crc_32_type crc;
    crc.process_bytes(bytes.data(), bytes.size());
    return crc.checksum();
}

namespace detail {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U value) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

template <typename U>
U get_le(std::span<const std::uint8_t> in, std::size_t& pos) {
    if (pos + sizeof(U) > in.size()) throw IntegrityError("checkpoint truncated at byte " + std::to_string(pos));
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(in[pos + i]) << (8 * i);
    pos += sizeof(U);
    return value;
}

}  // namespace detail

template <typename T>
CheckpointRecord make_record(std::string name, Shape shape, std::span<const T> values) {
    CheckpointRecord rec{std::move(name), dtype_of<T>(), std::move(shape), {}};
    rec.bytes.reserve(values.size() * sizeof(T));
    for (T v : values) {
        if constexpr (std::is_same_v<T, float>) detail::put_le(rec.bytes, std::bit_cast<std::uint32_t>(v));
        else if constexpr (std::is_same_v<T, double>) detail::put_le(rec.bytes, std::bit_cast<std::uint64_t>(v));
        else rec.bytes.push_back(static_cast<std::uint8_t>(v));
    }
    return rec;
}

inline CheckpointRecord make_text_record(std::string name, const std::string& text) {
    std::vector<std::uint8_t> bytes(text.begin(), text.end());
    return make_record<std::uint8_t>(std::move(name), {bytes.size()}, bytes);
}

inline std::string record_text(const CheckpointRecord& rec) { return std::string(rec.bytes.begin(), rec.bytes.end()); }

/// Element values converted to T.
template <typename T>
std::vector<T> record_values(const CheckpointRecord& rec) {
    const std::size_t n = rec.bytes.size() / dtype_size(rec.dtype);
    std::vector<T> out(n);
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
        switch (rec.dtype) {
            case DType::f32: out[i] = static_cast<T>(std::bit_cast<float>(detail::get_le<std::uint32_t>(rec.bytes, pos))); break;
            case DType::f64: out[i] = static_cast<T>(std::bit_cast<double>(detail::get_le<std::uint64_t>(rec.bytes, pos))); break;
            case DType::u8: out[i] = static_cast<T>(rec.bytes[pos++]); break;
        }
    }
    return out;
}

inline std::vector<std::uint8_t> encode_checkpoint(const std::vector<CheckpointRecord>& records) {
    std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    out.push_back(kCheckpointVersion);
    for (const auto& rec : records) {
        if (rec.shape.size() > 255) throw DomainError("checkpoint: rank too large for " + rec.name);
        if (numel(rec.shape) * dtype_size(rec.dtype) != rec.bytes.size()) {
            throw DomainError("checkpoint: record " + rec.name + " byte count does not match its shape");
        }
        detail::put_le(out, static_cast<std::uint32_t>(rec.name.size()));
        out.insert(out.end(), rec.name.begin(), rec.name.end());
        out.push_back(static_cast<std::uint8_t>(rec.dtype));
        out.push_back(static_cast<std::uint8_t>(rec.shape.size()));
        for (auto e : rec.shape) detail::put_le(out, static_cast<std::uint64_t>(e));
        out.insert(out.end(), rec.bytes.begin(), rec.bytes.end());
    }
    detail::put_le(out, crc32(out));
    return out;
}

inline std::vector<CheckpointRecord> decode_checkpoint(std::span<const std::uint8_t> bytes) {
    constexpr std::size_t header = sizeof(kCheckpointMagic) + 1;
    if (bytes.size() < header + 4) throw IntegrityError("checkpoint too short");
    if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
        throw IntegrityError("checkpoint: bad magic");
    }
    if (bytes[sizeof(kCheckpointMagic)] != kCheckpointVersion) {
        throw IntegrityError("checkpoint: unsupported format version " + std::to_string(bytes[sizeof(kCheckpointMagic)]));
    }
    const std::size_t body_end = bytes.size() - 4;
    std::size_t crc_pos = body_end;
    const auto stored = detail::get_le<std::uint32_t>(bytes, crc_pos);
    if (stored != crc32(bytes.first(body_end))) throw IntegrityError("checkpoint: CRC mismatch");

    auto body = bytes.first(body_end);
    std::vector<CheckpointRecord> records;
    std::size_t pos = header;
    while (pos < body_end) {
        CheckpointRecord rec;
        const auto name_len = detail::get_le<std::uint32_t>(body, pos);
        if (pos + name_len + 2 > body_end) throw IntegrityError("checkpoint: record header truncated");
        rec.name.assign(reinterpret_cast<const char*>(body.data() + pos), name_len);
        pos += name_len;
        const auto code = body[pos++];
        if (code > 2) throw IntegrityError("checkpoint: unknown dtype code in " + rec.name);
        rec.dtype = static_cast<DType>(code);
        const auto rank = body[pos++];
        for (int i = 0; i < rank; ++i) rec.shape.push_back(static_cast<std::size_t>(detail::get_le<std::uint64_t>(body, pos)));
        const std::size_t n = numel(rec.shape) * dtype_size(rec.dtype);
        if (pos + n > body_end) throw IntegrityError("checkpoint: data truncated in " + rec.name);
        rec.bytes.assign(body.begin() + static_cast<std::ptrdiff_t>(pos), body.begin() + static_cast<std::ptrdiff_t>(pos + n));
        pos += n;
        records.push_back(std::move(rec));
    }
    return records;
}

inline void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointRecord>& records) {
    auto bytes = encode_checkpoint(records);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<CheckpointRecord> read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IntegrityError("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

/// Model state as records. Extra records (config text, normalization) are appended by callers.
template <typename T>
std::vector<CheckpointRecord> model_records(Model<T>& model) {
    std::vector<CheckpointRecord> out;
    for (auto& entry : model.state()) {
        out.push_back(make_record<T>(entry.name, entry.shape, std::span<const T>(entry.values)));
    }
    return out;
}

/// Copy matching records into the model. Every state entry must be present with the same shape.
template <typename T>
void load_model_records(Model<T>& model, const std::vector<CheckpointRecord>& records) {
    std::map<std::string, const CheckpointRecord*> by_name;
    for (const auto& rec : records) by_name[rec.name] = &rec;
    for (auto& entry : model.state()) {
        auto it = by_name.find(entry.name);
        if (it == by_name.end()) throw IntegrityError("checkpoint: missing tensor " + entry.name);
        if (it->second->shape != entry.shape) {
            throw IntegrityError("checkpoint: tensor " + entry.name + " has shape " + to_string(it->second->shape) +
                                 ", model expects " + to_string(entry.shape));
        }
        auto values = record_values<T>(*it->second);
        std::copy(values.begin(), values.end(), entry.values.begin());
    }
}

}  // namespace sem
