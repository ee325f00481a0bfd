#pragma once

// Self-describing binary container shared by the dataset and checkpoint
// codecs: 8-byte magic, little-endian u64 header length, UTF-8 JSON header,
// raw little-endian payload. Writes are atomic (temp file + rename).

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdt/errors.hpp"

namespace mdt {

struct Container {
    std::string magic;  // exactly 8 bytes
    nlohmann::json header;
    std::vector<uint8_t> payload;
};

// Serializes header with sorted keys; records payload_size in the header so
// readers can detect truncation.
void write_container(const std::string& path, const Container& c);

// Validates magic and sizes. Throws MagicError / TruncationError / IoError.
Container read_container(const std::string& path, const std::string& expected_magic);

// Payload cursor helpers.
inline void put_f32(std::vector<uint8_t>& buf, float v) {
    const auto* p = reinterpret_cast<const uint8_t*>(&v);
    buf.insert(buf.end(), p, p + 4);
}

inline void put_f32_span(std::vector<uint8_t>& buf, const float* v, size_t n) {
    const auto* p = reinterpret_cast<const uint8_t*>(v);
    buf.insert(buf.end(), p, p + 4 * n);
}

}  // namespace mdt
