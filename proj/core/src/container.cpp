#include "mdt/container.hpp"

#include <bit>
#include <cstdio>
#include <filesystem>

namespace mdt {

static_assert(std::endian::native == std::endian::little, "file formats are pinned little-endian");

void write_container(const std::string& path, const Container& c) {
    if (c.magic.size() != 8) throw IoError("container magic must be 8 bytes");
    nlohmann::json header = c.header;
    header["payload_size"] = c.payload.size();
    const std::string htext = header.dump();

    const std::string tmp = path + ".tmp";
    std::FILE* f = std::fopen(tmp.c_str(), "wb");
    if (!f) throw IoError("cannot open for writing: " + tmp);
    bool ok = std::fwrite(c.magic.data(), 1, 8, f) == 8;
    const uint64_t hlen = htext.size();
    ok = ok && std::fwrite(&hlen, 8, 1, f) == 1;
    ok = ok && (htext.empty() || std::fwrite(htext.data(), 1, htext.size(), f) == htext.size());
    ok = ok && (c.payload.empty() || std::fwrite(c.payload.data(), 1, c.payload.size(), f) == c.payload.size());
    ok = std::fclose(f) == 0 && ok;
    if (!ok) {
        std::remove(tmp.c_str());
        throw IoError("short write: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::remove(tmp.c_str());
        throw IoError("rename failed: " + path + " (" + ec.message() + ")");
    }
}

Container read_container(const std::string& path, const std::string& expected_magic) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw IoError("cannot open: " + path);
    std::fseek(f, 0, SEEK_END);
    const long fsize = std::ftell(f);
    std::fseek(f, 0, SEEK_SET);
    if (fsize < 16) {
        std::fclose(f);
        throw TruncationError(path + ": file shorter than container preamble");
    }
    Container c;
    c.magic.resize(8);
    uint64_t hlen = 0;
    bool ok = std::fread(c.magic.data(), 1, 8, f) == 8 && std::fread(&hlen, 8, 1, f) == 1;
    if (!ok) {
        std::fclose(f);
        throw TruncationError(path + ": unreadable preamble");
    }
    if (c.magic != expected_magic) {
        std::fclose(f);
        throw MagicError(path + ": magic mismatch, expected \"" + expected_magic + "\" got \"" + c.magic + "\"");
    }
    if (static_cast<uint64_t>(fsize) < 16 + hlen) {
        std::fclose(f);
        throw TruncationError(path + ": header truncated");
    }
    std::string htext(hlen, '\0');
    if (hlen && std::fread(htext.data(), 1, hlen, f) != hlen) {
        std::fclose(f);
        throw TruncationError(path + ": header truncated");
    }
    try {
        c.header = nlohmann::json::parse(htext);
    } catch (const nlohmann::json::exception& e) {
        std::fclose(f);
        throw IoError(path + ": malformed header: " + e.what());
    }
    const uint64_t expected_payload = c.header.value("payload_size", uint64_t{0});
    const uint64_t avail = static_cast<uint64_t>(fsize) - 16 - hlen;
    if (avail < expected_payload) {
        std::fclose(f);
        throw TruncationError(path + ": payload truncated (" + std::to_string(avail) + " of " +
                              std::to_string(expected_payload) + " bytes)");
    }
    c.payload.resize(expected_payload);
    if (expected_payload && std::fread(c.payload.data(), 1, expected_payload, f) != expected_payload) {
        std::fclose(f);
        throw TruncationError(path + ": payload truncated");
    }
    std::fclose(f);
    return c;
}

}  // namespace mdt
