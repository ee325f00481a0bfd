#pragma once

// Dataset file codec. Magic "MDTDATA1", JSON header with episode offsets,
// shapes, annotation table and vocabulary, then a raw little-endian f32
// payload. Byte-exact round trips are part of the contract.

#include <string>
#include <vector>

#include "mdt/playgen.hpp"

namespace mdt::play {

struct Dataset {
    PlaygenConfig config;
    std::vector<PlayEpisode> episodes;

    // Total number of training windows for chunk length k.
    size_t window_count(size_t k) const {
        size_t n = 0;
        for (const auto& ep : episodes)
            if (ep.actions.size() >= k) n += ep.actions.size() - k + 1;
        return n;
    }
};

inline constexpr const char* kDatasetMagic = "MDTDATA1";

void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

// Generates `config.episodes` episodes from per-episode seeds derived from
// the master seed.
Dataset generate_dataset(const PlaygenConfig& config, uint64_t seed);

}  // namespace mdt::play
