#pragma once

#include <memory>
#include <optional>
#include <string>

#include "mimg/adam.hpp"
#include "mimg/pipeline.hpp"

namespace mimg {

inline constexpr uint32_t kCheckpointVersion = 1;

// Single-file model artifact: 4 magic bytes, a u32 format version, a u64
// header length, a JSON header (configs, vocabulary, blob manifest, optional
// optimizer/rng echoes), then raw little-endian blobs in manifest order.
// Quantized layers store an int8 weight blob plus a per-row scale blob in
// place of the full-precision weight. Round trips are byte-exact.
void save_checkpoint(const std::string& path, const PipelineT<float>& pipe,
                     const AdamT<float>* adam = nullptr, const Rng* rng = nullptr);

struct LoadedCheckpoint {
    std::unique_ptr<PipelineT<float>> pipeline;
    std::optional<AdamT<float>> adam;
    std::optional<Rng> rng;
    bool quantized = false;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

} // namespace mimg
