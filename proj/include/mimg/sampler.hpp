#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "mimg/rng.hpp"
#include "mimg/schedule.hpp"
#include "mimg/tensor.hpp"
#include "mimg/vq.hpp"

namespace mimg {

struct SamplerConfig {
    int steps = 12;
    float guidance = 3.0f;         // s; 1 disables the unconditional pass
    float temperature = 1.0f;      // token sampling temperature; 0 = argmax
    float conf_temperature = 1.0f; // confidence-noise temperature, annealed to 0
    uint64_t seed = 0;
    ScheduleShape shape = ScheduleShape::cosine;

    void validate() const {
        if (steps < 1) throw ConfigError("sampler: steps must be >= 1");
        if (temperature < 0) throw ConfigError("sampler: temperature must be >= 0");
        if (guidance < 0) throw ConfigError("sampler: guidance must be >= 0");
        if (conf_temperature < 0) throw ConfigError("sampler: conf_temperature must be >= 0");
    }
};

// Decoding state: committed positions and their ids. The fixed set only ever
// grows; a committed id is never rewritten.
struct MaskState {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> fixed;
    std::vector<int> ids;

    int count() const { return height * width; }
    int masked_count() const {
        int m = 0;
        for (uint8_t f : fixed) m += f ? 0 : 1;
        return m;
    }

    static MaskState all_masked(int h, int w) {
        MaskState s;
        s.height = h;
        s.width = w;
        s.fixed.assign(static_cast<size_t>(h) * w, 0);
        s.ids.assign(static_cast<size_t>(h) * w, 0);
        return s;
    }

    static MaskState from_tokens(const TokenGrid& src, const std::vector<uint8_t>& remask);

    TokenGrid to_grid() const;
};

// uncond + s * (cond - uncond), elementwise. Exact passthrough at s = 0 and
// s = 1 (no arithmetic applied).
TensorT<float> guided_logits(const TensorT<float>& cond, const TensorT<float>& uncond, float s);

struct SampledTokens {
    std::vector<int> ids;
    std::vector<float> confidence;
};

// Per row of [n, V] logits: temperature 0 takes the argmax (lowest index on
// ties) with confidence read from the unscaled softmax; temperature > 0
// samples from softmax(logits / tau) and reports that distribution's
// probability of the chosen id.
SampledTokens sample_tokens(const TensorT<float>& logits, float tau, Rng& rng);

// Among currently-masked positions, add Gumbel noise scaled by
// tau_c * (1 - step/steps) to log-confidences and fix the highest scorers
// until exactly target_masked positions remain masked. Ties fall to the
// lowest linear index; already-fixed positions are never touched.
void select_to_fix(const std::vector<float>& confidence, const std::vector<int>& sampled,
                   MaskState& state, int target_masked, float tau_c, int step, int steps,
                   Rng& rng);

struct DecodeTrace {
    int forwards = 0;       // model evaluations, conditional and unconditional
    int initial_masked = 0; // masked positions when the loop was entered
    std::vector<uint8_t> initial_fixed;
    std::vector<int> masked_after;                 // per executed step
    std::vector<std::vector<uint8_t>> fixed_after; // per executed step
    std::vector<std::vector<int>> ids_after;       // per executed step
};

// Model access for the decode loop. ids carries batch * n entries (committed
// ids with MASK elsewhere); the result is [batch * n, V] logits. uncond may
// be left empty when guidance is pinned to 1.
struct DecodeHooks {
    std::function<TensorT<float>(const std::vector<int>&, int)> cond;
    std::function<TensorT<float>(const std::vector<int>&, int)> uncond;
};

// First step t in [1, steps] whose scheduled masked count is at or below the
// given masked count: partially-masked states re-enter the schedule at the
// nearest step below their actual mask size.
int schedule_entry_step(int masked, int n_tokens, const SamplerConfig& cfg);

// Core loop: from the entry step to the last, forward the (partially masked)
// grid, guide, sample, and fix down to the scheduled count. Returns the fully
// committed grid. A state with nothing masked returns immediately.
TokenGrid decode_from_state(const DecodeHooks& hooks, MaskState state, const SamplerConfig& cfg,
                            int mask_id, Rng& rng, DecodeTrace* trace = nullptr);

TokenGrid generate(const DecodeHooks& hooks, int h, int w, const SamplerConfig& cfg, int mask_id,
                   DecodeTrace* trace = nullptr);

// Batched generation: one stacked forward per step, per-item sampling streams
// seeded seed + i so item i reproduces a single generate run at that seed.
std::vector<TokenGrid> generate_batch(const DecodeHooks& hooks, int h, int w, int batch,
                                      const SamplerConfig& cfg, int mask_id,
                                      DecodeTrace* trace = nullptr);

// Re-mask round(strength * n) uniformly chosen positions of the source grid
// (selection stream independent of the decode stream) and re-decode them.
TokenGrid vary(const DecodeHooks& hooks, const TokenGrid& source, double strength,
               const SamplerConfig& cfg, int mask_id, DecodeTrace* trace = nullptr);

// Mask every token whose factor x factor pixel patch contains a masked pixel,
// keep the rest committed, and re-decode. Committed tokens are preserved
// bit-exactly.
TokenGrid inpaint(const DecodeHooks& hooks, const TokenGrid& source,
                  const std::vector<uint8_t>& pixel_mask, int pix_h, int pix_w, int factor,
                  const SamplerConfig& cfg, int mask_id, DecodeTrace* trace = nullptr);

struct WarpResult {
    TokenGrid tokens;
    std::vector<uint8_t> remask; // positions whose source support left the grid
};

// Translate the token field by (dx, dy) in latent space: look ids up in the
// codebook, bilinearly resample, re-quantize to the nearest row (integer
// shifts reduce to exact id moves). Positions whose nonzero-weight support
// falls partly outside the grid are flagged for re-masking.
WarpResult warp_frame(const TokenGrid& tokens, const TensorT<float>& codebook, double dx,
                      double dy);

// Frame 0 is a plain generate; each following frame warps its predecessor and
// re-decodes the warp boundary through the late end of the schedule. Frame k
// decodes with stream seed + k.
std::vector<TokenGrid> animate(const DecodeHooks& hooks, const TensorT<float>& codebook, int h,
                               int w, int frames, double dx, double dy, const SamplerConfig& cfg,
                               int mask_id, std::vector<DecodeTrace>* traces = nullptr);

} // namespace mimg
