#include "mimg/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mimg {

namespace {

constexpr uint64_t kSelectionSalt = 0x8badf00d5eedfaceULL;

// softmax of one logit row with optional temperature scaling (tau <= 0 means
// no scaling), double accumulation for the normalizer
void softmax_row(const float* row, int v, float tau, std::vector<double>& probs) {
    probs.resize(static_cast<size_t>(v));
    const double inv = tau > 0 ? 1.0 / tau : 1.0;
    double mx = -1e300;
    for (int i = 0; i < v; ++i) mx = std::max(mx, static_cast<double>(row[i]) * inv);
    double sum = 0;
    for (int i = 0; i < v; ++i) {
        probs[static_cast<size_t>(i)] = std::exp(static_cast<double>(row[i]) * inv - mx);
        sum += probs[static_cast<size_t>(i)];
    }
    for (int i = 0; i < v; ++i) probs[static_cast<size_t>(i)] /= sum;
}

int nearest_codebook_row(const TensorT<float>& codebook, const double* vec) {
    const int v = static_cast<int>(codebook.rows());
    const int d = static_cast<int>(codebook.cols());
    int best = 0;
    double best_d = 1e300;
    for (int r = 0; r < v; ++r) {
        double acc = 0;
        const float* row = codebook.ptr() + static_cast<size_t>(r) * d;
        for (int c = 0; c < d; ++c) {
            const double diff = vec[c] - row[c];
            acc += diff * diff;
        }
        if (acc < best_d) {
            best_d = acc;
            best = r;
        }
    }
    return best;
}

void check_state(const MaskState& s) {
    if (s.height < 1 || s.width < 1) throw ShapeError("decode: empty grid");
    const size_t n = static_cast<size_t>(s.height) * s.width;
    if (s.fixed.size() != n || s.ids.size() != n)
        throw ShapeError("decode: state arrays do not match the grid");
}

} // namespace

MaskState MaskState::from_tokens(const TokenGrid& src, const std::vector<uint8_t>& remask) {
    if (static_cast<int>(remask.size()) != src.count())
        throw ShapeError("mask state: remask length must match the grid");
    MaskState s;
    s.height = src.height;
    s.width = src.width;
    s.ids = src.ids;
    s.fixed.resize(remask.size());
    for (size_t i = 0; i < remask.size(); ++i) s.fixed[i] = remask[i] ? 0 : 1;
    return s;
}

TokenGrid MaskState::to_grid() const {
    for (uint8_t f : fixed)
        if (!f) throw Error("decode: grid still has masked positions");
    TokenGrid g;
    g.height = height;
    g.width = width;
    g.ids = ids;
    return g;
}

TensorT<float> guided_logits(const TensorT<float>& cond, const TensorT<float>& uncond, float s) {
    if (!cond.same_shape(uncond)) throw ShapeError("guided_logits: shape mismatch");
    if (s == 1.0f) return cond;
    if (s == 0.0f) return uncond;
    TensorT<float> out(cond.shape);
    for (int64_t i = 0; i < cond.numel(); ++i) {
        const float u = uncond.data[static_cast<size_t>(i)];
        out.data[static_cast<size_t>(i)] = u + s * (cond.data[static_cast<size_t>(i)] - u);
    }
    return out;
}

SampledTokens sample_tokens(const TensorT<float>& logits, float tau, Rng& rng) {
    if (logits.ndim() != 2) throw ShapeError("sample_tokens: logits must be 2D");
    if (tau < 0) throw DomainError("sample_tokens: temperature must be >= 0");
    if (!logits.all_finite()) throw NumericError("sample_tokens: non-finite logits");
    const int n = static_cast<int>(logits.rows());
    const int v = static_cast<int>(logits.cols());
    SampledTokens out;
    out.ids.resize(static_cast<size_t>(n));
    out.confidence.resize(static_cast<size_t>(n));
    std::vector<double> probs;
    for (int r = 0; r < n; ++r) {
        const float* row = logits.ptr() + static_cast<size_t>(r) * v;
        int chosen;
        if (tau == 0.0f) {
            chosen = 0;
            for (int c = 1; c < v; ++c)
                if (row[c] > row[chosen]) chosen = c;
            softmax_row(row, v, 0.0f, probs);
        } else {
            softmax_row(row, v, tau, probs);
            const double u = rng.uniform();
            double acc = 0;
            chosen = v - 1;
            for (int c = 0; c < v; ++c) {
                acc += probs[static_cast<size_t>(c)];
                if (u < acc) {
                    chosen = c;
                    break;
                }
            }
        }
        out.ids[static_cast<size_t>(r)] = chosen;
        out.confidence[static_cast<size_t>(r)] =
            static_cast<float>(probs[static_cast<size_t>(chosen)]);
    }
    return out;
}

void select_to_fix(const std::vector<float>& confidence, const std::vector<int>& sampled,
                   MaskState& state, int target_masked, float tau_c, int step, int steps,
                   Rng& rng) {
    check_state(state);
    const size_t n = state.fixed.size();
    if (confidence.size() != n || sampled.size() != n)
        throw ShapeError("select_to_fix: confidence/sample arrays must match the grid");
    if (target_masked < 0) throw DomainError("select_to_fix: negative target");

    std::vector<int> masked;
    for (size_t i = 0; i < n; ++i)
        if (!state.fixed[i]) masked.push_back(static_cast<int>(i));
    const int cur = static_cast<int>(masked.size());
    if (target_masked > cur)
        throw DomainError("select_to_fix: target exceeds the current masked count");
    if (target_masked == cur) return;

    const double noise = static_cast<double>(tau_c) * (1.0 - static_cast<double>(step) / steps);
    std::vector<std::pair<double, int>> scored;
    scored.reserve(masked.size());
    for (int idx : masked) {
        double s = std::log(static_cast<double>(confidence[static_cast<size_t>(idx)]));
        if (noise > 0) s += noise * rng.gumbel();
        scored.emplace_back(s, idx);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    const int n_fix = cur - target_masked;
    for (int i = 0; i < n_fix; ++i) {
        const int idx = scored[static_cast<size_t>(i)].second;
        state.fixed[static_cast<size_t>(idx)] = 1;
        state.ids[static_cast<size_t>(idx)] = sampled[static_cast<size_t>(idx)];
    }
}

int schedule_entry_step(int masked, int n_tokens, const SamplerConfig& cfg) {
    for (int t = 1; t <= cfg.steps; ++t)
        if (masked_count(t, cfg.steps, n_tokens, cfg.shape) <= masked) return t;
    return cfg.steps;
}

TokenGrid decode_from_state(const DecodeHooks& hooks, MaskState state, const SamplerConfig& cfg,
                            int mask_id, Rng& rng, DecodeTrace* trace) {
    cfg.validate();
    check_state(state);
    if (!hooks.cond) throw ConfigError("decode: conditional forward is required");
    const int n = state.count();
    const int m0 = state.masked_count();
    if (trace) {
        trace->initial_masked = m0;
        trace->initial_fixed = state.fixed;
    }
    if (m0 == 0) return state.to_grid();

    const bool use_cfg = cfg.guidance != 1.0f;
    if (use_cfg && !hooks.uncond)
        throw ConfigError("decode: guidance != 1 needs an unconditional forward");

    const int entry = schedule_entry_step(m0, n, cfg);
    std::vector<int> ids(static_cast<size_t>(n));
    for (int t = entry; t <= cfg.steps; ++t) {
        for (int i = 0; i < n; ++i)
            ids[static_cast<size_t>(i)] =
                state.fixed[static_cast<size_t>(i)] ? state.ids[static_cast<size_t>(i)] : mask_id;
        TensorT<float> logits = hooks.cond(ids, 1);
        if (trace) ++trace->forwards;
        if (use_cfg) {
            TensorT<float> un = hooks.uncond(ids, 1);
            if (trace) ++trace->forwards;
            logits = guided_logits(logits, un, cfg.guidance);
        }
        if (logits.ndim() != 2 || logits.rows() != n)
            throw ShapeError("decode: model returned logits of the wrong shape");
        auto s = sample_tokens(logits, cfg.temperature, rng);
        const int target = masked_count(t, cfg.steps, n, cfg.shape);
        select_to_fix(s.confidence, s.ids, state, target, cfg.conf_temperature, t, cfg.steps, rng);
        if (trace) {
            trace->masked_after.push_back(state.masked_count());
            trace->fixed_after.push_back(state.fixed);
            trace->ids_after.push_back(state.ids);
        }
    }
    return state.to_grid();
}

TokenGrid generate(const DecodeHooks& hooks, int h, int w, const SamplerConfig& cfg, int mask_id,
                   DecodeTrace* trace) {
    Rng rng(cfg.seed);
    return decode_from_state(hooks, MaskState::all_masked(h, w), cfg, mask_id, rng, trace);
}

std::vector<TokenGrid> generate_batch(const DecodeHooks& hooks, int h, int w, int batch,
                                      const SamplerConfig& cfg, int mask_id, DecodeTrace* trace) {
    cfg.validate();
    if (batch < 1) throw ConfigError("generate: batch must be >= 1");
    if (!hooks.cond) throw ConfigError("decode: conditional forward is required");
    const bool use_cfg = cfg.guidance != 1.0f;
    if (use_cfg && !hooks.uncond)
        throw ConfigError("decode: guidance != 1 needs an unconditional forward");

    const int n = h * w;
    std::vector<MaskState> states(static_cast<size_t>(batch), MaskState::all_masked(h, w));
    std::vector<Rng> rngs;
    for (int i = 0; i < batch; ++i) rngs.emplace_back(cfg.seed + static_cast<uint64_t>(i));

    std::vector<int> ids(static_cast<size_t>(batch) * n);
    TensorT<float> item({n, 1}); // resized per step below
    for (int t = 1; t <= cfg.steps; ++t) {
        for (int b = 0; b < batch; ++b)
            for (int i = 0; i < n; ++i) {
                const auto& st = states[static_cast<size_t>(b)];
                ids[static_cast<size_t>(b) * n + i] =
                    st.fixed[static_cast<size_t>(i)] ? st.ids[static_cast<size_t>(i)] : mask_id;
            }
        TensorT<float> logits = hooks.cond(ids, batch);
        if (trace) ++trace->forwards;
        if (use_cfg) {
            TensorT<float> un = hooks.uncond(ids, batch);
            if (trace) ++trace->forwards;
            logits = guided_logits(logits, un, cfg.guidance);
        }
        if (logits.ndim() != 2 || logits.rows() != static_cast<int64_t>(batch) * n)
            throw ShapeError("decode: model returned logits of the wrong shape");
        const int v = static_cast<int>(logits.cols());
        const int target = masked_count(t, cfg.steps, n, cfg.shape);
        for (int b = 0; b < batch; ++b) {
            item = TensorT<float>({n, v});
            std::copy(logits.ptr() + static_cast<size_t>(b) * n * v,
                      logits.ptr() + static_cast<size_t>(b + 1) * n * v, item.ptr());
            auto s = sample_tokens(item, cfg.temperature, rngs[static_cast<size_t>(b)]);
            select_to_fix(s.confidence, s.ids, states[static_cast<size_t>(b)], target,
                          cfg.conf_temperature, t, cfg.steps, rngs[static_cast<size_t>(b)]);
        }
    }
    std::vector<TokenGrid> out;
    out.reserve(static_cast<size_t>(batch));
    for (auto& st : states) out.push_back(st.to_grid());
    return out;
}

TokenGrid vary(const DecodeHooks& hooks, const TokenGrid& source, double strength,
               const SamplerConfig& cfg, int mask_id, DecodeTrace* trace) {
    if (strength < 0.0 || strength > 1.0) throw DomainError("vary: strength outside [0, 1]");
    const int n = source.count();
    if (n < 1 || static_cast<int>(source.ids.size()) != n)
        throw ShapeError("vary: malformed source grid");
    const int k = static_cast<int>(std::lround(strength * n));

    std::vector<uint8_t> remask(static_cast<size_t>(n), 0);
    if (k > 0) {
        Rng sel(cfg.seed ^ kSelectionSalt);
        std::vector<int> order(static_cast<size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        for (int i = 0; i < k; ++i) {
            const int j = i + sel.uniform_int(n - i);
            std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
            remask[static_cast<size_t>(order[static_cast<size_t>(i)])] = 1;
        }
    }
    Rng rng(cfg.seed);
    return decode_from_state(hooks, MaskState::from_tokens(source, remask), cfg, mask_id, rng,
                             trace);
}

TokenGrid inpaint(const DecodeHooks& hooks, const TokenGrid& source,
                  const std::vector<uint8_t>& pixel_mask, int pix_h, int pix_w, int factor,
                  const SamplerConfig& cfg, int mask_id, DecodeTrace* trace) {
    if (factor < 1) throw ConfigError("inpaint: factor must be >= 1");
    if (pix_h != source.height * factor || pix_w != source.width * factor)
        throw ShapeError("inpaint: pixel mask extent must be grid extent times factor");
    if (static_cast<int>(pixel_mask.size()) != pix_h * pix_w)
        throw ShapeError("inpaint: pixel mask length mismatch");

    std::vector<uint8_t> remask(static_cast<size_t>(source.count()), 0);
    for (int ty = 0; ty < source.height; ++ty)
        for (int tx = 0; tx < source.width; ++tx) {
            bool any = false;
            for (int py = ty * factor; py < (ty + 1) * factor && !any; ++py)
                for (int px = tx * factor; px < (tx + 1) * factor && !any; ++px)
                    any = pixel_mask[static_cast<size_t>(py) * pix_w + px] != 0;
            remask[static_cast<size_t>(ty) * source.width + tx] = any ? 1 : 0;
        }
    Rng rng(cfg.seed);
    return decode_from_state(hooks, MaskState::from_tokens(source, remask), cfg, mask_id, rng,
                             trace);
}

WarpResult warp_frame(const TokenGrid& tokens, const TensorT<float>& codebook, double dx,
                      double dy) {
    const int h = tokens.height, w = tokens.width;
    if (h < 1 || w < 1 || static_cast<int>(tokens.ids.size()) != h * w)
        throw ShapeError("warp: malformed token grid");
    if (codebook.ndim() != 2) throw ShapeError("warp: codebook must be 2D");
    if (std::abs(dx) >= w || std::abs(dy) >= h)
        throw DomainError("warp: shift magnitude must stay below the grid extent");
    const int v = static_cast<int>(codebook.rows());
    const int d = static_cast<int>(codebook.cols());
    for (int id : tokens.ids)
        if (id < 0 || id >= v) throw DomainError("warp: token id outside the codebook");

    WarpResult out;
    out.tokens = tokens;
    out.remask.assign(static_cast<size_t>(h) * w, 0);
    std::vector<double> field(static_cast<size_t>(d));

    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double sy = y - dy;
            const double sx = x - dx;
            const int y0 = static_cast<int>(std::floor(sy));
            const int x0 = static_cast<int>(std::floor(sx));
            const double fy = sy - y0;
            const double fx = sx - x0;
            const double wgt[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
            const int cy[4] = {y0, y0, y0 + 1, y0 + 1};
            const int cx[4] = {x0, x0 + 1, x0, x0 + 1};

            bool outside = false;
            for (int c = 0; c < 4; ++c)
                if (wgt[c] > 0 && (cy[c] < 0 || cy[c] >= h || cx[c] < 0 || cx[c] >= w))
                    outside = true;
            const size_t pos = static_cast<size_t>(y) * w + x;
            if (outside) {
                out.remask[pos] = 1;
                continue;
            }
            if (fy == 0.0 && fx == 0.0) {
                // integer shift: exact id move, no re-quantization
                out.tokens.ids[pos] = tokens.ids[static_cast<size_t>(y0) * w + x0];
                continue;
            }
            std::fill(field.begin(), field.end(), 0.0);
            for (int c = 0; c < 4; ++c) {
                if (wgt[c] <= 0) continue;
                const int id = tokens.ids[static_cast<size_t>(cy[c]) * w + cx[c]];
                const float* row = codebook.ptr() + static_cast<size_t>(id) * d;
                for (int e = 0; e < d; ++e) field[static_cast<size_t>(e)] += wgt[c] * row[e];
            }
            out.tokens.ids[pos] = nearest_codebook_row(codebook, field.data());
        }
    return out;
}

std::vector<TokenGrid> animate(const DecodeHooks& hooks, const TensorT<float>& codebook, int h,
                               int w, int frames, double dx, double dy, const SamplerConfig& cfg,
                               int mask_id, std::vector<DecodeTrace>* traces) {
    if (frames < 1) throw DomainError("animate: frame count must be >= 1");
    if (traces) traces->assign(static_cast<size_t>(frames), DecodeTrace{});
    std::vector<TokenGrid> out;
    out.reserve(static_cast<size_t>(frames));
    out.push_back(generate(hooks, h, w, cfg, mask_id, traces ? &(*traces)[0] : nullptr));
    for (int k = 1; k < frames; ++k) {
        auto warped = warp_frame(out.back(), codebook, dx, dy);
        SamplerConfig fcfg = cfg;
        fcfg.seed = cfg.seed + static_cast<uint64_t>(k);
        Rng rng(fcfg.seed);
        out.push_back(decode_from_state(hooks, MaskState::from_tokens(warped.tokens, warped.remask),
                                        fcfg, mask_id, rng,
                                        traces ? &(*traces)[static_cast<size_t>(k)] : nullptr));
    }
    return out;
}

} // namespace mimg
