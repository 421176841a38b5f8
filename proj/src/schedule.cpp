#include "mimg/schedule.hpp"

#include <cmath>

#include "mimg/errors.hpp"

namespace mimg {

namespace {
constexpr double kHalfPi = 1.5707963267948966;
}

ScheduleShape schedule_shape_from_string(const std::string& name) {
    if (name == "cosine") return ScheduleShape::cosine;
    if (name == "linear") return ScheduleShape::linear;
    if (name == "square") return ScheduleShape::square;
    throw ConfigError("unknown schedule shape: " + name);
}

std::string to_string(ScheduleShape shape) {
    switch (shape) {
        case ScheduleShape::cosine: return "cosine";
        case ScheduleShape::linear: return "linear";
        case ScheduleShape::square: return "square";
    }
    return "cosine";
}

double mask_fraction(int t, int steps, ScheduleShape shape) {
    if (steps < 1) throw ConfigError("mask_fraction: steps must be >= 1");
    if (t < 0 || t > steps)
        throw DomainError("mask_fraction: step " + std::to_string(t) + " outside [0, " +
                          std::to_string(steps) + "]");
    if (t == steps) return 0.0; // exact endpoint, cos(pi/2) would leave dust
    const double u = static_cast<double>(t) / steps;
    switch (shape) {
        case ScheduleShape::cosine: return std::cos(u * kHalfPi);
        case ScheduleShape::linear: return 1.0 - u;
        case ScheduleShape::square: return (1.0 - u) * (1.0 - u);
    }
    return 0.0;
}

int masked_count(int t, int steps, int n_tokens, ScheduleShape shape) {
    if (n_tokens < 1) throw ConfigError("masked_count: need at least one token");
    if (t < 0 || t > steps)
        throw DomainError("masked_count: step " + std::to_string(t) + " outside [0, " +
                          std::to_string(steps) + "]");
    int count = n_tokens;
    for (int s = 1; s <= t; ++s) {
        const int base =
            static_cast<int>(std::floor(mask_fraction(s, steps, shape) * n_tokens));
        count = std::min(count - 1, base);
        if (count < 0) count = 0;
    }
    if (t == steps) count = 0;
    return count;
}

double train_fraction_from_r(double r) {
    if (r < 0.0 || r > 1.0) throw DomainError("train_fraction_from_r: r outside [0, 1]");
    if (r == 1.0) return 0.0;
    return std::cos(r * kHalfPi);
}

double sample_train_fraction(Rng& rng) { return train_fraction_from_r(rng.uniform()); }

std::vector<uint8_t> make_train_mask(int n_tokens, double fraction, Rng& rng) {
    if (n_tokens < 1) throw ConfigError("make_train_mask: need at least one token");
    if (fraction < 0.0 || fraction > 1.0)
        throw DomainError("make_train_mask: fraction outside [0, 1]");
    std::vector<uint8_t> mask(static_cast<size_t>(n_tokens), 0);
    if (fraction == 0.0) return mask;
    int want = static_cast<int>(std::lround(fraction * n_tokens));
    want = std::max(1, std::min(want, n_tokens));
    // Partial Fisher-Yates over the index list; first `want` slots win.
    std::vector<int> idx(static_cast<size_t>(n_tokens));
    for (int i = 0; i < n_tokens; ++i) idx[static_cast<size_t>(i)] = i;
    for (int i = 0; i < want; ++i) {
        const int j = i + rng.uniform_int(n_tokens - i);
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
        mask[static_cast<size_t>(idx[static_cast<size_t>(i)])] = 1;
    }
    return mask;
}

} // namespace mimg
