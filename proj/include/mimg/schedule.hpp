#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mimg/rng.hpp"

namespace mimg {

// Masking schedule used both at inference (how many tokens stay masked after
// step t of T) and at training time (random masking rate per sample).
// Cosine is the default; linear and square exist as ablation hooks.
enum class ScheduleShape { cosine, linear, square };

ScheduleShape schedule_shape_from_string(const std::string& name);
std::string to_string(ScheduleShape shape);

// Fraction of tokens still masked after step t of T. Cosine shape is
// cos((t/T)*(pi/2)); fraction(0) = 1 and fraction(T) = 0 for every shape.
// t outside [0, T] is a domain error.
double mask_fraction(int t, int steps, ScheduleShape shape = ScheduleShape::cosine);

// Integer masked count after step t, for N tokens total. Base rule is
// floor(fraction * N); a strict-progress clamp (at most count(t-1) - 1,
// floored at zero) guarantees the count reaches 0 in exactly T steps even
// when N is tiny and the floor would stall.
int masked_count(int t, int steps, int n_tokens, ScheduleShape shape = ScheduleShape::cosine);

// Masking rate for a given draw r in [0,1]: cos(r*pi/2).
double train_fraction_from_r(double r);

// Training-time masking rate: cos(r*pi/2) with r drawn uniform from [0,1).
double sample_train_fraction(Rng& rng);

// Choose exactly max(1, round(fraction*N)) mask positions uniformly without
// replacement (fraction 0 masks nothing). Rounding is half away from zero.
std::vector<uint8_t> make_train_mask(int n_tokens, double fraction, Rng& rng);

} // namespace mimg
