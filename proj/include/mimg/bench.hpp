#pragma once

#include <vector>

#include "mimg/pipeline.hpp"
#include "mimg/sampler.hpp"

namespace mimg {

struct BenchConfig {
    std::vector<int> batch_sizes = {1, 8};
    int reps = 5;   // timed repetitions, median reported
    int warmup = 2; // discarded runs before timing starts
    SamplerConfig sampler;

    void validate() const {
        if (batch_sizes.empty()) throw ConfigError("bench: need at least one batch size");
        for (int b : batch_sizes)
            if (b < 1) throw ConfigError("bench: batch sizes must be >= 1");
        if (reps < 1 || warmup < 0) throw ConfigError("bench: bad reps/warmup");
        sampler.validate();
    }
};

struct BenchEntry {
    int batch = 0;
    double median_ms = 0;    // one full generate of the whole batch
    double per_image_ms = 0; // median_ms / batch
    int64_t forwards = 0;    // model evaluations in one run (T or 2T)
};

struct BenchReport {
    std::vector<BenchEntry> entries;
    int steps = 0;
    double guidance = 1.0;
};

// Times end-to-end token generation per batch size: warmup runs first, then
// the median wall time of the timed repetitions. Forward counts come from
// counting hook invocations and are checked against the schedule accounting.
BenchReport bench_throughput(Pipeline& pipe, const std::vector<int>& caption_ids,
                             const MicroConditioning& micro, const BenchConfig& bc);

} // namespace mimg
