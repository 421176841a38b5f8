#include "mimg/bench.hpp"

#include <algorithm>
#include <chrono>

namespace mimg {

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace

BenchReport bench_throughput(Pipeline& pipe, const std::vector<int>& caption_ids,
                             const MicroConditioning& micro, const BenchConfig& bc) {
    bc.validate();
    auto base = make_decode_hooks(pipe, caption_ids, micro);

    BenchReport report;
    report.steps = bc.sampler.steps;
    report.guidance = bc.sampler.guidance;

    const int grid = pipe.cfg.model.grid;
    const int mask_id = pipe.cfg.model.mask_id();

    for (int batch : bc.batch_sizes) {
        int64_t forwards = 0;
        DecodeHooks counted;
        counted.cond = [&](const std::vector<int>& ids, int b) {
            ++forwards;
            return base.cond(ids, b);
        };
        if (base.uncond)
            counted.uncond = [&](const std::vector<int>& ids, int b) {
                ++forwards;
                return base.uncond(ids, b);
            };

        for (int i = 0; i < bc.warmup; ++i)
            generate_batch(counted, grid, grid, batch, bc.sampler, mask_id);

        std::vector<double> times;
        times.reserve(static_cast<size_t>(bc.reps));
        int64_t per_run = 0;
        for (int i = 0; i < bc.reps; ++i) {
            forwards = 0;
            const auto t0 = std::chrono::steady_clock::now();
            generate_batch(counted, grid, grid, batch, bc.sampler, mask_id);
            const auto t1 = std::chrono::steady_clock::now();
            times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
            per_run = forwards;
        }

        const int64_t expected =
            bc.sampler.guidance == 1.0 ? bc.sampler.steps : 2ll * bc.sampler.steps;
        if (per_run != expected)
            throw NumericError("bench: forward count " + std::to_string(per_run) +
                               " does not match the schedule accounting " +
                               std::to_string(expected));

        BenchEntry e;
        e.batch = batch;
        e.median_ms = median(times);
        e.per_image_ms = e.median_ms / batch;
        e.forwards = per_run;
        report.entries.push_back(e);
    }
    return report;
}

} // namespace mimg
