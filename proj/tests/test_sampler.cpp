#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "mimg/sampler.hpp"

using namespace mimg;

namespace {

// Deterministic stand-in for the model: logits depend on the position, the
// class, and the token currently at that position, so committed tokens feed
// back into later steps the way a real denoiser's would.
DecodeHooks fake_hooks(int n, int v) {
    DecodeHooks h;
    h.cond = [n, v](const std::vector<int>& ids, int batch) {
        TensorT<float> out({batch * n, v});
        for (int r = 0; r < batch * n; ++r) {
            const int pos = r % n;
            for (int c = 0; c < v; ++c)
                out.at(r, c) = static_cast<float>(std::sin(0.37 * pos + 1.31 * c) +
                                                  0.05 * ids[static_cast<size_t>(r)]);
        }
        return out;
    };
    h.uncond = [n, v](const std::vector<int>& ids, int batch) {
        TensorT<float> out({batch * n, v});
        for (int r = 0; r < batch * n; ++r) {
            const int pos = r % n;
            for (int c = 0; c < v; ++c)
                out.at(r, c) = static_cast<float>(std::cos(0.53 * pos + 0.71 * c) +
                                                  0.02 * ids[static_cast<size_t>(r)]);
        }
        return out;
    };
    return h;
}

bool same_grid(const TokenGrid& a, const TokenGrid& b) {
    return a.height == b.height && a.width == b.width && a.ids == b.ids;
}

} // namespace

TEST_CASE("guided logits: exact endpoints, arithmetic, affinity") {
    TensorT<float> uncond({1, 2});
    uncond.data = {0.0f, 0.0f};
    TensorT<float> cond({1, 2});
    cond.data = {1.0f, -1.0f};

    auto g3 = guided_logits(cond, uncond, 3.0f);
    CHECK(g3.data[0] == doctest::Approx(3.0f));
    CHECK(g3.data[1] == doctest::Approx(-3.0f));

    // s = 1 and s = 0 are exact copies, not arithmetic
    TensorT<float> u2({1, 2});
    u2.data = {0.1f, 0.7f};
    TensorT<float> c2({1, 2});
    c2.data = {0.3f, -0.2f};
    auto g1 = guided_logits(c2, u2, 1.0f);
    auto g0 = guided_logits(c2, u2, 0.0f);
    CHECK(g1.data[0] == c2.data[0]);
    CHECK(g1.data[1] == c2.data[1]);
    CHECK(g0.data[0] == u2.data[0]);
    CHECK(g0.data[1] == u2.data[1]);

    // affine in s: midpoint of two scales equals scale of the midpoint
    auto ga = guided_logits(c2, u2, 2.0f);
    auto gb = guided_logits(c2, u2, 6.0f);
    auto gm = guided_logits(c2, u2, 4.0f);
    for (int i = 0; i < 2; ++i)
        CHECK(gm.data[static_cast<size_t>(i)] ==
              doctest::Approx(0.5f * (ga.data[static_cast<size_t>(i)] +
                                      gb.data[static_cast<size_t>(i)])));

    TensorT<float> wrong({2, 1});
    CHECK_THROWS_AS(guided_logits(cond, wrong, 2.0f), ShapeError);
}

TEST_CASE("sample_tokens: argmax confidence, uniform case, determinism") {
    TensorT<float> logits({1, 3});
    logits.data = {2.0f, 1.0f, 0.0f};
    Rng rng(1);
    auto s = sample_tokens(logits, 0.0f, rng);
    CHECK(s.ids[0] == 0);
    CHECK(s.confidence[0] == doctest::Approx(0.6652f).epsilon(1e-3));

    // uniform logits: confidence exactly 1/V
    const int v = 64;
    TensorT<float> flat({2, v});
    for (auto& x : flat.data) x = 0.5f;
    auto su = sample_tokens(flat, 0.0f, rng);
    CHECK(su.confidence[0] == 1.0f / v);
    CHECK(su.confidence[1] == 1.0f / v);
    CHECK(su.ids[0] == 0); // tie rule: lowest index

    // same seed, same temperature: identical draws
    TensorT<float> r({16, 8});
    Rng fill(3);
    for (auto& x : r.data) x = static_cast<float>(fill.gaussian());
    Rng a(42), b(42);
    auto sa = sample_tokens(r, 0.9f, a);
    auto sb = sample_tokens(r, 0.9f, b);
    CHECK(sa.ids == sb.ids);
    CHECK(sa.confidence == sb.confidence);

    // temperature sampling roughly follows the softmax distribution
    TensorT<float> two({1, 2});
    two.data = {std::log(3.0f), 0.0f};
    Rng d(7);
    int hits = 0;
    const int draws = 20000;
    for (int i = 0; i < draws; ++i) {
        auto st = sample_tokens(two, 1.0f, d);
        hits += st.ids[0] == 0 ? 1 : 0;
    }
    CHECK(std::abs(hits / static_cast<double>(draws) - 0.75) < 0.02);

    TensorT<float> bad({1, 2});
    bad.data = {std::numeric_limits<float>::quiet_NaN(), 0.0f};
    Rng e(1);
    CHECK_THROWS_AS(sample_tokens(bad, 1.0f, e), NumericError);
    CHECK_THROWS_AS(sample_tokens(two, -0.5f, e), DomainError);
}

TEST_CASE("select_to_fix: ordering, ties, immutability, errors") {
    auto fresh = [] {
        MaskState st = MaskState::all_masked(2, 2);
        return st;
    };
    std::vector<int> sampled = {10, 11, 12, 13};

    MaskState st = fresh();
    Rng rng(1);
    select_to_fix({0.9f, 0.2f, 0.8f, 0.1f}, sampled, st, 2, 0.0f, 1, 12, rng);
    CHECK(st.fixed == std::vector<uint8_t>{1, 0, 1, 0});
    CHECK(st.ids[0] == 10);
    CHECK(st.ids[2] == 12);
    CHECK(st.masked_count() == 2);

    // target equal to the current masked count: no change
    MaskState st2 = fresh();
    select_to_fix({0.9f, 0.2f, 0.8f, 0.1f}, sampled, st2, 4, 1.0f, 1, 12, rng);
    CHECK(st2.masked_count() == 4);

    // equal confidences, no noise: lowest indices first
    MaskState st3 = fresh();
    select_to_fix({0.5f, 0.5f, 0.5f, 0.5f}, sampled, st3, 1, 0.0f, 1, 12, rng);
    CHECK(st3.fixed == std::vector<uint8_t>{1, 1, 1, 0});

    // previously fixed positions keep their ids
    std::vector<int> other = {20, 21, 22, 23};
    select_to_fix({0.1f, 0.2f, 0.3f, 0.9f}, other, st3, 0, 0.0f, 2, 12, rng);
    CHECK(st3.ids[0] == 10);
    CHECK(st3.ids[1] == 11);
    CHECK(st3.ids[2] == 12);
    CHECK(st3.ids[3] == 23);

    MaskState st4 = fresh();
    CHECK_THROWS_AS(select_to_fix({0.9f, 0.2f, 0.8f, 0.1f}, sampled, st4, 5, 0.0f, 1, 12, rng),
                    DomainError);
}

TEST_CASE("generate: forward accounting, termination, monotone commitment") {
    const int grid = 4, v = 7;
    auto hooks = fake_hooks(grid * grid, v);

    SamplerConfig cfg;
    cfg.steps = 12;
    cfg.guidance = 3.0f;
    cfg.seed = 5;
    DecodeTrace trace;
    auto g = generate(hooks, grid, grid, cfg, v, &trace);
    CHECK(trace.forwards == 24); // guided pass doubles the count
    CHECK(static_cast<int>(trace.masked_after.size()) == cfg.steps);
    CHECK(trace.masked_after.back() == 0);
    for (int id : g.ids) {
        CHECK(id >= 0);
        CHECK(id < v);
    }

    // fixed set grows monotonically, committed ids never change
    for (size_t s = 1; s < trace.fixed_after.size(); ++s)
        for (size_t i = 0; i < trace.fixed_after[s].size(); ++i) {
            CHECK(trace.fixed_after[s][i] >= trace.fixed_after[s - 1][i]);
            if (trace.fixed_after[s - 1][i])
                CHECK(trace.ids_after[s][i] == trace.ids_after[s - 1][i]);
        }

    // guidance pinned to 1: T forwards, no unconditional pass needed
    SamplerConfig plain = cfg;
    plain.guidance = 1.0f;
    DecodeHooks cond_only;
    cond_only.cond = hooks.cond;
    DecodeTrace t2;
    auto g2 = generate(cond_only, grid, grid, plain, v, &t2);
    CHECK(t2.forwards == 12);
    CHECK(g2.count() == grid * grid);

    // determinism: same seed, same grid
    auto ga = generate(hooks, grid, grid, cfg, v);
    CHECK(same_grid(g, ga));
}

TEST_CASE("decode terminates with zero masked in exactly T steps across sizes") {
    for (int n_side : {1, 2, 4, 10, 64}) {
        for (int steps : {1, 2, 5, 12, 16}) {
            auto hooks = fake_hooks(n_side * n_side, 5);
            SamplerConfig cfg;
            cfg.steps = steps;
            cfg.guidance = 1.0f;
            cfg.seed = static_cast<uint64_t>(n_side * 100 + steps);
            DecodeHooks cond_only;
            cond_only.cond = hooks.cond;
            DecodeTrace trace;
            auto g = generate(cond_only, n_side, n_side, cfg, 5, &trace);
            CHECK(static_cast<int>(trace.masked_after.size()) == steps);
            CHECK(trace.masked_after.back() == 0);
            CHECK(g.count() == n_side * n_side);
        }
    }
}

TEST_CASE("vary: strength endpoints and the round rule") {
    const int grid = 4, v = 7;
    auto hooks = fake_hooks(grid * grid, v);
    SamplerConfig cfg;
    cfg.steps = 8;
    cfg.guidance = 2.0f;
    cfg.seed = 9;

    TokenGrid source;
    source.height = source.width = grid;
    source.ids.resize(static_cast<size_t>(grid * grid));
    Rng fill(2);
    for (auto& id : source.ids) id = fill.uniform_int(v);

    DecodeTrace t0;
    auto same = vary(hooks, source, 0.0, cfg, v, &t0);
    CHECK(same_grid(same, source));
    CHECK(t0.forwards == 0);

    auto full = vary(hooks, source, 1.0, cfg, v);
    auto gen = generate(hooks, grid, grid, cfg, v);
    CHECK(same_grid(full, gen));

    DecodeTrace t5;
    auto half = vary(hooks, source, 0.5, cfg, v, &t5);
    CHECK(t5.initial_masked == 8);
    // committed positions survive the re-decode untouched
    for (size_t i = 0; i < t5.initial_fixed.size(); ++i)
        if (t5.initial_fixed[i]) CHECK(half.ids[i] == source.ids[i]);

    CHECK_THROWS_AS(vary(hooks, source, 1.5, cfg, v), DomainError);
}

TEST_CASE("inpaint: patch projection and preservation") {
    const int grid = 4, v = 7, f = 4;
    auto hooks = fake_hooks(grid * grid, v);
    SamplerConfig cfg;
    cfg.steps = 6;
    cfg.guidance = 1.5f;
    cfg.seed = 13;

    TokenGrid source;
    source.height = source.width = grid;
    source.ids.resize(static_cast<size_t>(grid * grid));
    Rng fill(4);
    for (auto& id : source.ids) id = fill.uniform_int(v);

    const int pix = grid * f;
    std::vector<uint8_t> empty(static_cast<size_t>(pix) * pix, 0);
    DecodeTrace t0;
    auto same = inpaint(hooks, source, empty, pix, pix, f, cfg, v, &t0);
    CHECK(same_grid(same, source));
    CHECK(t0.forwards == 0);

    // one pixel interior to patch (2,1) masks exactly that token
    std::vector<uint8_t> one = empty;
    one[static_cast<size_t>(2 * f + 1) * pix + (1 * f + 2)] = 1;
    DecodeTrace t1;
    auto patched = inpaint(hooks, source, one, pix, pix, f, cfg, v, &t1);
    CHECK(t1.initial_masked == 1);
    for (int i = 0; i < grid * grid; ++i)
        if (i != 2 * grid + 1) CHECK(patched.ids[static_cast<size_t>(i)] == source.ids[static_cast<size_t>(i)]);

    std::vector<uint8_t> all(static_cast<size_t>(pix) * pix, 1);
    auto redone = inpaint(hooks, source, all, pix, pix, f, cfg, v);
    CHECK(same_grid(redone, generate(hooks, grid, grid, cfg, v)));

    CHECK_THROWS_AS(inpaint(hooks, source, empty, pix - 1, pix, f, cfg, v), ShapeError);
}

TEST_CASE("warp_frame: identity, integer shifts, bilinear re-quantization") {
    TensorT<float> codebook({5, 3});
    Rng fill(11);
    for (auto& x : codebook.data) x = static_cast<float>(fill.gaussian());

    TokenGrid grid;
    grid.height = grid.width = 4;
    grid.ids = {0, 1, 2, 3, 4, 0, 1, 2, 3, 4, 0, 1, 2, 3, 4, 0};

    auto same = warp_frame(grid, codebook, 0.0, 0.0);
    CHECK(same.tokens.ids == grid.ids);
    CHECK(std::count(same.remask.begin(), same.remask.end(), 1) == 0);

    // unit shift right: first column re-masked, interior permuted exactly
    auto right = warp_frame(grid, codebook, 1.0, 0.0);
    int remasked = 0;
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            const bool flagged = right.remask[static_cast<size_t>(y) * 4 + x] != 0;
            if (flagged) ++remasked;
            CHECK(flagged == (x == 0));
            if (x >= 1)
                CHECK(right.tokens.ids[static_cast<size_t>(y) * 4 + x] ==
                      grid.ids[static_cast<size_t>(y) * 4 + x - 1]);
        }
    CHECK(remasked == 4);

    // fractional shift: hand-checked blend on a 1-D codebook
    TensorT<float> line({3, 1});
    line.data = {0.0f, 1.0f, 10.0f};
    TokenGrid row;
    row.height = 1;
    row.width = 3;
    row.ids = {0, 1, 2};
    auto blended = warp_frame(row, line, 0.5, 0.0);
    CHECK(blended.remask == std::vector<uint8_t>{1, 0, 0});
    CHECK(blended.tokens.ids[1] == 0); // blend 0.5: equidistant, lowest index wins
    CHECK(blended.tokens.ids[2] == 1); // blend 5.5 sits between rows 1 and 2

    CHECK_THROWS_AS(warp_frame(grid, codebook, 4.0, 0.0), DomainError);
}

TEST_CASE("animate: single frame, still shifts, propagation outside the boundary") {
    const int grid = 4, v = 6;
    auto hooks = fake_hooks(grid * grid, v);
    TensorT<float> codebook({v, 4});
    Rng fill(21);
    for (auto& x : codebook.data) x = static_cast<float>(fill.gaussian());

    SamplerConfig cfg;
    cfg.steps = 8;
    cfg.guidance = 2.0f;
    cfg.seed = 31;

    auto solo = animate(hooks, codebook, grid, grid, 1, 0.0, 0.0, cfg, v);
    REQUIRE(solo.size() == 1);
    CHECK(same_grid(solo[0], generate(hooks, grid, grid, cfg, v)));

    auto still = animate(hooks, codebook, grid, grid, 3, 0.0, 0.0, cfg, v);
    CHECK(same_grid(still[1], still[0]));
    CHECK(same_grid(still[2], still[0]));

    auto moving = animate(hooks, codebook, grid, grid, 3, 1.0, 0.0, cfg, v);
    for (int k = 1; k < 3; ++k)
        for (int y = 0; y < grid; ++y)
            for (int x = 1; x < grid; ++x)
                CHECK(moving[static_cast<size_t>(k)].ids[static_cast<size_t>(y) * grid + x] ==
                      moving[static_cast<size_t>(k - 1)].ids[static_cast<size_t>(y) * grid + x - 1]);

    CHECK_THROWS_AS(animate(hooks, codebook, grid, grid, 0, 0.0, 0.0, cfg, v), DomainError);
}

TEST_CASE("batched generation reproduces per-seed single runs") {
    const int grid = 4, v = 7;
    auto hooks = fake_hooks(grid * grid, v);
    SamplerConfig cfg;
    cfg.steps = 10;
    cfg.guidance = 2.5f;
    cfg.seed = 77;

    DecodeTrace trace;
    auto batch = generate_batch(hooks, grid, grid, 3, cfg, v, &trace);
    REQUIRE(batch.size() == 3);
    CHECK(trace.forwards == 20); // one cond + one uncond per step, batch-wide

    for (int i = 0; i < 3; ++i) {
        SamplerConfig item = cfg;
        item.seed = cfg.seed + static_cast<uint64_t>(i);
        auto single = generate(hooks, grid, grid, item, v);
        CHECK(same_grid(batch[static_cast<size_t>(i)], single));
    }
}
