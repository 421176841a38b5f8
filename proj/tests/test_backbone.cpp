#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "mimg/backbone.hpp"
#include "mimg/conditioning.hpp"

using namespace mimg;

namespace {

template <class T>
CondBundleT<T> make_bundle(const CaptionEmbedderT<T>& emb, const std::vector<int>& ids, int batch) {
    std::vector<MicroConditioning> micro(static_cast<size_t>(batch));
    for (auto& m : micro) {
        m.orig_height = 32;
        m.orig_width = 32;
        m.quality = 1;
    }
    return emb.embed(ids, batch, micro);
}

template <class T>
struct TestRig {
    ParamStoreT<T> store;
    CondConfig ccfg;
    CaptionEmbedderT<T> embedder;
    UVitT<T> model;

    TestRig(ModelConfig mcfg, CondConfig cc, uint64_t seed) : ccfg(cc) {
        Rng rng(seed);
        embedder = CaptionEmbedderT<T>(store, "cond.", ccfg, rng);
        mcfg.cond_dim = ccfg.embed_dim;
        mcfg.film_dim = ccfg.film_dim();
        model = UVitT<T>(store, "bb.", mcfg, rng);
    }
};

CondConfig tiny_cond(int vocab_size) {
    CondConfig cc;
    cc.vocab_size = vocab_size;
    cc.embed_dim = 16;
    cc.max_len = 3;
    cc.micro_per_scalar = 2;
    return cc;
}

} // namespace

TEST_CASE("desk config builds, runs, and is seed-deterministic") {
    ModelConfig mc; // desk defaults: V=256, grid 8, d=128, depth 4, heads 4
    CondConfig cc;
    cc.vocab_size = 8;
    TestRig<float> a(mc, cc, 7), b(mc, cc, 7);

    REQUIRE(a.store.size() == b.store.size());
    for (size_t i = 0; i < a.store.size(); ++i) {
        const auto& pa = a.store.items()[i];
        const auto& pb = b.store.items()[i];
        CHECK(pa.name == pb.name);
        REQUIRE(pa.var.value().numel() == pb.var.value().numel());
        for (int64_t e = 0; e < pa.var.value().numel(); ++e)
            REQUIRE(pa.var.value().data[static_cast<size_t>(e)] ==
                    pb.var.value().data[static_cast<size_t>(e)]);
    }

    // token table has V+1 rows, MASK row last
    CHECK(a.store.get("bb.tok_table").var.value().rows() == mc.vocab + 1);

    // all-MASK forward: the step-0 decoding case
    std::vector<int> ids(static_cast<size_t>(mc.positions()), mc.mask_id());
    auto bundle = make_bundle(a.embedder, CaptionVocabulary::null_caption(cc.max_len), 1);
    NoGrad guard;
    auto logits = a.model.forward(ids, 1, bundle);
    CHECK(logits.value().rows() == mc.positions());
    CHECK(logits.value().cols() == mc.vocab);
    CHECK(logits.value().all_finite());
}

TEST_CASE("config validation") {
    ModelConfig mc;
    mc.grid = 7;
    mc.downsample = true;
    CHECK_THROWS_AS(mc.validate(), ConfigError);

    ModelConfig mc2;
    mc2.dim = 130;
    mc2.heads = 4;
    CHECK_THROWS_AS(mc2.validate(), ConfigError);

    ModelConfig mc3;
    mc3.depth = 0;
    CHECK_THROWS_AS(mc3.validate(), ConfigError);

    ModelConfig ok;
    CHECK_NOTHROW(ok.validate());
}

TEST_CASE("downsample variant halves the transformer extent, keeps output shape") {
    ModelConfig mc;
    mc.vocab = 16;
    mc.grid = 8;
    mc.dim = 32;
    mc.heads = 2;
    mc.depth = 1;
    mc.downsample = true;
    CondConfig cc = tiny_cond(6);
    TestRig<float> rig(mc, cc, 11);

    std::vector<int> ids(static_cast<size_t>(mc.positions()), mc.mask_id());
    auto bundle = make_bundle(rig.embedder, CaptionVocabulary::null_caption(cc.max_len), 1);
    NoGrad guard;
    ForwardStats stats;
    auto logits = rig.model.forward(ids, 1, bundle, &stats);
    CHECK(stats.transformer_rows == mc.positions() / 4);
    CHECK(logits.value().rows() == mc.positions());
    CHECK(logits.value().cols() == mc.vocab);

    // flat variant at the same width: transformer sees the full grid
    ModelConfig flat = mc;
    flat.downsample = false;
    TestRig<float> rig2(flat, cc, 11);
    ForwardStats stats2;
    rig2.model.forward(ids, 1, make_bundle(rig2.embedder, CaptionVocabulary::null_caption(cc.max_len), 1),
                       &stats2);
    CHECK(stats2.transformer_rows == mc.positions());
}

TEST_CASE("parameter counts: downsample adds parameters; freezing subtracts") {
    ModelConfig mc;
    mc.vocab = 16;
    mc.grid = 8;
    mc.dim = 32;
    mc.heads = 2;
    mc.depth = 1;
    CondConfig cc = tiny_cond(6);

    ModelConfig down = mc;
    down.downsample = true;
    TestRig<float> flat_rig(mc, cc, 3), down_rig(down, cc, 3);
    CHECK(down_rig.store.count_trainable() > flat_rig.store.count_trainable());

    // count equals the sum over the parameter tree
    int64_t manual = 0;
    for (const auto& p : flat_rig.store.items())
        if (p.trainable) manual += p.var.value().numel();
    CHECK(flat_rig.store.count_trainable() == manual);

    // freezing the conditioning tables drops them from the count
    int64_t before = flat_rig.store.count_trainable();
    flat_rig.store.set_trainable("cond.tok_table", false);
    flat_rig.store.set_trainable("cond.pos_table", false);
    int64_t expect = before - cc.vocab_size * cc.embed_dim - cc.max_len * cc.embed_dim;
    CHECK(flat_rig.store.count_trainable() == expect);
}

TEST_CASE("shape and domain errors on forward") {
    ModelConfig mc;
    mc.vocab = 16;
    mc.grid = 4;
    mc.dim = 16;
    mc.heads = 2;
    mc.depth = 1;
    CondConfig cc = tiny_cond(6);
    TestRig<float> rig(mc, cc, 5);
    auto bundle = make_bundle(rig.embedder, CaptionVocabulary::null_caption(cc.max_len), 1);
    NoGrad guard;

    std::vector<int> wrong(static_cast<size_t>(mc.positions()) - 1, 0);
    CHECK_THROWS_AS(rig.model.forward(wrong, 1, bundle), ShapeError);

    std::vector<int> bad(static_cast<size_t>(mc.positions()), mc.vocab + 1);
    CHECK_THROWS_AS(rig.model.forward(bad, 1, bundle), DomainError);
}

TEST_CASE("cross-attention is live: changing the caption changes logits") {
    ModelConfig mc;
    mc.vocab = 16;
    mc.grid = 4;
    mc.dim = 16;
    mc.heads = 2;
    mc.depth = 1;
    CondConfig cc = tiny_cond(8);
    TestRig<float> rig(mc, cc, 21);
    NoGrad guard;

    std::vector<int> ids(static_cast<size_t>(mc.positions()), mc.mask_id());
    std::vector<int> cap_a = {2, 3, 0};
    std::vector<int> cap_b = {4, 5, 6};
    auto la = rig.model.forward(ids, 1, make_bundle(rig.embedder, cap_a, 1));
    auto lb = rig.model.forward(ids, 1, make_bundle(rig.embedder, cap_b, 1));
    float maxdiff = 0;
    for (int64_t e = 0; e < la.value().numel(); ++e)
        maxdiff = std::max(maxdiff, std::abs(la.value().data[static_cast<size_t>(e)] -
                                             lb.value().data[static_cast<size_t>(e)]));
    CHECK(maxdiff > 0.0f);
}

TEST_CASE("positional embeddings are live: swapping tokens changes logits") {
    ModelConfig mc;
    mc.vocab = 16;
    mc.grid = 4;
    mc.dim = 16;
    mc.heads = 2;
    mc.depth = 1;
    CondConfig cc = tiny_cond(6);
    TestRig<float> rig(mc, cc, 23);
    NoGrad guard;
    auto bundle = make_bundle(rig.embedder, CaptionVocabulary::null_caption(cc.max_len), 1);

    std::vector<int> ids(static_cast<size_t>(mc.positions()), 0);
    ids[3] = 7;
    ids[9] = 12;
    auto base = rig.model.forward(ids, 1, bundle);
    std::swap(ids[3], ids[9]);
    auto swapped = rig.model.forward(ids, 1, bundle);
    float maxdiff = 0;
    for (int64_t e = 0; e < base.value().numel(); ++e)
        maxdiff = std::max(maxdiff, std::abs(base.value().data[static_cast<size_t>(e)] -
                                             swapped.value().data[static_cast<size_t>(e)]));
    CHECK(maxdiff > 0.0f);
}

TEST_CASE("MASK embedding row receives gradient when positions are masked") {
    ModelConfig mc;
    mc.vocab = 8;
    mc.grid = 4;
    mc.dim = 16;
    mc.heads = 2;
    mc.depth = 1;
    CondConfig cc = tiny_cond(6);
    TestRig<float> rig(mc, cc, 31);
    auto bundle = make_bundle(rig.embedder, CaptionVocabulary::null_caption(cc.max_len), 1);

    std::vector<int> ids(static_cast<size_t>(mc.positions()), 2);
    ids[5] = mc.mask_id();
    std::vector<int> targets(ids.size(), 3);
    std::vector<uint8_t> mask(ids.size(), 0);
    mask[5] = 1;

    rig.store.zero_grad();
    auto loss = masked_ce(rig.model.forward(ids, 1, bundle), targets, mask);
    loss.backward();

    const auto& g = rig.store.get("bb.tok_table").var.grad();
    float mask_row = 0;
    for (int c = 0; c < mc.dim; ++c)
        mask_row += std::abs(g.data[static_cast<size_t>(mc.mask_id()) * mc.dim + c]);
    CHECK(mask_row > 0.0f);

    // an id never present in the input gets no embedding gradient
    float unused_row = 0;
    for (int c = 0; c < mc.dim; ++c)
        unused_row += std::abs(g.data[static_cast<size_t>(7) * mc.dim + c]);
    CHECK(unused_row == 0.0f);
}

TEST_CASE("batched forward matches single-item forward") {
    ModelConfig mc;
    mc.vocab = 16;
    mc.grid = 4;
    mc.dim = 16;
    mc.heads = 2;
    mc.depth = 2;
    mc.downsample = true;
    CondConfig cc = tiny_cond(8);
    TestRig<float> rig(mc, cc, 41);
    NoGrad guard;

    const int n = mc.positions();
    Rng rng(99);
    std::vector<int> ids0(static_cast<size_t>(n)), ids1(static_cast<size_t>(n));
    for (auto& v : ids0) v = static_cast<int>(rng.uniform_int(mc.vocab + 1));
    for (auto& v : ids1) v = static_cast<int>(rng.uniform_int(mc.vocab + 1));

    std::vector<int> cap0 = {2, 3, 0}, cap1 = {4, 0, 0};
    auto single = rig.model.forward(ids0, 1, make_bundle(rig.embedder, cap0, 1));

    std::vector<int> both_ids = ids0;
    both_ids.insert(both_ids.end(), ids1.begin(), ids1.end());
    std::vector<int> both_caps = cap0;
    both_caps.insert(both_caps.end(), cap1.begin(), cap1.end());
    auto pair = rig.model.forward(both_ids, 2, make_bundle(rig.embedder, both_caps, 2));

    REQUIRE(pair.value().rows() == 2 * n);
    float maxdiff = 0;
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < mc.vocab; ++c)
            maxdiff = std::max(maxdiff, std::abs(single.value().at(r, c) - pair.value().at(r, c)));
    CHECK(maxdiff <= 1e-5f);
}

TEST_CASE("low-rank adapter path: zero B is inert, nonzero B shifts the output") {
    ParamStoreT<float> store;
    Rng rng(17);
    LinearLayerT<float> layer(store, "probe", 6, 4, rng);
    TensorT<float> xin = TensorT<float>::randn({3, 4}, rng);
    auto x = VarT<float>::leaf(xin, false);
    NoGrad guard;

    auto base = layer(x);
    layer.lora = true;
    layer.lora_scale = 2.0f;
    layer.lora_a = VarT<float>::leaf(TensorT<float>::randn({2, 4}, rng, 0.3f), false);
    layer.lora_b = VarT<float>::leaf(TensorT<float>::zeros({6, 2}), false);
    auto zeroed = layer(x);
    for (int64_t e = 0; e < base.value().numel(); ++e)
        REQUIRE(zeroed.value().data[static_cast<size_t>(e)] ==
                base.value().data[static_cast<size_t>(e)]);

    layer.lora_b = VarT<float>::leaf(TensorT<float>::randn({6, 2}, rng, 0.3f), false);
    auto shifted = layer(x);

    // oracle: x (W + s B A)^T
    const auto& W = layer.w.value();
    const auto& A = layer.lora_a.value();
    const auto& B = layer.lora_b.value();
    for (int r = 0; r < 3; ++r)
        for (int o = 0; o < 6; ++o) {
            double acc = layer.b.value().data[static_cast<size_t>(o)];
            for (int i = 0; i < 4; ++i) {
                double delta = 0;
                for (int k = 0; k < 2; ++k) delta += B.at(o, k) * A.at(k, i);
                acc += xin.at(r, i) * (W.at(o, i) + 2.0 * delta);
            }
            CHECK(std::abs(shifted.value().at(r, o) - acc) < 1e-5);
        }
}

namespace {

// Central-difference check of every parameter in the store against the
// analytic gradients already sitting in the params. Perturbs values in
// place; the loss closure rebuilds the graph from the live tensors.
template <class LossFn>
double fd_sweep(ParamStoreT<double>& store, const LossFn& loss_of, double eps = 1e-5) {
    double worst = 0;
    NoGrad guard;
    for (auto& p : store.items()) {
        auto& val = p.var.node()->value;
        const auto& grad = p.var.grad();
        for (int64_t e = 0; e < val.numel(); ++e) {
            const double orig = val.data[static_cast<size_t>(e)];
            val.data[static_cast<size_t>(e)] = orig + eps;
            const double fp = loss_of();
            val.data[static_cast<size_t>(e)] = orig - eps;
            const double fm = loss_of();
            val.data[static_cast<size_t>(e)] = orig;
            const double fd = (fp - fm) / (2 * eps);
            const double ad = grad.data[static_cast<size_t>(e)];
            worst = std::max(worst, std::abs(ad - fd) / std::max(1e-6, std::abs(ad) + std::abs(fd)));
        }
    }
    return worst;
}

} // namespace

TEST_CASE("full-model gradient check, flat variant (64-bit)") {
    ModelConfig mc;
    mc.vocab = 6;
    mc.grid = 4;
    mc.dim = 16;
    mc.heads = 2;
    mc.depth = 1;
    mc.conv_blocks = 1;
    CondConfig cc = tiny_cond(6);
    TestRig<double> rig(mc, cc, 101);

    const int n = mc.positions();
    Rng rng(5);
    std::vector<int> ids(static_cast<size_t>(n));
    std::vector<int> targets(static_cast<size_t>(n));
    std::vector<uint8_t> mask(static_cast<size_t>(n), 0);
    for (int i = 0; i < n; ++i) {
        const bool masked = rng.uniform() < 0.5;
        mask[static_cast<size_t>(i)] = masked ? 1 : 0;
        ids[static_cast<size_t>(i)] = masked ? mc.mask_id() : static_cast<int>(rng.uniform_int(mc.vocab));
        targets[static_cast<size_t>(i)] = static_cast<int>(rng.uniform_int(mc.vocab));
    }
    std::vector<int> cap = {2, 3, 4};
    auto bundle = make_bundle(rig.embedder, cap, 1);

    rig.store.zero_grad();
    auto loss = masked_ce(rig.model.forward(ids, 1, bundle), targets, mask);
    loss.backward();

    auto loss_of = [&]() {
        auto b = make_bundle(rig.embedder, cap, 1);
        return masked_ce(rig.model.forward(ids, 1, b), targets, mask).value().data[0];
    };
    CHECK(fd_sweep(rig.store, loss_of) < 1e-3);
}

TEST_CASE("full-model gradient check, downsample variant (64-bit)") {
    ModelConfig mc;
    mc.vocab = 6;
    mc.grid = 4;
    mc.dim = 8;
    mc.heads = 2;
    mc.depth = 1;
    mc.conv_blocks = 0;
    mc.downsample = true;
    CondConfig cc = tiny_cond(6);
    cc.embed_dim = 8;
    TestRig<double> rig(mc, cc, 103);

    const int n = mc.positions();
    Rng rng(9);
    std::vector<int> ids(static_cast<size_t>(n));
    std::vector<int> targets(static_cast<size_t>(n));
    std::vector<uint8_t> mask(static_cast<size_t>(n), 0);
    for (int i = 0; i < n; ++i) {
        const bool masked = rng.uniform() < 0.6;
        mask[static_cast<size_t>(i)] = masked ? 1 : 0;
        ids[static_cast<size_t>(i)] = masked ? mc.mask_id() : static_cast<int>(rng.uniform_int(mc.vocab));
        targets[static_cast<size_t>(i)] = static_cast<int>(rng.uniform_int(mc.vocab));
    }
    std::vector<int> cap = {4, 2, 0};
    auto bundle = make_bundle(rig.embedder, cap, 1);

    rig.store.zero_grad();
    auto loss = masked_ce(rig.model.forward(ids, 1, bundle), targets, mask);
    loss.backward();

    auto loss_of = [&]() {
        auto b = make_bundle(rig.embedder, cap, 1);
        return masked_ce(rig.model.forward(ids, 1, b), targets, mask).value().data[0];
    };
    CHECK(fd_sweep(rig.store, loss_of) < 1e-3);
}
