#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mimg/adam.hpp"
#include "mimg/pipeline.hpp"
#include "mimg/schedule.hpp"

namespace mimg {

struct TrainConfig {
    int steps = 200;
    int batch = 4;
    int grad_accum = 1;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double drop_prob = 0.1;
    uint64_t seed = 0;

    int effective_batch() const { return batch * grad_accum; }
    void validate() const {
        if (steps < 1 || batch < 1 || grad_accum < 1)
            throw ConfigError("train: steps, batch, and accumulation must be >= 1");
        if (lr <= 0) throw ConfigError("train: learning rate must be positive");
        if (drop_prob < 0 || drop_prob > 1) throw ConfigError("train: drop_prob outside [0, 1]");
    }
};

struct TrainMetrics {
    double loss = 0;     // masked cross-entropy over the effective batch
    double accuracy = 0; // argmax accuracy at masked positions
    int masked_positions = 0;
};

// One optimizer step over batch * grad_accum items. All per-item draws
// (masking rate, mask layout, condition dropout) happen in a single pass
// before the accumulation split, so accumulation 4x1 consumes the generator
// exactly like batch 4 and produces the same update. Targets come from the
// frozen tokenizer; the loss is the mean over every masked position in the
// effective batch.
template <class T>
TrainMetrics train_step(PipelineT<T>& pipe, const std::vector<TrainItem>& items, AdamT<T>& opt,
                        const TrainConfig& cfg, Rng& rng, int64_t step_index = 0) {
    cfg.validate();
    const int nb = cfg.batch;
    const int total = cfg.effective_batch();
    if (static_cast<int>(items.size()) != total)
        throw ShapeError("train_step: expected batch * grad_accum items");
    const int n = pipe.cfg.model.positions();
    const int mask_id = pipe.cfg.model.mask_id();
    const int max_len = pipe.cfg.cond.max_len;

    std::vector<std::vector<int>> targets(static_cast<size_t>(total));
    std::vector<std::vector<int>> inputs(static_cast<size_t>(total));
    std::vector<std::vector<uint8_t>> masks(static_cast<size_t>(total));
    std::vector<std::vector<int>> captions(static_cast<size_t>(total));
    int total_masked = 0;
    {
        NoGrad guard;
        for (int i = 0; i < total; ++i) {
            const auto& item = items[static_cast<size_t>(i)];
            auto grid = pipe.vq.encode_image(item.image);
            if (grid.count() != n)
                throw ShapeError("train_step: image tokens do not match the model grid");
            targets[static_cast<size_t>(i)] = grid.ids;
            const double fraction = sample_train_fraction(rng);
            masks[static_cast<size_t>(i)] = make_train_mask(n, fraction, rng);
            inputs[static_cast<size_t>(i)] = grid.ids;
            for (int j = 0; j < n; ++j)
                if (masks[static_cast<size_t>(i)][static_cast<size_t>(j)]) {
                    inputs[static_cast<size_t>(i)][static_cast<size_t>(j)] = mask_id;
                    ++total_masked;
                }
            const bool drop = rng.uniform() < cfg.drop_prob;
            if (static_cast<int>(item.caption_ids.size()) != max_len)
                throw ShapeError("train_step: caption ids must be padded to max_len");
            captions[static_cast<size_t>(i)] =
                drop ? CaptionVocabulary::null_caption(max_len) : item.caption_ids;
        }
    }

    pipe.store.zero_grad();
    TrainMetrics met;
    met.masked_positions = total_masked;
    int64_t correct = 0;
    for (int a = 0; a < cfg.grad_accum; ++a) {
        std::vector<int> in_ids, tg_ids, caps;
        std::vector<uint8_t> mk;
        std::vector<MicroConditioning> mics;
        in_ids.reserve(static_cast<size_t>(nb) * n);
        for (int b = 0; b < nb; ++b) {
            const int i = a * nb + b;
            in_ids.insert(in_ids.end(), inputs[static_cast<size_t>(i)].begin(),
                          inputs[static_cast<size_t>(i)].end());
            tg_ids.insert(tg_ids.end(), targets[static_cast<size_t>(i)].begin(),
                          targets[static_cast<size_t>(i)].end());
            mk.insert(mk.end(), masks[static_cast<size_t>(i)].begin(),
                      masks[static_cast<size_t>(i)].end());
            caps.insert(caps.end(), captions[static_cast<size_t>(i)].begin(),
                        captions[static_cast<size_t>(i)].end());
            mics.push_back(items[static_cast<size_t>(i)].micro);
        }
        auto bundle = pipe.embedder.embed(caps, nb, mics);
        auto logits = pipe.backbone.forward(in_ids, nb, bundle);
        auto ce = masked_ce(logits, tg_ids, mk);
        int mb_masked = 0;
        for (uint8_t m : mk) mb_masked += m ? 1 : 0;
        auto loss = scale(ce, static_cast<T>(mb_masked) / static_cast<T>(total_masked));
        loss.backward();
        met.loss += static_cast<double>(loss.value().data[0]);

        NoGrad guard;
        const auto& lv = logits.value();
        const int v = static_cast<int>(lv.cols());
        for (size_t r = 0; r < mk.size(); ++r)
            if (mk[r] &&
                argmax_row(lv.ptr() + r * static_cast<size_t>(v), v) == tg_ids[r])
                ++correct;
    }
    met.accuracy = static_cast<double>(correct) / total_masked;
    if (!std::isfinite(met.loss))
        throw NumericError("train step " + std::to_string(step_index) +
                           ": non-finite loss over " + std::to_string(total_masked) +
                           " masked positions");
    opt.step(pipe.store);
    return met;
}

// Low-rank adapters on every query/key/value projection (self and cross
// attention). A starts Gaussian, B starts zero, so the adapted model is
// exactly the base model until training moves B; base weights freeze.
struct LoraConfig {
    int rank = 16;
    double alpha = 32.0;

    double scaling() const { return alpha / rank; }
    void validate() const {
        if (rank < 1) throw ConfigError("lora: rank must be >= 1");
        if (alpha <= 0) throw ConfigError("lora: alpha must be positive");
    }
};

template <class T>
void attach_lora(UVitT<T>& model, ParamStoreT<T>& store, const LoraConfig& lc, Rng& rng) {
    lc.validate();
    auto targets = model.qkv_projections();
    if (targets.empty()) throw ConfigError("lora: model has no projection targets");
    for (auto* l : targets)
        if (l->lora) throw ConfigError("lora: adapters already attached");
    for (auto* l : targets) {
        const int out = l->out_dim();
        const int in = l->in_dim();
        l->lora_a = store.add(l->name + ".lora_a", TensorT<T>::randn({lc.rank, in}, rng, T(0.01)));
        l->lora_b = store.add(l->name + ".lora_b", TensorT<T>::zeros({out, lc.rank}));
        l->lora_scale = static_cast<T>(lc.scaling());
        l->lora = true;
        store.set_trainable(l->name + ".w", false);
        if (l->b.defined()) store.set_trainable(l->name + ".b", false);
    }
}

// Folds every adapter into its base weight (W += s*B*A), removes the adapter
// parameters, and returns how many layers were merged. Calling it again is a
// no-op.
template <class T>
int merge_lora(UVitT<T>& model, ParamStoreT<T>& store) {
    int merged = 0;
    for (auto* l : model.qkv_projections()) {
        if (!l->lora) continue;
        auto& w = l->w.node()->value;
        const auto& a = l->lora_a.value();
        const auto& b = l->lora_b.value();
        const int out = static_cast<int>(w.rows());
        const int in = static_cast<int>(w.cols());
        const int r = static_cast<int>(a.rows());
        for (int o = 0; o < out; ++o)
            for (int k = 0; k < r; ++k) {
                const T bk = b.at(o, k) * l->lora_scale;
                for (int i = 0; i < in; ++i) w.at(o, i) += bk * a.at(k, i);
            }
        store.remove(l->name + ".lora_a");
        store.remove(l->name + ".lora_b");
        l->lora = false;
        l->lora_a = VarT<T>();
        l->lora_b = VarT<T>();
        l->lora_scale = T(0);
        ++merged;
    }
    return merged;
}

} // namespace mimg
