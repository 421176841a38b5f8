#pragma once

#include <string>
#include <vector>

#include "mimg/backbone.hpp"
#include "mimg/conditioning.hpp"
#include "mimg/image_io.hpp"
#include "mimg/sampler.hpp"
#include "mimg/vq.hpp"

namespace mimg {

// Everything needed to reconstruct the full model stack. The derived fields
// of `model` (vocab, grid, conditioning widths) are overwritten at build
// time so the three sub-configs cannot drift apart.
struct PipelineConfig {
    int image_size = 32;
    uint64_t init_seed = 0;
    VqConfig vq;
    CondConfig cond;
    ModelConfig model;

    void validate() const {
        vq.validate();
        if (image_size < vq.factor || image_size % vq.factor != 0)
            throw ConfigError("pipeline: image size must be a positive multiple of the factor");
        if (image_size / vq.factor < 3)
            throw ConfigError("pipeline: token grid must be at least 3x3");
    }
};

// One training example: an image, its caption (already padded to max_len),
// and the crop/quality record that feeds the micro channels.
struct TrainItem {
    Image image;
    std::vector<int> caption_ids;
    MicroConditioning micro;
};

template <class T>
struct PipelineT {
    PipelineConfig cfg;
    CaptionVocabulary vocab;
    ParamStoreT<T> store;
    VqModelT<T> vq;
    CaptionEmbedderT<T> embedder;
    UVitT<T> backbone;

    PipelineT(PipelineConfig c, CaptionVocabulary v) : cfg(std::move(c)), vocab(std::move(v)) {
        cfg.cond.vocab_size = vocab.size();
        cfg.model.vocab = cfg.vq.vocab;
        cfg.model.grid = cfg.image_size / cfg.vq.factor;
        cfg.model.cond_dim = cfg.cond.embed_dim;
        cfg.model.film_dim = cfg.cond.film_dim();
        cfg.validate();
        cfg.model.validate();
        Rng rng(cfg.init_seed);
        vq = VqModelT<T>(store, "vq.", cfg.vq, rng);
        embedder = CaptionEmbedderT<T>(store, "cond.", cfg.cond, rng);
        backbone = UVitT<T>(store, "bb.", cfg.model, rng);
    }

    void freeze_prefix(const std::string& prefix) {
        for (auto& p : store.items())
            if (p.name.rfind(prefix, 0) == 0) store.set_trainable(p.name, false);
    }
    void freeze_vq() { freeze_prefix("vq."); }
    void freeze_all() {
        for (auto& p : store.items()) store.set_trainable(p.name, false);
    }

    std::vector<int> encode_caption(const std::string& caption) const {
        return vocab.encode(caption, cfg.cond.max_len);
    }
};

using Pipeline = PipelineT<float>;

// Sampler access to a frozen pipeline: the conditional hook embeds the given
// caption (repeated per batch item), the unconditional hook embeds the NULL
// caption; both share the micro record. The pipeline must outlive the hooks.
inline DecodeHooks make_decode_hooks(const Pipeline& pipe, const std::vector<int>& caption_ids,
                                     const MicroConditioning& micro) {
    const int len = pipe.cfg.cond.max_len;
    if (static_cast<int>(caption_ids.size()) != len)
        throw ShapeError("decode hooks: caption ids must be padded to max_len");
    auto run = [&pipe, micro, len](const std::vector<int>& cap, const std::vector<int>& ids,
                                   int batch) {
        NoGrad guard;
        std::vector<int> caps;
        caps.reserve(static_cast<size_t>(batch) * len);
        for (int b = 0; b < batch; ++b) caps.insert(caps.end(), cap.begin(), cap.end());
        std::vector<MicroConditioning> mics(static_cast<size_t>(batch), micro);
        auto bundle = pipe.embedder.embed(caps, batch, mics);
        return pipe.backbone.forward(ids, batch, bundle).value();
    };
    DecodeHooks h;
    h.cond = [run, caption_ids](const std::vector<int>& ids, int batch) {
        return run(caption_ids, ids, batch);
    };
    const auto null_ids = CaptionVocabulary::null_caption(len);
    h.uncond = [run, null_ids](const std::vector<int>& ids, int batch) {
        return run(null_ids, ids, batch);
    };
    return h;
}

} // namespace mimg
