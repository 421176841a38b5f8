#pragma once

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mimg/nn_ops.hpp"
#include "mimg/params.hpp"
#include "mimg/rng.hpp"

namespace mimg {

// Caption token table. Ids are dense from 0 with two reserved entries:
// PAD (0) fills captions to a fixed length and never contributes to the
// pooled stream; NULL (1) is the learned unconditional embedding used for
// guidance-free passes and condition dropout.
class CaptionVocabulary {
public:
    static constexpr const char* kPadToken = "<pad>";
    static constexpr const char* kNullToken = "<null>";

    CaptionVocabulary() {
        add(kPadToken);
        add(kNullToken);
    }

    int add(const std::string& token) {
        auto it = ids_.find(token);
        if (it != ids_.end()) return it->second;
        int id = static_cast<int>(tokens_.size());
        ids_[token] = id;
        tokens_.push_back(token);
        return id;
    }

    int id_of(const std::string& token) const {
        auto it = ids_.find(token);
        if (it == ids_.end()) throw VocabError("unknown caption token: '" + token + "'");
        return it->second;
    }
    const std::string& token_of(int id) const {
        if (id < 0 || id >= size()) throw DomainError("vocabulary id out of range");
        return tokens_[static_cast<size_t>(id)];
    }
    bool contains(const std::string& token) const { return ids_.count(token) != 0; }
    int size() const { return static_cast<int>(tokens_.size()); }
    static constexpr int pad_id() { return 0; }
    static constexpr int null_id() { return 1; }

    // Whitespace tokenization, padded with PAD to exactly max_len ids.
    std::vector<int> encode(const std::string& caption, int max_len) const {
        std::istringstream ss(caption);
        std::vector<int> out;
        std::string tok;
        while (ss >> tok) out.push_back(id_of(tok));
        if (static_cast<int>(out.size()) > max_len)
            throw DomainError("caption longer than " + std::to_string(max_len) + " tokens");
        out.resize(static_cast<size_t>(max_len), pad_id());
        return out;
    }

    // The unconditional caption: a NULL token padded to max_len.
    static std::vector<int> null_caption(int max_len) {
        std::vector<int> out(static_cast<size_t>(max_len), pad_id());
        out[0] = null_id();
        return out;
    }

    const std::vector<std::string>& tokens() const { return tokens_; }

private:
    std::map<std::string, int> ids_;
    std::vector<std::string> tokens_;
};

// Scalar side information about how a training crop was produced, plus the
// quality score the generator assigns. All values are in raw pixel units.
struct MicroConditioning {
    float orig_height = 0;
    float orig_width = 0;
    float crop_top = 0;
    float crop_left = 0;
    float quality = 0;

    void validate() const {
        if (orig_height < 0 || orig_width < 0)
            throw DomainError("micro conditioning: negative original extent");
        if (crop_top < 0 || crop_left < 0 || crop_top > orig_height || crop_left > orig_width)
            throw DomainError("micro conditioning: crop outside original image");
    }
};

// Fixed sinusoidal features: for k in [0, dim/2), w_k = 10000^(-2k/dim) and
// the output is [sin(w_k v)..., cos(w_k v)...]. dim must be even.
template <class T = float>
std::vector<T> sinusoidal_embed(double value, int dim) {
    if (dim < 2 || dim % 2 != 0) throw ConfigError("sinusoidal_embed: dim must be even");
    std::vector<T> out(static_cast<size_t>(dim));
    const int half = dim / 2;
    for (int k = 0; k < half; ++k) {
        const double w = std::pow(10000.0, -2.0 * k / dim);
        out[static_cast<size_t>(k)] = static_cast<T>(std::sin(w * value));
        out[static_cast<size_t>(half + k)] = static_cast<T>(std::cos(w * value));
    }
    return out;
}

// Concatenated sinusoidal embeddings of the five micro scalars, in the fixed
// order: original height, original width, crop top, crop left, quality.
template <class T = float>
std::vector<T> build_micro(const MicroConditioning& micro, int per_scalar_dim) {
    micro.validate();
    const double scalars[5] = {micro.orig_height, micro.orig_width, micro.crop_top,
                               micro.crop_left, micro.quality};
    std::vector<T> out;
    out.reserve(static_cast<size_t>(per_scalar_dim) * 5);
    for (double s : scalars) {
        auto block = sinusoidal_embed<T>(s, per_scalar_dim);
        out.insert(out.end(), block.begin(), block.end());
    }
    return out;
}

struct CondConfig {
    int vocab_size = 0;       // filled in from the vocabulary
    int embed_dim = 64;       // caption feature width
    int max_len = 8;          // fixed caption length after padding
    int micro_per_scalar = 32; // sinusoid width per micro scalar
    double drop_prob = 0.1;   // condition dropout during training

    int micro_dim() const { return 5 * micro_per_scalar; }
    int film_dim() const { return embed_dim + micro_dim(); }
};

// Everything the backbone consumes about the conditioning of a batch:
// the cross-attention sequence stream, the pooled stream, and the micro
// channels that are appended to pooled for the adaptive-norm pathway.
template <class T>
struct CondBundleT {
    VarT<T> seq;         // [batch*max_len, embed_dim]
    VarT<T> pooled;      // [batch, embed_dim]
    TensorT<T> micro;    // [batch, micro_dim]
    std::vector<int> ids; // batch*max_len token ids (kept for dropout)
    int batch = 0;
    int len = 0;

    // Pooled stream with micro channels appended: input to the film heads.
    VarT<T> film_input() const {
        return concat_cols(pooled, VarT<T>::leaf(micro));
    }
};

using CondBundle = CondBundleT<float>;

// Trainable caption embedder: a token table plus learned positional offsets.
// The pooled stream is the mean of the raw token embeddings over non-PAD
// positions (positional offsets excluded), so a single-token caption pools
// to exactly that token's embedding row.
template <class T>
class CaptionEmbedderT {
public:
    CaptionEmbedderT() = default;
    CaptionEmbedderT(ParamStoreT<T>& store, const std::string& prefix, const CondConfig& cfg,
                     Rng& rng)
        : cfg_(cfg) {
        if (cfg.vocab_size < 2) throw ConfigError("caption embedder: vocabulary too small");
        if (cfg.max_len < 1) throw ConfigError("caption embedder: max_len must be >= 1");
        tok_table_ = store.add(prefix + "tok_table",
                               TensorT<T>::randn({cfg.vocab_size, cfg.embed_dim}, rng, T(0.02)));
        pos_table_ = store.add(prefix + "pos_table",
                               TensorT<T>::randn({cfg.max_len, cfg.embed_dim}, rng, T(0.02)));
    }

    const CondConfig& config() const { return cfg_; }

    // ids is batch*max_len. Each caption needs at least one non-PAD token.
    CondBundleT<T> embed(const std::vector<int>& ids, int batch,
                         const std::vector<MicroConditioning>& micro) const {
        if (batch < 1 || static_cast<int>(ids.size()) != batch * cfg_.max_len)
            throw ShapeError("embed_caption: ids length must be batch*max_len");
        if (static_cast<int>(micro.size()) != batch)
            throw ShapeError("embed_caption: one micro record per item");
        std::vector<uint8_t> keep(ids.size());
        for (int b = 0; b < batch; ++b) {
            bool any = false;
            for (int i = 0; i < cfg_.max_len; ++i) {
                bool is_pad = ids[static_cast<size_t>(b) * cfg_.max_len + i] ==
                              CaptionVocabulary::pad_id();
                keep[static_cast<size_t>(b) * cfg_.max_len + i] = is_pad ? 0 : 1;
                any = any || !is_pad;
            }
            if (!any) throw DomainError("embed_caption: all-PAD caption");
        }
        CondBundleT<T> bundle;
        auto tok = embedding(tok_table_, ids);
        bundle.seq = add(tok, tile_rows(pos_table_, batch));
        bundle.pooled = masked_mean_rows(tok, keep, batch);
        bundle.micro = TensorT<T>({batch, cfg_.micro_dim()});
        for (int b = 0; b < batch; ++b) {
            auto block = build_micro<T>(micro[static_cast<size_t>(b)], cfg_.micro_per_scalar);
            std::copy(block.begin(), block.end(),
                      bundle.micro.ptr() + static_cast<size_t>(b) * cfg_.micro_dim());
        }
        bundle.ids = ids;
        bundle.batch = batch;
        bundle.len = cfg_.max_len;
        return bundle;
    }

    // Per item, with probability p, replace the caption by the NULL caption
    // and re-embed. Micro channels are kept. Gradients keep flowing into the
    // NULL row, which is how the unconditional embedding trains.
    CondBundleT<T> drop_condition(const CondBundleT<T>& bundle, double p, Rng& rng,
                                  const std::vector<MicroConditioning>& micro) const {
        if (p < 0.0 || p > 1.0) throw DomainError("drop_condition: p outside [0, 1]");
        std::vector<int> ids = bundle.ids;
        bool changed = false;
        auto null_ids = CaptionVocabulary::null_caption(cfg_.max_len);
        for (int b = 0; b < bundle.batch; ++b) {
            if (rng.uniform() < p) {
                std::copy(null_ids.begin(), null_ids.end(),
                          ids.begin() + static_cast<size_t>(b) * cfg_.max_len);
                changed = true;
            }
        }
        if (!changed) return bundle;
        return embed(ids, bundle.batch, micro);
    }

    VarT<T>& token_table() { return tok_table_; }
    const VarT<T>& token_table() const { return tok_table_; }

private:
    CondConfig cfg_;
    VarT<T> tok_table_;
    VarT<T> pos_table_;
};

using CaptionEmbedder = CaptionEmbedderT<float>;

// Adaptive-norm head for one backbone block: two zero-initialized bias-free
// projections of the pooled+micro vector. gamma = 1 + W_g c, beta = W_b c,
// and the modulation is h <- gamma * layer_norm(h) + beta. Zero init makes
// the block start as plain layer norm.
template <class T>
struct FilmHeadT {
    VarT<T> w_gamma;
    VarT<T> w_beta;

    FilmHeadT() = default;
    FilmHeadT(ParamStoreT<T>& store, const std::string& prefix, int feature_dim, int cond_dim) {
        w_gamma = store.add(prefix + "gamma_w", TensorT<T>::zeros({feature_dim, cond_dim}));
        w_beta = store.add(prefix + "beta_w", TensorT<T>::zeros({feature_dim, cond_dim}));
    }

    // x_norm is [batch*n, d]; cond is [batch, cond_dim].
    VarT<T> apply(const VarT<T>& x_norm, const VarT<T>& cond, int batch) const {
        auto gamma = add_scalar(linear(cond, w_gamma), T(1));
        auto beta = linear(cond, w_beta);
        return rowwise_affine(x_norm, gamma, beta, batch);
    }
};

} // namespace mimg
