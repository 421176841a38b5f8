#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mimg/conditioning.hpp"
#include "mimg/nn_ops.hpp"
#include "mimg/params.hpp"
#include "mimg/rng.hpp"

namespace mimg {

struct ModelConfig {
    int vocab = 256;       // codebook size V; MASK id = vocab (one past the end)
    int grid = 8;          // token grid extent
    int dim = 128;         // feature width
    int heads = 4;
    int depth = 4;         // transformer blocks
    int conv_blocks = 1;   // residual conv blocks on each side of the core
    bool downsample = false; // one 2x down/up pair around the transformer
    int cond_dim = 64;     // caption sequence width (cross-attention keys/values)
    int film_dim = 224;    // pooled+micro width (adaptive norm input)

    int mask_id() const { return vocab; }
    int positions() const { return grid * grid; }
    int inner_grid() const { return downsample ? grid / 2 : grid; }
    int inner_positions() const { return inner_grid() * inner_grid(); }

    void validate() const {
        if (vocab < 2) throw ConfigError("model: vocab must be >= 2");
        if (grid < 1) throw ConfigError("model: grid extent must be >= 1");
        if (dim < 1 || heads < 1 || dim % heads != 0)
            throw ConfigError("model: feature dim must be a positive multiple of heads");
        if (depth < 1) throw ConfigError("model: depth must be >= 1");
        if (conv_blocks < 0) throw ConfigError("model: conv_blocks must be >= 0");
        if (downsample && grid % 2 != 0)
            throw ConfigError("model: downsample requires an even grid extent");
        if ((conv_blocks > 0 || downsample) && grid < 3)
            throw ConfigError("model: conv path needs grid extent >= 3");
        if (cond_dim < 1 || film_dim < 1)
            throw ConfigError("model: conditioning widths must be positive");
    }
};

// Weight-only int8 storage for a linear layer: symmetric per-output-row
// absmax, no zero point. Kept alongside the layer and dequantized on the
// fly at forward time; biases stay full precision.
template <class T>
struct QuantizedLinearT {
    std::vector<int8_t> q; // [out, in] row-major
    std::vector<T> scales; // [out]
    int out_dim = 0;
    int in_dim = 0;

    TensorT<T> dequant() const {
        TensorT<T> w({out_dim, in_dim});
        for (int r = 0; r < out_dim; ++r)
            for (int c = 0; c < in_dim; ++c)
                w.data[static_cast<size_t>(r) * in_dim + c] =
                    static_cast<T>(q[static_cast<size_t>(r) * in_dim + c]) *
                    scales[static_cast<size_t>(r)];
        return w;
    }

    size_t stored_bytes() const { return q.size() + scales.size() * sizeof(T); }
};

// A named linear layer with two optional attachments: a low-rank adapter
// (effective weight W + s*B*A with the base frozen) and an int8 weight that
// replaces W on the forward path once the layer is quantized.
template <class T>
struct LinearLayerT {
    std::string name;
    VarT<T> w; // [out, in]
    VarT<T> b; // [out]; undefined for bias-free layers

    bool lora = false;
    T lora_scale = T(0);
    VarT<T> lora_a; // [rank, in]
    VarT<T> lora_b; // [out, rank]

    std::shared_ptr<QuantizedLinearT<T>> quant;

    LinearLayerT() = default;
    LinearLayerT(ParamStoreT<T>& store, const std::string& layer_name, int out, int in, Rng& rng,
                 T init_std = T(0.02), bool bias = true)
        : name(layer_name) {
        w = store.add(name + ".w", TensorT<T>::randn({out, in}, rng, init_std));
        if (bias) b = store.add(name + ".b", TensorT<T>::zeros({out}));
    }

    int out_dim() const { return quant ? quant->out_dim : static_cast<int>(w.value().rows()); }
    int in_dim() const { return quant ? quant->in_dim : static_cast<int>(w.value().cols()); }

    VarT<T> operator()(const VarT<T>& x) const {
        VarT<T> y;
        if (quant) {
            auto wq = VarT<T>::leaf(quant->dequant(), false);
            y = b.defined() ? linear(x, wq, b) : linear(x, wq);
        } else {
            y = b.defined() ? linear(x, w, b) : linear(x, w);
        }
        if (lora) y = add(y, scale(linear(linear(x, lora_a), lora_b), lora_scale));
        return y;
    }
};

namespace detail {

template <class T>
struct ConvParamT {
    VarT<T> w;
    VarT<T> b;
};

template <class T>
ConvParamT<T> make_conv(ParamStoreT<T>& store, const std::string& name, int cout, int cin, int k,
                        Rng& rng) {
    ConvParamT<T> p;
    const T std = static_cast<T>(std::sqrt(2.0 / (static_cast<double>(cin) * k * k)));
    p.w = store.add(name + ".w", TensorT<T>::randn({cout, cin, k, k}, rng, std));
    p.b = store.add(name + ".b", TensorT<T>::zeros({cout}));
    return p;
}

} // namespace detail

// Residual conv block: x + conv(gelu(conv(x))), both 3x3 same-extent.
template <class T>
struct ConvBlockT {
    detail::ConvParamT<T> c1, c2;
};

// One pre-norm transformer block. The first norm site carries the adaptive
// modulation; cross-attention reads the caption sequence; the MLP is a
// standard 4x expansion.
template <class T>
struct TransformerBlockT {
    VarT<T> ln1_g, ln1_b;
    FilmHeadT<T> film;
    LinearLayerT<T> wq, wk, wv, wo;
    VarT<T> ln2_g, ln2_b;
    LinearLayerT<T> cq, ck, cv, co;
    VarT<T> ln3_g, ln3_b;
    LinearLayerT<T> fc1, fc2;
};

struct ForwardStats {
    int transformer_rows = 0; // sequence rows seen by the transformer core
};

// Token-grid denoiser: embed (possibly MASKed) ids, add learned 2D positions,
// run conv residual blocks, optionally one stride-2 down / nearest-up pair
// around the transformer core, and project to per-position codebook logits.
// MASK is an extra embedding row (id = vocab) and never an output class.
template <class T>
class UVitT {
public:
    UVitT() = default;

    UVitT(ParamStoreT<T>& store, const std::string& prefix, const ModelConfig& cfg, Rng& rng)
        : cfg_(cfg) {
        cfg.validate();
        tok_table_ = store.add(prefix + "tok_table",
                               TensorT<T>::randn({cfg.vocab + 1, cfg.dim}, rng, T(0.02)));
        pos_table_ = store.add(prefix + "pos_table",
                               TensorT<T>::randn({cfg.positions(), cfg.dim}, rng, T(0.02)));
        for (int j = 0; j < cfg.conv_blocks; ++j) {
            std::string base = prefix + "conv_in" + std::to_string(j);
            conv_in_.push_back({detail::make_conv(store, base + ".c1", cfg.dim, cfg.dim, 3, rng),
                                detail::make_conv(store, base + ".c2", cfg.dim, cfg.dim, 3, rng)});
        }
        if (cfg.downsample) {
            down_ = detail::make_conv(store, prefix + "down", cfg.dim, cfg.dim, 3, rng);
            up_ = detail::make_conv(store, prefix + "up", cfg.dim, cfg.dim, 3, rng);
        }
        for (int i = 0; i < cfg.depth; ++i) {
            std::string base = prefix + "block" + std::to_string(i);
            TransformerBlockT<T> blk;
            blk.ln1_g = store.add(base + ".ln1.g", TensorT<T>::full({cfg.dim}, T(1)));
            blk.ln1_b = store.add(base + ".ln1.b", TensorT<T>::zeros({cfg.dim}));
            blk.film = FilmHeadT<T>(store, base + ".film.", cfg.dim, cfg.film_dim);
            blk.wq = LinearLayerT<T>(store, base + ".attn.q", cfg.dim, cfg.dim, rng);
            blk.wk = LinearLayerT<T>(store, base + ".attn.k", cfg.dim, cfg.dim, rng);
            blk.wv = LinearLayerT<T>(store, base + ".attn.v", cfg.dim, cfg.dim, rng);
            blk.wo = LinearLayerT<T>(store, base + ".attn.o", cfg.dim, cfg.dim, rng);
            blk.ln2_g = store.add(base + ".ln2.g", TensorT<T>::full({cfg.dim}, T(1)));
            blk.ln2_b = store.add(base + ".ln2.b", TensorT<T>::zeros({cfg.dim}));
            blk.cq = LinearLayerT<T>(store, base + ".cross.q", cfg.dim, cfg.dim, rng);
            blk.ck = LinearLayerT<T>(store, base + ".cross.k", cfg.dim, cfg.cond_dim, rng);
            blk.cv = LinearLayerT<T>(store, base + ".cross.v", cfg.dim, cfg.cond_dim, rng);
            blk.co = LinearLayerT<T>(store, base + ".cross.o", cfg.dim, cfg.dim, rng);
            blk.ln3_g = store.add(base + ".ln3.g", TensorT<T>::full({cfg.dim}, T(1)));
            blk.ln3_b = store.add(base + ".ln3.b", TensorT<T>::zeros({cfg.dim}));
            blk.fc1 = LinearLayerT<T>(store, base + ".mlp.fc1", 4 * cfg.dim, cfg.dim, rng);
            blk.fc2 = LinearLayerT<T>(store, base + ".mlp.fc2", cfg.dim, 4 * cfg.dim, rng);
            blocks_.push_back(std::move(blk));
        }
        for (int j = 0; j < cfg.conv_blocks; ++j) {
            std::string base = prefix + "conv_out" + std::to_string(j);
            conv_out_.push_back({detail::make_conv(store, base + ".c1", cfg.dim, cfg.dim, 3, rng),
                                 detail::make_conv(store, base + ".c2", cfg.dim, cfg.dim, 3, rng)});
        }
        final_g_ = store.add(prefix + "final_ln.g", TensorT<T>::full({cfg.dim}, T(1)));
        final_b_ = store.add(prefix + "final_ln.b", TensorT<T>::zeros({cfg.dim}));
        head_ = LinearLayerT<T>(store, prefix + "head", cfg.vocab, cfg.dim, rng);
    }

    const ModelConfig& config() const { return cfg_; }
    int mask_id() const { return cfg_.mask_id(); }

    // ids is batch*positions entries, each a codebook id or MASK. Returns
    // logits [batch*positions, vocab].
    VarT<T> forward(const std::vector<int>& ids, int batch, const CondBundleT<T>& cond,
                    ForwardStats* stats = nullptr) const {
        const int n = cfg_.positions();
        if (batch < 1 || static_cast<int>(ids.size()) != batch * n)
            throw ShapeError("forward: ids length must be batch * grid^2");
        for (int id : ids)
            if (id < 0 || id > cfg_.vocab)
                throw DomainError("forward: token id outside [0, MASK]");
        if (cond.batch != batch) throw ShapeError("forward: conditioning batch mismatch");
        if (cond.seq.value().cols() != cfg_.cond_dim)
            throw ShapeError("forward: caption width does not match cond_dim");

        auto x = add(embedding(tok_table_, ids), tile_rows(pos_table_, batch));
        auto film_in = cond.film_input();
        if (film_in.value().cols() != cfg_.film_dim)
            throw ShapeError("forward: pooled+micro width does not match film_dim");

        VarT<T> skip;
        if (cfg_.conv_blocks > 0 || cfg_.downsample) {
            auto c = seq_to_chw(x, batch, cfg_.grid, cfg_.grid);
            for (const auto& blk : conv_in_) c = conv_residual(c, blk, batch);
            if (cfg_.downsample) {
                skip = c;
                c = gelu(conv2d(c, down_.w, down_.b, 2, batch));
            }
            x = chw_to_seq(c, batch);
        }

        if (stats) stats->transformer_rows = static_cast<int>(x.value().rows());
        for (const auto& blk : blocks_) x = run_block(x, blk, cond, film_in, batch);

        if (cfg_.conv_blocks > 0 || cfg_.downsample) {
            auto c = seq_to_chw(x, batch, cfg_.inner_grid(), cfg_.inner_grid());
            if (cfg_.downsample) {
                c = gelu(conv2d(upsample2x(c), up_.w, up_.b, 1, batch));
                c = add(c, skip);
            }
            for (const auto& blk : conv_out_) c = conv_residual(c, blk, batch);
            x = chw_to_seq(c, batch);
        }

        x = layer_norm(x, final_g_, final_b_);
        return head_(x);
    }

    // Adapter targets: every query/key/value projection, self and cross.
    std::vector<LinearLayerT<T>*> qkv_projections() {
        std::vector<LinearLayerT<T>*> out;
        for (auto& blk : blocks_) {
            out.push_back(&blk.wq);
            out.push_back(&blk.wk);
            out.push_back(&blk.wv);
            out.push_back(&blk.cq);
            out.push_back(&blk.ck);
            out.push_back(&blk.cv);
        }
        return out;
    }

    // Quantization targets: attention projections and the MLP, per block.
    // Embeddings, norms, convs, and the output head stay full precision.
    std::vector<LinearLayerT<T>*> quantize_targets() {
        std::vector<LinearLayerT<T>*> out;
        for (auto& blk : blocks_) {
            for (auto* l : {&blk.wq, &blk.wk, &blk.wv, &blk.wo, &blk.cq, &blk.ck, &blk.cv,
                            &blk.co, &blk.fc1, &blk.fc2})
                out.push_back(l);
        }
        return out;
    }

    std::vector<TransformerBlockT<T>>& blocks() { return blocks_; }
    const std::vector<TransformerBlockT<T>>& blocks() const { return blocks_; }
    VarT<T>& token_table() { return tok_table_; }

private:
    VarT<T> conv_residual(const VarT<T>& c, const ConvBlockT<T>& blk, int batch) const {
        auto h = gelu(conv2d(c, blk.c1.w, blk.c1.b, 1, batch));
        return add(c, conv2d(h, blk.c2.w, blk.c2.b, 1, batch));
    }

    VarT<T> run_block(const VarT<T>& x, const TransformerBlockT<T>& b, const CondBundleT<T>& cond,
                      const VarT<T>& film_in, int batch) const {
        auto h = b.film.apply(layer_norm(x, b.ln1_g, b.ln1_b), film_in, batch);
        auto att = attention(b.wq(h), b.wk(h), b.wv(h), cfg_.heads, batch);
        auto y = add(x, b.wo(att));
        auto h2 = layer_norm(y, b.ln2_g, b.ln2_b);
        auto cro = attention(b.cq(h2), b.ck(cond.seq), b.cv(cond.seq), cfg_.heads, batch);
        y = add(y, b.co(cro));
        auto h3 = layer_norm(y, b.ln3_g, b.ln3_b);
        return add(y, b.fc2(gelu(b.fc1(h3))));
    }

    ModelConfig cfg_;
    VarT<T> tok_table_;
    VarT<T> pos_table_;
    std::vector<ConvBlockT<T>> conv_in_, conv_out_;
    detail::ConvParamT<T> down_, up_;
    std::vector<TransformerBlockT<T>> blocks_;
    VarT<T> final_g_, final_b_;
    LinearLayerT<T> head_;
};

using UVit = UVitT<float>;

} // namespace mimg
