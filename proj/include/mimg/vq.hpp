#pragma once

#include <string>
#include <vector>

#include "mimg/adam.hpp"
#include "mimg/image_io.hpp"
#include "mimg/nn_ops.hpp"
#include "mimg/params.hpp"

namespace mimg {

struct VqConfig {
    int vocab = 256;   // codebook entries V
    int dim = 16;      // per-entry feature size D
    int factor = 4;    // spatial downsample factor f, power of two
    int channels = 32; // convolution width

    void validate() const {
        if (vocab < 2) throw ConfigError("vq: vocab must be >= 2");
        if (dim < 1) throw ConfigError("vq: dim must be >= 1");
        if (channels < 1) throw ConfigError("vq: channels must be >= 1");
        int f = factor;
        if (f < 2 || (f & (f - 1)) != 0)
            throw ConfigError("vq: factor must be a power of two >= 2");
    }

    int levels() const {
        int f = factor, n = 0;
        while (f > 1) {
            f >>= 1;
            ++n;
        }
        return n;
    }
};

// Discrete latent grid produced by encode+quantize.
struct TokenGrid {
    int height = 0;
    int width = 0;
    std::vector<int> ids;

    int count() const { return height * width; }
};

struct VqTrainConfig {
    int steps = 2000;
    int batch = 8;
    float lr = 1e-3f;
    float beta = 0.25f; // commitment weight
};

template <class T>
struct VqLossT {
    VarT<T> total;       // recon + codebook + commit
    VarT<T> recon;       // ||x - x_hat||^2
    VarT<T> codebook;    // ||sg[z] - e||^2, moves entries only
    VarT<T> commit;      // beta * ||z - sg[e]||^2, moves the encoder only
};

// total = ||x - x_hat||^2 + ||sg[z] - e||^2 + beta * ||z - sg[e]||^2.
// z and e are token-major [n, D] views of the continuous and quantized
// fields; the straight-through estimator routes the reconstruction gradient
// through z unchanged.
template <class T>
VqLossT<T> vq_loss(const VarT<T>& image, const VarT<T>& recon, const VarT<T>& z_seq,
                   const VarT<T>& e_seq, T beta) {
    VqLossT<T> out;
    auto dr = sub(recon, image);
    out.recon = sum_all(mul(dr, dr));
    auto dc = sub(detach(z_seq), e_seq);
    out.codebook = sum_all(mul(dc, dc));
    auto dm = sub(z_seq, detach(e_seq));
    out.commit = scale(sum_all(mul(dm, dm)), beta);
    out.total = add(add(out.recon, out.codebook), out.commit);
    return out;
}

// Convolutional autoencoder around a learned codebook. No attention layers;
// the encoder halves the spatial extents log2(f) times, the decoder mirrors
// it with nearest-neighbour upsampling.
template <class T>
class VqModelT {
public:
    VqModelT() = default;
    VqModelT(ParamStoreT<T>& store, const std::string& prefix, const VqConfig& cfg, Rng& rng)
        : cfg_(cfg) {
        cfg.validate();
        auto conv_init = [&](const std::string& name, int cout, int cin, int k) {
            const T std = static_cast<T>(std::sqrt(2.0 / (cin * k * k)));
            ConvParam p;
            p.w = store.add(prefix + name + ".w", TensorT<T>::randn({cout, cin, k, k}, rng, std));
            p.b = store.add(prefix + name + ".b", TensorT<T>::zeros({cout}));
            return p;
        };
        enc_stem_ = conv_init("enc_stem", cfg.channels, 3, 3);
        for (int l = 0; l < cfg.levels(); ++l)
            enc_down_.push_back(conv_init("enc_down" + std::to_string(l), cfg.channels,
                                          cfg.channels, 3));
        enc_head_ = conv_init("enc_head", cfg.dim, cfg.channels, 3);
        dec_stem_ = conv_init("dec_stem", cfg.channels, cfg.dim, 3);
        for (int l = 0; l < cfg.levels(); ++l)
            dec_up_.push_back(conv_init("dec_up" + std::to_string(l), cfg.channels,
                                        cfg.channels, 3));
        dec_head_ = conv_init("dec_head", 3, cfg.channels, 3);
        codebook_ = store.add(prefix + "codebook",
                              TensorT<T>::randn({cfg.vocab, cfg.dim}, rng, T(0.1)));
    }

    const VqConfig& config() const { return cfg_; }
    const VarT<T>& codebook() const { return codebook_; }
    VarT<T>& codebook() { return codebook_; }

    // images is [batch*3, H, W]; H and W must be divisible by the factor.
    VarT<T> encode(const VarT<T>& images, int batch = 1) const {
        const auto& v = images.value();
        if (v.ndim() != 3 || v.extent(0) != batch * 3)
            throw ShapeError("vq encode: expected [batch*3, H, W]");
        if (v.extent(1) % cfg_.factor != 0 || v.extent(2) % cfg_.factor != 0)
            throw ConfigError("vq encode: image extents not divisible by factor " +
                              std::to_string(cfg_.factor));
        auto x = gelu(conv2d(images, enc_stem_.w, enc_stem_.b, 1, batch));
        for (const auto& lvl : enc_down_) x = gelu(conv2d(x, lvl.w, lvl.b, 2, batch));
        return conv2d(x, enc_head_.w, enc_head_.b, 1, batch);
    }

    // Nearest codebook row per token-major field row; lowest index on ties.
    std::vector<int> nearest_ids(const TensorT<T>& z_seq) const {
        if (z_seq.ndim() != 2 || z_seq.cols() != cfg_.dim)
            throw ShapeError("vq nearest_ids: field dim mismatch");
        const auto& cb = codebook_.value();
        std::vector<int> ids(static_cast<size_t>(z_seq.rows()));
        for (int i = 0; i < z_seq.rows(); ++i) {
            const T* zr = z_seq.ptr() + static_cast<size_t>(i) * cfg_.dim;
            double best = 0;
            int best_id = -1;
            for (int v = 0; v < cfg_.vocab; ++v) {
                const T* er = cb.ptr() + static_cast<size_t>(v) * cfg_.dim;
                double d = 0;
                for (int c = 0; c < cfg_.dim; ++c) {
                    const double diff = static_cast<double>(zr[c]) - er[c];
                    d += diff * diff;
                }
                if (best_id < 0 || d < best) {
                    best = d;
                    best_id = v;
                }
            }
            ids[static_cast<size_t>(i)] = best_id;
        }
        return ids;
    }

    struct Quantized {
        std::vector<int> ids; // batch-major token ids
        int height = 0, width = 0;
        VarT<T> z_seq;  // continuous field, token-major [batch*n, D]
        VarT<T> e_seq;  // selected entries (codebook gradient path)
        VarT<T> st_seq; // straight-through field fed to the decoder
    };

    // field is [batch*D, h, w] from encode().
    Quantized quantize(const VarT<T>& field, int batch = 1) const {
        const auto& v = field.value();
        if (v.ndim() != 3 || v.extent(0) != batch * cfg_.dim)
            throw ShapeError("vq quantize: expected [batch*D, h, w]");
        Quantized q;
        q.height = v.extent(1);
        q.width = v.extent(2);
        q.z_seq = chw_to_seq(field, batch);
        q.ids = nearest_ids(q.z_seq.value());
        q.e_seq = embedding(codebook_, q.ids);
        q.st_seq = add(q.z_seq, detach(sub(q.e_seq, q.z_seq)));
        return q;
    }

    // Raw decoder output (no clamping), [batch*3, f*h, f*w].
    VarT<T> decode_field(const VarT<T>& field_seq, int height, int width, int batch = 1) const {
        auto x = seq_to_chw(field_seq, batch, height, width);
        x = gelu(conv2d(x, dec_stem_.w, dec_stem_.b, 1, batch));
        for (const auto& lvl : dec_up_) x = gelu(conv2d(upsample2x(x), lvl.w, lvl.b, 1, batch));
        return conv2d(x, dec_head_.w, dec_head_.b, 1, batch);
    }

    VarT<T> decode_tokens(const std::vector<int>& ids, int height, int width,
                          int batch = 1) const {
        if (static_cast<int>(ids.size()) != batch * height * width)
            throw ShapeError("vq decode: id count mismatch");
        return decode_field(embedding(codebook_, ids), height, width, batch);
    }

    // Full inference decode: clamped to [0,1] and packaged as an image.
    Image decode_image(const TokenGrid& tokens) const {
        NoGrad guard;
        auto raw = decode_tokens(tokens.ids, tokens.height, tokens.width, 1);
        Tensor out = raw.value().template cast<float>();
        for (auto& p : out.data) p = p < 0.f ? 0.f : (p > 1.f ? 1.f : p);
        return image_from_chw(out);
    }

    // Convenience inference path: image -> token grid.
    TokenGrid encode_image(const Image& image) const {
        NoGrad guard;
        auto chw = image_to_chw(image).template cast<T>();
        auto field = encode(VarT<T>::leaf(std::move(chw)), 1);
        auto q = quantize(field, 1);
        TokenGrid grid;
        grid.height = q.height;
        grid.width = q.width;
        grid.ids = q.ids;
        return grid;
    }

private:
    struct ConvParam {
        VarT<T> w, b;
    };

    VqConfig cfg_;
    ConvParam enc_stem_, enc_head_, dec_stem_, dec_head_;
    std::vector<ConvParam> enc_down_, dec_up_;
    VarT<T> codebook_;
};

using VqModel = VqModelT<float>;

struct VqTrainStats {
    std::vector<float> loss_history;
    float initial_smoothed = 0;
    float final_smoothed = 0;
};

// Straight VQ-VAE training: reconstruction + codebook + commitment terms,
// Adam on everything, deterministic batch order. Aborts with a diagnostic
// if the loss goes non-finite.
inline VqTrainStats train_vq(VqModel& model, ParamStore& store,
                             const std::vector<Image>& images, const VqTrainConfig& cfg,
                             Rng& rng) {
    (void)rng; // batch order is deterministic; kept for interface symmetry
    if (images.empty()) throw ConfigError("vq train: empty dataset");
    if (cfg.steps < 1 || cfg.batch < 1) throw ConfigError("vq train: bad steps/batch");
    Adam opt(cfg.lr);
    VqTrainStats stats;
    stats.loss_history.reserve(static_cast<size_t>(cfg.steps));
    const int hh = images[0].height, ww = images[0].width;
    size_t cursor = 0;
    for (int step = 0; step < cfg.steps; ++step) {
        Tensor batch_chw({cfg.batch * 3, hh, ww});
        for (int b = 0; b < cfg.batch; ++b) {
            const Image& img = images[cursor % images.size()];
            ++cursor;
            if (img.height != hh || img.width != ww)
                throw ShapeError("vq train: images must share extents");
            auto chw = image_to_chw(img);
            std::copy(chw.data.begin(), chw.data.end(),
                      batch_chw.data.begin() + static_cast<size_t>(b) * 3 * hh * ww);
        }
        auto x = Var::leaf(batch_chw);
        auto field = model.encode(x, cfg.batch);
        auto q = model.quantize(field, cfg.batch);
        auto recon = model.decode_field(q.st_seq, q.height, q.width, cfg.batch);
        auto loss = vq_loss(x, recon, q.z_seq, q.e_seq, cfg.beta);
        const float lv = loss.total.value().data[0];
        if (!std::isfinite(lv))
            throw NumericError("vq train: loss diverged (non-finite) at step " +
                               std::to_string(step));
        stats.loss_history.push_back(lv);
        store.zero_grad();
        loss.total.backward();
        opt.step(store);
    }
    const int window = std::min<int>(20, cfg.steps);
    double first = 0, last = 0;
    for (int i = 0; i < window; ++i) {
        first += stats.loss_history[static_cast<size_t>(i)];
        last += stats.loss_history[stats.loss_history.size() - 1 - static_cast<size_t>(i)];
    }
    stats.initial_smoothed = static_cast<float>(first / window);
    stats.final_smoothed = static_cast<float>(last / window);
    return stats;
}

// Codebook usage counts over a set of images (dead entries show up as zeros).
inline std::vector<int64_t> codebook_usage(const VqModel& model, const std::vector<Image>& images) {
    std::vector<int64_t> counts(static_cast<size_t>(model.config().vocab), 0);
    for (const auto& img : images) {
        auto grid = model.encode_image(img);
        for (int id : grid.ids) ++counts[static_cast<size_t>(id)];
    }
    return counts;
}

} // namespace mimg
