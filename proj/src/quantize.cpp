#include "mimg/quantize.hpp"

#include <cmath>

namespace mimg {

QuantizedLinearT<float> quantize_rows(const TensorT<float>& w) {
    if (w.shape.size() != 2) throw ShapeError("quantize: expected a 2-d weight matrix");
    if (!w.all_finite()) throw NumericError("quantize: weight matrix has non-finite entries");
    const int out = w.rows();
    const int in = w.cols();

    QuantizedLinearT<float> ql;
    ql.out_dim = out;
    ql.in_dim = in;
    ql.q.resize(static_cast<size_t>(out) * in, 0);
    ql.scales.resize(out, 1.f);

    for (int r = 0; r < out; ++r) {
        float absmax = 0.f;
        for (int c = 0; c < in; ++c) absmax = std::max(absmax, std::abs(w.at(r, c)));
        if (absmax == 0.f) continue; // scale 1, zero ints: exact round trip
        const float scale = absmax / 127.f;
        ql.scales[r] = scale;
        for (int c = 0; c < in; ++c) {
            // round half away from zero, clamped against float division slop
            const float v = std::round(w.at(r, c) / scale);
            const float clamped = std::min(127.f, std::max(-127.f, v));
            ql.q[static_cast<size_t>(r) * in + c] = static_cast<int8_t>(clamped);
        }
    }
    return ql;
}

QuantizeReport quantize_model(PipelineT<float>& pipe) {
    auto targets = pipe.backbone.quantize_targets();
    for (const auto* l : targets)
        if (l->quant)
            throw ConfigError("quantize: layer '" + l->name + "' is already quantized");

    QuantizeReport rep;
    for (auto* l : targets) {
        const auto& w = l->w.value();
        auto ql = quantize_rows(w);
        rep.bytes_before += w.data.size() * sizeof(float);
        rep.bytes_after += ql.stored_bytes();
        l->quant = std::make_shared<QuantizedLinearT<float>>(std::move(ql));
        // the fp32 tensor is now inert on the forward path; freeze it so a
        // later training step cannot silently update weights nothing reads
        pipe.store.set_trainable(l->name + ".w", false);
        ++rep.layers;
    }
    return rep;
}

} // namespace mimg
