#pragma once

#include "mimg/pipeline.hpp"

namespace mimg {

struct QuantizeReport {
    int layers = 0;
    size_t bytes_before = 0; // fp32 weight storage of the targeted layers
    size_t bytes_after = 0;  // int8 weights plus per-row scales

    double ratio() const {
        return bytes_before ? static_cast<double>(bytes_after) / bytes_before : 0.0;
    }
};

// Per-output-row symmetric absmax quantization to int8. Zero rows get
// scale 1 and all-zero integers so the round trip stays exact.
QuantizedLinearT<float> quantize_rows(const TensorT<float>& w);

// Swaps every attention and feed-forward projection of the backbone onto
// the int8 path, freezes their weights, and reports the size change.
// Embeddings, norms, convolutions, and biases stay full precision.
QuantizeReport quantize_model(PipelineT<float>& pipe);

} // namespace mimg
