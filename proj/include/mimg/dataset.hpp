#pragma once

#include <string>
#include <vector>

#include "mimg/conditioning.hpp"
#include "mimg/image_io.hpp"
#include "mimg/rng.hpp"

namespace mimg {

// Procedural captioned shapes: every sample is one anti-aliased colored
// shape on a flat background, rendered oversized and randomly cropped so
// the crop box feeds the micro-conditioning record honestly.
struct DatasetSpec {
    int image_size = 32; // final crop extent
    int count = 64;
    uint64_t seed = 0;
    int margin = 8; // render extent = image_size + margin

    void validate() const {
        if (image_size < 8) throw ConfigError("dataset: image_size must be >= 8");
        if (count < 1) throw ConfigError("dataset: count must be >= 1");
        if (margin < 0) throw ConfigError("dataset: margin must be >= 0");
    }
};

struct Sample {
    Image image;
    std::string caption; // "<color> <shape> <background>"
    std::vector<int> caption_ids;
    MicroConditioning micro;
};

inline const std::vector<std::string>& dataset_shapes() {
    static const std::vector<std::string> v = {"circle", "square", "triangle"};
    return v;
}
inline const std::vector<std::string>& dataset_colors() {
    static const std::vector<std::string> v = {"red", "green", "blue"};
    return v;
}
inline const std::vector<std::string>& dataset_backgrounds() {
    static const std::vector<std::string> v = {"light", "dark"};
    return v;
}

// Vocabulary holding exactly the attribute words (plus the reserved rows).
CaptionVocabulary dataset_vocabulary();

// Renders one sample from explicit attributes; exposed for oracle tests.
Image render_shape(int base_size, const std::string& shape, const std::string& color,
                   const std::string& background, float cx, float cy, float radius);

// Deterministic in spec.seed: same spec, same bytes.
std::vector<Sample> gen_dataset(const DatasetSpec& spec, const CaptionVocabulary& vocab,
                                int max_len);

// RMS luminance contrast mapped into [0, 1]; the aesthetic-score stand-in.
float quality_score(const Image& image);

} // namespace mimg
