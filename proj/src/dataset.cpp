#include "mimg/dataset.hpp"

#include <algorithm>
#include <cmath>

namespace mimg {

namespace {

struct Rgb {
    float r, g, b;
};

Rgb color_of(const std::string& name) {
    if (name == "red") return {0.85f, 0.16f, 0.14f};
    if (name == "green") return {0.15f, 0.72f, 0.22f};
    if (name == "blue") return {0.16f, 0.28f, 0.86f};
    throw DomainError("dataset: unknown color '" + name + "'");
}

Rgb background_of(const std::string& name) {
    if (name == "light") return {0.92f, 0.91f, 0.88f};
    if (name == "dark") return {0.10f, 0.11f, 0.13f};
    throw DomainError("dataset: unknown background '" + name + "'");
}

// Signed distance in pixels from point (x, y) to the shape boundary,
// negative inside. Triangle is equilateral, tip up, "radius" to vertices.
float shape_sdf(const std::string& shape, float x, float y, float r) {
    if (shape == "circle") return std::sqrt(x * x + y * y) - r;
    if (shape == "square") return std::max(std::abs(x), std::abs(y)) - r * 0.82f;
    if (shape == "triangle") {
        // three half-plane distances against the edges of an equilateral
        // triangle with circumradius r centered at the origin
        const float k = 0.5f;          // sin(30)
        const float c = 0.8660254f;    // cos(30)
        const float d1 = -y - r * k;   // bottom edge (y grows downward)
        const float d2 = y * k - c * x - r * k;
        const float d3 = y * k + c * x - r * k;
        return std::max(d1, std::max(d2, d3));
    }
    throw DomainError("dataset: unknown shape '" + shape + "'");
}

} // namespace

CaptionVocabulary dataset_vocabulary() {
    CaptionVocabulary v;
    for (const auto& w : dataset_colors()) v.add(w);
    for (const auto& w : dataset_shapes()) v.add(w);
    for (const auto& w : dataset_backgrounds()) v.add(w);
    return v;
}

Image render_shape(int base_size, const std::string& shape, const std::string& color,
                   const std::string& background, float cx, float cy, float radius) {
    const Rgb fg = color_of(color);
    const Rgb bg = background_of(background);
    Image img(base_size, base_size);
    for (int y = 0; y < base_size; ++y)
        for (int x = 0; x < base_size; ++x) {
            const float d = shape_sdf(shape, x + 0.5f - cx, y + 0.5f - cy, radius);
            const float cover = std::clamp(0.5f - d, 0.f, 1.f); // one-pixel AA ramp
            float* px = img.pixel(y, x);
            px[0] = bg.r + (fg.r - bg.r) * cover;
            px[1] = bg.g + (fg.g - bg.g) * cover;
            px[2] = bg.b + (fg.b - bg.b) * cover;
        }
    return img;
}

float quality_score(const Image& image) {
    double mean = 0;
    const int n = image.height * image.width;
    std::vector<float> lum(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const float* px = image.rgb.data() + static_cast<size_t>(i) * 3;
        lum[static_cast<size_t>(i)] = 0.2126f * px[0] + 0.7152f * px[1] + 0.0722f * px[2];
        mean += lum[static_cast<size_t>(i)];
    }
    mean /= n;
    double var = 0;
    for (int i = 0; i < n; ++i) {
        const double d = lum[static_cast<size_t>(i)] - mean;
        var += d * d;
    }
    // RMS contrast tops out around 0.5 for half-and-half images; 2x maps
    // the usable range onto [0, 1]
    return std::clamp(static_cast<float>(2.0 * std::sqrt(var / n)), 0.f, 1.f);
}

std::vector<Sample> gen_dataset(const DatasetSpec& spec, const CaptionVocabulary& vocab,
                                int max_len) {
    spec.validate();
    Rng rng(spec.seed);
    const int base = spec.image_size + spec.margin;
    std::vector<Sample> out;
    out.reserve(static_cast<size_t>(spec.count));

    for (int k = 0; k < spec.count; ++k) {
        const auto& shape = dataset_shapes()[static_cast<size_t>(rng.uniform_int(3))];
        const auto& color = dataset_colors()[static_cast<size_t>(rng.uniform_int(3))];
        const auto& bgname = dataset_backgrounds()[static_cast<size_t>(rng.uniform_int(2))];

        const float jx = static_cast<float>(rng.uniform_int(2 * spec.margin + 1) - spec.margin) * 0.25f;
        const float jy = static_cast<float>(rng.uniform_int(2 * spec.margin + 1) - spec.margin) * 0.25f;
        const float radius = 0.30f * base + 0.02f * base * static_cast<float>(rng.uniform_int(5));
        Image full = render_shape(base, shape, color, bgname, 0.5f * base + jx,
                                  0.5f * base + jy, radius);

        const int top = rng.uniform_int(spec.margin + 1);
        const int left = rng.uniform_int(spec.margin + 1);
        Sample s;
        s.image = Image(spec.image_size, spec.image_size);
        for (int y = 0; y < spec.image_size; ++y)
            for (int x = 0; x < spec.image_size; ++x) {
                const float* src = full.pixel(top + y, left + x);
                float* dst = s.image.pixel(y, x);
                // snap to the 8-bit grid so PPM round trips reproduce the
                // sample exactly
                dst[0] = snap_to_byte_grid(src[0]);
                dst[1] = snap_to_byte_grid(src[1]);
                dst[2] = snap_to_byte_grid(src[2]);
            }

        s.caption = color + " " + shape + " " + bgname;
        s.caption_ids = vocab.encode(s.caption, max_len);
        s.micro.orig_height = static_cast<float>(base);
        s.micro.orig_width = static_cast<float>(base);
        s.micro.crop_top = static_cast<float>(top);
        s.micro.crop_left = static_cast<float>(left);
        s.micro.quality = quality_score(s.image);
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace mimg
