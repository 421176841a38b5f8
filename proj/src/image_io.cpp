#include "mimg/image_io.hpp"

#include <cmath>
#include <fstream>

#include "mimg/errors.hpp"

namespace mimg {

namespace {

uint8_t to_byte(float v) {
    float c = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
    return static_cast<uint8_t>(std::lround(c * 255.f));
}

// Skip PPM whitespace and '#' comment lines; returns the next token.
std::string next_token(std::istream& in) {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {
            }
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    return tok;
}

int parse_dim(const std::string& tok, const char* what) {
    if (tok.empty()) throw FormatError(std::string("ppm: missing ") + what);
    for (char c : tok)
        if (!std::isdigit(static_cast<unsigned char>(c)))
            throw FormatError(std::string("ppm: malformed ") + what + " '" + tok + "'");
    long v = std::stol(tok);
    if (v <= 0 || v > 1 << 20) throw FormatError(std::string("ppm: bad ") + what);
    return static_cast<int>(v);
}

} // namespace

void write_ppm(const std::string& path, const Image& image) {
    if (image.height <= 0 || image.width <= 0)
        throw FormatError("ppm: refusing to write an empty image");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("ppm: cannot open for writing: " + path);
    out << "P6\n" << image.width << " " << image.height << "\n255\n";
    std::vector<uint8_t> row(static_cast<size_t>(image.width) * 3);
    for (int y = 0; y < image.height; ++y) {
        const float* src = image.pixel(y, 0);
        for (size_t i = 0; i < row.size(); ++i) row[i] = to_byte(src[i]);
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw FormatError("ppm: short write: " + path);
}

Image read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("ppm: cannot open: " + path);
    char magic[2] = {0, 0};
    in.read(magic, 2);
    if (in.gcount() != 2 || magic[0] != 'P' || magic[1] != '6')
        throw FormatError("ppm: not a P6 file: " + path);
    const int w = parse_dim(next_token(in), "width");
    const int h = parse_dim(next_token(in), "height");
    const std::string maxval = next_token(in);
    if (maxval != "255") throw FormatError("ppm: unsupported maxval '" + maxval + "'");
    // The single whitespace byte after the maxval token was already consumed
    // by the tokenizer; pixel data starts here.
    Image img(h, w);
    std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        if (in.gcount() != static_cast<std::streamsize>(row.size()))
            throw FormatError("ppm: truncated pixel data: " + path);
        float* dst = img.pixel(y, 0);
        for (size_t i = 0; i < row.size(); ++i) dst[i] = static_cast<float>(row[i]) / 255.f;
    }
    return img;
}

Tensor image_to_chw(const Image& image) {
    Tensor t({3, image.height, image.width});
    const size_t plane = static_cast<size_t>(image.height) * image.width;
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x) {
            const float* px = image.pixel(y, x);
            const size_t at = static_cast<size_t>(y) * image.width + x;
            t.data[at] = px[0];
            t.data[plane + at] = px[1];
            t.data[2 * plane + at] = px[2];
        }
    return t;
}

Image image_from_chw(const Tensor& chw) {
    if (chw.ndim() != 3 || chw.extent(0) != 3)
        throw ShapeError("image_from_chw: expected [3, H, W], got " + chw.shape_str());
    Image img(chw.extent(1), chw.extent(2));
    const size_t plane = static_cast<size_t>(img.height) * img.width;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            float* px = img.pixel(y, x);
            const size_t at = static_cast<size_t>(y) * img.width + x;
            px[0] = chw.data[at];
            px[1] = chw.data[plane + at];
            px[2] = chw.data[2 * plane + at];
        }
    return img;
}

float snap_to_byte_grid(float v) { return static_cast<float>(to_byte(v)) / 255.f; }

} // namespace mimg
