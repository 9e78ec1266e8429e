#include "scd/netpbm.hpp"

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "scd/errors.hpp"

namespace scd {

namespace {

[[noreturn]] void fail(const std::filesystem::path& path, const std::string& why) {
    throw DataError(path.string() + ": " + why);
}

// Reads one whitespace-delimited unsigned decimal token from the header.
long read_token(std::istream& in, const std::filesystem::path& path) {
    int ch = in.get();
    while (ch != EOF && std::isspace(ch)) ch = in.get();
    if (ch == EOF || !std::isdigit(ch)) fail(path, "malformed header");
    long v = 0;
    while (ch != EOF && std::isdigit(ch)) {
        v = v * 10 + (ch - '0');
        if (v > 1 << 20) fail(path, "header value out of range");
        ch = in.get();
    }
    if (ch == EOF) fail(path, "truncated header");
    if (!std::isspace(ch)) fail(path, "malformed header");
    return v;
}

}  // namespace

void write_pgm(const LabelImage& map, const std::filesystem::path& path) {
    if (map.n != 1) throw ParamError("write_pgm: expected a single-plane map");
    for (int v : map.v)
        if (v < 0 || v > 255) throw DataError("write_pgm: value " + std::to_string(v) + " not a byte");
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(path, "cannot open for writing");
    out << "P5\n" << map.w << " " << map.h << "\n255\n";
    std::vector<unsigned char> bytes(map.v.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<unsigned char>(map.v[i]);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(path, "write failed");
}

LabelImage read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(path, "cannot open");
    char magic[2] = {0, 0};
    in.read(magic, 2);
    if (!in || magic[0] != 'P' || magic[1] != '5') fail(path, "not a binary PGM (P5)");
    const long w = read_token(in, path);
    const long h = read_token(in, path);
    const long maxval = read_token(in, path);
    if (maxval != 255) fail(path, "unsupported maxval " + std::to_string(maxval));
    if (w < 1 || h < 1) fail(path, "degenerate dimensions");
    LabelImage map(1, static_cast<int>(h), static_cast<int>(w));
    std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (static_cast<std::size_t>(in.gcount()) != bytes.size()) fail(path, "short file");
    for (std::size_t i = 0; i < bytes.size(); ++i) map.v[i] = bytes[i];
    return map;
}

void write_ppm(const Tensor4& image, const std::filesystem::path& path) {
    const Shape4& s = image.shape();
    if (s.n != 1 || s.c != 3) throw ParamError("write_ppm: expected shape (1,3,h,w)");
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(path, "cannot open for writing");
    out << "P6\n" << s.w << " " << s.h << "\n255\n";
    std::vector<unsigned char> bytes(static_cast<std::size_t>(3) * s.h * s.w);
    std::size_t i = 0;
    for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x)
            for (int c = 0; c < 3; ++c) {
                long b = std::llround(255.0 * image.at(0, c, y, x));
                if (b < 0) b = 0;
                if (b > 255) b = 255;
                bytes[i++] = static_cast<unsigned char>(b);
            }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(path, "write failed");
}

Tensor4 read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(path, "cannot open");
    char magic[2] = {0, 0};
    in.read(magic, 2);
    if (!in || magic[0] != 'P' || magic[1] != '6') fail(path, "not a binary PPM (P6)");
    const long w = read_token(in, path);
    const long h = read_token(in, path);
    const long maxval = read_token(in, path);
    if (maxval != 255) fail(path, "unsupported maxval " + std::to_string(maxval));
    if (w < 1 || h < 1) fail(path, "degenerate dimensions");
    Tensor4 img(1, 3, static_cast<int>(h), static_cast<int>(w));
    std::vector<unsigned char> bytes(static_cast<std::size_t>(3) * w * h);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (static_cast<std::size_t>(in.gcount()) != bytes.size()) fail(path, "short file");
    std::size_t i = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.at(0, c, static_cast<int>(y), static_cast<int>(x)) = bytes[i++] / 255.0;
    return img;
}

}  // namespace scd
