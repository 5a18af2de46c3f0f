#pragma once

// Grayscale image container plus binary PGM (P5, maxval 255) and 8-bit
// grayscale PNG input/output. PNG chunk framing and scanline filters are
// implemented here; the DEFLATE stream is zlib's.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include "mvssm/tensor.hpp"

namespace mvssm {

struct ImageIoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Pixels in [0,1], row-major.
struct Image {
    std::size_t height = 0, width = 0;
    std::vector<float> pix;

    bool empty() const { return pix.empty(); }
    float at(std::size_t y, std::size_t x) const { return pix[y * width + x]; }
    float& at(std::size_t y, std::size_t x) { return pix[y * width + x]; }

    static Image blank(std::size_t h, std::size_t w, float fill = 0.f) {
        return Image{h, w, std::vector<float>(h * w, fill)};
    }
};

inline std::vector<std::uint8_t> quantize(const Image& img) {
    std::vector<std::uint8_t> out(img.pix.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const float v = std::min(1.f, std::max(0.f, img.pix[i]));
        out[i] = std::uint8_t(std::lround(v * 255.f));
    }
    return out;
}

inline Image dequantize(std::size_t h, std::size_t w, const std::vector<std::uint8_t>& bytes) {
    Image img = Image::blank(h, w);
    for (std::size_t i = 0; i < bytes.size(); ++i) img.pix[i] = float(bytes[i]) / 255.f;
    return img;
}

inline Image hflip(const Image& img) {
    Image out = Image::blank(img.height, img.width);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            out.at(y, x) = img.at(y, img.width - 1 - x);
    return out;
}

// Bilinear resize; output stays in the convex hull of the input pixels.
inline Image resize_bilinear(const Image& img, std::size_t h, std::size_t w) {
    if (img.height == h && img.width == w) return img;
    Image out = Image::blank(h, w);
    const double sy = double(img.height) / double(h);
    const double sx = double(img.width) / double(w);
    for (std::size_t y = 0; y < h; ++y) {
        const double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
        const std::size_t y0 = std::min(img.height - 1, std::size_t(fy));
        const std::size_t y1 = std::min(img.height - 1, y0 + 1);
        const double wy = fy - double(y0);
        for (std::size_t x = 0; x < w; ++x) {
            const double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
            const std::size_t x0 = std::min(img.width - 1, std::size_t(fx));
            const std::size_t x1 = std::min(img.width - 1, x0 + 1);
            const double wx = fx - double(x0);
            const double top = (1 - wx) * img.at(y0, x0) + wx * img.at(y0, x1);
            const double bot = (1 - wx) * img.at(y1, x0) + wx * img.at(y1, x1);
            out.at(y, x) = float((1 - wy) * top + wy * bot);
        }
    }
    return out;
}

template <typename T>
Tensor<T> image_to_tensor(const Image& img) {
    std::vector<T> v(img.pix.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = T(img.pix[i]);
    return Tensor<T>({img.height, img.width, 1}, std::move(v));
}

// ---------------------------------------------------------------------------
// PGM (binary P5)

inline void write_pgm(const Image& img, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ImageIoError("cannot write image: " + path);
    f << "P5\n" << img.width << " " << img.height << "\n255\n";
    const auto bytes = quantize(img);
    f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

inline Image read_pgm_stream(std::istream& f, const std::string& path) {
    std::string magic;
    f >> magic;
    if (magic != "P5") throw ImageIoError(path + ": not a binary PGM (P5) file");
    auto next_int = [&]() {
        // skip whitespace and '#' comments
        int c;
        while ((c = f.peek()) != EOF) {
            if (c == '#') {
                std::string line;
                std::getline(f, line);
            } else if (std::isspace(c)) {
                f.get();
            } else {
                break;
            }
        }
        long v = -1;
        f >> v;
        if (!f || v < 0) throw ImageIoError(path + ": malformed PGM header");
        return std::size_t(v);
    };
    const std::size_t w = next_int(), h = next_int(), maxval = next_int();
    if (maxval != 255) throw ImageIoError(path + ": unsupported PGM maxval");
    f.get();  // single whitespace after header
    std::vector<std::uint8_t> bytes(h * w);
    f.read(reinterpret_cast<char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!f) throw ImageIoError(path + ": truncated PGM data");
    return dequantize(h, w, bytes);
}

// ---------------------------------------------------------------------------
// PNG (8-bit grayscale, no alpha, non-interlaced)

namespace detail {

inline void png_chunk(std::string& out, const char type[5], const std::string& data) {
    const std::uint32_t len = std::uint32_t(data.size());
    for (int i = 3; i >= 0; --i) out.push_back(char((len >> (8 * i)) & 0xff));
    std::string body = std::string(type, 4) + data;
    out += body;
    const auto crc =
        crc32(0, reinterpret_cast<const unsigned char*>(body.data()), uInt(body.size()));
    for (int i = 3; i >= 0; --i) out.push_back(char((std::uint32_t(crc) >> (8 * i)) & 0xff));
}

inline std::uint32_t be32(const unsigned char* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
           (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

inline int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    return pb <= pc ? b : c;
}

}  // namespace detail

inline void write_png(const Image& img, const std::string& path) {
    const auto bytes = quantize(img);
    const std::size_t h = img.height, w = img.width;

    std::string ihdr;
    for (int i = 3; i >= 0; --i) ihdr.push_back(char((w >> (8 * i)) & 0xff));
    for (int i = 3; i >= 0; --i) ihdr.push_back(char((h >> (8 * i)) & 0xff));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(0);  // grayscale
    ihdr.push_back(0);  // deflate
    ihdr.push_back(0);  // adaptive filter set
    ihdr.push_back(0);  // no interlace

    // filter 0 on every scanline
    std::vector<std::uint8_t> raw(h * (w + 1));
    for (std::size_t y = 0; y < h; ++y) {
        raw[y * (w + 1)] = 0;
        std::memcpy(raw.data() + y * (w + 1) + 1, bytes.data() + y * w, w);
    }
    uLongf zcap = compressBound(uLong(raw.size()));
    std::vector<std::uint8_t> z(zcap);
    if (compress2(z.data(), &zcap, raw.data(), uLong(raw.size()), 6) != Z_OK)
        throw ImageIoError("png: deflate failed");
    z.resize(zcap);

    std::string out("\x89PNG\r\n\x1a\n", 8);
    detail::png_chunk(out, "IHDR", ihdr);
    detail::png_chunk(out, "IDAT", std::string(reinterpret_cast<char*>(z.data()), z.size()));
    detail::png_chunk(out, "IEND", "");

    std::ofstream f(path, std::ios::binary);
    if (!f) throw ImageIoError("cannot write image: " + path);
    f.write(out.data(), std::streamsize(out.size()));
}

inline Image read_png_bytes(const std::vector<std::uint8_t>& buf, const std::string& path) {
    if (buf.size() < 8 || std::memcmp(buf.data(), "\x89PNG\r\n\x1a\n", 8) != 0)
        throw ImageIoError(path + ": not a PNG file");
    std::size_t off = 8;
    std::size_t w = 0, h = 0;
    bool have_ihdr = false;
    std::vector<std::uint8_t> idat;
    while (off + 8 <= buf.size()) {
        const std::uint32_t len = detail::be32(buf.data() + off);
        const std::string type(reinterpret_cast<const char*>(buf.data() + off + 4), 4);
        if (off + 12 + len > buf.size()) throw ImageIoError(path + ": truncated PNG chunk");
        const unsigned char* data = buf.data() + off + 8;
        if (type == "IHDR") {
            if (len != 13) throw ImageIoError(path + ": bad IHDR");
            w = detail::be32(data);
            h = detail::be32(data + 4);
            if (data[8] != 8 || data[9] != 0)
                throw ImageIoError(path + ": only 8-bit grayscale PNG is supported");
            if (data[12] != 0) throw ImageIoError(path + ": interlaced PNG is not supported");
            have_ihdr = true;
        } else if (type == "IDAT") {
            idat.insert(idat.end(), data, data + len);
        } else if (type == "IEND") {
            break;
        }
        off += 12 + len;
    }
    if (!have_ihdr || w == 0 || h == 0) throw ImageIoError(path + ": missing PNG header");

    std::vector<std::uint8_t> raw(h * (w + 1));
    uLongf rawlen = uLongf(raw.size());
    if (uncompress(raw.data(), &rawlen, idat.data(), uLong(idat.size())) != Z_OK ||
        rawlen != raw.size())
        throw ImageIoError(path + ": PNG inflate failed");

    // undo scanline filters
    std::vector<std::uint8_t> bytes(h * w);
    for (std::size_t y = 0; y < h; ++y) {
        const std::uint8_t filter = raw[y * (w + 1)];
        const std::uint8_t* src = raw.data() + y * (w + 1) + 1;
        std::uint8_t* dst = bytes.data() + y * w;
        const std::uint8_t* up = y ? bytes.data() + (y - 1) * w : nullptr;
        for (std::size_t x = 0; x < w; ++x) {
            const int a = x ? dst[x - 1] : 0;
            const int b = up ? up[x] : 0;
            const int c = (x && up) ? up[x - 1] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += detail::paeth(a, b, c); break;
                default: throw ImageIoError(path + ": unknown PNG filter");
            }
            dst[x] = std::uint8_t(v & 0xff);
        }
    }
    return dequantize(h, w, bytes);
}

// Reads PGM or PNG, dispatching on the magic bytes.
inline Image read_image(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ImageIoError("cannot open image file: " + path);
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
    if (buf.size() >= 8 && std::memcmp(buf.data(), "\x89PNG\r\n\x1a\n", 8) == 0)
        return read_png_bytes(buf, path);
    if (buf.size() >= 2 && buf[0] == 'P' && buf[1] == '5') {
        std::istringstream ss(std::string(reinterpret_cast<char*>(buf.data()), buf.size()));
        return read_pgm_stream(ss, path);
    }
    throw ImageIoError(path + ": unrecognized image format (expected PGM or PNG)");
}

}  // namespace mvssm
