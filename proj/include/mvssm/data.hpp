#pragma once

// Deterministic synthetic multi-view dataset plus a CSV-manifest loader for
// real grayscale images, with breast-level train/test splitting.
//
// A malignant sample renders one latent elliptical mass into all four views:
// centered and high-contrast in the crop views, larger and low-contrast in
// the whole views. Benign samples carry distractor texture only. Every view
// is de-meaned onto a fixed background level before the mass is added, so
// the class separation of crop-view mean intensity follows in closed form
// from the GeneratorConstants below.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mvssm/image_io.hpp"
#include "mvssm/params.hpp"

namespace mvssm {

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Laterality { Left, Right };

struct Sample {
    Image crop_cc, crop_mlo, whole_cc, whole_mlo;
    int label = 0;  // 0 benign, 1 malignant
    std::string breast_id;
    Laterality laterality = Laterality::Left;
};

struct GeneratorConstants {
    double background = 0.35;      // de-meaned background level of every view
    double field_amp = 0.12;       // smooth low-frequency texture
    double ripple_amp = 0.06;      // distractor ridges (both classes)
    double noise_amp = 0.05;       // per-pixel uniform noise
    double radius_lo = 0.18, radius_hi = 0.28;      // crop-view mass semi-axes
    double contrast_lo = 0.28, contrast_hi = 0.36;  // crop-view mass contrast
    double whole_radius_scale = 1.4;                // whole views: large mass
    double whole_contrast_scale = 0.4;              // ... at low contrast
    double extra_noise_per_difficulty = 0.04;       // view-inconsistent noise
    // integral of cos^2(pi r / 2) over the unit disk
    double bump_integral = 2.0 * 3.14159265358979323846 * (0.25 - 1.0 / (3.14159265358979323846 * 3.14159265358979323846));

    // Closed-form bound: malignant crop mean minus benign crop mean is at
    // least this (up to rasterization error) at the given difficulty.
    double crop_mean_margin_lower(double difficulty) const {
        const double c = contrast_lo / (1.0 + difficulty);
        return c * radius_lo * radius_lo * bump_integral / 2.0;  // halved for safety
    }
};

namespace detail {

struct MassLatent {
    double cx, cy;      // center in [0,1] coords (whole views)
    double ra, rb;      // semi-axes as a fraction of image side (crop views)
    double angle;
    double contrast;
};

inline void add_field(Image& img, std::mt19937_64& rng, double amp) {
    std::uniform_real_distribution<double> ph(0.0, 2 * 3.14159265358979323846);
    std::uniform_real_distribution<double> freq(0.5, 2.5);
    const double f1 = freq(rng), f2 = freq(rng), p1 = ph(rng), p2 = ph(rng);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) {
            const double u = double(x) / img.width, v = double(y) / img.height;
            img.at(y, x) += float(amp * 0.5 *
                                  (std::sin(2 * 3.14159265358979323846 * f1 * u + p1) +
                                   std::sin(2 * 3.14159265358979323846 * f2 * v + p2)));
        }
}

inline void add_ripple(Image& img, std::mt19937_64& rng, double amp) {
    std::uniform_real_distribution<double> ph(0.0, 2 * 3.14159265358979323846);
    std::uniform_real_distribution<double> freq(4.0, 9.0);
    const double f = freq(rng), p = ph(rng), dir = ph(rng);
    const double cx = std::cos(dir), sy = std::sin(dir);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) {
            const double t = cx * double(x) / img.width + sy * double(y) / img.height;
            img.at(y, x) += float(amp * std::sin(2 * 3.14159265358979323846 * f * t + p));
        }
}

inline void add_noise(Image& img, std::mt19937_64& rng, double amp) {
    std::uniform_real_distribution<double> n(-amp, amp);
    for (float& v : img.pix) v += float(n(rng));
}

inline void set_mean(Image& img, double target) {
    double mean = 0;
    for (float v : img.pix) mean += v;
    mean /= double(img.pix.size());
    for (float& v : img.pix) v += float(target - mean);
}

// cos^2 bump inside a rotated ellipse
inline void add_mass(Image& img, double cx, double cy, double ra, double rb, double angle,
                     double contrast) {
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double s = double(img.width);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) {
            const double dx = (double(x) + 0.5) / s - cx;
            const double dy = (double(y) + 0.5) / s - cy;
            const double u = (ca * dx + sa * dy) / ra;
            const double v = (-sa * dx + ca * dy) / rb;
            const double r = std::sqrt(u * u + v * v);
            if (r < 1.0) {
                const double b = std::cos(3.14159265358979323846 * r / 2.0);
                img.at(y, x) += float(contrast * b * b);
            }
        }
}

inline void clamp01(Image& img) {
    for (float& v : img.pix) v = std::min(1.f, std::max(0.f, v));
}

}  // namespace detail

// Pure function of (n_samples, image_size, seed, difficulty).
inline std::vector<Sample> generate_dataset(std::size_t n_samples, std::size_t image_size,
                                            std::uint64_t seed, double difficulty = 0.0,
                                            GeneratorConstants gc = {}) {
    if (n_samples < 2) throw DataError("generate_dataset: need at least 2 samples");
    if (image_size < 32) throw DataError("generate_dataset: image_size must be >= 32");
    std::vector<Sample> out;
    out.reserve(n_samples);
    for (std::size_t i = 0; i < n_samples; ++i) {
        std::mt19937_64 rng(mix64(seed * 0x9e3779b97f4a7c15ull + i));
        std::uniform_real_distribution<double> uni(0.0, 1.0);

        Sample s;
        s.label = int(i % 2);
        {
            std::ostringstream id;
            id << "B" << std::setw(5) << std::setfill('0') << i;
            s.breast_id = id.str();
        }
        s.laterality = (i % 4) < 2 ? Laterality::Left : Laterality::Right;

        detail::MassLatent m;
        m.cx = 0.3 + 0.4 * uni(rng);
        m.cy = 0.3 + 0.4 * uni(rng);
        m.ra = gc.radius_lo + (gc.radius_hi - gc.radius_lo) * uni(rng);
        m.rb = gc.radius_lo + (gc.radius_hi - gc.radius_lo) * uni(rng);
        m.angle = 3.14159265358979323846 * uni(rng);
        m.contrast = (gc.contrast_lo + (gc.contrast_hi - gc.contrast_lo) * uni(rng)) /
                     (1.0 + difficulty);

        auto view = [&](bool crop, bool mlo) {
            Image img = Image::blank(image_size, image_size);
            detail::add_field(img, rng, gc.field_amp);
            detail::add_ripple(img, rng, gc.ripple_amp);
            detail::add_noise(img, rng, gc.noise_amp);
            detail::set_mean(img, gc.background);
            if (difficulty > 0)
                detail::add_noise(img, rng, gc.extra_noise_per_difficulty * difficulty);
            if (s.label == 1) {
                const double jx = 0.03 * (uni(rng) - 0.5), jy = 0.03 * (uni(rng) - 0.5);
                const double rs = 1.0 + 0.1 * (uni(rng) - 0.5);
                const double da = mlo ? 0.3 * (uni(rng) - 0.5) : 0.0;
                if (crop) {
                    detail::add_mass(img, 0.5 + jx, 0.5 + jy, m.ra * rs, m.rb * rs, m.angle + da,
                                     m.contrast);
                } else {
                    detail::add_mass(img, m.cx + jx, m.cy + jy, m.ra * gc.whole_radius_scale * rs,
                                     m.rb * gc.whole_radius_scale * rs, m.angle + da,
                                     m.contrast * gc.whole_contrast_scale);
                }
            }
            detail::clamp01(img);
            return img;
        };
        s.crop_cc = view(true, false);
        s.crop_mlo = view(true, true);
        s.whole_cc = view(false, false);
        s.whole_mlo = view(false, true);
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// manifest writer / loader
//
// CSV header: breast_id,laterality,label,crop_cc,crop_mlo,whole_cc,whole_mlo
// Image paths are relative to the manifest. Right-laterality images are
// stored mirrored and flipped back to canonical orientation at load.

enum class ImageFormat { Pgm, Png };

inline std::string write_dataset(const std::vector<Sample>& samples, const std::string& dir,
                                 ImageFormat fmt = ImageFormat::Pgm) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const std::string ext = fmt == ImageFormat::Pgm ? ".pgm" : ".png";
    std::ostringstream manifest;
    manifest << "breast_id,laterality,label,crop_cc,crop_mlo,whole_cc,whole_mlo\n";
    for (const Sample& s : samples) {
        const bool right = s.laterality == Laterality::Right;
        auto store = [&](const Image& img, const std::string& view) {
            const std::string name = s.breast_id + "_" + view + ext;
            const Image stored = right ? hflip(img) : img;
            if (fmt == ImageFormat::Pgm)
                write_pgm(stored, (fs::path(dir) / name).string());
            else
                write_png(stored, (fs::path(dir) / name).string());
            return name;
        };
        manifest << s.breast_id << "," << (right ? "right" : "left") << ","
                 << (s.label ? "malignant" : "benign") << "," << store(s.crop_cc, "crop_cc") << ","
                 << store(s.crop_mlo, "crop_mlo") << "," << store(s.whole_cc, "whole_cc") << ","
                 << store(s.whole_mlo, "whole_mlo") << "\n";
    }
    const std::string mpath = (fs::path(dir) / "manifest.csv").string();
    std::ofstream f(mpath, std::ios::binary);
    if (!f) throw DataError("cannot write manifest: " + mpath);
    f << manifest.str();
    return mpath;
}

inline std::vector<Sample> load_manifest(const std::string& manifest_path,
                                         std::size_t image_size) {
    namespace fs = std::filesystem;
    std::ifstream f(manifest_path);
    if (!f) throw DataError("cannot open manifest: " + manifest_path);
    const fs::path base = fs::path(manifest_path).parent_path();

    std::string header;
    if (!std::getline(f, header)) throw DataError(manifest_path + ": empty manifest");
    if (!header.empty() && header.back() == '\r') header.pop_back();
    const std::string expected = "breast_id,laterality,label,crop_cc,crop_mlo,whole_cc,whole_mlo";
    if (header != expected)
        throw DataError(manifest_path + ": schema error: header must be '" + expected + "'");

    std::vector<Sample> out;
    std::string line;
    std::size_t lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::istringstream ss(line);
        std::string col;
        while (std::getline(ss, col, ',')) cols.push_back(col);
        if (cols.size() != 7)
            throw DataError(manifest_path + ":" + std::to_string(lineno) +
                            ": schema error: expected 7 columns, got " +
                            std::to_string(cols.size()));
        Sample s;
        s.breast_id = cols[0];
        if (cols[1] == "left") s.laterality = Laterality::Left;
        else if (cols[1] == "right") s.laterality = Laterality::Right;
        else
            throw DataError(manifest_path + ":" + std::to_string(lineno) +
                            ": schema error: unknown laterality '" + cols[1] + "'");
        if (cols[2] == "benign") s.label = 0;
        else if (cols[2] == "malignant") s.label = 1;
        else
            throw DataError(manifest_path + ":" + std::to_string(lineno) +
                            ": schema error: unknown label '" + cols[2] + "'");
        auto load = [&](const std::string& rel) {
            const std::string path = (base / rel).string();
            if (!fs::exists(path)) throw DataError("missing image file: " + path);
            Image img = read_image(path);
            img = resize_bilinear(img, image_size, image_size);
            return s.laterality == Laterality::Right ? hflip(img) : img;
        };
        s.crop_cc = load(cols[3]);
        s.crop_mlo = load(cols[4]);
        s.whole_cc = load(cols[5]);
        s.whole_mlo = load(cols[6]);
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// breast-level splitting

struct SplitSpec {
    double train_fraction = 0.772;  // 504 of 653
    std::uint64_t seed = 0;
};

struct Split {
    std::vector<std::size_t> train, test;
};

inline Split split_by_breast(const std::vector<Sample>& samples, const SplitSpec& spec) {
    if (samples.empty()) throw DataError("split_by_breast: no samples");
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < samples.size(); ++i)
        groups[samples[i].breast_id].push_back(i);

    Split split;
    if (groups.size() == 1 && spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        std::cerr << "[mvssm] warning: single breast_id cannot honor the split fraction; "
                     "putting everything in train\n";
        for (std::size_t i = 0; i < samples.size(); ++i) split.train.push_back(i);
        return split;
    }

    std::vector<std::pair<std::uint64_t, const std::vector<std::size_t>*>> ordered;
    ordered.reserve(groups.size());
    for (const auto& [id, idx] : groups)
        ordered.emplace_back(mix64(spec.seed ^ fnv1a64(id)), &idx);
    std::sort(ordered.begin(), ordered.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });

    const double target = spec.train_fraction * double(samples.size());
    double taken = 0;
    for (const auto& [h, idx] : ordered) {
        const double with = taken + double(idx->size());
        const bool to_train = std::abs(with - target) < std::abs(taken - target) ||
                              (taken < target && std::abs(with - target) == std::abs(taken - target));
        if (to_train && taken < target) {
            split.train.insert(split.train.end(), idx->begin(), idx->end());
            taken = with;
        } else {
            split.test.insert(split.test.end(), idx->begin(), idx->end());
        }
    }
    return split;
}

}  // namespace mvssm
