#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "chinet/errors.hpp"
#include "chinet/linalg.hpp"

namespace chinet {

/// Grayscale images in [0,1] (one row per sample) with integer labels.
struct Dataset {
    Matrix images;
    std::vector<int> labels;
    std::size_t height = 0;
    std::size_t width = 0;
    std::string split = "train";

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t input_dim() const noexcept { return images.cols(); }

    std::size_t num_classes() const noexcept
    {
        if (labels.empty()) return 0;
        return static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
    }

    std::span<const double> image(std::size_t i) const { return images.row(i); }
};

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open file: " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset, const std::string& what)
{
    if (offset + 4 > bytes.size()) throw FormatError(what + ": truncated header");
    return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
           (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline void write_be32(std::ostream& out, std::uint32_t v)
{
    const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                       static_cast<char>(v)};
    out.write(b, 4);
}

} // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// MNIST-style big-endian IDX image + label files; pixels scaled by 1/255.
inline Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path)
{
    const auto img = detail::read_file(images_path);
    const auto lab = detail::read_file(labels_path);

    const std::string iname = images_path.string();
    const std::string lname = labels_path.string();
    if (const auto magic = detail::read_be32(img, 0, iname); magic != kIdxImageMagic)
        throw FormatError(iname + ": bad IDX image magic 0x" + [&] {
            std::ostringstream s;
            s << std::hex << magic;
            return s.str();
        }());
    if (const auto magic = detail::read_be32(lab, 0, lname); magic != kIdxLabelMagic)
        throw FormatError(lname + ": bad IDX label magic 0x" + [&] {
            std::ostringstream s;
            s << std::hex << magic;
            return s.str();
        }());

    const std::size_t n = detail::read_be32(img, 4, iname);
    const std::size_t rows = detail::read_be32(img, 8, iname);
    const std::size_t cols = detail::read_be32(img, 12, iname);
    const std::size_t nl = detail::read_be32(lab, 4, lname);
    if (n != nl)
        throw FormatError("image/label count mismatch: " + std::to_string(n) + " vs " + std::to_string(nl));
    const std::size_t d = rows * cols;
    if (img.size() < 16 + n * d) throw FormatError(iname + ": truncated pixel data");
    if (lab.size() < 8 + n) throw FormatError(lname + ": truncated label data");

    Dataset ds;
    ds.height = rows;
    ds.width = cols;
    ds.images = Matrix(n, d);
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto row = ds.images.row(i);
        for (std::size_t j = 0; j < d; ++j) row[j] = static_cast<double>(img[16 + i * d + j]) / 255.0;
        ds.labels[i] = lab[8 + i];
    }
    return ds;
}

/// Inverse of load_idx; pixels are rounded to the nearest byte.
inline void write_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                      const Dataset& ds)
{
    std::ofstream img(images_path, std::ios::binary);
    std::ofstream lab(labels_path, std::ios::binary);
    if (!img || !lab) throw FormatError("cannot write IDX files at " + images_path.string());
    detail::write_be32(img, kIdxImageMagic);
    detail::write_be32(img, static_cast<std::uint32_t>(ds.size()));
    detail::write_be32(img, static_cast<std::uint32_t>(ds.height));
    detail::write_be32(img, static_cast<std::uint32_t>(ds.width));
    for (double v : ds.images.data())
        img.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
    detail::write_be32(lab, kIdxLabelMagic);
    detail::write_be32(lab, static_cast<std::uint32_t>(ds.size()));
    for (int l : ds.labels) lab.put(static_cast<char>(static_cast<unsigned char>(l)));
}

/// Sidecar for raw interleaved RGB dumps (one `key=value` per line: count, height, width).
struct RawRgbMeta {
    std::size_t count = 0;
    std::size_t height = 0;
    std::size_t width = 0;
};

inline RawRgbMeta read_rgb_meta(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open file: " + path.string());
    RawRgbMeta meta;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError(path.string() + ": expected key=value, got '" + line + "'");
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        key.erase(std::remove_if(key.begin(), key.end(), ::isspace), key.end());
        const std::size_t v = std::stoul(value);
        if (key == "count")
            meta.count = v;
        else if (key == "height")
            meta.height = v;
        else if (key == "width")
            meta.width = v;
        else
            throw FormatError(path.string() + ": unknown key '" + key + "'");
    }
    return meta;
}

/// Luma grayscale y = 0.299 r + 0.587 g + 0.114 b, scaled to [0,1]. Labels: one byte per sample.
inline Dataset load_raw_rgb(const std::filesystem::path& rgb_path, const std::filesystem::path& labels_path,
                            const RawRgbMeta& meta)
{
    const auto rgb = detail::read_file(rgb_path);
    const auto lab = detail::read_file(labels_path);
    const std::size_t d = meta.height * meta.width;
    if (rgb.size() != meta.count * d * 3)
        throw FormatError(rgb_path.string() + ": size " + std::to_string(rgb.size()) + " != count*height*width*3");
    if (lab.size() != meta.count)
        throw FormatError(labels_path.string() + ": " + std::to_string(lab.size()) + " labels for " +
                          std::to_string(meta.count) + " images");
    Dataset ds;
    ds.height = meta.height;
    ds.width = meta.width;
    ds.images = Matrix(meta.count, d);
    ds.labels.assign(lab.begin(), lab.end());
    for (std::size_t i = 0; i < meta.count; ++i) {
        auto row = ds.images.row(i);
        for (std::size_t j = 0; j < d; ++j) {
            const std::size_t o = (i * d + j) * 3;
            row[j] = (0.299 * rgb[o] + 0.587 * rgb[o + 1] + 0.114 * rgb[o + 2]) / 255.0;
        }
    }
    return ds;
}

/// Rows `indices` of ds.
inline Dataset subset(const Dataset& ds, std::span<const std::size_t> indices)
{
    Dataset out;
    out.height = ds.height;
    out.width = ds.width;
    out.split = ds.split;
    out.images = Matrix(indices.size(), ds.input_dim());
    out.labels.reserve(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        std::copy(ds.images.row(indices[i]).begin(), ds.images.row(indices[i]).end(), out.images.row(i).begin());
        out.labels.push_back(ds.labels[indices[i]]);
    }
    return out;
}

enum class NoiseMode { per_pixel_std, expected_l2_norm };

/// Gaussian input noise. per_pixel_std: each pixel gets N(0, σ²); expected_l2_norm: per-pixel
/// std σ/√d so the noise vector's expected squared norm is σ².
template <class Rng>
void add_noise(Matrix& batch, double sigma, Rng& rng, NoiseMode mode = NoiseMode::per_pixel_std)
{
    if (sigma < 0.0) throw ConfigError("add_noise: sigma must be non-negative");
    if (sigma == 0.0 || batch.empty()) return;
    const double std_dev =
        mode == NoiseMode::per_pixel_std ? sigma : sigma / std::sqrt(static_cast<double>(batch.cols()));
    std::normal_distribution<double> dist(0.0, std_dev);
    for (double& v : batch.data()) v += dist(rng);
}

} // namespace chinet
