#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "chinet/errors.hpp"

namespace chinet {

/// Shortest round-trip text for a double.
inline std::string fmt_double(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

class CsvTable {
public:
    explicit CsvTable(std::vector<std::string> header) : header_(std::move(header))
    {
        if (header_.empty()) throw DimensionError("CsvTable: header must not be empty");
    }

    void add_row(std::vector<std::string> cells)
    {
        if (cells.size() != header_.size()) throw DimensionError("CsvTable: row width does not match header");
        rows_.push_back(std::move(cells));
    }

    void add_row(std::span<const double> values)
    {
        std::vector<std::string> cells;
        for (double v : values) cells.push_back(fmt_double(v));
        add_row(std::move(cells));
    }

    const std::vector<std::string>& header() const noexcept { return header_; }
    std::size_t rows() const noexcept { return rows_.size(); }

    void write(std::ostream& out) const
    {
        auto line = [&](const std::vector<std::string>& cells) {
            for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
            out << "\n";
        };
        line(header_);
        for (const auto& r : rows_) line(r);
    }

    void save(const std::filesystem::path& path) const
    {
        std::ofstream out(path);
        if (!out) throw FormatError("cannot write " + path.string());
        write(out);
    }

private:
    std::vector<std::string> header_;
    std::vector<std::vector<std::string>> rows_;
};

struct PlotSeries {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

struct PlotOptions {
    std::string title;
    std::string x_label;
    std::string y_label;
    bool log_y = false;
    int width = 640;
    int height = 400;
};

namespace detail {

inline std::string xml_escape(const std::string& s)
{
    std::string out;
    for (char ch : s) {
        switch (ch) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += ch;
        }
    }
    return out;
}

inline std::string num(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

inline std::string tick(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

} // namespace detail

/// Minimal SVG line chart; non-finite (and, on a log axis, non-positive) points are skipped.
inline std::string svg_line_plot(const std::vector<PlotSeries>& series, const PlotOptions& opt = {})
{
    static constexpr const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
    const double left = 70, right = 20, top = 40, bottom = 50;
    const double pw = opt.width - left - right, ph = opt.height - top - bottom;

    auto ty = [&](double y) { return opt.log_y ? std::log10(y) : y; };
    auto usable = [&](double x, double y) { return std::isfinite(x) && std::isfinite(y) && (!opt.log_y || y > 0.0); };

    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& s : series)
        for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
            if (!usable(s.x[i], s.y[i])) continue;
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, ty(s.y[i]));
            y1 = std::max(y1, ty(s.y[i]));
        }
    if (!(x0 <= x1)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
    auto py = [&](double y) { return top + ph - (ty(y) - y0) / (y1 - y0) * ph; };

    std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(opt.width) +
                      "\" height=\"" + std::to_string(opt.height) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg += "<text x=\"" + detail::num(opt.width / 2.0) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" +
           detail::xml_escape(opt.title) + "</text>\n";
    svg += "<rect x=\"" + detail::num(left) + "\" y=\"" + detail::num(top) + "\" width=\"" + detail::num(pw) +
           "\" height=\"" + detail::num(ph) + "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        const double fx = x0 + (x1 - x0) * t / 4.0, fy = y0 + (y1 - y0) * t / 4.0;
        const double gx = left + pw * t / 4.0, gy = top + ph - ph * t / 4.0;
        svg += "<text x=\"" + detail::num(gx) + "\" y=\"" + detail::num(top + ph + 16) + "\" text-anchor=\"middle\">" +
               detail::tick(fx) + "</text>\n";
        svg += "<text x=\"" + detail::num(left - 6) + "\" y=\"" + detail::num(gy + 4) + "\" text-anchor=\"end\">" +
               detail::tick(opt.log_y ? std::pow(10.0, fy) : fy) + "</text>\n";
    }
    svg += "<text x=\"" + detail::num(left + pw / 2) + "\" y=\"" + detail::num(opt.height - 12.0) +
           "\" text-anchor=\"middle\">" + detail::xml_escape(opt.x_label) + "</text>\n";
    svg += "<text transform=\"translate(16," + detail::num(top + ph / 2) + ") rotate(-90)\" text-anchor=\"middle\">" +
           detail::xml_escape(opt.y_label) + "</text>\n";

    for (std::size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const char* colour = palette[si % std::size(palette)];
        std::string pts;
        for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i)
            if (usable(s.x[i], s.y[i])) pts += detail::num(px(s.x[i])) + "," + detail::num(py(s.y[i])) + " ";
        svg += "<polyline fill=\"none\" stroke=\"" + std::string(colour) + "\" stroke-width=\"1.5\" points=\"" + pts +
               "\"/>\n";
        const double ly = top + 14 + 16.0 * static_cast<double>(si);
        svg += "<line x1=\"" + detail::num(left + pw - 110) + "\" y1=\"" + detail::num(ly - 4) + "\" x2=\"" +
               detail::num(left + pw - 90) + "\" y2=\"" + detail::num(ly - 4) + "\" stroke=\"" + colour +
               "\" stroke-width=\"2\"/>\n";
        svg += "<text x=\"" + detail::num(left + pw - 84) + "\" y=\"" + detail::num(ly) + "\">" +
               detail::xml_escape(s.name) + "</text>\n";
    }
    svg += "</svg>\n";
    return svg;
}

inline void save_text(const std::filesystem::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path.string());
    out << text;
}

/// RGB bytes for v in [-1, 1]: red for negative, white at zero, blue for positive.
inline std::array<unsigned char, 3> diverging_colour(double v)
{
    v = std::clamp(std::isfinite(v) ? v : 0.0, -1.0, 1.0);
    const auto fade = static_cast<unsigned char>(std::lround(255.0 * (1.0 - std::abs(v))));
    if (v < 0) return {255, fade, fade};
    return {fade, fade, 255};
}

/// Binary PPM of `values` (row-major height × width), scaled so max |v| maps to full colour.
inline std::string diverging_ppm(std::span<const double> values, std::size_t height, std::size_t width)
{
    if (values.size() != height * width) throw DimensionError("diverging_ppm: value count does not match image shape");
    double scale = 0.0;
    for (double v : values)
        if (std::isfinite(v)) scale = std::max(scale, std::abs(v));
    std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    for (double v : values) {
        const auto rgb = diverging_colour(scale > 0.0 ? v / scale : 0.0);
        out.append(reinterpret_cast<const char*>(rgb.data()), 3);
    }
    return out;
}

/// Binary PGM of values in [0,1] (clamped).
inline std::string grey_pgm(std::span<const double> values, std::size_t height, std::size_t width)
{
    if (values.size() != height * width) throw DimensionError("grey_pgm: value count does not match image shape");
    std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    for (double v : values)
        out.push_back(static_cast<char>(std::lround(255.0 * std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 1.0))));
    return out;
}

/// Raw values as a height × width CSV grid with a column header.
inline CsvTable image_table(std::span<const double> values, std::size_t height, std::size_t width)
{
    if (values.size() != height * width) throw DimensionError("image_table: value count does not match image shape");
    std::vector<std::string> header;
    for (std::size_t c = 0; c < width; ++c) header.push_back("c" + std::to_string(c));
    CsvTable t(std::move(header));
    for (std::size_t r = 0; r < height; ++r) t.add_row(values.subspan(r * width, width));
    return t;
}

/// Writes <stem>.ppm (diverging) and <stem>.csv (raw values).
inline void save_signed_image(const std::filesystem::path& stem, std::span<const double> values, std::size_t height,
                              std::size_t width)
{
    save_text(stem.string() + ".ppm", diverging_ppm(values, height, width));
    image_table(values, height, width).save(stem.string() + ".csv");
}

} // namespace chinet
