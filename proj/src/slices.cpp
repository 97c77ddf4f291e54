#include "casnet/slices.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <vector>

#include "casnet/errors.hpp"

namespace casnet {

namespace {

struct SlicePlan {
    std::int64_t width = 0, height = 0;
    // Maps (col, row) to a voxel index.
    std::int64_t x0 = 0, y0 = 0, z0 = 0;
    int col_axis = 0, row_axis = 0;
};

SlicePlan plan_slice(const GridSpec& g, SliceAxis axis, std::int64_t index) {
    const std::int64_t extent = axis == SliceAxis::x ? g.l : (axis == SliceAxis::y ? g.w : g.h);
    if (index < 0 || index >= extent)
        throw ConfigError("export-slices: slice index out of range");
    SlicePlan p;
    switch (axis) {
    case SliceAxis::x:
        p.width = g.w;
        p.height = g.h;
        p.x0 = index;
        p.col_axis = 1;
        p.row_axis = 2;
        break;
    case SliceAxis::y:
        p.width = g.l;
        p.height = g.h;
        p.y0 = index;
        p.col_axis = 0;
        p.row_axis = 2;
        break;
    case SliceAxis::z:
        p.width = g.l;
        p.height = g.w;
        p.z0 = index;
        p.col_axis = 0;
        p.row_axis = 1;
        break;
    }
    return p;
}

std::int64_t voxel_of(const GridSpec& g, const SlicePlan& p, std::int64_t col,
                      std::int64_t row) {
    std::int64_t x = p.x0, y = p.y0, z = p.z0;
    (p.col_axis == 0 ? x : (p.col_axis == 1 ? y : z)) = col;
    (p.row_axis == 0 ? x : (p.row_axis == 1 ? y : z)) = row;
    return g.index(x, y, z);
}

void write_binary(const std::string& path, const std::string& header,
                  const std::vector<std::uint8_t>& pixels) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("export-slices: cannot open " + path);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(reinterpret_cast<const char*>(pixels.data()),
              static_cast<std::streamsize>(pixels.size()));
    if (!out) throw ConfigError("export-slices: write failed for " + path);
}

} // namespace

std::array<std::uint8_t, 3> label_color(int k) {
    static constexpr std::array<std::array<std::uint8_t, 3>, 10> kPalette{{
        {0, 0, 0},       // background
        {230, 159, 0},   // orange
        {86, 180, 233},  // sky blue
        {0, 158, 115},   // teal
        {240, 228, 66},  // yellow
        {0, 114, 178},   // blue
        {213, 94, 0},    // vermillion
        {204, 121, 167}, // purple
        {136, 136, 136}, // gray
        {255, 255, 255}, // white
    }};
    if (k < 0 || k >= static_cast<int>(kPalette.size()))
        throw ConfigError("export-slices: label outside the 10-entry palette");
    return kPalette[static_cast<std::size_t>(k)];
}

void write_slice_pgm(const ScalarVolume& vol, SliceAxis axis, std::int64_t index,
                     const std::string& path) {
    const GridSpec& g = vol.grid;
    const SlicePlan p = plan_slice(g, axis, index);
    double lo = vol.data[static_cast<std::size_t>(voxel_of(g, p, 0, 0))];
    double hi = lo;
    for (std::int64_t row = 0; row < p.height; ++row)
        for (std::int64_t col = 0; col < p.width; ++col) {
            const double v = vol.data[static_cast<std::size_t>(voxel_of(g, p, col, row))];
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    std::vector<std::uint8_t> pixels(static_cast<std::size_t>(p.width * p.height));
    const double span = hi - lo;
    for (std::int64_t row = 0; row < p.height; ++row)
        for (std::int64_t col = 0; col < p.width; ++col) {
            const double v = vol.data[static_cast<std::size_t>(voxel_of(g, p, col, row))];
            const double scaled = span > 0.0 ? (v - lo) / span * 255.0 : 128.0;
            pixels[static_cast<std::size_t>(row * p.width + col)] =
                static_cast<std::uint8_t>(std::clamp(scaled + 0.5, 0.0, 255.0));
        }
    char header[64];
    std::snprintf(header, sizeof header, "P5\n%lld %lld\n255\n",
                  static_cast<long long>(p.width), static_cast<long long>(p.height));
    write_binary(path, header, pixels);
}

void write_slice_ppm(const LabelMap& labels, SliceAxis axis, std::int64_t index,
                     const std::string& path) {
    const GridSpec& g = labels.grid;
    const SlicePlan p = plan_slice(g, axis, index);
    std::vector<std::uint8_t> pixels(static_cast<std::size_t>(p.width * p.height) * 3);
    for (std::int64_t row = 0; row < p.height; ++row)
        for (std::int64_t col = 0; col < p.width; ++col) {
            const int k = labels.data[static_cast<std::size_t>(voxel_of(g, p, col, row))];
            const auto rgb = label_color(k);
            const std::size_t o = static_cast<std::size_t>(row * p.width + col) * 3;
            pixels[o] = rgb[0];
            pixels[o + 1] = rgb[1];
            pixels[o + 2] = rgb[2];
        }
    char header[64];
    std::snprintf(header, sizeof header, "P6\n%lld %lld\n255\n",
                  static_cast<long long>(p.width), static_cast<long long>(p.height));
    write_binary(path, header, pixels);
}

} // namespace casnet
