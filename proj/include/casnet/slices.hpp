#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "casnet/volume.hpp"

namespace casnet {

// Slice axes: 0 = x (w*h image), 1 = y (l*h image), 2 = z (l*w image).
enum class SliceAxis { x = 0, y = 1, z = 2 };

// Fixed label palette (10 entries, RGB), background black.
std::array<std::uint8_t, 3> label_color(int k);

// Grayscale PGM (P5), min-max scaled to 0..255; a flat slice maps to 128.
void write_slice_pgm(const ScalarVolume& vol, SliceAxis axis, std::int64_t index,
                     const std::string& path);

// Color PPM (P6) of the label map under the fixed palette.
void write_slice_ppm(const LabelMap& labels, SliceAxis axis, std::int64_t index,
                     const std::string& path);

} // namespace casnet
