#pragma once

#include <string>

#include "casnet/volume.hpp"

// VVOL container: text header (magic=VVOL1, kind=scalar|prob|vector, l=, w=,
// h=, c=) terminated by a blank line, then little-endian 64-bit floats in
// channel-fastest, then x, y, z order. Round-trips are bit-exact.
namespace casnet {

enum class VvolKind { scalar, prob, vector };

void write_vvol(const std::string& path, const ScalarVolume& vol);
void write_vvol(const std::string& path, const ProbLabelVolume& vol);
void write_vvol(const std::string& path, const VectorField& field);

VvolKind peek_vvol_kind(const std::string& path);
ScalarVolume read_vvol_scalar(const std::string& path);
ProbLabelVolume read_vvol_prob(const std::string& path);
VectorField read_vvol_vector(const std::string& path);

} // namespace casnet
