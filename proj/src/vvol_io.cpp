#include "casnet/vvol_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "casnet/errors.hpp"

namespace casnet {

namespace {

struct VvolHeader {
    std::string kind;
    int l = 0, w = 0, h = 0, c = 0;
};

void write_payload(std::ofstream& out, const double* data, std::int64_t count) {
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(data), count * 8);
    } else {
        for (std::int64_t i = 0; i < count; ++i) {
            std::uint64_t bits;
            std::memcpy(&bits, &data[i], 8);
            char buf[8];
            for (int b = 0; b < 8; ++b) buf[b] = static_cast<char>((bits >> (8 * b)) & 0xff);
            out.write(buf, 8);
        }
    }
}

void read_payload(std::ifstream& in, double* data, std::int64_t count) {
    if constexpr (std::endian::native == std::endian::little) {
        in.read(reinterpret_cast<char*>(data), count * 8);
    } else {
        for (std::int64_t i = 0; i < count; ++i) {
            char buf[8];
            in.read(buf, 8);
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b) {
                bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[b])) << (8 * b);
            }
            std::memcpy(&data[i], &bits, 8);
        }
    }
    if (!in) throw ConfigError("vvol: truncated payload");
}

void write_header(std::ofstream& out, const std::string& kind, const GridSpec& g, int c) {
    out << "magic=VVOL1\n"
        << "kind=" << kind << "\n"
        << "l=" << g.l << "\n"
        << "w=" << g.w << "\n"
        << "h=" << g.h << "\n"
        << "c=" << c << "\n\n";
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("vvol: cannot open for writing: " + path);
    return out;
}

VvolHeader read_header(std::ifstream& in, const std::string& path) {
    if (!in) throw ConfigError("vvol: cannot open: " + path);
    VvolHeader hdr;
    std::string line;
    bool saw_magic = false;
    while (std::getline(in, line)) {
        if (line.empty()) break;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("vvol: malformed header line: " + line);
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        if (key == "magic") {
            if (val != "VVOL1") throw ConfigError("vvol: bad magic in " + path);
            saw_magic = true;
        } else if (key == "kind") {
            hdr.kind = val;
        } else if (key == "l" || key == "w" || key == "h" || key == "c") {
            int parsed = 0;
            try {
                parsed = std::stoi(val);
            } catch (const std::exception&) {
                throw ConfigError("vvol: non-integer " + key + " in " + path);
            }
            (key == "l" ? hdr.l : key == "w" ? hdr.w : key == "h" ? hdr.h : hdr.c) = parsed;
        } else {
            throw ConfigError("vvol: unknown header key: " + key);
        }
    }
    if (!saw_magic) throw ConfigError("vvol: missing magic in " + path);
    if (hdr.kind != "scalar" && hdr.kind != "prob" && hdr.kind != "vector") {
        throw ConfigError("vvol: unknown kind in " + path);
    }
    if (hdr.c < 1) throw ConfigError("vvol: bad channel count in " + path);
    return hdr;
}

} // namespace

void write_vvol(const std::string& path, const ScalarVolume& vol) {
    auto out = open_out(path);
    write_header(out, "scalar", vol.grid, 1);
    write_payload(out, vol.data.data(), vol.grid.voxels());
    if (!out) throw ConfigError("vvol: write failed: " + path);
}

void write_vvol(const std::string& path, const ProbLabelVolume& vol) {
    auto out = open_out(path);
    write_header(out, "prob", vol.grid, vol.channels);
    write_payload(out, vol.data.data(), vol.grid.voxels() * vol.channels);
    if (!out) throw ConfigError("vvol: write failed: " + path);
}

void write_vvol(const std::string& path, const VectorField& field) {
    auto out = open_out(path);
    write_header(out, "vector", field.grid, 3);
    write_payload(out, field.data.data(), field.grid.voxels() * 3);
    if (!out) throw ConfigError("vvol: write failed: " + path);
}

VvolKind peek_vvol_kind(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    const auto hdr = read_header(in, path);
    if (hdr.kind == "scalar") return VvolKind::scalar;
    if (hdr.kind == "prob") return VvolKind::prob;
    return VvolKind::vector;
}

ScalarVolume read_vvol_scalar(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    const auto hdr = read_header(in, path);
    if (hdr.kind != "scalar" || hdr.c != 1) throw ConfigError("vvol: not a scalar volume: " + path);
    ScalarVolume vol(GridSpec(hdr.l, hdr.w, hdr.h));
    read_payload(in, vol.data.data(), vol.grid.voxels());
    return vol;
}

ProbLabelVolume read_vvol_prob(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    const auto hdr = read_header(in, path);
    if (hdr.kind != "prob") throw ConfigError("vvol: not a prob volume: " + path);
    ProbLabelVolume vol(GridSpec(hdr.l, hdr.w, hdr.h), hdr.c);
    read_payload(in, vol.data.data(), vol.grid.voxels() * vol.channels);
    return vol;
}

VectorField read_vvol_vector(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    const auto hdr = read_header(in, path);
    if (hdr.kind != "vector" || hdr.c != 3) throw ConfigError("vvol: not a vector field: " + path);
    VectorField field(GridSpec(hdr.l, hdr.w, hdr.h));
    read_payload(in, field.data.data(), field.grid.voxels() * 3);
    return field;
}

} // namespace casnet
