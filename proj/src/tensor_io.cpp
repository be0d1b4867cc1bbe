#include "affmae/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace affmae {

namespace {

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v), (unsigned char)(v >> 8), (unsigned char)(v >> 16),
                          (unsigned char)(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = (unsigned char)(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f32(std::ostream& os, float f) {
    uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(os, v);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
    return v;
}

float get_f32(std::istream& is) {
    uint32_t v = get_u32(is);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
}

void write_header(std::ostream& os, uint8_t dtype, const std::vector<int64_t>& dims) {
    os.write("AFT1", 4);
    os.put(char(dtype));
    put_u32(os, uint32_t(dims.size()));
    for (int64_t d : dims) put_u64(os, uint64_t(d));
}

} // namespace

void write_aft(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot open for write: " + path);
    const uint8_t dtype = t.precision() == Precision::b16emu ? 1 : 0;
    write_header(os, dtype, t.dims());
    for (int64_t i = 0; i < t.numel(); ++i) put_f32(os, float(t.get(i)));
    if (!os) throw ConfigError("short write: " + path);
}

void write_aft_u8(const std::string& path, const std::vector<int64_t>& dims,
                  const std::vector<uint8_t>& bytes) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot open for write: " + path);
    write_header(os, 2, dims);
    os.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!os) throw ConfigError("short write: " + path);
}

Tensor read_aft(const std::string& path, uint8_t* dtype_out) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "AFT1", 4) != 0) throw ConfigError("not an AFT1 file: " + path);
    const int dtype = is.get();
    if (dtype < 0 || dtype > 2) throw ConfigError("bad AFT1 dtype in " + path);
    const uint32_t ndim = get_u32(is);
    if (ndim > 8) throw ConfigError("implausible AFT1 ndim in " + path);
    std::vector<int64_t> dims(ndim);
    int64_t numel = 1;
    for (uint32_t i = 0; i < ndim; ++i) {
        dims[i] = int64_t(get_u64(is));
        numel *= dims[i];
    }
    Tensor t(dims, dtype == 1 ? Precision::b16emu : Precision::b32);
    if (dtype == 2) {
        std::vector<uint8_t> bytes(static_cast<size_t>(numel));
        is.read(reinterpret_cast<char*>(bytes.data()), std::streamsize(bytes.size()));
        for (int64_t i = 0; i < numel; ++i) t.set(i, double(bytes[size_t(i)]));
    } else {
        for (int64_t i = 0; i < numel; ++i) t.set(i, double(get_f32(is)));
    }
    if (!is) throw ConfigError("truncated AFT1 file: " + path);
    if (dtype_out) *dtype_out = uint8_t(dtype);
    return t;
}

void write_pgm(const std::string& path, int64_t h, int64_t w, const std::vector<double>& gray) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot open for write: " + path);
    os << "P5\n" << w << " " << h << "\n255\n";
    for (int64_t i = 0; i < h * w; ++i) {
        double v = std::clamp(gray[size_t(i)], 0.0, 1.0);
        os.put(char(uint8_t(std::lround(v * 255.0))));
    }
}

void write_ppm(const std::string& path, int64_t h, int64_t w, const std::vector<double>& rgb) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot open for write: " + path);
    os << "P6\n" << w << " " << h << "\n255\n";
    for (int64_t i = 0; i < h * w * 3; ++i) {
        double v = std::clamp(rgb[size_t(i)], 0.0, 1.0);
        os.put(char(uint8_t(std::lround(v * 255.0))));
    }
}

std::vector<double> read_pgm(const std::string& path, int64_t& h, int64_t& w) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open: " + path);
    std::string magic;
    is >> magic;
    if (magic != "P5") throw ConfigError("not a P5 pgm: " + path);
    int64_t maxval = 0;
    is >> w >> h >> maxval;
    is.get();
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) throw ConfigError("bad pgm header: " + path);
    std::vector<double> out(static_cast<size_t>(h * w));
    for (auto& v : out) {
        int c = is.get();
        if (c < 0) throw ConfigError("truncated pgm: " + path);
        v = double(c) / double(maxval);
    }
    return out;
}

} // namespace affmae
