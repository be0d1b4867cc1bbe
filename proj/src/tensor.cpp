#include "affmae/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace affmae {

const char* precision_name(Precision p) {
    switch (p) {
        case Precision::b32: return "b32";
        case Precision::b16emu: return "b16emu";
        case Precision::b64: return "b64";
    }
    return "?";
}

Precision precision_from_name(const std::string& name) {
    if (name == "b32") return Precision::b32;
    if (name == "b16emu") return Precision::b16emu;
    if (name == "b64") return Precision::b64;
    throw ConfigError("unknown precision '" + name + "' (expected b32, b16emu or b64)");
}

uint16_t f32_to_b16_bits(float f) {
    uint32_t x;
    std::memcpy(&x, &f, 4);
    const uint16_t hs = uint16_t((x >> 16) & 0x8000u);
    const uint32_t e8 = (x >> 23) & 0xffu;
    const uint32_t mant = x & 0x7fffffu;

    if (e8 == 0xffu) { // inf / nan
        return mant ? uint16_t(hs | 0x7e00u) : uint16_t(hs | 0x7c00u);
    }
    const int32_t exp = int32_t(e8) - 127;
    if (exp > 15) return uint16_t(hs | 0x7c00u); // |v| >= 2^16 -> inf

    if (exp >= -14) {
        // normal half range, round 23-bit mantissa to 10 bits (nearest even)
        uint32_t he = uint32_t(exp + 15);
        uint32_t hm = mant >> 13;
        const uint32_t round_bit = 1u << 12;
        if ((mant & round_bit) && ((mant & (round_bit - 1)) || (hm & 1))) {
            if (++hm == 0x400u) {
                hm = 0;
                ++he;
            }
        }
        if (he >= 31) return uint16_t(hs | 0x7c00u); // rounded past 65504
        return uint16_t(hs | uint16_t(he << 10) | uint16_t(hm));
    }

    // subnormal half: value = hm * 2^-24
    const int sh = -exp - 1; // 14..24 covers exp -15..-25
    if (sh > 24) return hs;  // below half of the min subnormal
    const uint32_t m = mant | 0x800000u;
    uint32_t hm = m >> sh;
    const uint32_t rem = m & ((1u << sh) - 1);
    const uint32_t half = 1u << (sh - 1);
    if (rem > half || (rem == half && (hm & 1))) ++hm;
    if (hm >= 0x400u) return uint16_t(hs | (1u << 10));
    return uint16_t(hs | uint16_t(hm));
}

float b16_bits_to_f32(uint16_t h) {
    const uint32_t sign = uint32_t(h & 0x8000u) << 16;
    const uint32_t exp = (h >> 10) & 0x1fu;
    uint32_t mant = h & 0x3ffu;
    uint32_t out;
    if (exp == 0) {
        if (mant == 0) {
            out = sign;
        } else {
            // mant * 2^-24 == 1.f * 2^(-14-e) once e shifts expose the
            // implicit bit at position 10
            int e = 0;
            while (!(mant & 0x400u)) {
                mant <<= 1;
                ++e;
            }
            out = sign | (uint32_t(127 - 14 - e) << 23) | ((mant & 0x3ffu) << 13);
        }
    } else if (exp == 31) {
        out = sign | 0x7f800000u | (mant << 13);
    } else {
        out = sign | ((exp - 15 + 127) << 23) | (mant << 13);
    }
    float f;
    std::memcpy(&f, &out, 4);
    return f;
}

float round_b16_scalar(float x) {
    if (std::isnan(x)) return x;
    return b16_bits_to_f32(f32_to_b16_bits(x));
}

Tensor::Tensor(std::vector<int64_t> dims, Precision prec) : dims_(std::move(dims)), prec_(prec) {
    numel_ = 1;
    for (int64_t d : dims_) {
        if (d < 0) throw ConfigError("negative tensor extent");
        numel_ *= d;
    }
    if (prec_ == Precision::b64)
        f64_.assign(size_t(numel_), 0.0);
    else
        f32_.assign(size_t(numel_), 0.0f);
}

Tensor Tensor::full(std::vector<int64_t> dims, double v, Precision prec) {
    Tensor t(std::move(dims), prec);
    t.fill(v);
    return t;
}

Tensor Tensor::scalar(double v, Precision prec) { return full({1}, v, prec); }

Tensor Tensor::from_values(std::vector<int64_t> dims, std::span<const double> vals, Precision prec) {
    Tensor t(std::move(dims), prec);
    if (int64_t(vals.size()) != t.numel())
        throw ConfigError("from_values: got " + std::to_string(vals.size()) + " values for " + t.dims_str());
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, vals[size_t(i)]);
    return t;
}

void Tensor::set(int64_t i, double v) {
    if (is64()) {
        f64_[size_t(i)] = v;
    } else if (prec_ == Precision::b16emu) {
        f32_[size_t(i)] = round_b16_scalar(float(v));
    } else {
        f32_[size_t(i)] = float(v);
    }
}

void Tensor::fill(double v) {
    for (int64_t i = 0; i < numel_; ++i) set(i, v);
}

Tensor Tensor::to(Precision prec) const {
    if (prec == prec_) return *this;
    Tensor out(dims_, prec);
    for (int64_t i = 0; i < numel_; ++i) out.set(i, get(i));
    return out;
}

std::vector<double> Tensor::to_doubles() const {
    std::vector<double> out(static_cast<size_t>(numel_));
    for (int64_t i = 0; i < numel_; ++i) out[size_t(i)] = get(i);
    return out;
}

bool Tensor::all_finite() const {
    for (int64_t i = 0; i < numel_; ++i)
        if (!std::isfinite(get(i))) return false;
    return true;
}

std::string Tensor::dims_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < dims_.size(); ++i) os << (i ? "x" : "") << dims_[i];
    os << "]";
    return os.str();
}

Tensor round_b16(const Tensor& t) {
    Tensor out(t.dims(), Precision::b16emu);
    auto dst = out.f32();
    for (int64_t i = 0; i < t.numel(); ++i) dst[size_t(i)] = round_b16_scalar(float(t.get(i)));
    return out;
}

void require_dims(bool ok, const std::string& what, const Tensor& a, const Tensor& b) {
    if (!ok)
        throw ConfigError(what + ": dims " + a.dims_str() + " vs " + b.dims_str());
}

} // namespace affmae
