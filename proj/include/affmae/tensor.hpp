#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "affmae/errors.hpp"

namespace affmae {

enum class Precision : uint8_t { b32 = 0, b16emu = 1, b64 = 2 };

const char* precision_name(Precision p);
Precision precision_from_name(const std::string& name);

// IEEE-754 binary16 round-to-nearest-even, emulated on binary32 storage.
uint16_t f32_to_b16_bits(float f);
float b16_bits_to_f32(uint16_t h);
float round_b16_scalar(float x);
inline double round_b16_scalar(double x) { return double(round_b16_scalar(float(x))); }

// Dense row-major tensor. b32 and b16emu use float storage, b64 uses double.
// A b16emu tensor keeps every element rounded to its nearest binary16 value;
// writes through set() re-round.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<int64_t> dims, Precision prec);

    static Tensor zeros(std::vector<int64_t> dims, Precision prec) { return Tensor(std::move(dims), prec); }
    static Tensor full(std::vector<int64_t> dims, double v, Precision prec);
    static Tensor scalar(double v, Precision prec);
    static Tensor from_values(std::vector<int64_t> dims, std::span<const double> vals, Precision prec);

    const std::vector<int64_t>& dims() const { return dims_; }
    int64_t dim(size_t i) const { return dims_[i]; }
    size_t ndim() const { return dims_.size(); }
    int64_t numel() const { return numel_; }
    Precision precision() const { return prec_; }
    bool is64() const { return prec_ == Precision::b64; }

    int64_t rows() const { return dims_.empty() ? 0 : dims_[0]; }
    int64_t cols() const { return numel_ == 0 || dims_.empty() ? 0 : numel_ / dims_[0]; }

    double get(int64_t i) const { return is64() ? f64_[size_t(i)] : double(f32_[size_t(i)]); }
    void set(int64_t i, double v);
    double at(int64_t r, int64_t c) const { return get(r * cols() + c); }
    void set_at(int64_t r, int64_t c, double v) { set(r * cols() + c, v); }

    std::span<float> f32() { return f32_; }
    std::span<const float> f32() const { return f32_; }
    std::span<double> f64() { return f64_; }
    std::span<const double> f64() const { return f64_; }

    void fill(double v);
    Tensor to(Precision prec) const;
    std::vector<double> to_doubles() const;

    bool all_finite() const;
    bool same_dims(const Tensor& o) const { return dims_ == o.dims_; }
    std::string dims_str() const;

private:
    std::vector<int64_t> dims_;
    int64_t numel_ = 0;
    Precision prec_ = Precision::b32;
    std::vector<float> f32_;
    std::vector<double> f64_;
};

// Elementwise binary16 rounding; non-finite values pass through. The result
// is tagged b16emu (b64 inputs go through binary32 first, per the emulation
// contract of binary32 storage).
Tensor round_b16(const Tensor& t);

void require_dims(bool ok, const std::string& what, const Tensor& a, const Tensor& b);

} // namespace affmae
