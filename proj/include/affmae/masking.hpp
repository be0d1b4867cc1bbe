#pragma once

#include <complex>
#include <cstdint>
#include <vector>

#include "affmae/tensor.hpp"

namespace affmae {

// Patch-grid mask; true cells are hidden from the encoder.
struct MaskSpec {
    int64_t hp = 0, wp = 0;
    int64_t patch = 8;
    double ratio = 0.0;
    uint64_t seed = 0;
    std::vector<uint8_t> masked; // hp*wp, row-major, 1 = masked

    int64_t cells() const { return hp * wp; }
    int64_t masked_count() const;
    bool at(int64_t r, int64_t c) const { return masked[size_t(r * wp + c)] != 0; }
};

// Single octave of classic gradient noise on the unit lattice: hashed unit
// gradients at integer corners, quintic-fade bilinear blend of corner dot
// products. Zero at every lattice corner.
double perlin_octave_at(double x, double y, uint64_t seed);

// Multi-octave field sampled on an h*w grid: octave o contributes
// persistence^o * noise(base_freq * 2^o lattice cells across the grid).
Tensor perlin_field(int64_t h, int64_t w, int octaves, double base_freq, double persistence,
                    uint64_t seed);

inline constexpr int kPerlinOctaves = 2;
inline constexpr double kPerlinBaseFreq = 4.0;
inline constexpr double kPerlinPersistence = 0.5;

// Threshold at the (1-r) quantile so exactly round(r * cells) cells mask on;
// ties broken by cell index.
MaskSpec mask_from_field(const Tensor& field, double ratio);

// Exactly round(r * cells) cells chosen uniformly without replacement.
MaskSpec random_mask(int64_t hp, int64_t wp, double ratio, uint64_t seed);

// 0/1 field view of a mask (b64), for spectral analysis.
Tensor mask_tensor(const MaskSpec& mask);

// Nearest-neighbor upsample by an integer factor (patch grid -> pixels).
Tensor upsample_nearest(const Tensor& grid, int64_t factor);

// In-place 2D radix-2 FFT over a row-major h*w complex buffer.
void fft2d(std::vector<std::complex<double>>& a, int64_t h, int64_t w, bool inverse = false);

struct PsdProfile {
    std::vector<double> freq;   // integer bin radii
    std::vector<double> power;  // mean |F|^2 in the bin
    std::vector<int64_t> count; // cells per bin
};

// DC-centered power spectrum binned by rounded frequency radius; mean power
// per bin. Sides must be powers of two.
PsdProfile radial_psd(const Tensor& grid);

// alpha from PSD(f) ~ f^(-alpha): negative least-squares slope of log power
// vs log frequency over bins with f in [f_lo, f_hi].
double psd_slope(const PsdProfile& profile, double f_lo, double f_hi);

} // namespace affmae
