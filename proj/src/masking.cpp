#include "affmae/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "affmae/rng.hpp"

namespace affmae {

int64_t MaskSpec::masked_count() const {
    int64_t n = 0;
    for (uint8_t m : masked) n += m != 0;
    return n;
}

namespace {

constexpr double kTwoPi = 6.283185307179586476925287;

void corner_gradient(uint64_t seed, int64_t ix, int64_t iy, double& gx, double& gy) {
    uint64_t k = mix64(mix64(uint64_t(ix) * 0x9E3779B97F4A7C15ull ^ uint64_t(iy)) ^ seed);
    double ang = double(k >> 11) * 0x1.0p-53 * kTwoPi;
    gx = std::cos(ang);
    gy = std::sin(ang);
}

double fade(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }

double lerp(double a, double b, double t) { return a + (b - a) * t; }

} // namespace

double perlin_octave_at(double x, double y, uint64_t seed) {
    double fx0 = std::floor(x), fy0 = std::floor(y);
    auto x0 = int64_t(fx0), y0 = int64_t(fy0);
    double tx = x - fx0, ty = y - fy0;
    double gx, gy;
    corner_gradient(seed, x0, y0, gx, gy);
    double n00 = gx * tx + gy * ty;
    corner_gradient(seed, x0 + 1, y0, gx, gy);
    double n10 = gx * (tx - 1.0) + gy * ty;
    corner_gradient(seed, x0, y0 + 1, gx, gy);
    double n01 = gx * tx + gy * (ty - 1.0);
    corner_gradient(seed, x0 + 1, y0 + 1, gx, gy);
    double n11 = gx * (tx - 1.0) + gy * (ty - 1.0);
    double u = fade(tx), v = fade(ty);
    return lerp(lerp(n00, n10, u), lerp(n01, n11, u), v);
}

Tensor perlin_field(int64_t h, int64_t w, int octaves, double base_freq, double persistence,
                    uint64_t seed) {
    if (h < 2 || w < 2) throw ConfigError("perlin_field: grid must be at least 2x2");
    if (octaves < 1) throw ConfigError("perlin_field: octaves must be >= 1");
    Tensor field = Tensor::zeros({h, w}, Precision::b64);
    for (int o = 0; o < octaves; ++o) {
        double freq = base_freq * double(1 << o);
        double amp = std::pow(persistence, o);
        uint64_t os = mix64(seed + 0x9E3779B97F4A7C15ull * uint64_t(o + 1));
        for (int64_t i = 0; i < h; ++i) {
            double py = double(i) * freq / double(h);
            for (int64_t j = 0; j < w; ++j) {
                double px = double(j) * freq / double(w);
                field.set(i * w + j, field.get(i * w + j) + amp * perlin_octave_at(px, py, os));
            }
        }
    }
    return field;
}

MaskSpec mask_from_field(const Tensor& field, double ratio) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("mask_from_field: ratio must be in [0, 1]");
    if (field.ndim() != 2) throw ConfigError("mask_from_field: field must be 2d");
    MaskSpec m;
    m.hp = field.dim(0);
    m.wp = field.dim(1);
    m.ratio = ratio;
    int64_t cells = m.cells();
    auto want = int64_t(std::llround(ratio * double(cells)));
    m.masked.assign(size_t(cells), 0);
    if (want <= 0) return m;

    std::vector<int64_t> order(static_cast<size_t>(cells));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        double fa = field.get(a), fb = field.get(b);
        if (fa != fb) return fa > fb; // largest values mask first
        return a < b;
    });
    for (int64_t i = 0; i < want; ++i) m.masked[size_t(order[size_t(i)])] = 1;
    return m;
}

MaskSpec random_mask(int64_t hp, int64_t wp, double ratio, uint64_t seed) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("random_mask: ratio must be in [0, 1]");
    MaskSpec m;
    m.hp = hp;
    m.wp = wp;
    m.ratio = ratio;
    m.seed = seed;
    int64_t cells = m.cells();
    auto want = int64_t(std::llround(ratio * double(cells)));
    m.masked.assign(size_t(cells), 0);
    std::vector<int64_t> order(static_cast<size_t>(cells));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix64(seed) ^ 0x6d61736bull);
    rng.shuffle(order.data(), order.size());
    for (int64_t i = 0; i < want; ++i) m.masked[size_t(order[size_t(i)])] = 1;
    return m;
}

Tensor mask_tensor(const MaskSpec& mask) {
    Tensor t = Tensor::zeros({mask.hp, mask.wp}, Precision::b64);
    for (int64_t i = 0; i < mask.cells(); ++i) t.set(i, mask.masked[size_t(i)] ? 1.0 : 0.0);
    return t;
}

Tensor upsample_nearest(const Tensor& grid, int64_t factor) {
    if (grid.ndim() != 2 || factor < 1) throw ConfigError("upsample_nearest: bad arguments");
    int64_t h = grid.dim(0), w = grid.dim(1);
    Tensor out = Tensor::zeros({h * factor, w * factor}, grid.precision());
    for (int64_t i = 0; i < h * factor; ++i)
        for (int64_t j = 0; j < w * factor; ++j)
            out.set(i * w * factor + j, grid.get((i / factor) * w + j / factor));
    return out;
}

namespace {

bool power_of_two(int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

// Iterative radix-2 Cooley-Tukey on a stride-1 slice.
void fft1d(std::complex<double>* a, int64_t n, bool inverse) {
    for (int64_t i = 1, j = 0; i < n; ++i) {
        int64_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (int64_t len = 2; len <= n; len <<= 1) {
        double ang = kTwoPi / double(len) * (inverse ? 1.0 : -1.0);
        std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (int64_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (int64_t j = 0; j < len / 2; ++j) {
                std::complex<double> u = a[i + j];
                std::complex<double> v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wl;
            }
        }
    }
    if (inverse)
        for (int64_t i = 0; i < n; ++i) a[i] /= double(n);
}

} // namespace

void fft2d(std::vector<std::complex<double>>& a, int64_t h, int64_t w, bool inverse) {
    if (!power_of_two(h) || !power_of_two(w))
        throw ConfigError("fft2d: sides must be powers of two (pad the input)");
    if (int64_t(a.size()) != h * w) throw ConfigError("fft2d: buffer size mismatch");
    for (int64_t r = 0; r < h; ++r) fft1d(a.data() + r * w, w, inverse);
    std::vector<std::complex<double>> col(static_cast<size_t>(h));
    for (int64_t c = 0; c < w; ++c) {
        for (int64_t r = 0; r < h; ++r) col[size_t(r)] = a[size_t(r * w + c)];
        fft1d(col.data(), h, inverse);
        for (int64_t r = 0; r < h; ++r) a[size_t(r * w + c)] = col[size_t(r)];
    }
}

PsdProfile radial_psd(const Tensor& grid) {
    if (grid.ndim() != 2) throw ConfigError("radial_psd: grid must be 2d");
    int64_t h = grid.dim(0), w = grid.dim(1);
    if (!power_of_two(h) || !power_of_two(w))
        throw ConfigError("radial_psd: sides must be powers of two (pad the input)");

    std::vector<std::complex<double>> a(static_cast<size_t>(h * w));
    for (int64_t i = 0; i < h * w; ++i) a[size_t(i)] = {grid.get(i), 0.0};
    fft2d(a, h, w);

    int64_t max_r = int64_t(std::llround(std::sqrt(double(h / 2) * double(h / 2) +
                                                   double(w / 2) * double(w / 2))));
    std::vector<double> sum(static_cast<size_t>(max_r + 1), 0.0);
    std::vector<int64_t> cnt(static_cast<size_t>(max_r + 1), 0);
    for (int64_t r = 0; r < h; ++r) {
        int64_t v = r <= h / 2 ? r : r - h; // DC-centered frequency
        for (int64_t c = 0; c < w; ++c) {
            int64_t u = c <= w / 2 ? c : c - w;
            auto f = int64_t(std::llround(std::sqrt(double(u * u + v * v))));
            double p = std::norm(a[size_t(r * w + c)]);
            sum[size_t(f)] += p;
            cnt[size_t(f)] += 1;
        }
    }

    PsdProfile prof;
    for (int64_t f = 0; f <= max_r; ++f) {
        if (cnt[size_t(f)] == 0) continue;
        prof.freq.push_back(double(f));
        prof.power.push_back(sum[size_t(f)] / double(cnt[size_t(f)]));
        prof.count.push_back(cnt[size_t(f)]);
    }
    return prof;
}

double psd_slope(const PsdProfile& profile, double f_lo, double f_hi) {
    if (!(f_lo < f_hi)) throw ConfigError("psd_slope: need f_lo < f_hi");
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int64_t n = 0;
    for (size_t i = 0; i < profile.freq.size(); ++i) {
        double f = profile.freq[i];
        if (f < f_lo || f > f_hi || f <= 0.0) continue;
        double p = profile.power[i];
        if (p <= 0.0) throw NumericError("psd_slope: nonpositive power at f=" + std::to_string(f));
        double lx = std::log(f), ly = std::log(p);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
        ++n;
    }
    if (n < 2) throw ConfigError("psd_slope: fewer than two bins in range");
    double denom = double(n) * sxx - sx * sx;
    if (denom == 0.0) throw NumericError("psd_slope: degenerate frequency range");
    double slope = (double(n) * sxy - sx * sy) / denom;
    return -slope;
}

} // namespace affmae
