#include <cmath>
#include <complex>
#include <vector>

#include "affmae/masking.hpp"
#include "affmae/rng.hpp"
#include "doctest.h"

using namespace affmae;

namespace {

// Textbook O(N^2) DFT used as the oracle for the fast transform.
std::vector<std::complex<double>> dft2d_direct(const std::vector<std::complex<double>>& a,
                                               int64_t h, int64_t w) {
    std::vector<std::complex<double>> out(a.size());
    const double tau = 2.0 * 3.14159265358979323846;
    for (int64_t u = 0; u < h; ++u)
        for (int64_t v = 0; v < w; ++v) {
            std::complex<double> acc(0.0, 0.0);
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x) {
                    double ang = -tau * (double(u * y) / double(h) + double(v * x) / double(w));
                    acc += a[size_t(y * w + x)] * std::complex<double>(std::cos(ang), std::sin(ang));
                }
            out[size_t(u * w + v)] = acc;
        }
    return out;
}

} // namespace

TEST_CASE("gradient noise vanishes on lattice corners and is seed-deterministic") {
    for (uint64_t seed : {1ull, 77ull}) {
        for (int xi = 0; xi < 4; ++xi)
            for (int yi = 0; yi < 4; ++yi)
                CHECK(perlin_octave_at(double(xi), double(yi), seed) == 0.0);
        CHECK(perlin_octave_at(1.37, 2.81, seed) == perlin_octave_at(1.37, 2.81, seed));
    }
    CHECK(perlin_octave_at(1.37, 2.81, 1) != perlin_octave_at(1.37, 2.81, 2));
}

TEST_CASE("perlin field is deterministic, bounded, and roughly centered") {
    Tensor a = perlin_field(32, 32, 2, 4.0, 0.5, 42);
    Tensor b = perlin_field(32, 32, 2, 4.0, 0.5, 42);
    Tensor c = perlin_field(32, 32, 2, 4.0, 0.5, 43);
    double mean = 0.0;
    bool differs = false;
    for (int64_t i = 0; i < a.numel(); ++i) {
        CHECK(a.get(i) == b.get(i));
        if (a.get(i) != c.get(i)) differs = true;
        CHECK(std::abs(a.get(i)) <= 1.5); // two octaves at persistence 0.5
        mean += a.get(i);
    }
    CHECK(differs);
    CHECK(std::abs(mean / double(a.numel())) < 0.2);
}

TEST_CASE("masks hit the exact rounded cell count for the ratio grid") {
    for (double r : {0.35, 0.5, 0.65, 0.75}) {
        for (int64_t side : {8, 15, 64}) {
            int64_t want = int64_t(std::llround(r * double(side * side)));
            Tensor field = perlin_field(side, side, kPerlinOctaves, kPerlinBaseFreq,
                                        kPerlinPersistence, 5);
            MaskSpec pm = mask_from_field(field, r);
            CHECK(pm.masked_count() == want);
            MaskSpec rm = random_mask(side, side, r, 5);
            CHECK(rm.masked_count() == want);
        }
    }
}

TEST_CASE("field thresholding masks the largest values") {
    Tensor field = Tensor::zeros({2, 2}, Precision::b64);
    field.set(0, 0.1);
    field.set(1, 0.9);
    field.set(2, -0.3);
    field.set(3, 0.5);
    MaskSpec m = mask_from_field(field, 0.5);
    CHECK(m.masked_count() == 2);
    CHECK(m.at(0, 1)); // 0.9
    CHECK(m.at(1, 1)); // 0.5
    CHECK_FALSE(m.at(0, 0));
    CHECK_FALSE(m.at(1, 0));
}

TEST_CASE("random masks are seed-deterministic and distinct across seeds") {
    MaskSpec a = random_mask(16, 16, 0.5, 9);
    MaskSpec b = random_mask(16, 16, 0.5, 9);
    MaskSpec c = random_mask(16, 16, 0.5, 10);
    CHECK(a.masked == b.masked);
    CHECK(a.masked != c.masked);
    CHECK(random_mask(16, 16, 0.0, 9).masked_count() == 0);
}

TEST_CASE("mask tensor and nearest upsample") {
    MaskSpec m = random_mask(4, 4, 0.25, 3);
    Tensor g = mask_tensor(m);
    CHECK(g.rows() == 4);
    double s = 0.0;
    for (int64_t i = 0; i < 16; ++i) s += g.get(i);
    CHECK(s == 4.0);
    Tensor up = upsample_nearest(g, 8);
    CHECK(up.rows() == 32);
    for (int64_t r = 0; r < 32; ++r)
        for (int64_t c = 0; c < 32; ++c) CHECK(up.at(r, c) == g.at(r / 8, c / 8));
}

TEST_CASE("fft matches the direct dft on 8x8 and 16x16 grids") {
    Rng rng(55);
    for (int64_t side : {8, 16}) {
        std::vector<std::complex<double>> a(static_cast<size_t>(side * side));
        for (auto& z : a) z = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
        std::vector<std::complex<double>> fast = a;
        fft2d(fast, side, side);
        std::vector<std::complex<double>> slow = dft2d_direct(a, side, side);
        for (size_t i = 0; i < a.size(); ++i) CHECK(std::abs(fast[i] - slow[i]) <= 1e-9);
    }
}

TEST_CASE("fft inverse round trips and parseval holds") {
    Rng rng(56);
    int64_t side = 32;
    std::vector<std::complex<double>> a(static_cast<size_t>(side * side));
    for (auto& z : a) z = {rng.uniform(-1.0, 1.0), 0.0};
    std::vector<std::complex<double>> f = a;
    fft2d(f, side, side);
    double sum_x = 0.0, sum_f = 0.0;
    for (const auto& z : a) sum_x += std::norm(z);
    for (const auto& z : f) sum_f += std::norm(z);
    CHECK(std::abs(sum_x - sum_f / double(side * side)) / sum_x <= 1e-6);
    fft2d(f, side, side, true);
    for (size_t i = 0; i < a.size(); ++i) CHECK(std::abs(f[i] - a[i]) <= 1e-12);
}

TEST_CASE("a pure sinusoid lands its power in the matching radial bin") {
    int64_t side = 32;
    Tensor g = Tensor::zeros({side, side}, Precision::b64);
    for (int64_t r = 0; r < side; ++r)
        for (int64_t c = 0; c < side; ++c)
            g.set(r * side + c, std::cos(2.0 * 3.14159265358979323846 * 3.0 * double(c) / double(side)));
    PsdProfile prof = radial_psd(g);
    size_t peak = 0;
    for (size_t i = 1; i < prof.power.size(); ++i)
        if (prof.power[i] > prof.power[peak]) peak = i;
    CHECK(prof.freq[peak] == 3.0);
    CHECK(prof.count[0] == 1); // DC alone in bin zero
}

TEST_CASE("psd slope recovers a synthetic power law") {
    PsdProfile prof;
    for (int f = 1; f <= 16; ++f) {
        prof.freq.push_back(double(f));
        prof.power.push_back(std::pow(double(f), -2.0));
        prof.count.push_back(1);
    }
    CHECK(psd_slope(prof, 1.0, 16.0) == doctest::Approx(2.0).epsilon(1e-9));
    prof.power.assign(prof.power.size(), 0.5); // flat spectrum
    CHECK(psd_slope(prof, 1.0, 16.0) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("perlin masks decay faster than random masks in the spectrum") {
    int64_t side = 64;
    PsdProfile acc_p, acc_r;
    int nmasks = 64;
    for (int i = 0; i < nmasks; ++i) {
        Tensor fp = perlin_field(side, side, kPerlinOctaves, kPerlinBaseFreq, kPerlinPersistence,
                                 uint64_t(1000 + i));
        MaskSpec mp = mask_from_field(fp, 0.5);
        MaskSpec mr = random_mask(side, side, 0.5, uint64_t(2000 + i));
        PsdProfile pp = radial_psd(mask_tensor(mp));
        PsdProfile pr = radial_psd(mask_tensor(mr));
        if (acc_p.power.empty()) {
            acc_p = pp;
            acc_r = pr;
        } else {
            for (size_t j = 0; j < pp.power.size(); ++j) {
                acc_p.power[j] += pp.power[j];
                acc_r.power[j] += pr.power[j];
            }
        }
    }
    double slope_p = -psd_slope(acc_p, 2.0, 8.0);
    double slope_r = -psd_slope(acc_r, 2.0, 8.0);
    CHECK(slope_p < slope_r); // low-frequency masking concentrates power down low
}
