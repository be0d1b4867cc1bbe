#include <cmath>
#include <utility>
#include <vector>

#include "affmae/gradcheck.hpp"
#include "affmae/interpolation.hpp"
#include "affmae/rng.hpp"
#include "doctest.h"

using namespace affmae;

namespace {

// Two keys on the x axis, 1-d features, so weights have closed forms.
struct TwoPoint {
    Tensor coords = Tensor::zeros({2, 2}, Precision::b32);
    Tensor feats = Tensor::zeros({2, 1}, Precision::b64);
    std::vector<int64_t> nbrs = {0, 1};

    TwoPoint(double x0, double x1, double f0, double f1) {
        coords.set(0, x0);
        coords.set(2, x1);
        feats.set(0, f0);
        feats.set(1, f1);
    }
};

Tensor randn(Rng& rng, std::vector<int64_t> dims, double scale = 1.0) {
    Tensor t = Tensor::zeros(std::move(dims), Precision::b64);
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.normal() * scale);
    return t;
}

} // namespace

TEST_CASE("softmax kernel matches the two-point closed form") {
    TwoPoint tp(1.0, 4.0, 10.0, -2.0);
    double q[2] = {0.0, 0.0}; // d = 1+eps, 4+eps
    double p = 2.0;
    InterpResult r = interp_softmax(q, tp.coords, tp.feats, tp.nbrs, p, kInterpEps, Precision::b64);
    REQUIRE_FALSE(r.failed());
    double w0 = 1.0 / (1.0 + std::exp(-p * 3.0)); // eps cancels in the difference
    CHECK(r.weights[0] == doctest::Approx(w0).epsilon(1e-12));
    CHECK(r.weights[0] + r.weights[1] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.out[0] == doctest::Approx(w0 * 10.0 + (1 - w0) * -2.0).epsilon(1e-12));
}

TEST_CASE("inverse-power kernel matches its closed form") {
    TwoPoint tp(1.0, 2.0, 3.0, 5.0);
    double q[2] = {0.0, 0.0};
    double p = 3.0;
    InterpResult r = interp_invpow(q, tp.coords, tp.feats, tp.nbrs, p, kInterpEps, Precision::b64);
    REQUIRE_FALSE(r.failed());
    double u0 = std::pow(1.0 + kInterpEps, -p), u1 = std::pow(2.0 + kInterpEps, -p);
    CHECK(r.weights[0] == doctest::Approx(u0 / (u0 + u1)).epsilon(1e-12));
    CHECK(r.out[0] == doctest::Approx((u0 * 3.0 + u1 * 5.0) / (u0 + u1)).epsilon(1e-12));
}

TEST_CASE("equidistant neighbors average evenly under both kernels") {
    Tensor coords = Tensor::zeros({4, 2}, Precision::b32);
    coords.set(0, 1.0);  // (1, 0)
    coords.set(3, 1.0);  // (0, 1)
    coords.set(4, -1.0); // (-1, 0)
    coords.set(7, -1.0); // (0, -1)
    Tensor feats = Tensor::zeros({4, 1}, Precision::b64);
    for (int64_t i = 0; i < 4; ++i) feats.set(i, double(i));
    std::vector<int64_t> nbrs = {0, 1, 2, 3};
    double q[2] = {0.0, 0.0};
    for (auto kernel : {interp_softmax, interp_invpow}) {
        InterpResult r = kernel(q, coords, feats, nbrs, 5.0, kInterpEps, Precision::b64);
        for (double w : r.weights) CHECK(w == doctest::Approx(0.25).epsilon(1e-12));
        CHECK(r.out[0] == doctest::Approx(1.5).epsilon(1e-12));
    }
}

TEST_CASE("softmax normalizer never collapses even at extreme temperature") {
    // steepest case: p huge, distances huge; max subtraction pins the top
    // weight at exp(0) so the normalizer stays >= 1
    Tensor coords = Tensor::zeros({3, 2}, Precision::b32);
    coords.set(0, 1000.0);
    coords.set(2, 2000.0);
    coords.set(4, 3000.0);
    Tensor feats = Tensor::full({3, 1}, 1.0, Precision::b64);
    std::vector<int64_t> nbrs = {0, 1, 2};
    double q[2] = {0.0, 0.0};
    for (Precision prec : {Precision::b64, Precision::b32}) {
        InterpResult r = interp_softmax(q, coords, feats, nbrs, 500.0, kInterpEps, prec);
        CHECK_FALSE(r.failed());
        CHECK(r.weights[0] == doctest::Approx(1.0).epsilon(1e-3));
    }
    // binary16 tops out at 65504, so keep the raw scores inside its range;
    // the max subtraction still has to carry exp through a 200-wide gap
    coords.set(0, 10.0);
    coords.set(2, 20.0);
    coords.set(4, 30.0);
    InterpResult h = interp_softmax(q, coords, feats, nbrs, 20.0, kInterpEps, Precision::b16emu);
    CHECK_FALSE(h.failed());
    CHECK(h.weights[0] == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("inverse power in b16emu overflows close and underflows far at p=20") {
    Tensor coords = Tensor::zeros({1, 2}, Precision::b32);
    Tensor feats = Tensor::full({1, 1}, 1.0, Precision::b64);
    std::vector<int64_t> nbrs = {0};
    // d = 0.05: 0.05^-20 = 1e26 >> 65504 -> inf in binary16
    coords.set(0, 0.05);
    double q[2] = {0.0, 0.0};
    InterpResult close = interp_invpow(q, coords, feats, nbrs, 20.0, kInterpEps, Precision::b16emu);
    CHECK(close.failed());
    // d = 8: 8^-20 ~ 8.7e-19 -> rounds to 0 -> zero normalizer
    coords.set(0, 8.0);
    InterpResult far = interp_invpow(q, coords, feats, nbrs, 20.0, kInterpEps, Precision::b16emu);
    CHECK(far.failed());
    CHECK(far.zero_norm);
    // same instances under the softmax kernel are fine
    for (double d : {0.05, 8.0}) {
        coords.set(0, d);
        CHECK_FALSE(interp_softmax(q, coords, feats, nbrs, 20.0, kInterpEps, Precision::b16emu).failed());
    }
}

TEST_CASE("stability probe: p=20 over [0.01,10] fails invpow only") {
    std::vector<double> ps = {20.0};
    std::vector<std::pair<double, double>> ranges = {{0.01, 0.1}, {0.1, 1.0}, {1.0, 10.0}};
    std::vector<ProbeCell> cells = stability_probe(ps, ranges, Precision::b16emu, 200, 99);
    double invpow_fail = 0.0, softmax_fail = 0.0;
    for (const ProbeCell& c : cells) {
        if (c.kernel == "invpow") invpow_fail += c.failure_rate;
        else softmax_fail += c.failure_rate;
    }
    CHECK(invpow_fail > 0.0);
    CHECK(softmax_fail == 0.0);
}

TEST_CASE("analytic interpolation gradients pass central differences over 20 seeds") {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed);
        CAPTURE(seed);
        int64_t k = 3 + int64_t(rng.below(4));
        int64_t dim = 2 + int64_t(rng.below(3));
        Tensor coords = Tensor::zeros({k, 2}, Precision::b32);
        std::vector<int64_t> nbrs(static_cast<size_t>(k));
        for (int64_t i = 0; i < k; ++i) {
            nbrs[size_t(i)] = i;
            coords.set(i * 2, rng.uniform(-3.0, 3.0));
            coords.set(i * 2 + 1, rng.uniform(-3.0, 3.0));
        }
        Tensor feats = randn(rng, {k, dim});
        double p = rng.uniform(0.5, 3.0);
        double q[2] = {rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)};
        std::vector<double> cot(static_cast<size_t>(dim));
        for (double& c : cot) c = rng.normal();

        for (int kernel = 0; kernel < 2; ++kernel) {
            auto fwd = [&](double px, double qx, double qy) {
                double qq[2] = {qx, qy};
                InterpResult r = kernel == 0
                                     ? interp_softmax(qq, coords, feats, nbrs, px, kInterpEps, Precision::b64)
                                     : interp_invpow(qq, coords, feats, nbrs, px, kInterpEps, Precision::b64);
                double s = 0.0;
                for (int64_t c = 0; c < dim; ++c) s += cot[size_t(c)] * r.out[size_t(c)];
                return s;
            };
            InterpGrads g = kernel == 0
                                ? interp_backward(q, coords, feats, nbrs, p, kInterpEps, cot)
                                : interp_invpow_backward(q, coords, feats, nbrs, p, kInterpEps, cot);
            const double h = 1e-5;
            auto rel = [](double a, double fd) {
                return std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-3});
            };
            CHECK(rel(g.dp, (fwd(p + h, q[0], q[1]) - fwd(p - h, q[0], q[1])) / (2 * h)) <= 1e-6);
            CHECK(rel(g.dq[0], (fwd(p, q[0] + h, q[1]) - fwd(p, q[0] - h, q[1])) / (2 * h)) <= 1e-6);
            CHECK(rel(g.dq[1], (fwd(p, q[0], q[1] + h) - fwd(p, q[0], q[1] - h)) / (2 * h)) <= 1e-6);
            for (int64_t i = 0; i < k; ++i)
                for (int64_t c = 0; c < dim; ++c) {
                    double keep = feats.get(i * dim + c);
                    feats.set(i * dim + c, keep + h);
                    double up = fwd(p, q[0], q[1]);
                    feats.set(i * dim + c, keep - h);
                    double dn = fwd(p, q[0], q[1]);
                    feats.set(i * dim + c, keep);
                    CHECK(rel(g.df[size_t(i * dim + c)], (up - dn) / (2 * h)) <= 1e-6);
                }
        }
    }
}

TEST_CASE("interp tape op gradients pass over 20 seeds") {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed ^ 0xabcd);
        CAPTURE(seed);
        int64_t n = 6, dim = 3, nq = 2;
        Tensor coords = Tensor::zeros({n, 2}, Precision::b32);
        for (int64_t i = 0; i < n * 2; ++i) coords.set(i, rng.uniform(0.0, 10.0));
        PointSet ps;
        ps.coords = coords;
        ps.feats = Tensor::zeros({n, 0}, Precision::b32);
        Tensor queries = Tensor::zeros({nq, 2}, Precision::b64);
        for (int64_t i = 0; i < nq * 2; ++i) queries.set(i, rng.uniform(0.0, 10.0));
        Tensor q32 = queries.to(Precision::b32);
        NeighborIndex nbr = knn(q32, ps, 4);
        Tensor feats = randn(rng, {n, dim});
        Tensor p = Tensor::full({1, 1}, rng.uniform(0.5, 2.5), Precision::b64);
        Tensor w = randn(rng, {nq, dim});

        GradCheckResult r = grad_check({feats, p, queries}, [&](Tape& t, const std::vector<int>& in) {
            int out = t.custom(make_interp_op(coords, nbr), {in[0], in[1], in[2]});
            return t.reduce_sum(t.mul(out, t.input(w)));
        });
        CAPTURE(r.max_rel_err);
        CHECK(r.pass(1e-6));
    }
}

TEST_CASE("query on top of a key uses the zero subgradient and stays finite") {
    Tensor coords = Tensor::zeros({2, 2}, Precision::b32);
    coords.set(2, 5.0);
    Tensor feats = Tensor::zeros({2, 1}, Precision::b64);
    feats.set(0, 1.0);
    feats.set(1, 2.0);
    std::vector<int64_t> nbrs = {0, 1};
    double q[2] = {0.0, 0.0}; // exactly on key 0
    std::vector<double> cot = {1.0};
    InterpGrads g = interp_backward(q, coords, feats, nbrs, 2.0, kInterpEps, cot);
    CHECK(std::isfinite(g.dq[0]));
    CHECK(std::isfinite(g.dq[1]));
    InterpResult r = interp_softmax(q, coords, feats, nbrs, 2.0, kInterpEps, Precision::b64);
    CHECK_FALSE(r.failed());
    CHECK(r.weights[0] > r.weights[1]);
}
