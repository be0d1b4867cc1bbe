#include <cmath>
#include <vector>

#include "affmae/attention.hpp"
#include "affmae/gradcheck.hpp"
#include "affmae/rng.hpp"
#include "doctest.h"

using namespace affmae;

namespace {

Tensor randn(Rng& rng, std::vector<int64_t> dims, double scale, Precision prec) {
    Tensor t = Tensor::zeros(std::move(dims), prec);
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.normal() * scale);
    return t;
}

struct AttnFixture {
    int heads, head_dim;
    Tensor q, k, v, blank_k, blank_v, coords;
    NeighborIndex nbr;
    BiasNet bias;

    AttnFixture(Rng& rng, int64_t n, int64_t m, int h, int d, Precision prec)
        : heads(h), head_dim(d) {
        int64_t hd = int64_t(h) * d;
        q = randn(rng, {n, hd}, 1.0, prec);
        k = randn(rng, {n, hd}, 1.0, prec);
        v = randn(rng, {n, hd}, 1.0, prec);
        blank_k = randn(rng, {int64_t(h), int64_t(d)}, 1.0, prec);
        blank_v = randn(rng, {int64_t(h), int64_t(d)}, 1.0, prec);
        coords = Tensor::zeros({n, 2}, Precision::b32);
        for (int64_t i = 0; i < n * 2; ++i) coords.set(i, rng.uniform(0.0, 64.0));
        PointSet ps;
        ps.coords = coords;
        ps.feats = Tensor::zeros({n, 0}, Precision::b32);
        nbr = knn(coords, ps, m);
        bias = BiasNet::init(h, 4, 8.0, rng.next(), prec);
    }

    AttnCtx ctx() const {
        AttnCtx c;
        c.q = &q;
        c.k = &k;
        c.v = &v;
        c.blank_k = &blank_k;
        c.blank_v = &blank_v;
        c.coords = &coords;
        c.nbr = &nbr;
        c.bias = &bias;
        c.heads = heads;
        c.head_dim = head_dim;
        return c;
    }
};

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.get(i) - b.get(i)));
    return m;
}

} // namespace

TEST_CASE("naive attention matches an independently coded dense oracle") {
    Rng rng(21);
    for (int trial = 0; trial < 5; ++trial) {
        int64_t n = 5 + int64_t(rng.below(8));
        int h = 2, d = 3;
        AttnFixture fx(rng, n, n, h, d, Precision::b64); // m = n: fully dense lists
        Tensor out = nbhd_attn_naive(fx.ctx());

        int64_t hd = int64_t(h) * d;
        double inv = 1.0 / std::sqrt(double(d));
        for (int64_t i = 0; i < n; ++i) {
            std::vector<int64_t> row = fx.nbr.row(i);
            REQUIRE(int64_t(row.size()) == n);
            for (int hh = 0; hh < h; ++hh) {
                std::vector<double> score(row.size() + 1);
                for (size_t j = 0; j < row.size(); ++j) {
                    double acc = 0.0;
                    for (int c = 0; c < d; ++c)
                        acc += fx.q.get(i * hd + hh * d + c) * inv * fx.k.get(row[j] * hd + hh * d + c);
                    score[j] = acc + fx.bias.eval(hh, fx.coords.get(row[j] * 2) - fx.coords.get(i * 2),
                                                  fx.coords.get(row[j] * 2 + 1) - fx.coords.get(i * 2 + 1));
                }
                double acc = 0.0;
                for (int c = 0; c < d; ++c)
                    acc += fx.q.get(i * hd + hh * d + c) * inv * fx.blank_k.get(hh * d + c);
                score.back() = acc + fx.bias.blank.get(hh);

                double mx = *std::max_element(score.begin(), score.end());
                double l = 0.0;
                std::vector<double> e(score.size());
                for (size_t j = 0; j < score.size(); ++j) {
                    e[j] = std::exp(score[j] - mx);
                    l += e[j];
                }
                for (int c = 0; c < d; ++c) {
                    double o = 0.0;
                    for (size_t j = 0; j < row.size(); ++j) o += e[j] * fx.v.get(row[j] * hd + hh * d + c);
                    o += e.back() * fx.blank_v.get(hh * d + c);
                    o /= l;
                    CHECK(out.get(i * hd + hh * d + c) == doctest::Approx(o).epsilon(1e-12));
                }
            }
        }
    }
}

TEST_CASE("streaming equals naive on random neighborhoods") {
    Rng rng(22);
    for (int trial = 0; trial < 20; ++trial) {
        int64_t n = 4 + int64_t(rng.below(60));
        int64_t m = 1 + int64_t(rng.below(20));
        int h = 1 + int(rng.below(3));
        int d = 2 + int(rng.below(6));
        AttnFixture f64(rng, n, m, h, d, Precision::b64);
        CHECK(max_abs_diff(nbhd_attn_streaming(f64.ctx()), nbhd_attn_naive(f64.ctx())) <= 1e-12);
        AttnFixture f32(rng, n, m, h, d, Precision::b32);
        CHECK(max_abs_diff(nbhd_attn_streaming(f32.ctx()), nbhd_attn_naive(f32.ctx())) <= 1e-5);
    }
}

TEST_CASE("softmax weights per query form a simplex and padding gets zero") {
    Rng rng(23);
    AttnFixture fx(rng, 10, 15, 2, 4, Precision::b64); // m > n forces padded slots
    AttnCtx c = fx.ctx();
    for (int64_t i = 0; i < 10; ++i)
        for (int h = 0; h < 2; ++h) {
            std::vector<double> w = nbhd_attn_weights(c, i, h);
            REQUIRE(int64_t(w.size()) == fx.nbr.width + 1);
            double s = 0.0;
            for (int64_t j = 0; j < fx.nbr.width; ++j) {
                if (!fx.nbr.ok(i, j)) CHECK(w[size_t(j)] == 0.0);
                CHECK(w[size_t(j)] >= 0.0);
                s += w[size_t(j)];
            }
            CHECK(w.back() > 0.0); // blank always reachable
            s += w.back();
            CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        }
}

TEST_CASE("all-padded row still works through the blank token") {
    Rng rng(24);
    AttnFixture fx(rng, 4, 3, 1, 3, Precision::b64);
    for (int64_t j = 0; j < fx.nbr.width; ++j) fx.nbr.valid[size_t(0 * fx.nbr.width + j)] = 0;
    Tensor out = nbhd_attn_streaming(fx.ctx());
    Tensor ref = nbhd_attn_naive(fx.ctx());
    CHECK(max_abs_diff(out, ref) <= 1e-12);
    // sole survivor is the blank slot: output row == blank_v
    for (int c = 0; c < 3; ++c) CHECK(out.get(c) == doctest::Approx(fx.blank_v.get(c)).epsilon(1e-12));
    CHECK(out.all_finite());
}

TEST_CASE("adding a constant to every score leaves outputs bit-identical (b64)") {
    Rng rng(25);
    // head_dim 4 makes 1/sqrt(d) exact, and q/k on a quarter-integer grid
    // keep every score an exact multiple of 1/32, so the +4 shift is exact
    // and max subtraction cancels it to the bit
    AttnFixture fx(rng, 8, 4, 2, 4, Precision::b64);
    for (Tensor* t : {&fx.q, &fx.k, &fx.blank_k, &fx.bias.b2, &fx.bias.blank})
        for (int64_t i = 0; i < t->numel(); ++i)
            t->set(i, 0.25 * (double(rng.below(17)) - 8.0));
    // zero the offset perceptron so b2 and the blank scalar are the only bias
    fx.bias.w1.fill(0.0);
    fx.bias.b1.fill(0.0);
    fx.bias.w2.fill(0.0);
    Tensor before = nbhd_attn_streaming(fx.ctx());
    for (int h = 0; h < 2; ++h) {
        fx.bias.b2.set(h, fx.bias.b2.get(h) + 4.0); // exactly representable shift
        fx.bias.blank.set(h, fx.bias.blank.get(h) + 4.0);
    }
    Tensor after = nbhd_attn_streaming(fx.ctx());
    for (int64_t i = 0; i < before.numel(); ++i) CHECK(before.get(i) == after.get(i));
}

TEST_CASE("half io keeps outputs finite and close to b32 on moderate inputs") {
    Rng rng(26);
    for (int trial = 0; trial < 50; ++trial) {
        int64_t n = 4 + int64_t(rng.below(20));
        int64_t m = 1 + int64_t(rng.below(8));
        AttnFixture fx(rng, n, m, 2, 4, Precision::b32);
        Tensor full = nbhd_attn_streaming(fx.ctx(), false);
        Tensor half = nbhd_attn_streaming(fx.ctx(), true);
        CHECK(half.all_finite());
        CHECK(max_abs_diff(full, half) <= 0.05); // binary16 inputs, b32 accumulation
    }
}

TEST_CASE("flop closed forms: frozen example and dense comparator") {
    CHECK(flop_count_attn(4096, 192, 6, 64) == 1242710016ull);
    // dense equals the neighborhood form evaluated at M' = N with no blank
    CHECK(flop_count_attn_dense(256, 2, 8) == uint64_t(4) * 256 * 256 * 2 * 8 + uint64_t(6) * 256 * 256 * 2);
    CHECK(flop_count_attn(1, 1, 1, 1) == 4 * 2 + 6 * 2);
}

TEST_CASE("attention tape op gradients pass over 20 seeds") {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed ^ 0x7177);
        CAPTURE(seed);
        int64_t n = 5, m = 3;
        int h = 2, d = 3;
        int64_t hd = int64_t(h) * d;
        Tensor coords = Tensor::zeros({n, 2}, Precision::b32);
        for (int64_t i = 0; i < n * 2; ++i) coords.set(i, rng.uniform(0.0, 32.0));
        PointSet ps;
        ps.coords = coords;
        ps.feats = Tensor::zeros({n, 0}, Precision::b32);
        NeighborIndex nbr = knn(coords, ps, m);

        int hb = 4;
        std::vector<Tensor> inputs = {
            randn(rng, {n, hd}, 1.0, Precision::b64),              // q
            randn(rng, {n, hd}, 1.0, Precision::b64),              // k
            randn(rng, {n, hd}, 1.0, Precision::b64),              // v
            randn(rng, {h, d}, 1.0, Precision::b64),               // blank_k
            randn(rng, {h, d}, 1.0, Precision::b64),               // blank_v
            randn(rng, {h, 2 * hb}, 0.7, Precision::b64),          // bias w1
            randn(rng, {h, hb}, 0.3, Precision::b64),              // bias b1
            randn(rng, {h, hb}, 0.7, Precision::b64),              // bias w2
            randn(rng, {h, 1}, 0.3, Precision::b64),               // bias b2
            randn(rng, {h, 1}, 0.3, Precision::b64),               // blank scalar
        };
        Tensor w = randn(rng, {n, hd}, 1.0, Precision::b64);
        GradCheckResult r = grad_check(inputs, [&](Tape& t, const std::vector<int>& in) {
            int out = t.custom(make_attn_op(coords, nbr, h, d, hb, 8.0), in);
            return t.reduce_sum(t.mul(out, t.input(w)));
        });
        CAPTURE(r.max_rel_err);
        CAPTURE(r.worst_input);
        CHECK(r.pass(1e-6));
    }
}
