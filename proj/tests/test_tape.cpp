#include <cmath>

#include "affmae/gradcheck.hpp"
#include "affmae/rng.hpp"
#include "affmae/tape.hpp"
#include "doctest.h"

using namespace affmae;

namespace {

Tensor randn(Rng& rng, std::vector<int64_t> dims, double scale = 1.0) {
    Tensor t = Tensor::zeros(std::move(dims), Precision::b64);
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.normal() * scale);
    return t;
}

// Scalarize with a fixed random cotangent so every output element matters.
int weighted_sum(Tape& t, int y, const Tensor& w) {
    return t.reduce_sum(t.mul(y, t.input(w)));
}

} // namespace

TEST_CASE("matmul forward matches a hand example") {
    Tape t(Precision::b64);
    Tensor a = Tensor::zeros({2, 3}, Precision::b64);
    Tensor b = Tensor::zeros({3, 2}, Precision::b64);
    for (int64_t i = 0; i < 6; ++i) a.set(i, double(i + 1)); // 1..6
    for (int64_t i = 0; i < 6; ++i) b.set(i, double(6 - i)); // 6..1
    int c = t.matmul(t.input(a), t.input(b));
    // [1 2 3; 4 5 6] x [6 5; 4 3; 2 1]
    CHECK(t.value(c).at(0, 0) == 20.0);
    CHECK(t.value(c).at(0, 1) == 14.0);
    CHECK(t.value(c).at(1, 0) == 56.0);
    CHECK(t.value(c).at(1, 1) == 41.0);
}

TEST_CASE("softmax rows: known values and simplex property") {
    Tape t(Precision::b64);
    Tensor x = Tensor::zeros({1, 2}, Precision::b64);
    x.set(0, 1.0);
    x.set(1, -1.0);
    int y = t.softmax_rows(t.input(x));
    double e2 = std::exp(-2.0);
    CHECK(t.value(y).get(0) == doctest::Approx(1.0 / (1.0 + e2)).epsilon(1e-15));
    CHECK(t.value(y).get(0) + t.value(y).get(1) == doctest::Approx(1.0).epsilon(1e-15));

    Rng rng(3);
    Tensor big = randn(rng, {4, 7}, 30.0); // large logits: max subtraction must hold up
    int z = t.softmax_rows(t.input(big));
    for (int64_t r = 0; r < 4; ++r) {
        double s = 0.0;
        for (int64_t c = 0; c < 7; ++c) {
            double v = t.value(z).at(r, c);
            CHECK(v >= 0.0);
            s += v;
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("layer norm normalizes rows") {
    Tape t(Precision::b64);
    Rng rng(5);
    Tensor x = randn(rng, {3, 8}, 2.0);
    Tensor g = Tensor::full({1, 8}, 1.0, Precision::b64);
    Tensor b = Tensor::zeros({1, 8}, Precision::b64);
    int y = t.layer_norm(t.input(x), t.input(g), t.input(b));
    for (int64_t r = 0; r < 3; ++r) {
        double m = 0.0, v = 0.0;
        for (int64_t c = 0; c < 8; ++c) m += t.value(y).at(r, c);
        m /= 8;
        for (int64_t c = 0; c < 8; ++c) v += (t.value(y).at(r, c) - m) * (t.value(y).at(r, c) - m);
        v /= 8;
        CHECK(std::abs(m) < 1e-12);
        CHECK(v == doctest::Approx(1.0).epsilon(1e-4)); // eps in the denominator
    }
}

TEST_CASE("gelu matches the erf closed form") {
    Tape t(Precision::b64);
    Tensor x = Tensor::zeros({1, 3}, Precision::b64);
    x.set(0, 0.0);
    x.set(1, 1.0);
    x.set(2, -1.0);
    int y = t.gelu(t.input(x));
    CHECK(t.value(y).get(0) == 0.0);
    CHECK(t.value(y).get(1) == doctest::Approx(0.841344746068543).epsilon(1e-12));
    CHECK(t.value(y).get(2) == doctest::Approx(-0.158655253931457).epsilon(1e-12));
}

TEST_CASE("gather, scatter-add, concat, repeat forwards") {
    Tape t(Precision::b64);
    Tensor x = Tensor::zeros({3, 2}, Precision::b64);
    for (int64_t i = 0; i < 6; ++i) x.set(i, double(i));
    int g = t.gather_rows(t.input(x), {2, 0, 2});
    CHECK(t.value(g).at(0, 0) == 4.0);
    CHECK(t.value(g).at(1, 1) == 1.0);
    CHECK(t.value(g).at(2, 0) == 4.0);

    int s = t.scatter_add_rows(t.input(x), {1, 1, 0}, 4);
    CHECK(t.value(s).at(1, 0) == 0.0 + 2.0); // rows 0 and 1 both land on row 1
    CHECK(t.value(s).at(1, 1) == 1.0 + 3.0);
    CHECK(t.value(s).at(0, 0) == 4.0);
    CHECK(t.value(s).at(2, 0) == 0.0);
    CHECK(t.value(s).at(3, 1) == 0.0);

    Tensor y2 = Tensor::full({3, 1}, 9.0, Precision::b64);
    int c = t.concat_cols(t.input(x), t.input(y2));
    CHECK(t.value(c).cols() == 3);
    CHECK(t.value(c).at(2, 2) == 9.0);

    Tensor row = Tensor::zeros({1, 2}, Precision::b64);
    row.set(0, 5.0);
    row.set(1, -2.0);
    int rep = t.repeat_row(t.input(row), 4);
    CHECK(t.value(rep).rows() == 4);
    CHECK(t.value(rep).at(3, 1) == -2.0);
}

TEST_CASE("mse and reductions") {
    Tape t(Precision::b64);
    Tensor a = Tensor::full({2, 2}, 3.0, Precision::b64);
    Tensor b = Tensor::full({2, 2}, 1.0, Precision::b64);
    CHECK(t.value(t.mse(t.input(a), t.input(b))).get(0) == 4.0);
    CHECK(t.value(t.reduce_sum(t.input(a))).get(0) == 12.0);
    CHECK(t.value(t.reduce_mean(t.input(a))).get(0) == 3.0);
}

TEST_CASE("b16emu tape keeps stored values on the binary16 grid") {
    Tape t(Precision::b16emu);
    Tensor a = Tensor::full({1, 1}, 0.1, Precision::b16emu);
    int y = t.add(t.input(a), t.input(a));
    // both operands are the rounded 0.1; their sum is exactly representable
    CHECK(t.value(y).get(0) == 2 * 0.0999755859375);
}

TEST_CASE("backward accumulates into parameters and zero_grad resets") {
    Parameter w("w", Tensor::full({1, 1}, 2.0, Precision::b64));
    Tape t(Precision::b64);
    int n = t.param(w);
    int root = t.reduce_sum(t.mul(n, n)); // d/dw w^2 = 2w = 4
    t.backward(root);
    CHECK(w.grad.get(0) == 4.0);
    t.backward(root); // second sweep adds again
    CHECK(w.grad.get(0) == 8.0);
    w.zero_grad();
    CHECK(w.grad.get(0) == 0.0);
}

TEST_CASE("gradients of every builtin op pass central differences over 20 seeds") {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed);
        Tensor w34 = randn(rng, {3, 4}), w32 = randn(rng, {3, 2}), w44 = randn(rng, {4, 4});
        Tensor w43 = randn(rng, {4, 3}), w45 = randn(rng, {4, 5}), w35 = randn(rng, {3, 5});
        Tensor w36 = randn(rng, {3, 6}), w53 = randn(rng, {5, 3}), w14 = randn(rng, {1, 4});

        CAPTURE(seed);

        auto check = [&](const std::vector<Tensor>& inputs,
                         const std::function<int(Tape&, const std::vector<int>&)>& build) {
            GradCheckResult r = grad_check(inputs, build);
            CAPTURE(r.max_rel_err);
            CAPTURE(r.worst_input);
            CHECK(r.pass(1e-6));
        };

        check({randn(rng, {3, 4}), randn(rng, {4, 2})}, [&](Tape& t, const std::vector<int>& in) {
            return weighted_sum(t, t.matmul(in[0], in[1]), w32);
        });
        check({randn(rng, {3, 4}), randn(rng, {3, 4})}, [&](Tape& t, const std::vector<int>& in) {
            return weighted_sum(t, t.add(in[0], in[1]), w34);
        });
        check({randn(rng, {3, 4}), randn(rng, {3, 4})}, [&](Tape& t, const std::vector<int>& in) {
            return weighted_sum(t, t.mul(in[0], in[1]), w34);
        });
        check({randn(rng, {4, 3}), randn(rng, {4, 1})}, [&](Tape& t, const std::vector<int>& in) {
            return weighted_sum(t, t.mul_col(in[0], in[1]), w43);
        });
        check({randn(rng, {3, 4})}, [&](Tape& t, const std::vector<int>& in) {
            return weighted_sum(t, t.scale(in[0], -1.7), w34);
        });
        check({randn(rng, {4, 3}), randn(rng, {1, 3})}, [&](Tape& t, const std::vector<int>& in) {
            return weighted_sum(t, t.add_row(in[0], in[1]), w43);
        });
        check({randn(rng, {3, 5})}, [&](Tape& t, const std::vector<int>& in) {
            return weighted_sum(t, t.softmax_rows(in[0]), w35);
        });
        check({randn(rng, {4, 5}), randn(rng, {1, 5}, 0.5), randn(rng, {1, 5}, 0.5)},
              [&](Tape& t, const std::vector<int>& in) {
                  return weighted_sum(t, t.layer_norm(in[0], in[1], in[2]), w45);
              });
        check({randn(rng, {3, 4})}, [&](Tape& t, const std::vector<int>& in) {
            return weighted_sum(t, t.gelu(in[0]), w34);
        });
        check({randn(rng, {3, 4})}, [&](Tape& t, const std::vector<int>& in) {
            return weighted_sum(t, t.sigmoid(in[0]), w34);
        });
        check({randn(rng, {5, 3})}, [&](Tape& t, const std::vector<int>& in) {
            return weighted_sum(t, t.gather_rows(in[0], {4, 0, 2, 2}), w43);
        });
        check({randn(rng, {4, 3})}, [&](Tape& t, const std::vector<int>& in) {
            return weighted_sum(t, t.scatter_add_rows(in[0], {2, 0, 2, 1}, 5), w53);
        });
        check({randn(rng, {3, 2}), randn(rng, {3, 4})}, [&](Tape& t, const std::vector<int>& in) {
            return weighted_sum(t, t.concat_cols(in[0], in[1]), w36);
        });
        Tensor w54 = randn(rng, {5, 4});
        check({randn(rng, {1, 4})}, [&](Tape& t, const std::vector<int>& in) {
            return weighted_sum(t, t.repeat_row(in[0], 5), w54);
        });
        check({randn(rng, {3, 4})}, [&](Tape& t, const std::vector<int>& in) {
            return t.reduce_sum(in[0]);
        });
        check({randn(rng, {3, 4})}, [&](Tape& t, const std::vector<int>& in) {
            return t.reduce_mean(in[0]);
        });
        check({randn(rng, {3, 4}), randn(rng, {3, 4})}, [&](Tape& t, const std::vector<int>& in) {
            return t.mse(in[0], in[1]);
        });
        (void)w44;
        (void)w14;
        (void)w36;
    }
}
