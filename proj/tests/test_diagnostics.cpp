#include <algorithm>
#include <cmath>
#include <vector>

#include "affmae/diagnostics.hpp"
#include "affmae/rng.hpp"
#include "doctest.h"

using namespace affmae;

namespace {

// One-sided Jacobi SVD coded straight from the textbook: rotate column pairs
// of a working copy until all pairs are orthogonal, then read singular values
// off the column norms. Independent of the Gram-matrix route in the library.
std::vector<double> svd_one_sided(const Tensor& a) {
    int64_t n = a.rows(), d = a.cols();
    std::vector<std::vector<double>> u(static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(d)));
    for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < d; ++c) u[size_t(r)][size_t(c)] = a.at(r, c);
    for (int sweep = 0; sweep < 60; ++sweep) {
        double off = 0.0;
        for (int64_t p = 0; p < d - 1; ++p)
            for (int64_t q = p + 1; q < d; ++q) {
                double app = 0, aqq = 0, apq = 0;
                for (int64_t r = 0; r < n; ++r) {
                    double x = u[size_t(r)][size_t(p)], y = u[size_t(r)][size_t(q)];
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                off += apq * apq;
                if (std::abs(apq) < 1e-15) continue;
                double tau = (aqq - app) / (2.0 * apq);
                double t = (tau >= 0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                double c = 1.0 / std::sqrt(1.0 + t * t), s = t * c;
                for (int64_t r = 0; r < n; ++r) {
                    double x = u[size_t(r)][size_t(p)], y = u[size_t(r)][size_t(q)];
                    u[size_t(r)][size_t(p)] = c * x - s * y;
                    u[size_t(r)][size_t(q)] = s * x + c * y;
                }
            }
        if (off < 1e-24) break;
    }
    std::vector<double> sv(static_cast<size_t>(d), 0.0);
    for (int64_t c = 0; c < d; ++c) {
        double nn = 0.0;
        for (int64_t r = 0; r < n; ++r) nn += u[size_t(r)][size_t(c)] * u[size_t(r)][size_t(c)];
        sv[size_t(c)] = std::sqrt(nn);
    }
    std::sort(sv.begin(), sv.end(), std::greater<>());
    size_t keep = size_t(std::min(n, d));
    sv.resize(keep);
    return sv;
}

Tensor randmat(Rng& rng, int64_t n, int64_t d) {
    Tensor t = Tensor::zeros({n, d}, Precision::b64);
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.normal());
    return t;
}

} // namespace

TEST_CASE("singular values match an independent jacobi svd") {
    Rng rng(31);
    for (auto [n, d] : {std::pair<int64_t, int64_t>{6, 4}, {4, 6}, {12, 12}, {30, 5}}) {
        Tensor a = randmat(rng, n, d);
        std::vector<double> got = singular_values(a);
        std::vector<double> want = svd_one_sided(a);
        REQUIRE(got.size() == want.size());
        for (size_t i = 0; i < got.size(); ++i)
            CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-9));
        CHECK(std::is_sorted(got.rbegin(), got.rend()));
    }
}

TEST_CASE("singular values of a known diagonal embedding") {
    Tensor a = Tensor::zeros({4, 3}, Precision::b64);
    a.set_at(0, 0, 3.0);
    a.set_at(1, 1, -2.0); // sign lands in the rotation, not the value
    a.set_at(2, 2, 1.0);
    std::vector<double> sv = singular_values(a);
    REQUIRE(sv.size() == 3);
    CHECK(sv[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(sv[1] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(sv[2] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("effective rank hand value and limiting cases") {
    std::vector<double> sv = {2.0, 1.0, 1.0, 0.0};
    double want = std::pow(2.0, 1.5) / 4.0;
    CHECK(effective_rank_from_singular(sv, 4) == doctest::Approx(want).epsilon(1e-12));

    std::vector<double> iso = {1.0, 1.0, 1.0, 1.0};
    CHECK(effective_rank_from_singular(iso, 4) == doctest::Approx(1.0).epsilon(1e-12));

    std::vector<double> collapsed = {5.0, 0.0, 0.0, 0.0};
    CHECK(effective_rank_from_singular(collapsed, 4) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("effective rank stays in bounds and ignores scale") {
    Rng rng(32);
    for (int trial = 0; trial < 50; ++trial) {
        int64_t n = 3 + int64_t(rng.below(20)), d = 2 + int64_t(rng.below(10));
        Tensor a = randmat(rng, n, d);
        double r = effective_rank(a);
        double lo = 1.0 / double(std::min(n, d));
        CHECK(r >= lo - 1e-12);
        CHECK(r <= 1.0 + 1e-12);
        Tensor b = Tensor::zeros({n, d}, Precision::b64);
        for (int64_t i = 0; i < a.numel(); ++i) b.set(i, 37.5 * a.get(i));
        CHECK(std::abs(effective_rank(b) - r) <= 1e-12);
    }
}

TEST_CASE("pca projections are centered and variance fractions are ordered") {
    Rng rng(33);
    Tensor a = randmat(rng, 40, 6);
    for (int64_t r = 0; r < 40; ++r) a.set_at(r, 0, a.at(r, 0) * 5.0 + 10.0); // dominant axis
    PcaResult res = pca_project(a, 3);
    CHECK(res.projections.rows() == 40);
    CHECK(res.projections.cols() == 3);
    REQUIRE(res.variance.size() == 3);
    for (int64_t c = 0; c < 3; ++c) {
        double mean = 0.0;
        for (int64_t r = 0; r < 40; ++r) mean += res.projections.at(r, c);
        CHECK(std::abs(mean / 40.0) <= 1e-9);
    }
    double total = 0.0;
    for (size_t i = 0; i < res.variance.size(); ++i) {
        CHECK(res.variance[i] >= 0.0);
        if (i > 0) CHECK(res.variance[i] <= res.variance[i - 1] + 1e-12);
        total += res.variance[i];
    }
    CHECK(total <= 1.0 + 1e-9);
    CHECK(res.variance[0] > 0.5); // the inflated axis dominates
}

TEST_CASE("rank report carries tokens, dim, and the same r_hat") {
    Rng rng(34);
    Tensor a = randmat(rng, 25, 7);
    RankReport rep = rank_report(a, 1);
    CHECK(rep.stage == 1);
    CHECK(rep.tokens == 25);
    CHECK(rep.dim == 7);
    CHECK(rep.r_hat == doctest::Approx(effective_rank(a)).epsilon(1e-12));
    CHECK(rep.singular.size() == 7);
}

TEST_CASE("flop report rows follow the config geometry") {
    PipelineConfig cfg = PipelineConfig::toy();
    std::vector<int64_t> res = {64, 128};
    std::vector<FlopRow> rows = flop_report(cfg, res);
    REQUIRE(rows.size() == res.size() * cfg.stages.size());
    for (const FlopRow& row : rows) {
        CHECK(row.tokens > 0);
        CHECK(row.aff > 0);
        CHECK(row.dense >= row.aff); // dense attends everywhere
    }
    // Stage 0 token count is the full patch grid.
    CHECK(rows[0].resolution == 64);
    CHECK(rows[0].stage == 0);
    CHECK(rows[0].tokens == (64 / cfg.patch) * (64 / cfg.patch));
}

TEST_CASE("scaling exponents separate neighborhood from dense attention") {
    PipelineConfig cfg = PipelineConfig::toy();
    std::vector<int64_t> res = {448, 512, 768};
    std::vector<FlopRow> rows = flop_report(cfg, res);
    double b_aff = scaling_exponent(rows, false);
    double b_dense = scaling_exponent(rows, true);
    CHECK(b_aff < b_dense);
    CHECK(b_aff <= 1.3);
    CHECK(b_dense >= 1.7);
}
