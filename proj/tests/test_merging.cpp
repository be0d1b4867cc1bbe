#include <cmath>
#include <set>
#include <vector>

#include "affmae/gradcheck.hpp"
#include "affmae/merging.hpp"
#include "affmae/rng.hpp"
#include "doctest.h"

using namespace affmae;

namespace {

Tensor randn(Rng& rng, std::vector<int64_t> dims, double scale = 1.0) {
    Tensor t = Tensor::zeros(std::move(dims), Precision::b64);
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.normal() * scale);
    return t;
}

PointSet random_points(Rng& rng, int64_t n, int64_t dim, double extent) {
    PointSet ps;
    ps.coords = Tensor::zeros({n, 2}, Precision::b32);
    for (int64_t i = 0; i < n * 2; ++i) ps.coords.set(i, rng.uniform(0.0, extent));
    ps.feats = randn(rng, {n, dim});
    return ps;
}

} // namespace

TEST_CASE("retention count is round-half-up of d_s * N, at least 1") {
    CHECK(retained_count(1, 0.25) == 1);
    CHECK(retained_count(1, 0.5) == 1);
    CHECK(retained_count(7, 0.25) == 2);  // 1.75 -> 2
    CHECK(retained_count(7, 0.35) == 2);  // 2.45 -> 2
    CHECK(retained_count(7, 0.4) == 3);   // 2.8 -> 3
    CHECK(retained_count(7, 0.5) == 4);   // 3.5 rounds half up
    CHECK(retained_count(100, 0.25) == 25);
    CHECK(retained_count(100, 0.35) == 35);
    CHECK(retained_count(4096, 0.25) == 1024);
    CHECK(retained_count(4096, 0.4) == 1638); // 1638.4 rounds down
    CHECK(retained_count(4096, 0.5) == 2048);
    CHECK(retained_count(2, 0.25) == 1);  // 0.5 rounds up to 1
    CHECK(retained_count(10, 1.0) == 10);
}

TEST_CASE("three merges at 0.4 from 4096 reduce the ledger by about 94%") {
    int64_t n = 4096;
    std::vector<int64_t> ledger;
    for (int i = 0; i < 3; ++i) {
        n = retained_count(n, 0.4);
        ledger.push_back(n);
    }
    CHECK(ledger[0] == 1638);
    CHECK(ledger[1] == 655);
    CHECK(ledger[2] == 262);
    double reduction = 1.0 - double(n) / 4096.0;
    CHECK(reduction >= 0.93);
    CHECK(reduction <= 0.95);
}

TEST_CASE("selection keeps the highest scores, ties to lower index, output ascending") {
    Tensor scores = Tensor::zeros({6, 1}, Precision::b64);
    double vals[6] = {0.3, 0.9, 0.5, 0.9, 0.1, 0.5};
    for (int i = 0; i < 6; ++i) scores.set(i, vals[i]);
    std::vector<int64_t> kept = select_retained(scores, 0.5); // keep 3
    REQUIRE(kept.size() == 3);
    // top: 0.9@1, 0.9@3, then 0.5@2 beats 0.5@5 on index
    CHECK(kept[0] == 1);
    CHECK(kept[1] == 2);
    CHECK(kept[2] == 3);
}

TEST_CASE("importance scores stay in (0,1)") {
    Rng rng(31);
    MergeParams mp = MergeParams::init(8, 4, 4, 7, Precision::b64);
    Tensor feats = randn(rng, {20, 8}, 2.0);
    Tensor s = importance_scores(feats, mp);
    REQUIRE(s.rows() == 20);
    for (int64_t i = 0; i < 20; ++i) {
        CHECK(s.get(i) > 0.0);
        CHECK(s.get(i) < 1.0);
    }
}

TEST_CASE("merge plan sends every dropped token to its nearest retained token") {
    Rng rng(32);
    PointSet ps = random_points(rng, 40, 4, 32.0);
    std::vector<int64_t> retained;
    for (int64_t i = 0; i < 40; i += 3) retained.push_back(i); // arbitrary subset
    MergePlan plan = merge_plan(ps, retained, 4);
    CHECK(plan.retained.size() == retained.size());
    CHECK(plan.dropped.size() + plan.retained.size() == 40);

    std::set<int64_t> ret(retained.begin(), retained.end());
    for (size_t di = 0; di < plan.dropped.size(); ++di) {
        int64_t d = plan.dropped[di];
        CHECK(ret.count(d) == 0);
        double best = 1e300;
        int64_t best_r = -1;
        for (int64_t r : retained) {
            double dx = ps.x(d) - ps.x(r), dy = ps.y(d) - ps.y(r);
            double dist = dx * dx + dy * dy;
            if (dist < best) {
                best = dist;
                best_r = r;
            }
        }
        CHECK(plan.target[di] == best_r);
    }
    for (size_t r = 0; r < plan.pool.size(); ++r) {
        CHECK(int64_t(plan.pool[r].size()) <= 4);
        for (size_t j = 1; j < plan.pool_dist[r].size(); ++j)
            CHECK(plan.pool_dist[r][j] >= plan.pool_dist[r][j - 1]);
    }
}

TEST_CASE("pool op forward: one retained token with a known pool") {
    // retained token 0 at origin; tokens 1,2 drop onto it at distances 1 and 2
    PointSet ps;
    ps.coords = Tensor::zeros({3, 2}, Precision::b32);
    ps.coords.set(2, 1.0); // (1,0)
    ps.coords.set(4, 2.0); // (2,0)
    ps.feats = Tensor::zeros({3, 2}, Precision::b64);

    Tensor feats = Tensor::zeros({3, 2}, Precision::b64);
    for (int64_t i = 0; i < 6; ++i) feats.set(i, double(i + 1)); // rows [1,2],[3,4],[5,6]
    Tensor scores = Tensor::zeros({3, 1}, Precision::b64);
    scores.set(0, 0.9);
    scores.set(1, 0.5);
    scores.set(2, 0.25);
    Tensor p = Tensor::full({1, 1}, 1.5, Precision::b64);

    std::vector<int64_t> retained = {0};
    MergePlan plan = merge_plan(ps, retained, 8);

    Tape t(Precision::b64);
    int out = t.custom(make_merge_pool_op(plan),
                       {t.input(feats), t.input(scores), t.input(p)});
    REQUIRE(t.value(out).rows() == 1);
    REQUIRE(t.value(out).cols() == 4);
    // left half: f_r ungated
    CHECK(t.value(out).get(0) == 1.0);
    CHECK(t.value(out).get(1) == 2.0);
    // right half: pool(0) holds only the dropped tokens {1 at d=1, 2 at d=2};
    // the retained token rides in the left half and never gates itself
    double e1 = std::exp(-1.5), e2 = std::exp(-3.0);
    double z = e1 + e2;
    double agg0 = (e1 / z) * 0.5 * 3.0 + (e2 / z) * 0.25 * 5.0;
    double agg1 = (e1 / z) * 0.5 * 4.0 + (e2 / z) * 0.25 * 6.0;
    CHECK(t.value(out).get(2) == doctest::Approx(agg0).epsilon(1e-12));
    CHECK(t.value(out).get(3) == doctest::Approx(agg1).epsilon(1e-12));
}

TEST_CASE("merge tokens halves arrive with the right shape and stage bump") {
    Rng rng(33);
    PointSet ps = random_points(rng, 30, 6, 24.0);
    ps.stage = 2;
    MergeParams mp = MergeParams::init(6, 4, 5, 9, Precision::b64);
    Tensor scores = importance_scores(ps.feats, mp);
    std::vector<int64_t> retained = select_retained(scores, 0.4);
    MergeResult res = merge_tokens(ps, scores, retained, mp);
    CHECK(res.points.stage == 3);
    CHECK(res.points.count() == retained_count(30, 0.4));
    CHECK(res.points.feats.cols() == 6);
    CHECK(res.points.feats.all_finite());
    for (size_t i = 0; i < retained.size(); ++i) {
        CHECK(res.points.x(int64_t(i)) == ps.x(retained[i]));
        CHECK(res.points.y(int64_t(i)) == ps.y(retained[i]));
    }
}

TEST_CASE("merge pool op gradients pass over 20 seeds") {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed ^ 0x3366);
        CAPTURE(seed);
        int64_t n = 12, dim = 3;
        PointSet ps = random_points(rng, n, dim, 16.0);
        std::vector<int64_t> retained;
        Tensor pre = randn(rng, {n, 1});
        retained = select_retained(pre, 0.4);
        MergePlan plan = merge_plan(ps, retained, 3);

        Tensor feats = randn(rng, {n, dim});
        Tensor scores = Tensor::zeros({n, 1}, Precision::b64);
        for (int64_t i = 0; i < n; ++i) scores.set(i, rng.uniform(0.1, 0.9));
        Tensor p = Tensor::full({1, 1}, rng.uniform(0.5, 2.0), Precision::b64);
        Tensor w = randn(rng, {int64_t(retained.size()), 2 * dim});

        GradCheckResult r = grad_check({feats, scores, p}, [&](Tape& t, const std::vector<int>& in) {
            int out = t.custom(make_merge_pool_op(plan), {in[0], in[1], in[2]});
            return t.reduce_sum(t.mul(out, t.input(w)));
        });
        CAPTURE(r.max_rel_err);
        CHECK(r.pass(1e-6));
    }
}
