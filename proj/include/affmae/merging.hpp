#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "affmae/geometry.hpp"
#include "affmae/tape.hpp"
#include "affmae/tensor.hpp"

namespace affmae {

// Scorer, merge temperature, projection and normalization weights for one
// downsampling step.
struct MergeParams {
    int k_m = 8; // pool fan-in
    Tensor scorer_w1; // D x H
    Tensor scorer_b1; // 1 x H
    Tensor scorer_w2; // H x 1
    Tensor scorer_b2; // 1 x 1
    Tensor p_merge;   // 1 x 1
    Tensor proj_w;    // 2D x D
    Tensor ln_gamma;  // 1 x D
    Tensor ln_beta;   // 1 x D

    static MergeParams init(int64_t dim, int hidden, int k_m, uint64_t seed,
                            Precision prec = Precision::b32);
};

// sigmoid(gelu(F w1 + b1) w2 + b2), one score per token, in (0,1).
Tensor importance_scores(const Tensor& feats, const MergeParams& mp);

// Top round-half-up(d_s * N) token indices by score (at least 1), ties by
// lower index, returned ascending.
std::vector<int64_t> select_retained(const Tensor& scores, double d_s);

int64_t retained_count(int64_t n, double d_s);

// Non-differentiable geometry of one merge: who survives, where each dropped
// token goes, and each retained token's contributor pool (up to k_m nearest
// of its assigned tokens, ascending distance then index; the rest are
// truncated out of the aggregation).
struct MergePlan {
    std::vector<int64_t> retained;
    std::vector<int64_t> dropped;
    std::vector<int64_t> target; // per dropped token, original index of its retained token
    std::vector<std::vector<int64_t>> pool;
    std::vector<std::vector<double>> pool_dist;
};

MergePlan merge_plan(const PointSet& ps, std::span<const int64_t> retained, int k_m);

struct MergeResult {
    PointSet points; // retained coords, merged feats
    MergePlan plan;
};

// Full merge: for each retained r, LayerNorm(W [f_r ; sum_j w_j s_j f_j])
// with w = softmax(-p_merge * dist) over pool(r) and s the importance gate.
// An empty pool contributes a zero aggregate branch.
MergeResult merge_tokens(const PointSet& ps, const Tensor& scores,
                         std::span<const int64_t> retained, const MergeParams& mp);

// Tape op for the pooling half: inputs {feats NxD, scores Nx1, p_merge 1x1},
// output R x 2D rows [f_r ; agg_r]. Projection and LayerNorm are ordinary
// tape ops downstream. Selection and pools are frozen in the plan.
std::shared_ptr<CustomOp> make_merge_pool_op(MergePlan plan);

} // namespace affmae
