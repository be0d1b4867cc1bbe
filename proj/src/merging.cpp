#include "affmae/merging.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "affmae/rng.hpp"

namespace affmae {

MergeParams MergeParams::init(int64_t dim, int hidden, int k_m, uint64_t seed, Precision prec) {
    MergeParams mp;
    mp.k_m = k_m;
    mp.scorer_w1 = Tensor::zeros({dim, hidden}, prec);
    mp.scorer_b1 = Tensor::zeros({1, hidden}, prec);
    mp.scorer_w2 = Tensor::zeros({hidden, 1}, prec);
    mp.scorer_b2 = Tensor::zeros({1, 1}, prec);
    mp.p_merge = Tensor::full({1, 1}, 1.0, prec);
    mp.proj_w = Tensor::zeros({2 * dim, dim}, prec);
    mp.ln_gamma = Tensor::full({1, dim}, 1.0, prec);
    mp.ln_beta = Tensor::zeros({1, dim}, prec);
    Rng rng(mix64(seed) ^ 0x6d657267ull);
    double s1 = 1.0 / std::sqrt(double(dim)), s2 = 1.0 / std::sqrt(double(hidden));
    for (int64_t i = 0; i < mp.scorer_w1.numel(); ++i) mp.scorer_w1.set(i, rng.normal() * s1);
    for (int64_t i = 0; i < mp.scorer_w2.numel(); ++i) mp.scorer_w2.set(i, rng.normal() * s2);
    double sp = 1.0 / std::sqrt(2.0 * double(dim));
    for (int64_t i = 0; i < mp.proj_w.numel(); ++i) mp.proj_w.set(i, rng.normal() * sp);
    return mp;
}

Tensor importance_scores(const Tensor& feats, const MergeParams& mp) {
    int64_t n = feats.rows(), dim = feats.cols(), hidden = mp.scorer_w1.dim(1);
    if (dim != mp.scorer_w1.dim(0))
        throw ConfigError("importance_scores: feature width " + std::to_string(dim) +
                          " does not match scorer");
    Tensor out = Tensor::zeros({n, 1}, feats.precision());
    for (int64_t i = 0; i < n; ++i) {
        double pre2 = mp.scorer_b2.get(0);
        for (int64_t j = 0; j < hidden; ++j) {
            double pre = mp.scorer_b1.get(j);
            for (int64_t c = 0; c < dim; ++c) pre += feats.get(i * dim + c) * mp.scorer_w1.get(c * hidden + j);
            double g = 0.5 * pre * (1.0 + std::erf(pre * 0.70710678118654752440));
            pre2 += g * mp.scorer_w2.get(j);
        }
        out.set(i, 1.0 / (1.0 + std::exp(-pre2)));
    }
    return out;
}

int64_t retained_count(int64_t n, double d_s) {
    if (!(d_s > 0.0 && d_s <= 1.0)) throw ConfigError("retained_count: d_s must be in (0, 1]");
    int64_t k = int64_t(std::floor(d_s * double(n) + 0.5)); // round half up
    return std::max<int64_t>(1, std::min(k, n));
}

std::vector<int64_t> select_retained(const Tensor& scores, double d_s) {
    int64_t n = scores.rows();
    int64_t keep = retained_count(n, d_s);
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        double sa = scores.get(a), sb = scores.get(b);
        if (sa != sb) return sa > sb;
        return a < b;
    });
    order.resize(size_t(keep));
    std::sort(order.begin(), order.end());
    return order;
}

MergePlan merge_plan(const PointSet& ps, std::span<const int64_t> retained, int k_m) {
    int64_t n = ps.count();
    if (retained.empty()) throw ConfigError("merge_plan: retained set empty");
    if (k_m < 1) throw ConfigError("merge_plan: k_m must be >= 1");
    MergePlan plan;
    plan.retained.assign(retained.begin(), retained.end());
    std::vector<uint8_t> is_ret(static_cast<size_t>(n), 0);
    for (int64_t r : retained) {
        if (r < 0 || r >= n) throw ConfigError("merge_plan: retained index out of range");
        is_ret[size_t(r)] = 1;
    }

    std::vector<std::vector<std::pair<double, int64_t>>> pools(retained.size());
    for (int64_t j = 0; j < n; ++j) {
        if (is_ret[size_t(j)]) continue;
        plan.dropped.push_back(j);
        double best = 0.0;
        int64_t best_r = -1;
        for (size_t ri = 0; ri < retained.size(); ++ri) {
            double dx = ps.x(retained[ri]) - ps.x(j);
            double dy = ps.y(retained[ri]) - ps.y(j);
            double d2 = dx * dx + dy * dy;
            if (best_r < 0 || d2 < best) {
                best = d2;
                best_r = int64_t(ri);
            }
        }
        plan.target.push_back(retained[size_t(best_r)]);
        pools[size_t(best_r)].push_back({std::sqrt(best), j});
    }

    plan.pool.resize(retained.size());
    plan.pool_dist.resize(retained.size());
    for (size_t ri = 0; ri < retained.size(); ++ri) {
        auto& pl = pools[ri];
        std::sort(pl.begin(), pl.end()); // ascending distance, then index
        size_t keep = std::min(pl.size(), size_t(k_m));
        plan.pool[ri].reserve(keep);
        plan.pool_dist[ri].reserve(keep);
        for (size_t t = 0; t < keep; ++t) {
            plan.pool_dist[ri].push_back(pl[t].first);
            plan.pool[ri].push_back(pl[t].second);
        }
    }
    return plan;
}

namespace {

// out[r] = [f_r ; sum_j softmax(-p d_j)_j * s_j * f_j] over pool(r)
void pool_forward(const MergePlan& plan, const Tensor& feats, const Tensor& scores, double p,
                  Tensor& out) {
    int64_t dim = feats.cols();
    for (size_t ri = 0; ri < plan.retained.size(); ++ri) {
        int64_t r = plan.retained[ri];
        int64_t row = int64_t(ri) * 2 * dim;
        for (int64_t c = 0; c < dim; ++c) out.set(row + c, feats.get(r * dim + c));
        const auto& pool = plan.pool[ri];
        if (pool.empty()) {
            for (int64_t c = 0; c < dim; ++c) out.set(row + dim + c, 0.0);
            continue;
        }
        const auto& dist = plan.pool_dist[ri];
        double m = -p * dist[0];
        for (size_t t = 1; t < pool.size(); ++t) m = std::max(m, -p * dist[t]);
        std::vector<double> w(pool.size());
        double l = 0.0;
        for (size_t t = 0; t < pool.size(); ++t) {
            w[t] = std::exp(-p * dist[t] - m);
            l += w[t];
        }
        for (int64_t c = 0; c < dim; ++c) {
            double acc = 0.0;
            for (size_t t = 0; t < pool.size(); ++t)
                acc += (w[t] / l) * scores.get(pool[t]) * feats.get(pool[t] * dim + c);
            out.set(row + dim + c, acc);
        }
    }
}

struct MergePoolOp final : CustomOp {
    MergePlan plan;
    explicit MergePoolOp(MergePlan p) : plan(std::move(p)) {}

    std::string name() const override { return "merge_pool"; }

    Tensor forward(const std::vector<const Tensor*>& in) override {
        const Tensor& feats = *in[0];
        const Tensor& scores = *in[1];
        const Tensor& pt = *in[2];
        if (scores.rows() != feats.rows() || scores.cols() != 1)
            throw ConfigError("merge_pool: scores must be N x 1");
        if (pt.numel() != 1) throw ConfigError("merge_pool: p_merge must be scalar");
        Tensor out = Tensor::zeros({int64_t(plan.retained.size()), 2 * feats.cols()}, feats.precision());
        pool_forward(plan, feats, scores, pt.get(0), out);
        return out;
    }

    void backward(const Tensor& out_grad, const std::vector<const Tensor*>& in,
                  const std::vector<Tensor*>& in_grads) override {
        const Tensor& feats = *in[0];
        const Tensor& scores = *in[1];
        double p = in[2]->get(0);
        int64_t dim = feats.cols();
        Tensor* df = in_grads[0];
        Tensor* ds = in_grads[1];
        Tensor* dp = in_grads[2];
        for (size_t ri = 0; ri < plan.retained.size(); ++ri) {
            int64_t r = plan.retained[ri];
            int64_t row = int64_t(ri) * 2 * dim;
            if (df)
                for (int64_t c = 0; c < dim; ++c)
                    df->set(r * dim + c, df->get(r * dim + c) + out_grad.get(row + c));
            const auto& pool = plan.pool[ri];
            if (pool.empty()) continue;
            const auto& dist = plan.pool_dist[ri];
            double m = -p * dist[0];
            for (size_t t = 1; t < pool.size(); ++t) m = std::max(m, -p * dist[t]);
            std::vector<double> w(pool.size());
            double l = 0.0;
            for (size_t t = 0; t < pool.size(); ++t) {
                w[t] = std::exp(-p * dist[t] - m);
                l += w[t];
            }
            for (double& x : w) x /= l;

            std::vector<double> dw(pool.size(), 0.0);
            for (size_t t = 0; t < pool.size(); ++t) {
                int64_t j = pool[t];
                double sj = scores.get(j);
                double dot = 0.0;
                for (int64_t c = 0; c < dim; ++c) {
                    double go = out_grad.get(row + dim + c);
                    dot += go * feats.get(j * dim + c);
                    if (df) df->set(j * dim + c, df->get(j * dim + c) + go * w[t] * sj);
                }
                if (ds) ds->set(j, ds->get(j) + w[t] * dot);
                dw[t] = sj * dot;
            }
            double wdot = 0.0;
            for (size_t t = 0; t < pool.size(); ++t) wdot += w[t] * dw[t];
            if (dp) {
                double acc = 0.0;
                for (size_t t = 0; t < pool.size(); ++t)
                    acc += w[t] * (dw[t] - wdot) * (-dist[t]);
                dp->set(0, dp->get(0) + acc);
            }
        }
    }
};

void layer_norm_rows(Tensor& x, const Tensor& gamma, const Tensor& beta) {
    int64_t rows = x.rows(), cols = x.cols();
    for (int64_t r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (int64_t c = 0; c < cols; ++c) mu += x.get(r * cols + c);
        mu /= double(cols);
        double var = 0.0;
        for (int64_t c = 0; c < cols; ++c) {
            double d = x.get(r * cols + c) - mu;
            var += d * d;
        }
        var /= double(cols);
        double inv = 1.0 / std::sqrt(var + 1e-5);
        for (int64_t c = 0; c < cols; ++c)
            x.set(r * cols + c, gamma.get(c) * (x.get(r * cols + c) - mu) * inv + beta.get(c));
    }
}

} // namespace

MergeResult merge_tokens(const PointSet& ps, const Tensor& scores,
                         std::span<const int64_t> retained, const MergeParams& mp) {
    int64_t dim = ps.feats.cols();
    if (mp.proj_w.dim(0) != 2 * dim || mp.proj_w.dim(1) != dim)
        throw ConfigError("merge_tokens: projection shape mismatch");
    MergeResult res;
    res.plan = merge_plan(ps, retained, mp.k_m);
    Precision prec = ps.feats.precision();
    int64_t keep = int64_t(res.plan.retained.size());

    Tensor pooled = Tensor::zeros({keep, 2 * dim}, prec);
    pool_forward(res.plan, ps.feats, scores, mp.p_merge.get(0), pooled);

    Tensor merged = Tensor::zeros({keep, dim}, prec);
    for (int64_t r = 0; r < keep; ++r)
        for (int64_t c = 0; c < dim; ++c) {
            double acc = 0.0;
            for (int64_t t = 0; t < 2 * dim; ++t)
                acc += pooled.get(r * 2 * dim + t) * mp.proj_w.get(t * dim + c);
            merged.set(r * dim + c, acc);
        }
    layer_norm_rows(merged, mp.ln_gamma, mp.ln_beta);

    res.points.stage = ps.stage + 1;
    res.points.coords = Tensor::zeros({keep, 2}, ps.coords.precision());
    for (int64_t i = 0; i < keep; ++i) {
        res.points.coords.set(i * 2, ps.x(res.plan.retained[size_t(i)]));
        res.points.coords.set(i * 2 + 1, ps.y(res.plan.retained[size_t(i)]));
    }
    res.points.feats = std::move(merged);
    return res;
}

std::shared_ptr<CustomOp> make_merge_pool_op(MergePlan plan) {
    return std::make_shared<MergePoolOp>(std::move(plan));
}

} // namespace affmae
