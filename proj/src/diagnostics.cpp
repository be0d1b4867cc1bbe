#include "affmae/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "affmae/attention.hpp"
#include "affmae/merging.hpp"

namespace affmae {

namespace {

// Cyclic Jacobi eigendecomposition of a symmetric n x n matrix (row-major).
// Rotations optionally accumulate into vecs (initialized to identity here).
void jacobi_eigen(std::vector<double>& a, int64_t n, std::vector<double>* vecs) {
    if (vecs) {
        vecs->assign(size_t(n * n), 0.0);
        for (int64_t i = 0; i < n; ++i) (*vecs)[size_t(i * n + i)] = 1.0;
    }
    double norm = 0.0;
    for (double v : a) norm += v * v;
    norm = std::sqrt(norm);
    if (norm == 0.0) return;
    const double tol = 1e-12 * norm;
    const int max_sweeps = 100;

    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (int64_t p = 0; p < n; ++p)
            for (int64_t q = p + 1; q < n; ++q) off += 2.0 * a[size_t(p * n + q)] * a[size_t(p * n + q)];
        off = std::sqrt(off);
        if (off < tol) return;

        for (int64_t p = 0; p < n; ++p) {
            for (int64_t q = p + 1; q < n; ++q) {
                double apq = a[size_t(p * n + q)];
                if (apq == 0.0) continue;
                double app = a[size_t(p * n + p)], aqq = a[size_t(q * n + q)];
                double theta = (aqq - app) / (2.0 * apq);
                double t = (theta >= 0.0 ? 1.0 : -1.0) /
                           (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double s = t * c;
                for (int64_t i = 0; i < n; ++i) {
                    double aip = a[size_t(i * n + p)], aiq = a[size_t(i * n + q)];
                    a[size_t(i * n + p)] = c * aip - s * aiq;
                    a[size_t(i * n + q)] = s * aip + c * aiq;
                }
                for (int64_t i = 0; i < n; ++i) {
                    double api = a[size_t(p * n + i)], aqi = a[size_t(q * n + i)];
                    a[size_t(p * n + i)] = c * api - s * aqi;
                    a[size_t(q * n + i)] = s * api + c * aqi;
                }
                if (vecs)
                    for (int64_t i = 0; i < n; ++i) {
                        double vip = (*vecs)[size_t(i * n + p)], viq = (*vecs)[size_t(i * n + q)];
                        (*vecs)[size_t(i * n + p)] = c * vip - s * viq;
                        (*vecs)[size_t(i * n + q)] = s * vip + c * viq;
                    }
            }
        }
    }
    double off = 0.0;
    for (int64_t p = 0; p < n; ++p)
        for (int64_t q = p + 1; q < n; ++q) off += 2.0 * a[size_t(p * n + q)] * a[size_t(p * n + q)];
    throw NumericError("jacobi: no convergence after 100 sweeps, off-diagonal residual " +
                       std::to_string(std::sqrt(off)));
}

std::vector<double> gram_smaller_side(const Tensor& feats, int64_t& side) {
    int64_t n = feats.rows(), d = feats.cols();
    side = std::min(n, d);
    std::vector<double> g(static_cast<size_t>(side * side), 0.0);
    if (n <= d) {
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = i; j < n; ++j) {
                double s = 0.0;
                for (int64_t c = 0; c < d; ++c) s += feats.get(i * d + c) * feats.get(j * d + c);
                g[size_t(i * n + j)] = s;
                g[size_t(j * n + i)] = s;
            }
    } else {
        for (int64_t i = 0; i < d; ++i)
            for (int64_t j = i; j < d; ++j) {
                double s = 0.0;
                for (int64_t r = 0; r < n; ++r) s += feats.get(r * d + i) * feats.get(r * d + j);
                g[size_t(i * d + j)] = s;
                g[size_t(j * d + i)] = s;
            }
    }
    return g;
}

} // namespace

std::vector<double> singular_values(const Tensor& feats) {
    if (feats.rows() < 1 || feats.cols() < 1)
        throw ConfigError("singular_values: empty matrix");
    if (!feats.all_finite()) throw NumericError("singular_values: non-finite entries");
    int64_t side = 0;
    std::vector<double> g = gram_smaller_side(feats, side);
    jacobi_eigen(g, side, nullptr);
    std::vector<double> sv(static_cast<size_t>(side));
    for (int64_t i = 0; i < side; ++i) sv[size_t(i)] = std::sqrt(std::max(0.0, g[size_t(i * side + i)]));
    std::sort(sv.begin(), sv.end(), std::greater<>());
    return sv;
}

double effective_rank_from_singular(std::span<const double> sv, int64_t min_nd) {
    double total = 0.0;
    for (double s : sv) total += s;
    if (total <= 0.0) throw NumericError("effective_rank: all singular values zero");
    double h = 0.0;
    for (double s : sv) {
        double p = s / total;
        if (p > 0.0) h -= p * std::log(p);
    }
    return std::exp(h) / double(min_nd);
}

double effective_rank(const Tensor& feats) {
    std::vector<double> sv = singular_values(feats);
    return effective_rank_from_singular(sv, std::min(feats.rows(), feats.cols()));
}

PcaResult pca_project(const Tensor& feats, int64_t k) {
    int64_t n = feats.rows(), d = feats.cols();
    if (k < 1 || k > std::min(n, d))
        throw ConfigError("pca_project: k must be in [1, min(N,D)]");

    std::vector<double> mean(static_cast<size_t>(d), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t c = 0; c < d; ++c) mean[size_t(c)] += feats.get(i * d + c);
    for (double& m : mean) m /= double(n);

    std::vector<double> cov(static_cast<size_t>(d * d), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t a = 0; a < d; ++a) {
            double xa = feats.get(i * d + a) - mean[size_t(a)];
            for (int64_t b = a; b < d; ++b)
                cov[size_t(a * d + b)] += xa * (feats.get(i * d + b) - mean[size_t(b)]);
        }
    for (int64_t a = 0; a < d; ++a)
        for (int64_t b = 0; b < a; ++b) cov[size_t(a * d + b)] = cov[size_t(b * d + a)];

    std::vector<double> vecs;
    jacobi_eigen(cov, d, &vecs);
    std::vector<std::pair<double, int64_t>> ev(static_cast<size_t>(d));
    double total = 0.0;
    for (int64_t i = 0; i < d; ++i) {
        double lam = std::max(0.0, cov[size_t(i * d + i)]);
        ev[size_t(i)] = {lam, i};
        total += lam;
    }
    std::sort(ev.begin(), ev.end(), [](auto& a, auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });

    PcaResult res;
    res.projections = Tensor::zeros({n, k}, Precision::b64);
    res.variance.resize(size_t(k));
    for (int64_t c = 0; c < k; ++c) {
        int64_t col = ev[size_t(c)].second;
        res.variance[size_t(c)] = total > 0.0 ? ev[size_t(c)].first / total : 0.0;
        // sign convention: largest-magnitude loading positive
        double big = 0.0;
        for (int64_t a = 0; a < d; ++a) {
            double v = vecs[size_t(a * d + col)];
            if (std::fabs(v) > std::fabs(big)) big = v;
        }
        double flip = big < 0.0 ? -1.0 : 1.0;
        for (int64_t i = 0; i < n; ++i) {
            double acc = 0.0;
            for (int64_t a = 0; a < d; ++a)
                acc += (feats.get(i * d + a) - mean[size_t(a)]) * vecs[size_t(a * d + col)];
            res.projections.set(i * k + c, acc * flip);
        }
    }
    return res;
}

RankReport rank_report(const Tensor& feats, int stage) {
    RankReport rep;
    rep.stage = stage;
    rep.tokens = feats.rows();
    rep.dim = feats.cols();
    rep.singular = singular_values(feats);
    rep.r_hat = effective_rank_from_singular(rep.singular, std::min(rep.tokens, rep.dim));
    return rep;
}

std::vector<FlopRow> flop_report(const PipelineConfig& cfg, std::span<const int64_t> resolutions) {
    cfg.validate();
    std::vector<FlopRow> rows;
    for (int64_t res : resolutions) {
        if (res % cfg.patch != 0)
            throw ConfigError("flop_report: resolution " + std::to_string(res) +
                              " not divisible by patch");
        int64_t n = (res / cfg.patch) * (res / cfg.patch);
        for (size_t s = 0; s < cfg.stages.size(); ++s) {
            const StageConfig& st = cfg.stages[s];
            int64_t d_head = st.dim / st.heads;
            int64_t m = std::min<int64_t>(int64_t(st.groups) * st.cluster, n);
            uint64_t attn = uint64_t(st.blocks) * flop_count_attn(n, m, st.heads, d_head);
            uint64_t dense_attn = uint64_t(st.blocks) * flop_count_attn_dense(n, st.heads, d_head);
            // qkv + output projections and a 4x MLP per block
            uint64_t proj = uint64_t(st.blocks) *
                            (8ull * uint64_t(n) * uint64_t(st.dim) * uint64_t(st.dim) +
                             16ull * uint64_t(n) * uint64_t(st.dim) * uint64_t(st.dim));
            uint64_t merge = 0;
            int64_t next = n;
            if (s + 1 < cfg.stages.size()) {
                next = retained_count(n, st.d_s);
                // scorer, pooled aggregation, 2D->D projection
                merge = 2ull * uint64_t(n) * uint64_t(st.dim) * uint64_t(cfg.scorer_hidden) +
                        4ull * uint64_t(n) * uint64_t(st.dim) +
                        4ull * uint64_t(next) * uint64_t(st.dim) * uint64_t(st.dim);
            }
            FlopRow row;
            row.resolution = res;
            row.stage = int(s);
            row.tokens = n;
            row.aff = attn + proj + merge;
            row.dense = dense_attn + proj + merge;
            rows.push_back(row);
            n = next;
        }
    }
    return rows;
}

double scaling_exponent(std::span<const FlopRow> rows, bool dense) {
    std::map<int64_t, double> totals;
    for (const FlopRow& r : rows) totals[r.resolution] += double(dense ? r.dense : r.aff);
    if (totals.size() < 2) throw ConfigError("scaling_exponent: need at least two resolutions");
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    auto n = double(totals.size());
    for (auto& [res, total] : totals) {
        double lx = std::log(double(res) * double(res)); // pixel count
        double ly = std::log(total);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

} // namespace affmae
