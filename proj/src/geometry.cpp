#include "affmae/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace affmae {

int64_t ClusterAssignment::max_size() const {
    int64_t m = 0;
    for (const auto& c : members) m = std::max(m, int64_t(c.size()));
    return m;
}

uint64_t hilbert_index(uint32_t n, uint32_t x, uint32_t y) {
    uint64_t d = 0;
    for (uint32_t s = n / 2; s > 0; s /= 2) {
        uint32_t rx = (x & s) ? 1u : 0u;
        uint32_t ry = (y & s) ? 1u : 0u;
        d += uint64_t(s) * uint64_t(s) * ((3u * rx) ^ ry);
        if (ry == 0) {
            if (rx == 1) {
                x = s - 1 - x;
                y = s - 1 - y;
            }
            std::swap(x, y);
        }
    }
    return d;
}

PointSet grid_points(int64_t height, int64_t width, int64_t patch) {
    if (patch < 1) throw ConfigError("grid_points: patch must be >= 1");
    if (height % patch != 0)
        throw ConfigError("grid_points: height " + std::to_string(height) +
                          " not divisible by patch " + std::to_string(patch));
    if (width % patch != 0)
        throw ConfigError("grid_points: width " + std::to_string(width) +
                          " not divisible by patch " + std::to_string(patch));
    int64_t rows = height / patch, cols = width / patch;
    PointSet ps;
    ps.coords = Tensor::zeros({rows * cols, 2}, Precision::b32);
    ps.feats = Tensor::zeros({rows * cols, 0}, Precision::b32);
    double half = double(patch) * 0.5;
    int64_t t = 0;
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c, ++t) {
            ps.coords.set(t * 2, double(c * patch) + half);
            ps.coords.set(t * 2 + 1, double(r * patch) + half);
        }
    return ps;
}

namespace {

// Smallest positive gap between consecutive sorted values; 0 if none.
double min_gap(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    double g = 0.0;
    for (size_t i = 1; i < v.size(); ++i) {
        double d = v[i] - v[i - 1];
        if (d > 0.0 && (g == 0.0 || d < g)) g = d;
    }
    return g;
}

} // namespace

std::vector<int64_t> sfc_order(const PointSet& points) {
    int64_t n = points.count();
    if (n < 1) throw ConfigError("sfc_order: empty point set");
    std::vector<int64_t> perm(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    if (n == 1) return perm;

    double xmin = points.x(0), xmax = xmin, ymin = points.y(0), ymax = ymin;
    std::vector<double> xs(static_cast<size_t>(n)), ys(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        xs[size_t(i)] = points.x(i);
        ys[size_t(i)] = points.y(i);
        xmin = std::min(xmin, xs[size_t(i)]);
        xmax = std::max(xmax, xs[size_t(i)]);
        ymin = std::min(ymin, ys[size_t(i)]);
        ymax = std::max(ymax, ys[size_t(i)]);
    }
    double extent = std::max(xmax - xmin, ymax - ymin);
    if (extent <= 0.0) return perm; // all points coincide, keep input order

    // Pick the curve order so one cell is about one point spacing wide.
    double spacing = std::max(min_gap(xs), min_gap(ys));
    if (spacing <= 0.0) spacing = extent;
    int b = int(std::ceil(std::log2(std::max(2.0, extent / spacing + 1.0))));
    b = std::clamp(b, 1, 16);
    uint32_t side = 1u << b;

    std::vector<uint64_t> key(static_cast<size_t>(n));
    double scale = double(side - 1) / extent;
    for (int64_t i = 0; i < n; ++i) {
        auto qx = uint32_t(std::llround((xs[size_t(i)] - xmin) * scale));
        auto qy = uint32_t(std::llround((ys[size_t(i)] - ymin) * scale));
        key[size_t(i)] = hilbert_index(side, qx, qy);
    }
    std::stable_sort(perm.begin(), perm.end(),
                     [&](int64_t a, int64_t c) { return key[size_t(a)] < key[size_t(c)]; });
    return perm;
}

ClusterAssignment balanced_clusters(const PointSet& points, int64_t size) {
    int64_t n = points.count();
    if (size < 1) throw ConfigError("balanced_clusters: size must be >= 1");
    if (size > n) size = n;
    std::vector<int64_t> order = sfc_order(points);

    int64_t c = (n + size - 1) / size;
    int64_t base = n / c, rem = n % c;
    ClusterAssignment out;
    out.target = size;
    out.cluster_of.assign(size_t(n), 0);
    out.members.resize(size_t(c));
    int64_t pos = 0;
    for (int64_t k = 0; k < c; ++k) {
        int64_t len = base + (k < rem ? 1 : 0);
        out.members[size_t(k)].reserve(size_t(len));
        for (int64_t j = 0; j < len; ++j, ++pos) {
            int64_t tok = order[size_t(pos)];
            out.members[size_t(k)].push_back(tok);
            out.cluster_of[size_t(tok)] = int32_t(k);
        }
    }
    return out;
}

NeighborIndex cluster_neighborhood(const ClusterAssignment& assign, const PointSet& points,
                                   int64_t groups) {
    int64_t c = assign.count();
    int64_t n = points.count();
    if (groups < 1) throw ConfigError("cluster_neighborhood: groups must be >= 1");
    groups = std::min(groups, c);

    std::vector<double> cx(static_cast<size_t>(c)), cy(static_cast<size_t>(c));
    for (int64_t k = 0; k < c; ++k) {
        double sx = 0.0, sy = 0.0;
        for (int64_t t : assign.members[size_t(k)]) {
            sx += points.x(t);
            sy += points.y(t);
        }
        double inv = 1.0 / double(assign.members[size_t(k)].size());
        cx[size_t(k)] = sx * inv;
        cy[size_t(k)] = sy * inv;
    }

    int64_t m = groups * assign.max_size();
    NeighborIndex out;
    out.width = m;
    out.idx.assign(size_t(n * m), 0);
    out.valid.assign(size_t(n * m), 0);

    std::vector<std::pair<double, int64_t>> dist(static_cast<size_t>(c));
    for (int64_t k = 0; k < c; ++k) {
        for (int64_t j = 0; j < c; ++j) {
            double dx = cx[size_t(j)] - cx[size_t(k)];
            double dy = cy[size_t(j)] - cy[size_t(k)];
            dist[size_t(j)] = {dx * dx + dy * dy, j};
        }
        std::partial_sort(dist.begin(), dist.begin() + groups, dist.end());
        // own cluster first regardless of centroid ties
        std::vector<int64_t> sel;
        sel.reserve(size_t(groups));
        sel.push_back(k);
        for (int64_t g = 0; g < groups && int64_t(sel.size()) < groups; ++g)
            if (dist[size_t(g)].second != k) sel.push_back(dist[size_t(g)].second);

        std::vector<int64_t> keys;
        keys.reserve(size_t(m));
        for (int64_t cl : sel)
            for (int64_t t : assign.members[size_t(cl)]) keys.push_back(t);

        for (int64_t t : assign.members[size_t(k)]) {
            for (size_t s = 0; s < keys.size(); ++s) {
                out.idx[size_t(t * m) + s] = keys[s];
                out.valid[size_t(t * m) + s] = 1;
            }
        }
    }
    return out;
}

NeighborIndex knn(const Tensor& queries, const PointSet& keys, int64_t k) {
    int64_t nk = keys.count();
    if (nk < 1) throw ConfigError("knn: empty key set");
    if (k < 1) throw ConfigError("knn: k must be >= 1");
    if (queries.ndim() != 2 || queries.dim(1) != 2)
        throw ConfigError("knn: queries must be Qx2, got " + queries.dims_str());

    int64_t q = queries.dim(0);
    int64_t kept = std::min(k, nk);
    NeighborIndex out;
    out.width = k;
    out.idx.assign(size_t(q * k), 0);
    out.valid.assign(size_t(q * k), 0);

    std::vector<std::pair<double, int64_t>> d(static_cast<size_t>(nk));
    for (int64_t i = 0; i < q; ++i) {
        double qx = queries.get(i * 2), qy = queries.get(i * 2 + 1);
        for (int64_t j = 0; j < nk; ++j) {
            double dx = keys.x(j) - qx, dy = keys.y(j) - qy;
            d[size_t(j)] = {dx * dx + dy * dy, j};
        }
        std::partial_sort(d.begin(), d.begin() + kept, d.end());
        for (int64_t s = 0; s < kept; ++s) {
            out.idx[size_t(i * k + s)] = d[size_t(s)].second;
            out.valid[size_t(i * k + s)] = 1;
        }
    }
    return out;
}

} // namespace affmae
