#pragma once

#include <cstdint>
#include <vector>

#include "affmae/tensor.hpp"

namespace affmae {

// Irregularly placed tokens: pixel-space centers plus per-token features.
struct PointSet {
    Tensor coords; // N x 2 (x, y), b32
    Tensor feats;  // N x D
    int stage = 0;

    int64_t count() const { return coords.rows(); }
    double x(int64_t i) const { return coords.get(i * 2); }
    double y(int64_t i) const { return coords.get(i * 2 + 1); }
};

// Contiguous chunks along the space-filling-curve order; sizes differ by at
// most one.
struct ClusterAssignment {
    std::vector<int32_t> cluster_of;           // per token
    std::vector<std::vector<int64_t>> members; // per cluster, curve order
    int64_t target = 0;

    int64_t count() const { return int64_t(members.size()); }
    int64_t max_size() const;
};

// Fixed-width key lists per query; padded slots carry valid = 0.
struct NeighborIndex {
    int64_t width = 0;
    std::vector<int64_t> idx;
    std::vector<uint8_t> valid;

    int64_t queries() const { return width == 0 ? 0 : int64_t(idx.size()) / width; }
    int64_t key(int64_t q, int64_t m) const { return idx[size_t(q * width + m)]; }
    bool ok(int64_t q, int64_t m) const { return valid[size_t(q * width + m)] != 0; }

    std::vector<int64_t> row(int64_t q) const {
        std::vector<int64_t> r;
        for (int64_t m = 0; m < width; ++m)
            if (ok(q, m)) r.push_back(key(q, m));
        return r;
    }
};

// Hilbert index of cell (x, y) on a side-`n` grid (n a power of two).
uint64_t hilbert_index(uint32_t n, uint32_t x, uint32_t y);

// Patch-center grid, row-major, (x, y) in pixels.
PointSet grid_points(int64_t height, int64_t width, int64_t patch);

// Permutation sorting tokens by Hilbert index of their quantized coordinates;
// ties fall back to the original token index. Grid resolution adapts to the
// point spacing so regular grids map one token per cell.
std::vector<int64_t> sfc_order(const PointSet& points);

// ceil(N/size) contiguous chunks along sfc_order, sizes differing by <= 1.
ClusterAssignment balanced_clusters(const PointSet& points, int64_t size);

// Per-token key list: union of the `groups` clusters whose centroids are
// nearest to the token's own cluster centroid (own cluster always first).
// Width = groups * max cluster size.
NeighborIndex cluster_neighborhood(const ClusterAssignment& assign, const PointSet& points,
                                   int64_t groups);

// Exact brute-force KNN: for each query row of `queries` (Q x 2), the
// min(k, N) nearest keys, ascending distance, ties by lower key index.
NeighborIndex knn(const Tensor& queries, const PointSet& keys, int64_t k);

} // namespace affmae
