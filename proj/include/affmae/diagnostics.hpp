#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "affmae/config.hpp"
#include "affmae/tensor.hpp"

namespace affmae {

// Singular values of an N x D matrix, descending, via cyclic Jacobi on the
// Gram matrix of the smaller side (b64 math). Converged when the off-diagonal
// Frobenius mass drops below 1e-12 of the Gram norm.
std::vector<double> singular_values(const Tensor& feats);

// exp(spectral entropy of normalized singular values) / min(N, D), in
// (0, 1]; 1 means isotropic, 1/min(N,D) means rank collapse.
double effective_rank(const Tensor& feats);

double effective_rank_from_singular(std::span<const double> sv, int64_t min_nd);

struct PcaResult {
    Tensor projections;           // N x k
    std::vector<double> variance; // per component, fraction of total
};

// Mean-centered projection onto the top-k principal directions; each
// direction's largest-magnitude loading is made positive.
PcaResult pca_project(const Tensor& feats, int64_t k);

struct RankReport {
    int stage = 0;
    int64_t tokens = 0;
    int64_t dim = 0;
    double r_hat = 0.0;
    std::vector<double> singular; // audit trail
};

RankReport rank_report(const Tensor& feats, int stage);

// Closed-form encoder cost at each resolution: neighborhood attention versus
// a dense comparator at equal token counts (projections, MLPs and merges are
// shared; only the attention term differs). Decoder cost is out of scope.
struct FlopRow {
    int64_t resolution = 0;
    int stage = 0;
    int64_t tokens = 0;
    uint64_t aff = 0;
    uint64_t dense = 0;
};

std::vector<FlopRow> flop_report(const PipelineConfig& cfg, std::span<const int64_t> resolutions);

// Least-squares exponent b of cost ~ pixels^b from (resolution, total) rows.
double scaling_exponent(std::span<const FlopRow> rows, bool dense);

} // namespace affmae
