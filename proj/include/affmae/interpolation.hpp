#pragma once

#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "affmae/geometry.hpp"
#include "affmae/tape.hpp"
#include "affmae/tensor.hpp"

namespace affmae {

inline constexpr double kInterpEps = 1e-6; // distance floor, pixels

struct InterpResult {
    std::vector<double> out;     // D
    std::vector<double> weights; // one per neighbor
    bool finite = true;          // all weights finite
    bool zero_norm = false;      // normalizer underflowed to zero

    bool failed() const { return !finite || zero_norm; }
};

// Temperature-softmax kernel: w = softmax(-p * d) with d_i = |q - x_i| + eps.
// Max-subtracted, so the normalizer is always >= 1; intermediate values are
// rounded to `prec` after every step to model storage precision.
InterpResult interp_softmax(const double q[2], const Tensor& coords, const Tensor& feats,
                            std::span<const int64_t> nbrs, double p, double eps, Precision prec);

// Legacy kernel: unnormalized w~_i = d_i^(-p), evaluated literally (no
// rescaling is possible), then normalized. Overflow and zero-normalizer
// conditions are reported in the result rather than thrown.
InterpResult interp_invpow(const double q[2], const Tensor& coords, const Tensor& feats,
                           std::span<const int64_t> nbrs, double p, double eps, Precision prec);

struct InterpGrads {
    std::vector<double> df; // K x D, row per neighbor
    double dp = 0.0;
    double dq[2] = {0.0, 0.0};
};

// Analytic backward of interp_softmax (b64 math). The distance derivative at
// an exact query/key coincidence uses the zero subgradient.
InterpGrads interp_backward(const double q[2], const Tensor& coords, const Tensor& feats,
                            std::span<const int64_t> nbrs, double p, double eps,
                            std::span<const double> cotangent);

// Same contract for the inverse-power kernel (b64 math). Only meaningful in
// the regime where the forward does not overflow.
InterpGrads interp_invpow_backward(const double q[2], const Tensor& coords, const Tensor& feats,
                                   std::span<const int64_t> nbrs, double p, double eps,
                                   std::span<const double> cotangent);

// Tape op: rows of the output are softmax interpolations of key features at
// the query locations. Inputs: {feats NxD, p 1x1, queries Qx2}. The neighbor
// lists are frozen at construction; gradients flow through feature values,
// the temperature, and the query coordinates, not through neighbor choice.
std::shared_ptr<CustomOp> make_interp_op(Tensor key_coords, NeighborIndex nbrs, double eps = kInterpEps);

struct ProbeCell {
    std::string kernel;
    double p = 0.0;
    double d_min = 0.0;
    double d_max = 0.0;
    Precision prec = Precision::b32;
    double failure_rate = 0.0;
};

// Monte-Carlo stress grid over (kernel, p, distance range): fraction of random
// K=8 instances whose weights go non-finite or lose the normalizer.
std::vector<ProbeCell> stability_probe(std::span<const double> p_values,
                                       std::span<const std::pair<double, double>> d_ranges,
                                       Precision prec, int trials = 1000, uint64_t seed = 1);

} // namespace affmae
