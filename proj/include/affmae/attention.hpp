#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "affmae/geometry.hpp"
#include "affmae/tape.hpp"
#include "affmae/tensor.hpp"

namespace affmae {

// Relative-position bias: per head, a 2-layer tanh perceptron mapping the
// patch-normalized offset (dx/patch, dy/patch) to a scalar, plus a learned
// scalar for the blank slot. tanh keeps the output bounded for any offset.
struct BiasNet {
    int heads = 0;
    int hidden = 0;
    double patch = 8.0;
    Tensor w1;    // h x (2*hidden)
    Tensor b1;    // h x hidden
    Tensor w2;    // h x hidden
    Tensor b2;    // h x 1
    Tensor blank; // h x 1

    static BiasNet init(int heads, int hidden, double patch, uint64_t seed,
                        Precision prec = Precision::b32);
    double eval(int head, double dx, double dy) const;
};

// Everything one neighborhood-attention call reads. q/k/v rows are laid out
// as heads*head_dim contiguous values per token; blank_k/blank_v hold one row
// per head.
struct AttnCtx {
    const Tensor* q = nullptr;
    const Tensor* k = nullptr;
    const Tensor* v = nullptr;
    const Tensor* blank_k = nullptr;
    const Tensor* blank_v = nullptr;
    const Tensor* coords = nullptr; // N x 2, for bias offsets
    const NeighborIndex* nbr = nullptr;
    const BiasNet* bias = nullptr;
    int heads = 1;
    int head_dim = 1;

    int64_t tokens() const { return q->rows(); }
    void validate() const;
};

// Materialized reference: per query and head, the full score row over valid
// neighbor slots plus the blank slot, max-subtracted softmax, weighted sum.
Tensor nbhd_attn_naive(const AttnCtx& ctx);

// Online-softmax equivalent over fixed 16-slot tiles; the running max,
// normalizer and accumulator live in b32 for b32 inputs (b64 inputs keep b64
// accumulation for test oracles). half_io rounds q/k/v and the blank rows to
// binary16 on entry and the output on exit, with b32 accumulation inside.
Tensor nbhd_attn_streaming(const AttnCtx& ctx, bool half_io = false);

// Softmax row for one query/head from the naive path: M entries for real
// slots (0 where padded) followed by one blank-slot entry.
std::vector<double> nbhd_attn_weights(const AttnCtx& ctx, int64_t query, int head);

struct AttnGrads {
    Tensor dq, dk, dv;         // match q/k/v
    Tensor dblank_k, dblank_v; // h x d
    Tensor dw1, db1, dw2, db2, dblank;
};

// Hand-derived softmax-attention backward restricted to neighborhood slots.
// Key/value gradients scatter-add in query order (deterministic).
AttnGrads nbhd_attn_backward(const AttnCtx& ctx, const Tensor& cotangent);

// Closed forms used by the scaling study. With M' = M+1 slots (blank
// included): score dot products 2*N*M'*h*d, weighted sum 2*N*M'*h*d, softmax
// bookkeeping (max scan, bias add, exp, normalizer add, divide) 6*N*M'*h.
uint64_t flop_count_attn(int64_t n, int64_t m, int64_t h, int64_t d);
// Dense comparator: every token attends to all N tokens, no blank slot.
uint64_t flop_count_attn_dense(int64_t n, int64_t h, int64_t d);

// Tape op. Inputs, in order:
//   {q, k, v, blank_k, blank_v, bias.w1, bias.b1, bias.w2, bias.b2, bias.blank}
// q/k/v are N x (heads*head_dim); output has the same shape as q.
std::shared_ptr<CustomOp> make_attn_op(Tensor coords, NeighborIndex nbr, int heads, int head_dim,
                                       int bias_hidden, double patch, bool streaming = true,
                                       bool half_io = false);

} // namespace affmae
