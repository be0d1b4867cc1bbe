#pragma once

#include <memory>
#include <string>
#include <vector>

#include "affmae/tensor.hpp"

namespace affmae {

// Learnable value with a persistent gradient accumulator. The accumulator is
// zeroed at the start of each optimizer step; tape backward adds into it.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
        // Gradients stay at working precision: b16emu values get b32 grads.
        Precision gp = value.precision() == Precision::b16emu ? Precision::b32 : value.precision();
        grad = Tensor::zeros(value.dims(), gp);
    }
    void zero_grad() { grad.fill(0.0); }
};

class Tape;

// Hook for module-level fused ops (attention, interpolation, merge pooling).
// backward() receives the cotangent and must accumulate into in_grads; a null
// entry means that input does not need a gradient.
struct CustomOp {
    virtual ~CustomOp() = default;
    virtual std::string name() const = 0;
    virtual Tensor forward(const std::vector<const Tensor*>& in) = 0;
    virtual void backward(const Tensor& out_grad, const std::vector<const Tensor*>& in,
                          const std::vector<Tensor*>& in_grads) = 0;
};

enum class Op : uint8_t {
    input,
    param,
    matmul,
    add,
    mul,
    mul_col,
    scale,
    add_row,
    softmax_rows,
    layer_norm,
    gelu,
    sigmoid,
    gather_rows,
    scatter_add_rows,
    concat_cols,
    repeat_row,
    reduce_sum,
    reduce_mean,
    mse,
    custom,
};

struct TapeNode {
    Op op;
    std::vector<int> in;
    Tensor value;
    Tensor grad; // allocated lazily during backward
    bool needs_grad = false;
    bool grad_live = false;
    double c = 0.0;
    std::vector<int64_t> idx;
    int64_t n = 0;
    Parameter* param = nullptr;
    std::shared_ptr<CustomOp> fused;
};

// Eager reverse-mode tape over a fixed op set. Nodes are appended in
// evaluation order, which is also a valid topological order, so backward is a
// single reverse sweep visiting each node once. All nodes share the tape's
// precision mode; evaluation order is fixed, so results are bit-reproducible
// within a mode.
class Tape {
public:
    explicit Tape(Precision prec = Precision::b32) : prec_(prec) {}

    Precision precision() const { return prec_; }

    int input(Tensor v);                            // constant leaf
    int leaf(Tensor v);                             // differentiable leaf (grad_check inputs)
    int param(Parameter& p);                        // leaf bound to a Parameter

    int matmul(int a, int b);                       // (m,k)x(k,n)
    int add(int a, int b);                          // elementwise
    int mul(int a, int b);                          // elementwise
    int mul_col(int x, int s);                      // (n,d) * (n,1), broadcast over columns
    int scale(int a, double c);
    int add_row(int x, int b);                      // (n,d) + (1,d)
    int softmax_rows(int a);                        // stable, max-subtracted, last dim
    int layer_norm(int x, int gamma, int beta);     // per row, eps 1e-5
    int gelu(int a);                                // exact erf form
    int sigmoid(int a);
    int gather_rows(int x, std::vector<int64_t> idx);
    int scatter_add_rows(int x, std::vector<int64_t> idx, int64_t out_rows);
    int concat_cols(int a, int b);
    int repeat_row(int v, int64_t n);               // (1,d) -> (n,d)
    int reduce_sum(int a);                          // -> scalar
    int reduce_mean(int a);                         // -> scalar
    int mse(int a, int b);                          // mean squared error -> scalar
    int custom(std::shared_ptr<CustomOp> op, std::vector<int> inputs);

    const Tensor& value(int id) const { return nodes_[size_t(id)].value; }
    const Tensor& grad(int id) const;
    bool has_grad(int id) const { return nodes_[size_t(id)].grad_live; }
    const TapeNode& node(int id) const { return nodes_[size_t(id)]; }
    size_t size() const { return nodes_.size(); }

    // Seeds the (scalar) root with 1 and sweeps the tape in reverse, adding
    // leaf gradients into their Parameters.
    void backward(int root);

private:
    int push(TapeNode n);
    Tensor& grad_buf(int id);
    void check_prec(const Tensor& t) const;

    Precision prec_;
    std::vector<TapeNode> nodes_;
};

} // namespace affmae
