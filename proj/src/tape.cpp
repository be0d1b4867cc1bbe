#include "affmae/tape.hpp"

#include <cmath>
#include <cstddef>

namespace affmae {
namespace {

template <typename T>
std::span<T> buf(Tensor& t);
template <>
std::span<float> buf<float>(Tensor& t) { return t.f32(); }
template <>
std::span<double> buf<double>(Tensor& t) { return t.f64(); }

template <typename T>
std::span<const T> cbuf(const Tensor& t);
template <>
std::span<const float> cbuf<float>(const Tensor& t) { return t.f32(); }
template <>
std::span<const double> cbuf<double>(const Tensor& t) { return t.f64(); }

template <typename T>
void matmul_kernel(std::span<const T> a, std::span<const T> b, std::span<T> c,
                   int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        T* ci = c.data() + i * n;
        for (int64_t j = 0; j < n; ++j) ci[j] = T(0);
        for (int64_t p = 0; p < k; ++p) {
            T av = a[size_t(i * k + p)];
            const T* bp = b.data() + p * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// da += g . b^T, shapes g: (m,c), b: (k,c), da: (m,k)
template <typename T>
void matmul_acc_nt(std::span<const T> g, std::span<const T> b, std::span<T> da,
                   int64_t m, int64_t k, int64_t c) {
    for (int64_t i = 0; i < m; ++i) {
        const T* gi = g.data() + i * c;
        T* di = da.data() + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const T* bp = b.data() + p * c;
            T s = T(0);
            for (int64_t j = 0; j < c; ++j) s += gi[j] * bp[j];
            di[p] += s;
        }
    }
}

// db += a^T . g, shapes a: (m,k), g: (m,c), db: (k,c)
template <typename T>
void matmul_acc_tn(std::span<const T> a, std::span<const T> g, std::span<T> db,
                   int64_t m, int64_t k, int64_t c) {
    for (int64_t i = 0; i < m; ++i) {
        const T* ai = a.data() + i * k;
        const T* gi = g.data() + i * c;
        for (int64_t p = 0; p < k; ++p) {
            T av = ai[p];
            if (av == T(0)) continue;
            T* dp = db.data() + p * c;
            for (int64_t j = 0; j < c; ++j) dp[j] += av * gi[j];
        }
    }
}

template <typename T>
void softmax_rows_kernel(std::span<const T> x, std::span<T> y, int64_t rows, int64_t cols) {
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x.data() + r * cols;
        T* yr = y.data() + r * cols;
        T m = xr[0];
        for (int64_t c = 1; c < cols; ++c) m = xr[c] > m ? xr[c] : m;
        T s = T(0);
        for (int64_t c = 0; c < cols; ++c) {
            yr[c] = std::exp(xr[c] - m);
            s += yr[c];
        }
        for (int64_t c = 0; c < cols; ++c) yr[c] /= s;
    }
}

constexpr double kLnEps = 1e-5;

template <typename T>
void layer_norm_kernel(std::span<const T> x, std::span<const T> gamma, std::span<const T> beta,
                       std::span<T> y, int64_t rows, int64_t cols) {
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x.data() + r * cols;
        T* yr = y.data() + r * cols;
        T mu = T(0);
        for (int64_t c = 0; c < cols; ++c) mu += xr[c];
        mu /= T(cols);
        T var = T(0);
        for (int64_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
        var /= T(cols);
        T inv = T(1) / std::sqrt(var + T(kLnEps));
        for (int64_t c = 0; c < cols; ++c) yr[c] = gamma[size_t(c)] * ((xr[c] - mu) * inv) + beta[size_t(c)];
    }
}

template <typename T>
T gelu_fwd(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(0.70710678118654752440)));
}

template <typename T>
T gelu_bwd(T x) {
    T cdf = T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440)));
    T pdf = T(0.39894228040143267794) * std::exp(T(-0.5) * x * x);
    return cdf + x * pdf;
}

} // namespace

const Tensor& Tape::grad(int id) const {
    const TapeNode& n = nodes_[size_t(id)];
    if (!n.grad_live) throw NumericError("tape: gradient not populated for node " + std::to_string(id));
    return n.grad;
}

int Tape::push(TapeNode n) {
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
}

void Tape::check_prec(const Tensor& t) const {
    if (t.precision() != prec_)
        throw ConfigError("tape: tensor precision " + std::string(precision_name(t.precision())) +
                          " does not match tape precision " + precision_name(prec_));
}

Tensor& Tape::grad_buf(int id) {
    TapeNode& n = nodes_[size_t(id)];
    if (!n.grad_live) {
        Precision gp = prec_ == Precision::b16emu ? Precision::b32 : prec_;
        n.grad = Tensor::zeros(n.value.dims(), gp);
        n.grad_live = true;
    }
    return n.grad;
}

int Tape::input(Tensor v) {
    check_prec(v);
    TapeNode n;
    n.op = Op::input;
    n.value = std::move(v);
    n.needs_grad = false;
    return push(std::move(n));
}

int Tape::leaf(Tensor v) {
    check_prec(v);
    TapeNode n;
    n.op = Op::input;
    n.value = std::move(v);
    n.needs_grad = true;
    return push(std::move(n));
}

int Tape::param(Parameter& p) {
    check_prec(p.value);
    TapeNode n;
    n.op = Op::param;
    n.value = p.value;
    n.needs_grad = true;
    n.param = &p;
    return push(std::move(n));
}

namespace {
void round_if_b16(Tensor& t) {
    if (t.precision() != Precision::b16emu) return;
    for (float& v : t.f32()) v = round_b16_scalar(v);
}
} // namespace

int Tape::matmul(int a, int b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.ndim() != 2 || B.ndim() != 2 || A.dim(1) != B.dim(0))
        throw ConfigError("matmul: bad shapes " + A.dims_str() + " x " + B.dims_str());
    TapeNode n;
    n.op = Op::matmul;
    n.in = {a, b};
    n.value = Tensor::zeros({A.dim(0), B.dim(1)}, prec_);
    if (prec_ == Precision::b64)
        matmul_kernel<double>(cbuf<double>(A), cbuf<double>(B), buf<double>(n.value), A.dim(0), A.dim(1), B.dim(1));
    else
        matmul_kernel<float>(cbuf<float>(A), cbuf<float>(B), buf<float>(n.value), A.dim(0), A.dim(1), B.dim(1));
    round_if_b16(n.value);
    n.needs_grad = nodes_[size_t(a)].needs_grad || nodes_[size_t(b)].needs_grad;
    return push(std::move(n));
}

int Tape::add(int a, int b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require_dims(A.same_dims(B), "add", A, B);
    TapeNode n;
    n.op = Op::add;
    n.in = {a, b};
    n.value = Tensor::zeros(A.dims(), prec_);
    for (int64_t i = 0; i < A.numel(); ++i) n.value.set(i, A.get(i) + B.get(i));
    n.needs_grad = nodes_[size_t(a)].needs_grad || nodes_[size_t(b)].needs_grad;
    return push(std::move(n));
}

int Tape::mul(int a, int b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require_dims(A.same_dims(B), "mul", A, B);
    TapeNode n;
    n.op = Op::mul;
    n.in = {a, b};
    n.value = Tensor::zeros(A.dims(), prec_);
    for (int64_t i = 0; i < A.numel(); ++i) n.value.set(i, A.get(i) * B.get(i));
    n.needs_grad = nodes_[size_t(a)].needs_grad || nodes_[size_t(b)].needs_grad;
    return push(std::move(n));
}

int Tape::mul_col(int x, int s) {
    const Tensor& X = value(x);
    const Tensor& S = value(s);
    if (X.ndim() != 2 || S.ndim() != 2 || S.dim(1) != 1 || S.dim(0) != X.dim(0))
        throw ConfigError("mul_col: bad shapes " + X.dims_str() + " x " + S.dims_str());
    TapeNode n;
    n.op = Op::mul_col;
    n.in = {x, s};
    n.value = Tensor::zeros(X.dims(), prec_);
    int64_t d = X.dim(1);
    for (int64_t r = 0; r < X.dim(0); ++r)
        for (int64_t c = 0; c < d; ++c) n.value.set(r * d + c, X.get(r * d + c) * S.get(r));
    n.needs_grad = nodes_[size_t(x)].needs_grad || nodes_[size_t(s)].needs_grad;
    return push(std::move(n));
}

int Tape::scale(int a, double c) {
    const Tensor& A = value(a);
    TapeNode n;
    n.op = Op::scale;
    n.in = {a};
    n.c = c;
    n.value = Tensor::zeros(A.dims(), prec_);
    for (int64_t i = 0; i < A.numel(); ++i) n.value.set(i, A.get(i) * c);
    n.needs_grad = nodes_[size_t(a)].needs_grad;
    return push(std::move(n));
}

int Tape::add_row(int x, int b) {
    const Tensor& X = value(x);
    const Tensor& B = value(b);
    if (X.ndim() != 2 || B.ndim() != 2 || B.dim(0) != 1 || B.dim(1) != X.dim(1))
        throw ConfigError("add_row: bad shapes " + X.dims_str() + " + " + B.dims_str());
    TapeNode n;
    n.op = Op::add_row;
    n.in = {x, b};
    n.value = Tensor::zeros(X.dims(), prec_);
    int64_t d = X.dim(1);
    for (int64_t r = 0; r < X.dim(0); ++r)
        for (int64_t c = 0; c < d; ++c) n.value.set(r * d + c, X.get(r * d + c) + B.get(c));
    n.needs_grad = nodes_[size_t(x)].needs_grad || nodes_[size_t(b)].needs_grad;
    return push(std::move(n));
}

int Tape::softmax_rows(int a) {
    const Tensor& A = value(a);
    if (A.ndim() != 2) throw ConfigError("softmax_rows: want 2d, got " + A.dims_str());
    TapeNode n;
    n.op = Op::softmax_rows;
    n.in = {a};
    n.value = Tensor::zeros(A.dims(), prec_);
    if (prec_ == Precision::b64)
        softmax_rows_kernel<double>(cbuf<double>(A), buf<double>(n.value), A.dim(0), A.dim(1));
    else
        softmax_rows_kernel<float>(cbuf<float>(A), buf<float>(n.value), A.dim(0), A.dim(1));
    round_if_b16(n.value);
    n.needs_grad = nodes_[size_t(a)].needs_grad;
    return push(std::move(n));
}

int Tape::layer_norm(int x, int gamma, int beta) {
    const Tensor& X = value(x);
    const Tensor& G = value(gamma);
    const Tensor& B = value(beta);
    if (X.ndim() != 2 || G.numel() != X.dim(1) || B.numel() != X.dim(1))
        throw ConfigError("layer_norm: bad shapes " + X.dims_str() + ", " + G.dims_str() + ", " + B.dims_str());
    TapeNode n;
    n.op = Op::layer_norm;
    n.in = {x, gamma, beta};
    n.value = Tensor::zeros(X.dims(), prec_);
    if (prec_ == Precision::b64)
        layer_norm_kernel<double>(cbuf<double>(X), cbuf<double>(G), cbuf<double>(B), buf<double>(n.value),
                                  X.dim(0), X.dim(1));
    else
        layer_norm_kernel<float>(cbuf<float>(X), cbuf<float>(G), cbuf<float>(B), buf<float>(n.value),
                                 X.dim(0), X.dim(1));
    round_if_b16(n.value);
    n.needs_grad = nodes_[size_t(x)].needs_grad || nodes_[size_t(gamma)].needs_grad ||
                   nodes_[size_t(beta)].needs_grad;
    return push(std::move(n));
}

int Tape::gelu(int a) {
    const Tensor& A = value(a);
    TapeNode n;
    n.op = Op::gelu;
    n.in = {a};
    n.value = Tensor::zeros(A.dims(), prec_);
    if (prec_ == Precision::b64) {
        auto x = cbuf<double>(A);
        auto y = buf<double>(n.value);
        for (size_t i = 0; i < x.size(); ++i) y[i] = gelu_fwd(x[i]);
    } else {
        auto x = cbuf<float>(A);
        auto y = buf<float>(n.value);
        for (size_t i = 0; i < x.size(); ++i) y[i] = gelu_fwd(x[i]);
    }
    round_if_b16(n.value);
    n.needs_grad = nodes_[size_t(a)].needs_grad;
    return push(std::move(n));
}

int Tape::sigmoid(int a) {
    const Tensor& A = value(a);
    TapeNode n;
    n.op = Op::sigmoid;
    n.in = {a};
    n.value = Tensor::zeros(A.dims(), prec_);
    for (int64_t i = 0; i < A.numel(); ++i) n.value.set(i, 1.0 / (1.0 + std::exp(-A.get(i))));
    n.needs_grad = nodes_[size_t(a)].needs_grad;
    return push(std::move(n));
}

int Tape::gather_rows(int x, std::vector<int64_t> idx) {
    const Tensor& X = value(x);
    if (X.ndim() != 2) throw ConfigError("gather_rows: want 2d, got " + X.dims_str());
    for (int64_t i : idx)
        if (i < 0 || i >= X.dim(0)) throw ConfigError("gather_rows: index out of range");
    TapeNode n;
    n.op = Op::gather_rows;
    n.in = {x};
    int64_t d = X.dim(1);
    n.value = Tensor::zeros({int64_t(idx.size()), d}, prec_);
    for (size_t i = 0; i < idx.size(); ++i)
        for (int64_t c = 0; c < d; ++c) n.value.set(int64_t(i) * d + c, X.get(idx[i] * d + c));
    n.idx = std::move(idx);
    n.needs_grad = nodes_[size_t(x)].needs_grad;
    return push(std::move(n));
}

int Tape::scatter_add_rows(int x, std::vector<int64_t> idx, int64_t out_rows) {
    const Tensor& X = value(x);
    if (X.ndim() != 2 || int64_t(idx.size()) != X.dim(0))
        throw ConfigError("scatter_add_rows: index count must match rows of " + X.dims_str());
    for (int64_t i : idx)
        if (i < 0 || i >= out_rows) throw ConfigError("scatter_add_rows: index out of range");
    TapeNode n;
    n.op = Op::scatter_add_rows;
    n.in = {x};
    int64_t d = X.dim(1);
    n.value = Tensor::zeros({out_rows, d}, prec_);
    for (size_t i = 0; i < idx.size(); ++i)
        for (int64_t c = 0; c < d; ++c)
            n.value.set(idx[i] * d + c, n.value.get(idx[i] * d + c) + X.get(int64_t(i) * d + c));
    n.idx = std::move(idx);
    n.n = out_rows;
    n.needs_grad = nodes_[size_t(x)].needs_grad;
    return push(std::move(n));
}

int Tape::concat_cols(int a, int b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.ndim() != 2 || B.ndim() != 2 || A.dim(0) != B.dim(0))
        throw ConfigError("concat_cols: bad shapes " + A.dims_str() + " | " + B.dims_str());
    TapeNode n;
    n.op = Op::concat_cols;
    n.in = {a, b};
    int64_t da = A.dim(1), db = B.dim(1);
    n.value = Tensor::zeros({A.dim(0), da + db}, prec_);
    for (int64_t r = 0; r < A.dim(0); ++r) {
        for (int64_t c = 0; c < da; ++c) n.value.set(r * (da + db) + c, A.get(r * da + c));
        for (int64_t c = 0; c < db; ++c) n.value.set(r * (da + db) + da + c, B.get(r * db + c));
    }
    n.needs_grad = nodes_[size_t(a)].needs_grad || nodes_[size_t(b)].needs_grad;
    return push(std::move(n));
}

int Tape::repeat_row(int v, int64_t count) {
    const Tensor& V = value(v);
    if (V.ndim() != 2 || V.dim(0) != 1) throw ConfigError("repeat_row: want (1,d), got " + V.dims_str());
    TapeNode n;
    n.op = Op::repeat_row;
    n.in = {v};
    n.n = count;
    int64_t d = V.dim(1);
    n.value = Tensor::zeros({count, d}, prec_);
    for (int64_t r = 0; r < count; ++r)
        for (int64_t c = 0; c < d; ++c) n.value.set(r * d + c, V.get(c));
    n.needs_grad = nodes_[size_t(v)].needs_grad;
    return push(std::move(n));
}

int Tape::reduce_sum(int a) {
    const Tensor& A = value(a);
    TapeNode n;
    n.op = Op::reduce_sum;
    n.in = {a};
    double s = 0.0;
    for (int64_t i = 0; i < A.numel(); ++i) s += A.get(i);
    n.value = Tensor::scalar(s, prec_);
    n.needs_grad = nodes_[size_t(a)].needs_grad;
    return push(std::move(n));
}

int Tape::reduce_mean(int a) {
    const Tensor& A = value(a);
    TapeNode n;
    n.op = Op::reduce_mean;
    n.in = {a};
    double s = 0.0;
    for (int64_t i = 0; i < A.numel(); ++i) s += A.get(i);
    n.value = Tensor::scalar(s / double(A.numel()), prec_);
    n.needs_grad = nodes_[size_t(a)].needs_grad;
    return push(std::move(n));
}

int Tape::mse(int a, int b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require_dims(A.same_dims(B), "mse", A, B);
    TapeNode n;
    n.op = Op::mse;
    n.in = {a, b};
    double s = 0.0;
    for (int64_t i = 0; i < A.numel(); ++i) {
        double d = A.get(i) - B.get(i);
        s += d * d;
    }
    n.value = Tensor::scalar(s / double(A.numel()), prec_);
    n.needs_grad = nodes_[size_t(a)].needs_grad || nodes_[size_t(b)].needs_grad;
    return push(std::move(n));
}

int Tape::custom(std::shared_ptr<CustomOp> op, std::vector<int> inputs) {
    TapeNode n;
    n.op = Op::custom;
    n.in = inputs;
    std::vector<const Tensor*> in_vals;
    in_vals.reserve(inputs.size());
    bool ng = false;
    for (int id : inputs) {
        in_vals.push_back(&value(id));
        ng = ng || nodes_[size_t(id)].needs_grad;
    }
    n.value = op->forward(in_vals);
    check_prec(n.value);
    n.fused = std::move(op);
    n.needs_grad = ng;
    return push(std::move(n));
}

void Tape::backward(int root) {
    TapeNode& r = nodes_[size_t(root)];
    if (r.value.numel() != 1) throw ConfigError("backward: root must be scalar, got " + r.value.dims_str());
    if (!r.needs_grad) throw ConfigError("backward: root has no differentiable ancestors");
    // stale buffers from an earlier sweep would double-count; only Parameter
    // grads are meant to accumulate across calls
    for (TapeNode& n : nodes_)
        if (n.grad_live) n.grad.fill(0.0);
    grad_buf(root).fill(1.0);

    for (int id = root; id >= 0; --id) {
        TapeNode& n = nodes_[size_t(id)];
        if (!n.grad_live || !n.needs_grad) continue;
        const Tensor& g = n.grad;
        auto ng = [&](int k) { return nodes_[size_t(n.in[size_t(k)])].needs_grad; };
        auto gb = [&](int k) -> Tensor& { return grad_buf(n.in[size_t(k)]); };
        auto val = [&](int k) -> const Tensor& { return value(n.in[size_t(k)]); };

        switch (n.op) {
        case Op::input:
            break;
        case Op::param:
            for (int64_t i = 0; i < g.numel(); ++i)
                n.param->grad.set(i, n.param->grad.get(i) + g.get(i));
            break;
        case Op::matmul: {
            const Tensor& A = val(0);
            const Tensor& B = val(1);
            int64_t m = A.dim(0), k = A.dim(1), c = B.dim(1);
            bool f64 = g.is64();
            if (ng(0)) {
                Tensor& da = gb(0); // dA += g . B^T
                if (f64)
                    matmul_acc_nt<double>(cbuf<double>(g), cbuf<double>(B), buf<double>(da), m, k, c);
                else
                    matmul_acc_nt<float>(cbuf<float>(g), cbuf<float>(B), buf<float>(da), m, k, c);
            }
            if (ng(1)) {
                Tensor& db = gb(1); // dB += A^T . g
                if (f64)
                    matmul_acc_tn<double>(cbuf<double>(A), cbuf<double>(g), buf<double>(db), m, k, c);
                else
                    matmul_acc_tn<float>(cbuf<float>(A), cbuf<float>(g), buf<float>(db), m, k, c);
            }
            break;
        }
        case Op::add:
            for (int k2 = 0; k2 < 2; ++k2)
                if (ng(k2)) {
                    Tensor& d = gb(k2);
                    for (int64_t i = 0; i < g.numel(); ++i) d.set(i, d.get(i) + g.get(i));
                }
            break;
        case Op::mul:
            for (int k2 = 0; k2 < 2; ++k2)
                if (ng(k2)) {
                    Tensor& d = gb(k2);
                    const Tensor& o = val(1 - k2);
                    for (int64_t i = 0; i < g.numel(); ++i) d.set(i, d.get(i) + g.get(i) * o.get(i));
                }
            break;
        case Op::mul_col: {
            const Tensor& X = val(0);
            const Tensor& S = val(1);
            int64_t d = X.dim(1);
            if (ng(0)) {
                Tensor& dx = gb(0);
                for (int64_t r2 = 0; r2 < X.dim(0); ++r2)
                    for (int64_t c = 0; c < d; ++c)
                        dx.set(r2 * d + c, dx.get(r2 * d + c) + g.get(r2 * d + c) * S.get(r2));
            }
            if (ng(1)) {
                Tensor& ds = gb(1);
                for (int64_t r2 = 0; r2 < X.dim(0); ++r2) {
                    double s = 0.0;
                    for (int64_t c = 0; c < d; ++c) s += g.get(r2 * d + c) * X.get(r2 * d + c);
                    ds.set(r2, ds.get(r2) + s);
                }
            }
            break;
        }
        case Op::scale:
            if (ng(0)) {
                Tensor& d = gb(0);
                for (int64_t i = 0; i < g.numel(); ++i) d.set(i, d.get(i) + g.get(i) * n.c);
            }
            break;
        case Op::add_row: {
            int64_t d = val(0).dim(1);
            if (ng(0)) {
                Tensor& dx = gb(0);
                for (int64_t i = 0; i < g.numel(); ++i) dx.set(i, dx.get(i) + g.get(i));
            }
            if (ng(1)) {
                Tensor& db = gb(1);
                for (int64_t r2 = 0; r2 < val(0).dim(0); ++r2)
                    for (int64_t c = 0; c < d; ++c) db.set(c, db.get(c) + g.get(r2 * d + c));
            }
            break;
        }
        case Op::softmax_rows:
            if (ng(0)) {
                Tensor& dx = gb(0);
                const Tensor& y = n.value;
                int64_t rows = y.dim(0), cols = y.dim(1);
                for (int64_t r2 = 0; r2 < rows; ++r2) {
                    double dot = 0.0;
                    for (int64_t c = 0; c < cols; ++c) dot += g.get(r2 * cols + c) * y.get(r2 * cols + c);
                    for (int64_t c = 0; c < cols; ++c) {
                        double v = y.get(r2 * cols + c) * (g.get(r2 * cols + c) - dot);
                        dx.set(r2 * cols + c, dx.get(r2 * cols + c) + v);
                    }
                }
            }
            break;
        case Op::layer_norm: {
            const Tensor& X = val(0);
            const Tensor& G = val(1);
            int64_t rows = X.dim(0), cols = X.dim(1);
            Tensor* dx = ng(0) ? &gb(0) : nullptr;
            Tensor* dgamma = ng(1) ? &gb(1) : nullptr;
            Tensor* dbeta = ng(2) ? &gb(2) : nullptr;
            for (int64_t r2 = 0; r2 < rows; ++r2) {
                double mu = 0.0;
                for (int64_t c = 0; c < cols; ++c) mu += X.get(r2 * cols + c);
                mu /= double(cols);
                double var = 0.0;
                for (int64_t c = 0; c < cols; ++c) {
                    double d = X.get(r2 * cols + c) - mu;
                    var += d * d;
                }
                var /= double(cols);
                double inv = 1.0 / std::sqrt(var + kLnEps);
                double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                for (int64_t c = 0; c < cols; ++c) {
                    double xh = (X.get(r2 * cols + c) - mu) * inv;
                    double go = g.get(r2 * cols + c);
                    double dxh = go * G.get(c);
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh;
                    if (dgamma) dgamma->set(c, dgamma->get(c) + go * xh);
                    if (dbeta) dbeta->set(c, dbeta->get(c) + go);
                }
                mean_dxh /= double(cols);
                mean_dxh_xh /= double(cols);
                if (dx)
                    for (int64_t c = 0; c < cols; ++c) {
                        double xh = (X.get(r2 * cols + c) - mu) * inv;
                        double dxh = g.get(r2 * cols + c) * G.get(c);
                        double v = inv * (dxh - mean_dxh - xh * mean_dxh_xh);
                        dx->set(r2 * cols + c, dx->get(r2 * cols + c) + v);
                    }
            }
            break;
        }
        case Op::gelu:
            if (ng(0)) {
                Tensor& dx = gb(0);
                const Tensor& X = val(0);
                for (int64_t i = 0; i < g.numel(); ++i)
                    dx.set(i, dx.get(i) + g.get(i) * gelu_bwd(X.get(i)));
            }
            break;
        case Op::sigmoid:
            if (ng(0)) {
                Tensor& dx = gb(0);
                const Tensor& y = n.value;
                for (int64_t i = 0; i < g.numel(); ++i)
                    dx.set(i, dx.get(i) + g.get(i) * y.get(i) * (1.0 - y.get(i)));
            }
            break;
        case Op::gather_rows:
            if (ng(0)) {
                Tensor& dx = gb(0);
                int64_t d = val(0).dim(1);
                for (size_t i = 0; i < n.idx.size(); ++i)
                    for (int64_t c = 0; c < d; ++c)
                        dx.set(n.idx[i] * d + c, dx.get(n.idx[i] * d + c) + g.get(int64_t(i) * d + c));
            }
            break;
        case Op::scatter_add_rows:
            if (ng(0)) {
                Tensor& dx = gb(0);
                int64_t d = val(0).dim(1);
                for (size_t i = 0; i < n.idx.size(); ++i)
                    for (int64_t c = 0; c < d; ++c)
                        dx.set(int64_t(i) * d + c, dx.get(int64_t(i) * d + c) + g.get(n.idx[i] * d + c));
            }
            break;
        case Op::concat_cols: {
            int64_t da = val(0).dim(1), db2 = val(1).dim(1);
            int64_t rows = val(0).dim(0);
            if (ng(0)) {
                Tensor& d = gb(0);
                for (int64_t r2 = 0; r2 < rows; ++r2)
                    for (int64_t c = 0; c < da; ++c)
                        d.set(r2 * da + c, d.get(r2 * da + c) + g.get(r2 * (da + db2) + c));
            }
            if (ng(1)) {
                Tensor& d = gb(1);
                for (int64_t r2 = 0; r2 < rows; ++r2)
                    for (int64_t c = 0; c < db2; ++c)
                        d.set(r2 * db2 + c, d.get(r2 * db2 + c) + g.get(r2 * (da + db2) + da + c));
            }
            break;
        }
        case Op::repeat_row:
            if (ng(0)) {
                Tensor& dv = gb(0);
                int64_t d = val(0).dim(1);
                for (int64_t r2 = 0; r2 < n.n; ++r2)
                    for (int64_t c = 0; c < d; ++c) dv.set(c, dv.get(c) + g.get(r2 * d + c));
            }
            break;
        case Op::reduce_sum:
            if (ng(0)) {
                Tensor& dx = gb(0);
                double go = g.get(0);
                for (int64_t i = 0; i < dx.numel(); ++i) dx.set(i, dx.get(i) + go);
            }
            break;
        case Op::reduce_mean:
            if (ng(0)) {
                Tensor& dx = gb(0);
                double go = g.get(0) / double(dx.numel());
                for (int64_t i = 0; i < dx.numel(); ++i) dx.set(i, dx.get(i) + go);
            }
            break;
        case Op::mse: {
            const Tensor& A = val(0);
            const Tensor& B = val(1);
            double go = g.get(0) * 2.0 / double(A.numel());
            if (ng(0)) {
                Tensor& d = gb(0);
                for (int64_t i = 0; i < A.numel(); ++i)
                    d.set(i, d.get(i) + go * (A.get(i) - B.get(i)));
            }
            if (ng(1)) {
                Tensor& d = gb(1);
                for (int64_t i = 0; i < A.numel(); ++i)
                    d.set(i, d.get(i) - go * (A.get(i) - B.get(i)));
            }
            break;
        }
        case Op::custom: {
            std::vector<const Tensor*> in_vals;
            std::vector<Tensor*> in_grads;
            in_vals.reserve(n.in.size());
            in_grads.reserve(n.in.size());
            for (size_t k = 0; k < n.in.size(); ++k) {
                in_vals.push_back(&value(n.in[k]));
                in_grads.push_back(ng(int(k)) ? &gb(int(k)) : nullptr);
            }
            n.fused->backward(g, in_vals, in_grads);
            break;
        }
        }
    }
}

} // namespace affmae
