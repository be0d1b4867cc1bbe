#include "affmae/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "affmae/rng.hpp"

namespace affmae {

namespace {
constexpr int kTile = 16;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
} // namespace

BiasNet BiasNet::init(int heads, int hidden, double patch, uint64_t seed, Precision prec) {
    BiasNet b;
    b.heads = heads;
    b.hidden = hidden;
    b.patch = patch;
    b.w1 = Tensor::zeros({heads, 2 * hidden}, prec);
    b.b1 = Tensor::zeros({heads, hidden}, prec);
    b.w2 = Tensor::zeros({heads, hidden}, prec);
    b.b2 = Tensor::zeros({heads, 1}, prec);
    b.blank = Tensor::zeros({heads, 1}, prec);
    Rng rng(mix64(seed) ^ 0xb1a5ull);
    double s1 = 1.0 / std::sqrt(2.0), s2 = 1.0 / std::sqrt(double(hidden));
    for (int64_t i = 0; i < b.w1.numel(); ++i) b.w1.set(i, rng.normal() * s1);
    for (int64_t i = 0; i < b.w2.numel(); ++i) b.w2.set(i, rng.normal() * s2);
    return b;
}

double BiasNet::eval(int head, double dx, double dy) const {
    double ox = dx / patch, oy = dy / patch;
    double out = b2.get(head);
    for (int j = 0; j < hidden; ++j) {
        double pre = w1.get(head * 2 * hidden + j) * ox + w1.get(head * 2 * hidden + hidden + j) * oy +
                     b1.get(head * int64_t(hidden) + j);
        out += w2.get(head * int64_t(hidden) + j) * std::tanh(pre);
    }
    return out;
}

void AttnCtx::validate() const {
    if (!q || !k || !v || !blank_k || !blank_v || !coords || !nbr || !bias)
        throw ConfigError("attention: incomplete context");
    int64_t n = q->rows();
    int64_t hd = int64_t(heads) * head_dim;
    if (q->cols() != hd || k->cols() != hd || v->cols() != hd)
        throw ConfigError("attention: q/k/v row width must be heads*head_dim");
    if (k->rows() != n || v->rows() != n)
        throw ConfigError("attention: q/k/v token counts differ");
    if (blank_k->rows() != heads || blank_k->cols() != head_dim || !blank_k->same_dims(*blank_v))
        throw ConfigError("attention: blank rows must be heads x head_dim");
    if (coords->rows() != n || coords->cols() != 2)
        throw ConfigError("attention: coords must be N x 2");
    if (nbr->queries() != n) throw ConfigError("attention: neighbor index count mismatch");
    if (bias->heads != heads) throw ConfigError("attention: bias head count mismatch");
    // rows with zero valid neighbors are fine: the blank slot keeps the
    // softmax populated and the output falls back to blank_v
}

namespace {

// Scores for one (query, head): slot j < M is neighbor j (kNegInf when
// padded), slot M is the blank token. Shared by naive forward and backward.
template <typename T>
void score_row(const AttnCtx& c, int64_t i, int h, std::vector<double>& s) {
    int64_t m = c.nbr->width;
    int64_t hd = int64_t(c.heads) * c.head_dim;
    int d = c.head_dim;
    double inv = 1.0 / std::sqrt(double(d));
    s.assign(size_t(m + 1), kNegInf);
    double qx = c.coords->get(i * 2), qy = c.coords->get(i * 2 + 1);
    for (int64_t j = 0; j < m; ++j) {
        if (!c.nbr->ok(i, j)) continue;
        int64_t key = c.nbr->key(i, j);
        T acc = T(0);
        for (int c2 = 0; c2 < d; ++c2)
            acc += T(c.q->get(i * hd + h * d + c2)) * T(inv) * T(c.k->get(key * hd + h * d + c2));
        double bias = c.bias->eval(h, c.coords->get(key * 2) - qx, c.coords->get(key * 2 + 1) - qy);
        s[size_t(j)] = double(T(double(acc) + bias));
    }
    T acc = T(0);
    for (int c2 = 0; c2 < d; ++c2)
        acc += T(c.q->get(i * hd + h * d + c2)) * T(inv) * T(c.blank_k->get(h * int64_t(d) + c2));
    s[size_t(m)] = double(T(double(acc) + c.bias->blank.get(h)));
}

template <typename T>
void naive_kernel(const AttnCtx& c, Tensor& out) {
    int64_t n = c.tokens(), m = c.nbr->width;
    int64_t hd = int64_t(c.heads) * c.head_dim;
    int d = c.head_dim;
    std::vector<double> s;
    for (int64_t i = 0; i < n; ++i) {
        for (int h = 0; h < c.heads; ++h) {
            score_row<T>(c, i, h, s);
            double mx = *std::max_element(s.begin(), s.end());
            std::vector<T> e(s.size());
            T l = T(0);
            for (size_t j = 0; j < s.size(); ++j) {
                e[j] = s[j] == kNegInf ? T(0) : T(std::exp(T(s[j] - mx)));
                l += e[j];
            }
            for (int c2 = 0; c2 < d; ++c2) {
                T acc = T(0);
                for (int64_t j = 0; j < m; ++j) {
                    if (e[size_t(j)] == T(0)) continue;
                    acc += e[size_t(j)] * T(c.v->get(c.nbr->key(i, j) * hd + h * d + c2));
                }
                acc += e[size_t(m)] * T(c.blank_v->get(h * int64_t(d) + c2));
                out.set(i * hd + h * d + c2, double(acc / l));
            }
        }
    }
}

template <typename T>
void streaming_kernel(const AttnCtx& c, Tensor& out) {
    int64_t n = c.tokens(), m = c.nbr->width;
    int64_t slots = m + 1;
    int64_t hd = int64_t(c.heads) * c.head_dim;
    int d = c.head_dim;
    double inv = 1.0 / std::sqrt(double(d));
    std::vector<T> acc(static_cast<size_t>(d));
    std::vector<double> s(static_cast<size_t>(kTile));
    for (int64_t i = 0; i < n; ++i) {
        double qx = c.coords->get(i * 2), qy = c.coords->get(i * 2 + 1);
        for (int h = 0; h < c.heads; ++h) {
            double run_max = kNegInf; // running max stays in double: exact for both T
            T l = T(0);
            std::fill(acc.begin(), acc.end(), T(0));
            for (int64_t t0 = 0; t0 < slots; t0 += kTile) {
                int64_t tn = std::min<int64_t>(kTile, slots - t0);
                double tile_max = kNegInf;
                for (int64_t j = 0; j < tn; ++j) {
                    int64_t slot = t0 + j;
                    if (slot < m && !c.nbr->ok(i, slot)) {
                        s[size_t(j)] = kNegInf;
                        continue;
                    }
                    T dot = T(0);
                    if (slot < m) {
                        int64_t key = c.nbr->key(i, slot);
                        for (int c2 = 0; c2 < d; ++c2)
                            dot += T(c.q->get(i * hd + h * d + c2)) * T(inv) *
                                   T(c.k->get(key * hd + h * d + c2));
                        double bias = c.bias->eval(h, c.coords->get(key * 2) - qx,
                                                   c.coords->get(key * 2 + 1) - qy);
                        s[size_t(j)] = double(T(double(dot) + bias));
                    } else {
                        for (int c2 = 0; c2 < d; ++c2)
                            dot += T(c.q->get(i * hd + h * d + c2)) * T(inv) *
                                   T(c.blank_k->get(h * int64_t(d) + c2));
                        s[size_t(j)] = double(T(double(dot) + c.bias->blank.get(h)));
                    }
                    tile_max = std::max(tile_max, s[size_t(j)]);
                }
                if (tile_max == kNegInf) continue; // fully padded tile
                double new_max = std::max(run_max, tile_max);
                T corr = run_max == kNegInf ? T(0) : T(std::exp(T(run_max - new_max)));
                l *= corr;
                for (int c2 = 0; c2 < d; ++c2) acc[size_t(c2)] *= corr;
                for (int64_t j = 0; j < tn; ++j) {
                    if (s[size_t(j)] == kNegInf) continue;
                    int64_t slot = t0 + j;
                    T e = T(std::exp(T(s[size_t(j)] - new_max)));
                    l += e;
                    if (slot < m) {
                        int64_t key = c.nbr->key(i, slot);
                        for (int c2 = 0; c2 < d; ++c2)
                            acc[size_t(c2)] += e * T(c.v->get(key * hd + h * d + c2));
                    } else {
                        for (int c2 = 0; c2 < d; ++c2)
                            acc[size_t(c2)] += e * T(c.blank_v->get(h * int64_t(d) + c2));
                    }
                }
                run_max = new_max;
            }
            for (int c2 = 0; c2 < d; ++c2)
                out.set(i * hd + h * d + c2, double(acc[size_t(c2)] / l));
        }
    }
}

} // namespace

Tensor nbhd_attn_naive(const AttnCtx& ctx) {
    ctx.validate();
    Tensor out = Tensor::zeros(ctx.q->dims(), ctx.q->precision());
    if (ctx.q->is64())
        naive_kernel<double>(ctx, out);
    else
        naive_kernel<float>(ctx, out);
    return out;
}

Tensor nbhd_attn_streaming(const AttnCtx& ctx, bool half_io) {
    ctx.validate();
    if (!half_io) {
        Tensor out = Tensor::zeros(ctx.q->dims(), ctx.q->precision());
        if (ctx.q->is64())
            streaming_kernel<double>(ctx, out);
        else
            streaming_kernel<float>(ctx, out);
        return out;
    }
    Tensor q16 = round_b16(*ctx.q), k16 = round_b16(*ctx.k), v16 = round_b16(*ctx.v);
    Tensor bk16 = round_b16(*ctx.blank_k), bv16 = round_b16(*ctx.blank_v);
    AttnCtx c2 = ctx;
    c2.q = &q16;
    c2.k = &k16;
    c2.v = &v16;
    c2.blank_k = &bk16;
    c2.blank_v = &bv16;
    Tensor out = Tensor::zeros({ctx.q->rows(), ctx.q->cols()}, Precision::b32);
    streaming_kernel<float>(c2, out); // b32 accumulation regardless of io width
    return round_b16(out);
}

std::vector<double> nbhd_attn_weights(const AttnCtx& ctx, int64_t query, int head) {
    ctx.validate();
    std::vector<double> s;
    if (ctx.q->is64())
        score_row<double>(ctx, query, head, s);
    else
        score_row<float>(ctx, query, head, s);
    double mx = *std::max_element(s.begin(), s.end());
    std::vector<double> w(s.size(), 0.0);
    double l = 0.0;
    for (size_t j = 0; j < s.size(); ++j) {
        if (s[j] == kNegInf) continue;
        w[j] = std::exp(s[j] - mx);
        l += w[j];
    }
    for (double& x : w) x /= l;
    return w;
}

AttnGrads nbhd_attn_backward(const AttnCtx& ctx, const Tensor& cotangent) {
    ctx.validate();
    if (!cotangent.same_dims(*ctx.q))
        require_dims(cotangent.rows() == ctx.q->rows() && cotangent.cols() == ctx.q->cols(),
                     "attention backward cotangent", cotangent, *ctx.q);

    int64_t n = ctx.tokens(), m = ctx.nbr->width;
    int heads = ctx.heads, d = ctx.head_dim;
    int64_t hd = int64_t(heads) * d;
    const BiasNet& bn = *ctx.bias;
    double inv = 1.0 / std::sqrt(double(d));

    Precision gp = ctx.q->is64() ? Precision::b64 : Precision::b32;
    AttnGrads g;
    g.dq = Tensor::zeros(ctx.q->dims(), gp);
    g.dk = Tensor::zeros(ctx.k->dims(), gp);
    g.dv = Tensor::zeros(ctx.v->dims(), gp);
    g.dblank_k = Tensor::zeros(ctx.blank_k->dims(), gp);
    g.dblank_v = Tensor::zeros(ctx.blank_v->dims(), gp);
    g.dw1 = Tensor::zeros(bn.w1.dims(), gp);
    g.db1 = Tensor::zeros(bn.b1.dims(), gp);
    g.dw2 = Tensor::zeros(bn.w2.dims(), gp);
    g.db2 = Tensor::zeros(bn.b2.dims(), gp);
    g.dblank = Tensor::zeros(bn.blank.dims(), gp);

    std::vector<double> s, w, dwv;
    for (int64_t i = 0; i < n; ++i) {
        double qx = ctx.coords->get(i * 2), qy = ctx.coords->get(i * 2 + 1);
        for (int h = 0; h < heads; ++h) {
            // forward softmax in b64 (backward is always full-precision math)
            score_row<double>(ctx, i, h, s);
            double mx = *std::max_element(s.begin(), s.end());
            w.assign(s.size(), 0.0);
            double l = 0.0;
            for (size_t j = 0; j < s.size(); ++j) {
                if (s[j] == kNegInf) continue;
                w[j] = std::exp(s[j] - mx);
                l += w[j];
            }
            for (double& x : w) x /= l;

            // dv and dw
            dwv.assign(s.size(), 0.0);
            double wdot = 0.0;
            for (size_t j = 0; j < s.size(); ++j) {
                if (w[j] == 0.0 && s[j] == kNegInf) continue;
                int64_t slot = int64_t(j);
                double acc = 0.0;
                if (slot < m) {
                    int64_t key = ctx.nbr->key(i, slot);
                    for (int c2 = 0; c2 < d; ++c2) {
                        double go = cotangent.get(i * hd + h * d + c2);
                        g.dv.set(key * hd + h * d + c2, g.dv.get(key * hd + h * d + c2) + w[j] * go);
                        acc += go * ctx.v->get(key * hd + h * d + c2);
                    }
                } else {
                    for (int c2 = 0; c2 < d; ++c2) {
                        double go = cotangent.get(i * hd + h * d + c2);
                        g.dblank_v.set(h * int64_t(d) + c2,
                                       g.dblank_v.get(h * int64_t(d) + c2) + w[j] * go);
                        acc += go * ctx.blank_v->get(h * int64_t(d) + c2);
                    }
                }
                dwv[j] = acc;
                wdot += w[j] * acc;
            }

            // ds -> dq, dk, bias net
            for (size_t j = 0; j < s.size(); ++j) {
                if (s[j] == kNegInf) continue;
                double ds = w[j] * (dwv[j] - wdot);
                if (ds == 0.0) continue;
                int64_t slot = int64_t(j);
                if (slot < m) {
                    int64_t key = ctx.nbr->key(i, slot);
                    for (int c2 = 0; c2 < d; ++c2) {
                        g.dq.set(i * hd + h * d + c2,
                                 g.dq.get(i * hd + h * d + c2) +
                                     ds * inv * ctx.k->get(key * hd + h * d + c2));
                        g.dk.set(key * hd + h * d + c2,
                                 g.dk.get(key * hd + h * d + c2) +
                                     ds * inv * ctx.q->get(i * hd + h * d + c2));
                    }
                    double ox = (ctx.coords->get(key * 2) - qx) / bn.patch;
                    double oy = (ctx.coords->get(key * 2 + 1) - qy) / bn.patch;
                    for (int j2 = 0; j2 < bn.hidden; ++j2) {
                        double pre = bn.w1.get(h * 2 * int64_t(bn.hidden) + j2) * ox +
                                     bn.w1.get(h * 2 * int64_t(bn.hidden) + bn.hidden + j2) * oy +
                                     bn.b1.get(h * int64_t(bn.hidden) + j2);
                        double th = std::tanh(pre);
                        double w2v = bn.w2.get(h * int64_t(bn.hidden) + j2);
                        double dpre = ds * w2v * (1.0 - th * th);
                        g.dw2.set(h * int64_t(bn.hidden) + j2,
                                  g.dw2.get(h * int64_t(bn.hidden) + j2) + ds * th);
                        g.dw1.set(h * 2 * int64_t(bn.hidden) + j2,
                                  g.dw1.get(h * 2 * int64_t(bn.hidden) + j2) + dpre * ox);
                        g.dw1.set(h * 2 * int64_t(bn.hidden) + bn.hidden + j2,
                                  g.dw1.get(h * 2 * int64_t(bn.hidden) + bn.hidden + j2) + dpre * oy);
                        g.db1.set(h * int64_t(bn.hidden) + j2,
                                  g.db1.get(h * int64_t(bn.hidden) + j2) + dpre);
                    }
                    g.db2.set(h, g.db2.get(h) + ds);
                } else {
                    for (int c2 = 0; c2 < d; ++c2) {
                        g.dq.set(i * hd + h * d + c2,
                                 g.dq.get(i * hd + h * d + c2) +
                                     ds * inv * ctx.blank_k->get(h * int64_t(d) + c2));
                        g.dblank_k.set(h * int64_t(d) + c2,
                                       g.dblank_k.get(h * int64_t(d) + c2) +
                                           ds * inv * ctx.q->get(i * hd + h * d + c2));
                    }
                    g.dblank.set(h, g.dblank.get(h) + ds);
                }
            }
        }
    }
    return g;
}

uint64_t flop_count_attn(int64_t n, int64_t m, int64_t h, int64_t d) {
    if (n < 1 || m < 1 || h < 1 || d < 1) throw ConfigError("flop_count_attn: all args must be positive");
    uint64_t mp = uint64_t(m) + 1;
    return 4ull * uint64_t(n) * mp * uint64_t(h) * uint64_t(d) + 6ull * uint64_t(n) * mp * uint64_t(h);
}

uint64_t flop_count_attn_dense(int64_t n, int64_t h, int64_t d) {
    if (n < 1 || h < 1 || d < 1) throw ConfigError("flop_count_attn_dense: all args must be positive");
    return 4ull * uint64_t(n) * uint64_t(n) * uint64_t(h) * uint64_t(d) +
           6ull * uint64_t(n) * uint64_t(n) * uint64_t(h);
}

namespace {

struct AttnOp final : CustomOp {
    Tensor coords;
    NeighborIndex nbr;
    int heads, head_dim, bias_hidden;
    double patch;
    bool streaming, half_io;

    AttnOp(Tensor c, NeighborIndex nb, int h, int d, int bh, double p, bool st, bool hio)
        : coords(std::move(c)), nbr(std::move(nb)), heads(h), head_dim(d), bias_hidden(bh),
          patch(p), streaming(st), half_io(hio) {}

    std::string name() const override { return streaming ? "nbhd_attn_streaming" : "nbhd_attn_naive"; }

    BiasNet view_bias(const std::vector<const Tensor*>& in) const {
        BiasNet b;
        b.heads = heads;
        b.hidden = bias_hidden;
        b.patch = patch;
        b.w1 = *in[5];
        b.b1 = *in[6];
        b.w2 = *in[7];
        b.b2 = *in[8];
        b.blank = *in[9];
        return b;
    }

    AttnCtx view_ctx(const std::vector<const Tensor*>& in, const BiasNet& b) const {
        AttnCtx c;
        c.q = in[0];
        c.k = in[1];
        c.v = in[2];
        c.blank_k = in[3];
        c.blank_v = in[4];
        c.coords = &coords;
        c.nbr = &nbr;
        c.bias = &b;
        c.heads = heads;
        c.head_dim = head_dim;
        return c;
    }

    Tensor forward(const std::vector<const Tensor*>& in) override {
        if (in.size() != 10) throw ConfigError("attention op: want 10 inputs");
        BiasNet b = view_bias(in);
        AttnCtx c = view_ctx(in, b);
        Tensor out = streaming ? nbhd_attn_streaming(c, half_io) : nbhd_attn_naive(c);
        return out.precision() == in[0]->precision() ? out : out.to(in[0]->precision());
    }

    void backward(const Tensor& out_grad, const std::vector<const Tensor*>& in,
                  const std::vector<Tensor*>& in_grads) override {
        BiasNet b = view_bias(in);
        AttnCtx c = view_ctx(in, b);
        AttnGrads g = nbhd_attn_backward(c, out_grad);
        const Tensor* parts[10] = {&g.dq, &g.dk, &g.dv, &g.dblank_k, &g.dblank_v,
                                   &g.dw1, &g.db1, &g.dw2, &g.db2, &g.dblank};
        for (int a = 0; a < 10; ++a) {
            if (!in_grads[a]) continue;
            Tensor* dst = in_grads[a];
            for (int64_t i = 0; i < dst->numel(); ++i) dst->set(i, dst->get(i) + parts[a]->get(i));
        }
    }
};

} // namespace

std::shared_ptr<CustomOp> make_attn_op(Tensor coords, NeighborIndex nbr, int heads, int head_dim,
                                       int bias_hidden, double patch, bool streaming, bool half_io) {
    return std::make_shared<AttnOp>(std::move(coords), std::move(nbr), heads, head_dim, bias_hidden,
                                    patch, streaming, half_io);
}

} // namespace affmae
