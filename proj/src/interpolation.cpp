#include "affmae/interpolation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "affmae/rng.hpp"

namespace affmae {
namespace {

double cast_prec(double v, Precision prec) {
    switch (prec) {
    case Precision::b64: return v;
    case Precision::b32: return double(float(v));
    case Precision::b16emu: return double(round_b16_scalar(float(v)));
    }
    return v;
}

std::vector<double> distances(const double q[2], const Tensor& coords,
                              std::span<const int64_t> nbrs, double eps, Precision prec) {
    std::vector<double> d(nbrs.size());
    for (size_t i = 0; i < nbrs.size(); ++i) {
        double dx = q[0] - coords.get(nbrs[i] * 2);
        double dy = q[1] - coords.get(nbrs[i] * 2 + 1);
        d[i] = cast_prec(std::sqrt(dx * dx + dy * dy) + eps, prec);
    }
    return d;
}

InterpResult combine(const Tensor& feats, std::span<const int64_t> nbrs,
                     const std::vector<double>& w, Precision prec) {
    InterpResult r;
    r.weights = w;
    int64_t dim = feats.cols();
    r.out.assign(size_t(dim), 0.0);
    for (double wi : w)
        if (!std::isfinite(wi)) r.finite = false;
    if (!r.finite) {
        std::fill(r.out.begin(), r.out.end(), std::numeric_limits<double>::quiet_NaN());
        return r;
    }
    for (size_t i = 0; i < nbrs.size(); ++i)
        for (int64_t c = 0; c < dim; ++c)
            r.out[size_t(c)] = cast_prec(r.out[size_t(c)] + w[i] * feats.get(nbrs[i] * dim + c), prec);
    return r;
}

} // namespace

InterpResult interp_softmax(const double q[2], const Tensor& coords, const Tensor& feats,
                            std::span<const int64_t> nbrs, double p, double eps, Precision prec) {
    if (nbrs.empty()) throw ConfigError("interp_softmax: no valid neighbors");
    std::vector<double> d = distances(q, coords, nbrs, eps, prec);
    std::vector<double> logit(d.size());
    for (size_t i = 0; i < d.size(); ++i) logit[i] = cast_prec(-p * d[i], prec);
    double m = *std::max_element(logit.begin(), logit.end());
    std::vector<double> e(d.size());
    double s = 0.0;
    for (size_t i = 0; i < d.size(); ++i) {
        e[i] = cast_prec(std::exp(logit[i] - m), prec);
        s = cast_prec(s + e[i], prec);
    }
    std::vector<double> w(d.size());
    for (size_t i = 0; i < d.size(); ++i) w[i] = cast_prec(e[i] / s, prec);
    return combine(feats, nbrs, w, prec);
}

InterpResult interp_invpow(const double q[2], const Tensor& coords, const Tensor& feats,
                           std::span<const int64_t> nbrs, double p, double eps, Precision prec) {
    if (nbrs.empty()) throw ConfigError("interp_invpow: no valid neighbors");
    std::vector<double> d = distances(q, coords, nbrs, eps, prec);
    std::vector<double> raw(d.size());
    double s = 0.0;
    for (size_t i = 0; i < d.size(); ++i) {
        raw[i] = cast_prec(std::pow(d[i], -p), prec);
        s = cast_prec(s + raw[i], prec);
    }
    if (s == 0.0) {
        InterpResult r;
        r.zero_norm = true;
        r.weights.assign(d.size(), 0.0);
        r.out.assign(size_t(feats.cols()), 0.0);
        return r;
    }
    std::vector<double> w(d.size());
    for (size_t i = 0; i < d.size(); ++i) w[i] = cast_prec(raw[i] / s, prec);
    return combine(feats, nbrs, w, prec);
}

InterpGrads interp_backward(const double q[2], const Tensor& coords, const Tensor& feats,
                            std::span<const int64_t> nbrs, double p, double eps,
                            std::span<const double> cotangent) {
    size_t k = nbrs.size();
    if (k == 0) throw ConfigError("interp_backward: no valid neighbors");
    int64_t dim = feats.cols();
    if (int64_t(cotangent.size()) != dim)
        throw ConfigError("interp_backward: cotangent length mismatch");

    // recompute forward in b64
    std::vector<double> r(k), d(k);
    for (size_t i = 0; i < k; ++i) {
        double dx = q[0] - coords.get(nbrs[i] * 2);
        double dy = q[1] - coords.get(nbrs[i] * 2 + 1);
        r[i] = std::sqrt(dx * dx + dy * dy);
        d[i] = r[i] + eps;
    }
    double m = -p * d[0];
    for (size_t i = 1; i < k; ++i) m = std::max(m, -p * d[i]);
    std::vector<double> w(k);
    double s = 0.0;
    for (size_t i = 0; i < k; ++i) {
        w[i] = std::exp(-p * d[i] - m);
        s += w[i];
    }
    for (size_t i = 0; i < k; ++i) w[i] /= s;

    InterpGrads g;
    g.df.assign(k * size_t(dim), 0.0);
    std::vector<double> dw(k);
    for (size_t i = 0; i < k; ++i) {
        double acc = 0.0;
        for (int64_t c = 0; c < dim; ++c) {
            g.df[i * size_t(dim) + size_t(c)] = w[i] * cotangent[size_t(c)];
            acc += cotangent[size_t(c)] * feats.get(nbrs[i] * dim + c);
        }
        dw[i] = acc;
    }
    double wdot = 0.0;
    for (size_t i = 0; i < k; ++i) wdot += w[i] * dw[i];
    for (size_t i = 0; i < k; ++i) {
        double dl = w[i] * (dw[i] - wdot); // softmax jacobian
        g.dp += dl * (-d[i]);
        double dd = dl * (-p);
        if (r[i] > 0.0) {
            g.dq[0] += dd * (q[0] - coords.get(nbrs[i] * 2)) / r[i];
            g.dq[1] += dd * (q[1] - coords.get(nbrs[i] * 2 + 1)) / r[i];
        }
    }
    return g;
}

InterpGrads interp_invpow_backward(const double q[2], const Tensor& coords, const Tensor& feats,
                                   std::span<const int64_t> nbrs, double p, double eps,
                                   std::span<const double> cotangent) {
    size_t k = nbrs.size();
    if (k == 0) throw ConfigError("interp_invpow_backward: no valid neighbors");
    int64_t dim = feats.cols();
    if (int64_t(cotangent.size()) != dim)
        throw ConfigError("interp_invpow_backward: cotangent length mismatch");

    std::vector<double> r(k), d(k), u(k);
    double s = 0.0;
    for (size_t i = 0; i < k; ++i) {
        double dx = q[0] - coords.get(nbrs[i] * 2);
        double dy = q[1] - coords.get(nbrs[i] * 2 + 1);
        r[i] = std::sqrt(dx * dx + dy * dy);
        d[i] = r[i] + eps;
        u[i] = std::pow(d[i], -p);
        s += u[i];
    }
    InterpGrads g;
    g.df.assign(k * size_t(dim), 0.0);
    if (s == 0.0) return g; // forward reported zero_norm; nothing to propagate
    std::vector<double> w(k), dw(k);
    for (size_t i = 0; i < k; ++i) w[i] = u[i] / s;
    for (size_t i = 0; i < k; ++i) {
        double acc = 0.0;
        for (int64_t c = 0; c < dim; ++c) {
            g.df[i * size_t(dim) + size_t(c)] = w[i] * cotangent[size_t(c)];
            acc += cotangent[size_t(c)] * feats.get(nbrs[i] * dim + c);
        }
        dw[i] = acc;
    }
    double wdot = 0.0;
    for (size_t i = 0; i < k; ++i) wdot += w[i] * dw[i];
    for (size_t i = 0; i < k; ++i) {
        double du = (dw[i] - wdot) / s; // quotient rule through the normalizer
        g.dp += du * (-std::log(d[i])) * u[i];
        double dd = du * (-p) * std::pow(d[i], -p - 1.0);
        if (r[i] > 0.0) {
            g.dq[0] += dd * (q[0] - coords.get(nbrs[i] * 2)) / r[i];
            g.dq[1] += dd * (q[1] - coords.get(nbrs[i] * 2 + 1)) / r[i];
        }
    }
    return g;
}

namespace {

struct InterpOp final : CustomOp {
    Tensor key_coords;
    NeighborIndex nbrs;
    double eps;

    InterpOp(Tensor kc, NeighborIndex nb, double e)
        : key_coords(std::move(kc)), nbrs(std::move(nb)), eps(e) {}

    std::string name() const override { return "interp_softmax"; }

    Tensor forward(const std::vector<const Tensor*>& in) override {
        const Tensor& feats = *in[0];
        const Tensor& pt = *in[1];
        const Tensor& queries = *in[2];
        if (pt.numel() != 1) throw ConfigError("interp op: p must be scalar");
        if (queries.ndim() != 2 || queries.dim(1) != 2)
            throw ConfigError("interp op: queries must be Qx2");
        if (queries.dim(0) != nbrs.queries())
            throw ConfigError("interp op: query count does not match neighbor index");
        double p = pt.get(0);
        Precision prec = feats.precision();
        Tensor out = Tensor::zeros({queries.dim(0), feats.cols()}, prec);
        for (int64_t qi = 0; qi < queries.dim(0); ++qi) {
            double q[2] = {queries.get(qi * 2), queries.get(qi * 2 + 1)};
            std::vector<int64_t> row = nbrs.row(qi);
            InterpResult r = interp_softmax(q, key_coords, feats, row, p, eps, prec);
            for (int64_t c = 0; c < feats.cols(); ++c) out.set(qi * feats.cols() + c, r.out[size_t(c)]);
        }
        return out;
    }

    void backward(const Tensor& out_grad, const std::vector<const Tensor*>& in,
                  const std::vector<Tensor*>& in_grads) override {
        const Tensor& feats = *in[0];
        const Tensor& pt = *in[1];
        const Tensor& queries = *in[2];
        double p = pt.get(0);
        int64_t dim = feats.cols();
        std::vector<double> cot(static_cast<size_t>(dim));
        for (int64_t qi = 0; qi < queries.dim(0); ++qi) {
            double q[2] = {queries.get(qi * 2), queries.get(qi * 2 + 1)};
            std::vector<int64_t> row = nbrs.row(qi);
            for (int64_t c = 0; c < dim; ++c) cot[size_t(c)] = out_grad.get(qi * dim + c);
            InterpGrads g = interp_backward(q, key_coords, feats, row, p, eps, cot);
            if (in_grads[0])
                for (size_t i = 0; i < row.size(); ++i)
                    for (int64_t c = 0; c < dim; ++c) {
                        int64_t at = row[i] * dim + c;
                        in_grads[0]->set(at, in_grads[0]->get(at) + g.df[i * size_t(dim) + size_t(c)]);
                    }
            if (in_grads[1]) in_grads[1]->set(0, in_grads[1]->get(0) + g.dp);
            if (in_grads[2]) {
                in_grads[2]->set(qi * 2, in_grads[2]->get(qi * 2) + g.dq[0]);
                in_grads[2]->set(qi * 2 + 1, in_grads[2]->get(qi * 2 + 1) + g.dq[1]);
            }
        }
    }
};

} // namespace

std::shared_ptr<CustomOp> make_interp_op(Tensor key_coords, NeighborIndex nbrs, double eps) {
    return std::make_shared<InterpOp>(std::move(key_coords), std::move(nbrs), eps);
}

std::vector<ProbeCell> stability_probe(std::span<const double> p_values,
                                       std::span<const std::pair<double, double>> d_ranges,
                                       Precision prec, int trials, uint64_t seed) {
    constexpr int kNbrs = 8;
    std::vector<ProbeCell> cells;
    for (const char* kernel : {"softmax", "invpow"}) {
        for (double p : p_values) {
            for (auto [dmin, dmax] : d_ranges) {
                Rng rng(mix64(seed) ^ mix64(uint64_t(p * 1000)) ^ mix64(uint64_t(dmin * 1e6)) ^
                        (kernel[0] == 's' ? 0x736d61786bull : 0x696e76ull));
                int failures = 0;
                for (int t = 0; t < trials; ++t) {
                    Tensor coords = Tensor::zeros({kNbrs, 2}, Precision::b32);
                    Tensor feats = Tensor::zeros({kNbrs, 4}, Precision::b32);
                    std::vector<int64_t> nb(kNbrs);
                    for (int i = 0; i < kNbrs; ++i) {
                        double dist = rng.uniform(dmin, dmax);
                        double ang = rng.uniform(0.0, 6.283185307179586);
                        coords.set(i * 2, dist * std::cos(ang));
                        coords.set(i * 2 + 1, dist * std::sin(ang));
                        for (int c = 0; c < 4; ++c) feats.set(i * 4 + c, rng.normal());
                        nb[size_t(i)] = i;
                    }
                    double q[2] = {0.0, 0.0};
                    InterpResult r = kernel[0] == 's'
                                         ? interp_softmax(q, coords, feats, nb, p, kInterpEps, prec)
                                         : interp_invpow(q, coords, feats, nb, p, kInterpEps, prec);
                    if (r.failed()) ++failures;
                }
                ProbeCell cell;
                cell.kernel = kernel;
                cell.p = p;
                cell.d_min = dmin;
                cell.d_max = dmax;
                cell.prec = prec;
                cell.failure_rate = double(failures) / double(trials);
                cells.push_back(std::move(cell));
            }
        }
    }
    return cells;
}

} // namespace affmae
