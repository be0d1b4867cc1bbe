#include "affmae/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

#include "affmae/attention.hpp"
#include "affmae/diagnostics.hpp"
#include "affmae/errors.hpp"
#include "affmae/interpolation.hpp"
#include "affmae/rng.hpp"
#include "affmae/tensor_io.hpp"

namespace affmae {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kAdamEps = 1e-8;
constexpr int kPosHidden = 16;

thread_local std::vector<std::string> g_trace;

void trace(std::string step) { g_trace.push_back(std::move(step)); }

std::string prec_name(Precision p) {
    switch (p) {
        case Precision::b32: return "b32";
        case Precision::b16emu: return "b16emu";
        case Precision::b64: return "b64";
    }
    return "?";
}

// Row-normal init scaled by 1/sqrt(fan_in); biases and norms are created
// directly with zeros/full.
Tensor normal_init(Rng& rng, std::vector<int64_t> dims, double scale, Precision prec) {
    Tensor t = Tensor::zeros(std::move(dims), prec);
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.normal() * scale);
    return t;
}

Tensor scaled_coords(const Tensor& coords, double denom, Precision prec) {
    Tensor out = Tensor::zeros(coords.dims(), prec);
    for (int64_t i = 0; i < coords.numel(); ++i) out.set(i, coords.get(i) / denom);
    return out;
}

PointSet coords_only(const Tensor& coords, int stage) {
    PointSet ps;
    ps.coords = coords;
    ps.feats = Tensor::zeros({coords.rows(), 0}, Precision::b32);
    ps.stage = stage;
    return ps;
}

// Identity neighbor map: query i attends to key i only (plus the implicit
// blank slot inside the attention op).
NeighborIndex one_to_one(int64_t n) {
    NeighborIndex nb;
    nb.width = 1;
    nb.idx.resize(size_t(n));
    nb.valid.assign(size_t(n), 1);
    for (int64_t i = 0; i < n; ++i) nb.idx[size_t(i)] = i;
    return nb;
}

// Rescales rows of an (n,2) offset tensor whose euclidean norm exceeds the
// limit; rows at or under the limit pass through untouched.
struct NormClampOp final : CustomOp {
    double limit;

    explicit NormClampOp(double l) : limit(l) {}

    std::string name() const override { return "norm_clamp"; }

    Tensor forward(const std::vector<const Tensor*>& in) override {
        const Tensor& x = *in[0];
        Tensor out = Tensor::zeros(x.dims(), x.precision());
        int64_t n = x.rows(), d = x.cols();
        for (int64_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (int64_t j = 0; j < d; ++j) {
                double v = x.get(i * d + j);
                s += v * v;
            }
            double r = std::sqrt(s);
            double f = r > limit ? limit / r : 1.0;
            for (int64_t j = 0; j < d; ++j) out.set(i * d + j, x.get(i * d + j) * f);
        }
        return out;
    }

    void backward(const Tensor& g, const std::vector<const Tensor*>& in,
                  const std::vector<Tensor*>& in_grads) override {
        if (!in_grads[0]) return;
        const Tensor& x = *in[0];
        Tensor& dx = *in_grads[0];
        int64_t n = x.rows(), d = x.cols();
        for (int64_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (int64_t j = 0; j < d; ++j) {
                double v = x.get(i * d + j);
                s += v * v;
            }
            double r = std::sqrt(s);
            if (r <= limit) {
                for (int64_t j = 0; j < d; ++j)
                    dx.set(i * d + j, dx.get(i * d + j) + g.get(i * d + j));
            } else {
                // y = limit * x / r: J = (limit/r) (I - xx^T / r^2)
                double f = limit / r;
                double dot = 0.0;
                for (int64_t j = 0; j < d; ++j) dot += g.get(i * d + j) * x.get(i * d + j);
                dot /= r * r;
                for (int64_t j = 0; j < d; ++j)
                    dx.set(i * d + j,
                           dx.get(i * d + j) + f * (g.get(i * d + j) - dot * x.get(i * d + j)));
            }
        }
    }
};

} // namespace

Patches patchify(const Tensor& image, int64_t patch) {
    if (image.ndim() != 2) throw ConfigError("patchify: image must be 2-d, got " + image.dims_str());
    int64_t h = image.dim(0), w = image.dim(1);
    PointSet grid = grid_points(h, w, patch); // also validates divisibility
    Patches p;
    p.grid_h = h / patch;
    p.grid_w = w / patch;
    p.patch = patch;
    p.centers = grid.coords;
    p.vectors = Tensor::zeros({p.grid_h * p.grid_w, patch * patch}, image.precision());
    for (int64_t gr = 0; gr < p.grid_h; ++gr)
        for (int64_t gc = 0; gc < p.grid_w; ++gc) {
            int64_t tix = gr * p.grid_w + gc;
            for (int64_t pr = 0; pr < patch; ++pr)
                for (int64_t pc = 0; pc < patch; ++pc)
                    p.vectors.set_at(tix, pr * patch + pc,
                                     image.at(gr * patch + pr, gc * patch + pc));
        }
    return p;
}

Tensor unpatchify(const Tensor& vectors, int64_t grid_h, int64_t grid_w, int64_t patch) {
    if (vectors.rows() != grid_h * grid_w || vectors.cols() != patch * patch)
        throw ConfigError("unpatchify: got " + vectors.dims_str() + " for a " +
                          std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid of " +
                          std::to_string(patch) + "-pixel patches");
    Tensor img = Tensor::zeros({grid_h * patch, grid_w * patch}, vectors.precision());
    for (int64_t gr = 0; gr < grid_h; ++gr)
        for (int64_t gc = 0; gc < grid_w; ++gc) {
            int64_t tix = gr * grid_w + gc;
            for (int64_t pr = 0; pr < patch; ++pr)
                for (int64_t pc = 0; pc < patch; ++pc)
                    img.set_at(gr * patch + pr, gc * patch + pc,
                               vectors.at(tix, pr * patch + pc));
        }
    return img;
}

Tensor synth_image(int64_t size, uint64_t seed) {
    if (size < 2) throw ConfigError("synth_image: size must be >= 2");
    Tensor img = Tensor::zeros({size, size}, Precision::b64);
    Tensor field = perlin_field(size, size, 2, 2.0, 0.5, mix64(seed ^ 0xba5e11ull));
    for (int64_t i = 0; i < img.numel(); ++i) img.set(i, 0.5 + 0.3 * field.get(i));

    Rng rng(mix64(seed) ^ 0x5ca1ab1eull);
    std::vector<double> ink(static_cast<size_t>(size * size));
    int curves = 2 + int(rng.below(3));
    for (int c = 0; c < curves; ++c) {
        double px[3], py[3];
        for (int j = 0; j < 3; ++j) {
            px[j] = rng.uniform(0.0, double(size));
            py[j] = rng.uniform(0.0, double(size));
        }
        double sigma = rng.uniform(0.8, 1.8);
        double amp = rng.uniform(0.25, 0.45) * (rng.below(2) ? 1.0 : -1.0);
        std::fill(ink.begin(), ink.end(), 0.0);
        // Ink buffer takes the max over stamps so overlapping steps along the
        // curve do not pile up.
        int nsteps = int(3 * size);
        for (int st = 0; st <= nsteps; ++st) {
            double u = double(st) / double(nsteps);
            double a = (1 - u) * (1 - u), b = 2 * u * (1 - u), c2 = u * u;
            double cx = a * px[0] + b * px[1] + c2 * px[2];
            double cy = a * py[0] + b * py[1] + c2 * py[2];
            int64_t r0 = std::max<int64_t>(0, int64_t(std::floor(cy - 3 * sigma)));
            int64_t r1 = std::min<int64_t>(size - 1, int64_t(std::ceil(cy + 3 * sigma)));
            int64_t c0 = std::max<int64_t>(0, int64_t(std::floor(cx - 3 * sigma)));
            int64_t c1 = std::min<int64_t>(size - 1, int64_t(std::ceil(cx + 3 * sigma)));
            for (int64_t r = r0; r <= r1; ++r)
                for (int64_t cc = c0; cc <= c1; ++cc) {
                    double dx = double(cc) + 0.5 - cx, dy = double(r) + 0.5 - cy;
                    double wgt = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
                    size_t at = size_t(r * size + cc);
                    if (wgt > ink[at]) ink[at] = wgt;
                }
        }
        for (int64_t i = 0; i < img.numel(); ++i) img.set(i, img.get(i) + amp * ink[size_t(i)]);
    }

    int blobs = 2 + int(rng.below(4));
    for (int b = 0; b < blobs; ++b) {
        double cx = rng.uniform(0.0, double(size)), cy = rng.uniform(0.0, double(size));
        double sigma = rng.uniform(2.0, std::max(3.0, double(size) / 8.0));
        double amp = rng.uniform(0.3, 0.5) * (rng.below(2) ? 1.0 : -1.0);
        for (int64_t r = 0; r < size; ++r)
            for (int64_t c = 0; c < size; ++c) {
                double dx = double(c) + 0.5 - cx, dy = double(r) + 0.5 - cy;
                img.set(r * size + c, img.get(r * size + c) +
                                          amp * std::exp(-(dx * dx + dy * dy) /
                                                         (2 * sigma * sigma)));
            }
    }

    for (int64_t i = 0; i < img.numel(); ++i)
        img.set(i, std::clamp(img.get(i), 0.0, 1.0));
    return img;
}

Parameter& ParamStore::add(const std::string& name, Tensor init) {
    auto [it, fresh] = by_name_.emplace(name, nullptr);
    if (!fresh) throw ConfigError("duplicate parameter name: " + name);
    it->second = std::make_unique<Parameter>(name, std::move(init));
    order_.push_back(it->second.get());
    return *it->second;
}

Parameter* ParamStore::find(const std::string& name) {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second.get();
}

const Parameter* ParamStore::find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second.get();
}

std::vector<Parameter*> ParamStore::all() { return order_; }

void ParamStore::zero_grads() {
    for (Parameter* p : order_) p->zero_grad();
}

const std::vector<std::string>& encode_trace() { return g_trace; }

Model::Model(PipelineConfig cfg, Precision prec) : cfg_(std::move(cfg)), prec_(prec) {
    cfg_.validate();
    Rng rng(mix64(cfg_.seed ^ 0x1417ull));
    int64_t p2 = cfg_.patch * cfg_.patch;
    int64_t d0 = cfg_.stages[0].dim;
    auto mat = [&](const std::string& name, int64_t r, int64_t c) -> void {
        store_.add(name, normal_init(rng, {r, c}, 1.0 / std::sqrt(double(r)), prec_));
    };
    auto small = [&](const std::string& name, int64_t r, int64_t c) -> void {
        store_.add(name, normal_init(rng, {r, c}, 0.02, prec_));
    };
    auto zero = [&](const std::string& name, int64_t r, int64_t c) -> void {
        store_.add(name, Tensor::zeros({r, c}, prec_));
    };
    auto one = [&](const std::string& name, int64_t c) -> void {
        store_.add(name, Tensor::full({1, c}, 1.0, prec_));
    };
    auto pos_net = [&](const std::string& prefix, int64_t out) {
        mat(prefix + ".w1", 2, kPosHidden);
        zero(prefix + ".b1", 1, kPosHidden);
        mat(prefix + ".w2", kPosHidden, out);
        zero(prefix + ".b2", 1, out);
    };
    auto bias_net = [&](const std::string& prefix, int64_t heads) {
        int64_t hb = cfg_.bias_hidden;
        store_.add(prefix + ".w1",
                   normal_init(rng, {heads, 2 * hb}, 1.0 / std::sqrt(2.0), prec_));
        zero(prefix + ".b1", heads, hb);
        store_.add(prefix + ".w2",
                   normal_init(rng, {heads, hb}, 1.0 / std::sqrt(double(hb)), prec_));
        zero(prefix + ".b2", heads, 1);
        zero(prefix + ".blank", heads, 1);
    };
    auto attn_block = [&](const std::string& pre, int64_t dim, int heads) {
        mat(pre + "wq", dim, dim);
        mat(pre + "wk", dim, dim);
        mat(pre + "wv", dim, dim);
        mat(pre + "wo", dim, dim);
        small(pre + "blank_k", heads, dim / heads);
        small(pre + "blank_v", heads, dim / heads);
        bias_net(pre + "bias", heads);
    };

    mat("embed.w", p2, d0);
    zero("embed.b", 1, d0);
    pos_net("pos0", d0);

    size_t ns = cfg_.stages.size();
    for (size_t s = 0; s < ns; ++s) {
        const StageConfig& sc = cfg_.stages[s];
        for (int b = 0; b < sc.blocks; ++b) {
            std::string pre = "enc.s" + std::to_string(s) + ".b" + std::to_string(b) + ".";
            one(pre + "ln1.g", sc.dim);
            zero(pre + "ln1.b", 1, sc.dim);
            attn_block(pre, sc.dim, sc.heads);
            one(pre + "ln2.g", sc.dim);
            zero(pre + "ln2.b", 1, sc.dim);
            mat(pre + "mlp.w1", sc.dim, 4 * sc.dim);
            zero(pre + "mlp.b1", 1, 4 * sc.dim);
            mat(pre + "mlp.w2", 4 * sc.dim, sc.dim);
            zero(pre + "mlp.b2", 1, sc.dim);
        }
        if (s + 1 < ns) {
            int64_t dn = cfg_.stages[s + 1].dim;
            std::string pre = "merge.s" + std::to_string(s) + ".";
            mat(pre + "scorer.w1", sc.dim, cfg_.scorer_hidden);
            zero(pre + "scorer.b1", 1, cfg_.scorer_hidden);
            mat(pre + "scorer.w2", cfg_.scorer_hidden, 1);
            zero(pre + "scorer.b2", 1, 1);
            store_.add(pre + "p", Tensor::full({1, 1}, 1.0, prec_));
            mat(pre + "proj", 2 * sc.dim, dn);
            one(pre + "ln.g", dn);
            zero(pre + "ln.b", 1, dn);
        }
    }

    int64_t dd = cfg_.decoder.dim;
    int hd = cfg_.decoder.heads;
    small("dec.mask_token", 1, dd);
    pos_net("dec.pos", dd);
    for (size_t s = 0; s < ns; ++s) {
        std::string sp = "dec.s" + std::to_string(s) + ".";
        mat(sp + "in.w", cfg_.stages[s].dim, dd);
        zero(sp + "in.b", 1, dd);
        for (int r = 0; r < cfg_.decoder.depth; ++r) {
            std::string pre = sp + "r" + std::to_string(r) + ".";
            zero(pre + "off.w", dd, 2); // zero init: offsets start at the reference point
            zero(pre + "off.b", 1, 2);
            store_.add(pre + "p", Tensor::full({1, 1}, 1.0, prec_));
            one(pre + "ln1.g", dd);
            zero(pre + "ln1.b", 1, dd);
            attn_block(pre + "x.", dd, hd);
            one(pre + "ln2.g", dd);
            zero(pre + "ln2.b", 1, dd);
            attn_block(pre + "s.", dd, hd);
            one(pre + "ln3.g", dd);
            zero(pre + "ln3.b", 1, dd);
            mat(pre + "mlp.w1", dd, 2 * dd);
            zero(pre + "mlp.b1", 1, 2 * dd);
            mat(pre + "mlp.w2", 2 * dd, dd);
            zero(pre + "mlp.b2", 1, dd);
        }
    }
    one("dec.head.ln.g", dd);
    zero("dec.head.ln.b", 1, dd);
    mat("dec.head.w", dd, p2);
    zero("dec.head.b", 1, p2);

    // aux heads supervise intermediate stages only; the last stage already
    // answers to the main loss through the decoder
    for (size_t s = 0; s + 1 < ns; ++s) {
        std::string pre = "aux.s" + std::to_string(s) + ".";
        store_.add(pre + "p", Tensor::full({1, 1}, 1.0, prec_));
        mat(pre + "w", cfg_.stages[s].dim, p2);
        zero(pre + "b", 1, p2);
    }
}

int Model::pos_encode(Tape& t, const std::string& prefix, int coords_node) {
    auto P = [&](const std::string& n) { return t.param(*store_.find(prefix + n)); };
    int h = t.gelu(t.add_row(t.matmul(coords_node, P(".w1")), P(".b1")));
    return t.add_row(t.matmul(h, P(".w2")), P(".b2"));
}

int Model::attn_layer(Tape& t, const std::string& prefix, int q, int k, int v,
                      const Tensor& coords, const NeighborIndex& nbr, int heads, int64_t dim) {
    auto P = [&](const std::string& n) { return t.param(*store_.find(prefix + n)); };
    auto op = make_attn_op(coords, nbr, heads, int(dim / heads), int(cfg_.bias_hidden),
                           double(cfg_.patch), /*streaming=*/true, /*half_io=*/false);
    return t.custom(op, {q, k, v, P("blank_k"), P("blank_v"), P("bias.w1"), P("bias.b1"),
                         P("bias.w2"), P("bias.b2"), P("bias.blank")});
}

int Model::encoder_block(Tape& t, const std::string& prefix, int f, const Tensor& coords,
                         const NeighborIndex& nbr, const StageConfig& sc) {
    auto P = [&](const std::string& n) { return t.param(*store_.find(prefix + n)); };
    trace(prefix + "attn");
    int h = t.layer_norm(f, P("ln1.g"), P("ln1.b"));
    int a = attn_layer(t, prefix, t.matmul(h, P("wq")), t.matmul(h, P("wk")),
                       t.matmul(h, P("wv")), coords, nbr, sc.heads, sc.dim);
    f = t.add(f, t.matmul(a, P("wo")));
    trace(prefix + "mlp");
    int h2 = t.layer_norm(f, P("ln2.g"), P("ln2.b"));
    int m = t.gelu(t.add_row(t.matmul(h2, P("mlp.w1")), P("mlp.b1")));
    return t.add(f, t.add_row(t.matmul(m, P("mlp.w2")), P("mlp.b2")));
}

EncodeResult Model::encode(Tape& t, const Tensor& image, const MaskSpec& mask) {
    g_trace.clear();
    Patches pat = patchify(image, cfg_.patch);
    if (mask.hp != pat.grid_h || mask.wp != pat.grid_w)
        throw ConfigError("encode: mask grid " + std::to_string(mask.hp) + "x" +
                          std::to_string(mask.wp) + " does not match the " +
                          std::to_string(pat.grid_h) + "x" + std::to_string(pat.grid_w) +
                          " patch grid");

    EncodeResult out;
    for (int64_t i = 0; i < mask.cells(); ++i)
        if (!mask.masked[size_t(i)]) out.visible.push_back(i);
    if (out.visible.empty()) throw ConfigError("encode: mask leaves no visible tokens");

    // Masked rows are never copied out of the patch table: everything below
    // sees only the visible subset.
    int64_t v = int64_t(out.visible.size());
    int64_t p2 = cfg_.patch * cfg_.patch;
    Tensor vec = Tensor::zeros({v, p2}, prec_);
    Tensor coords = Tensor::zeros({v, 2}, Precision::b32);
    for (int64_t i = 0; i < v; ++i) {
        int64_t src = out.visible[size_t(i)];
        for (int64_t j = 0; j < p2; ++j) vec.set_at(i, j, pat.vectors.at(src, j));
        coords.set(i * 2, pat.centers.get(src * 2));
        coords.set(i * 2 + 1, pat.centers.get(src * 2 + 1));
    }

    trace("embed");
    int f = t.add_row(t.matmul(t.input(vec), t.param(*store_.find("embed.w"))),
                      t.param(*store_.find("embed.b")));
    trace("posenc");
    f = t.add(f, pos_encode(t, "pos0", t.input(scaled_coords(coords, double(cfg_.image), prec_))));

    size_t ns = cfg_.stages.size();
    for (size_t s = 0; s < ns; ++s) {
        const StageConfig& sc = cfg_.stages[s];
        EncodeStage st;
        st.coords = coords;
        PointSet ps = coords_only(coords, int(s));
        trace("stage" + std::to_string(s) + ".cluster");
        ClusterAssignment assign = balanced_clusters(ps, sc.cluster);
        trace("stage" + std::to_string(s) + ".nbhd");
        NeighborIndex nbr = cluster_neighborhood(assign, ps, sc.groups);
        for (int b = 0; b < sc.blocks; ++b)
            f = encoder_block(t, "enc.s" + std::to_string(s) + ".b" + std::to_string(b) + ".", f,
                              coords, nbr, sc);
        st.feats = f;
        if (s + 1 < ns) {
            trace("stage" + std::to_string(s) + ".merge");
            std::string pre = "merge.s" + std::to_string(s) + ".";
            auto P = [&](const std::string& n) { return t.param(*store_.find(pre + n)); };
            int hid = t.gelu(t.add_row(t.matmul(f, P("scorer.w1")), P("scorer.b1")));
            int scores = t.sigmoid(t.add_row(t.matmul(hid, P("scorer.w2")), P("scorer.b2")));
            std::vector<int64_t> retained = select_retained(t.value(scores), sc.d_s);
            MergePlan plan = merge_plan(ps, retained, cfg_.merge_k);
            int pooled = t.custom(make_merge_pool_op(plan), {f, scores, P("p")});
            f = t.layer_norm(t.matmul(pooled, P("proj")), P("ln.g"), P("ln.b"));
            Tensor next = Tensor::zeros({int64_t(retained.size()), 2}, Precision::b32);
            for (size_t i = 0; i < retained.size(); ++i) {
                next.set(int64_t(i) * 2, coords.get(retained[i] * 2));
                next.set(int64_t(i) * 2 + 1, coords.get(retained[i] * 2 + 1));
            }
            coords = next;
        }
        st.coords_post = coords;
        st.feats_post = f;
        out.stages.push_back(std::move(st));
    }
    return out;
}

int Model::decode(Tape& t, const EncodeResult& enc, const MaskSpec& mask) {
    std::vector<int64_t> masked;
    for (int64_t i = 0; i < mask.cells(); ++i)
        if (mask.masked[size_t(i)]) masked.push_back(i);
    if (masked.empty()) return -1;

    int64_t q = int64_t(masked.size());
    double half = double(mask.patch) * 0.5;
    Tensor refs32 = Tensor::zeros({q, 2}, Precision::b32);
    Tensor refs = Tensor::zeros({q, 2}, prec_);
    for (int64_t i = 0; i < q; ++i) {
        int64_t r = masked[size_t(i)] / mask.wp, c = masked[size_t(i)] % mask.wp;
        double x = double(c * mask.patch) + half, y = double(r * mask.patch) + half;
        refs32.set(i * 2, x);
        refs32.set(i * 2 + 1, y);
        refs.set(i * 2, x);
        refs.set(i * 2 + 1, y);
    }

    int refs_node = t.input(refs);
    int fq = t.add(t.repeat_row(t.param(*store_.find("dec.mask_token")), q),
                   pos_encode(t, "dec.pos", t.input(scaled_coords(refs32, double(cfg_.image), prec_))));
    NeighborIndex self_nbr = knn(refs32, coords_only(refs32, -1), cfg_.decoder.self_k);
    NeighborIndex cross_nbr = one_to_one(q);
    double off_limit = 2.0 * double(cfg_.patch);

    for (size_t si = cfg_.stages.size(); si-- > 0;) {
        const EncodeStage& st = enc.stages[si];
        const StageConfig& sc = cfg_.stages[si];
        (void)sc;
        std::string sp = "dec.s" + std::to_string(si) + ".";
        int z = t.add(
            t.add_row(t.matmul(st.feats, t.param(*store_.find(sp + "in.w"))),
                      t.param(*store_.find(sp + "in.b"))),
            pos_encode(t, "dec.pos",
                       t.input(scaled_coords(st.coords, double(cfg_.image), prec_))));
        PointSet key_ps = coords_only(st.coords, int(si));

        for (int r = 0; r < cfg_.decoder.depth; ++r) {
            std::string pre = sp + "r" + std::to_string(r) + ".";
            auto P = [&](const std::string& n) { return t.param(*store_.find(pre + n)); };

            // Deformed sample point: reference + clamped learned offset. The
            // neighbor lists are frozen at current offset values; gradients
            // still flow into the offsets through the interpolation weights.
            int off = t.custom(std::make_shared<NormClampOp>(off_limit),
                               {t.add_row(t.matmul(fq, P("off.w")), P("off.b"))});
            int qpos = t.add(refs_node, off);
            NeighborIndex gnbr = knn(t.value(qpos), key_ps, cfg_.decoder.gather_k);
            int virt = t.custom(make_interp_op(st.coords, gnbr), {z, P("p"), qpos});

            // Cross attention over two slots: the virtual token and the blank.
            int h1 = t.layer_norm(fq, P("ln1.g"), P("ln1.b"));
            int a1 = attn_layer(t, pre + "x.", t.matmul(h1, P("x.wq")), t.matmul(virt, P("x.wk")),
                                t.matmul(virt, P("x.wv")), refs32, cross_nbr, cfg_.decoder.heads,
                                cfg_.decoder.dim);
            fq = t.add(fq, t.matmul(a1, P("x.wo")));

            int h2 = t.layer_norm(fq, P("ln2.g"), P("ln2.b"));
            int a2 = attn_layer(t, pre + "s.", t.matmul(h2, P("s.wq")), t.matmul(h2, P("s.wk")),
                                t.matmul(h2, P("s.wv")), refs32, self_nbr, cfg_.decoder.heads,
                                cfg_.decoder.dim);
            fq = t.add(fq, t.matmul(a2, P("s.wo")));

            int h3 = t.layer_norm(fq, P("ln3.g"), P("ln3.b"));
            int m = t.gelu(t.add_row(t.matmul(h3, P("mlp.w1")), P("mlp.b1")));
            fq = t.add(fq, t.add_row(t.matmul(m, P("mlp.w2")), P("mlp.b2")));
        }
    }

    int h = t.layer_norm(fq, t.param(*store_.find("dec.head.ln.g")),
                         t.param(*store_.find("dec.head.ln.b")));
    return t.add_row(t.matmul(h, t.param(*store_.find("dec.head.w"))),
                     t.param(*store_.find("dec.head.b")));
}

std::vector<int> Model::deep_sup(Tape& t, const EncodeResult& enc, const MaskSpec& mask) {
    std::vector<int64_t> masked;
    for (int64_t i = 0; i < mask.cells(); ++i)
        if (mask.masked[size_t(i)]) masked.push_back(i);
    if (masked.empty()) return {};

    int64_t q = int64_t(masked.size());
    double half = double(mask.patch) * 0.5;
    Tensor refs32 = Tensor::zeros({q, 2}, Precision::b32);
    Tensor refs = Tensor::zeros({q, 2}, prec_);
    for (int64_t i = 0; i < q; ++i) {
        int64_t r = masked[size_t(i)] / mask.wp, c = masked[size_t(i)] % mask.wp;
        refs32.set(i * 2, double(c * mask.patch) + half);
        refs32.set(i * 2 + 1, double(r * mask.patch) + half);
        refs.set(i * 2, double(c * mask.patch) + half);
        refs.set(i * 2 + 1, double(r * mask.patch) + half);
    }
    int refs_node = t.input(refs);

    std::vector<int> heads;
    for (size_t s = 0; s + 1 < cfg_.stages.size(); ++s) {
        const EncodeStage& st = enc.stages[s];
        std::string pre = "aux.s" + std::to_string(s) + ".";
        NeighborIndex nbr = knn(refs32, coords_only(st.coords, int(s)), cfg_.stages[s].interp_k);
        int virt = t.custom(make_interp_op(st.coords, nbr),
                            {st.feats, t.param(*store_.find(pre + "p")), refs_node});
        heads.push_back(t.add_row(t.matmul(virt, t.param(*store_.find(pre + "w"))),
                                  t.param(*store_.find(pre + "b"))));
    }
    return heads;
}

Model::LossNodes Model::loss_parts(Tape& t, int recon, const std::vector<int>& aux,
                                   const Tensor& image, const MaskSpec& mask) {
    LossNodes out;
    if (recon < 0) {
        out.total = out.main = t.input(Tensor::scalar(0.0, prec_));
        return out;
    }
    Patches pat = patchify(image, cfg_.patch);
    std::vector<int64_t> masked;
    for (int64_t i = 0; i < mask.cells(); ++i)
        if (mask.masked[size_t(i)]) masked.push_back(i);
    int64_t p2 = cfg_.patch * cfg_.patch;
    Tensor tgt = Tensor::zeros({int64_t(masked.size()), p2}, prec_);
    for (size_t i = 0; i < masked.size(); ++i)
        for (int64_t j = 0; j < p2; ++j)
            tgt.set_at(int64_t(i), j, pat.vectors.at(masked[i], j));
    int tgt_node = t.input(tgt);
    out.main = t.mse(recon, tgt_node);
    out.total = out.main;
    if (!aux.empty() && cfg_.lambda_aux > 0.0) {
        int sum = -1;
        for (int a : aux) {
            int l = t.mse(a, tgt_node);
            sum = sum < 0 ? l : t.add(sum, l);
        }
        out.aux = t.scale(sum, 1.0 / double(aux.size()));
        out.total = t.add(out.main, t.scale(out.aux, cfg_.lambda_aux));
    }
    return out;
}

int Model::loss(Tape& t, int recon, const std::vector<int>& aux, const Tensor& image,
                const MaskSpec& mask) {
    return loss_parts(t, recon, aux, image, mask).total;
}

int Model::forward_loss(Tape& t, const Tensor& image, const MaskSpec& mask) {
    EncodeResult enc = encode(t, image, mask);
    int recon = decode(t, enc, mask);
    std::vector<int> aux;
    if (cfg_.lambda_aux > 0.0) aux = deep_sup(t, enc, mask);
    return loss_parts(t, recon, aux, image, mask).total;
}

MaskSpec Model::make_mask(uint64_t seed) const {
    int64_t g = cfg_.image / cfg_.patch;
    MaskSpec m;
    if (cfg_.mask_strategy == "perlin") {
        Tensor field = perlin_field(g, g, kPerlinOctaves, kPerlinBaseFreq, kPerlinPersistence, seed);
        m = mask_from_field(field, cfg_.mask_ratio);
    } else {
        m = random_mask(g, g, cfg_.mask_ratio, seed);
    }
    m.patch = cfg_.patch;
    m.seed = seed;
    return m;
}

AdamW::AdamW(OptimConfig cfg, int64_t total_steps) : cfg_(cfg), total_(total_steps) {
    if (total_ < 1) throw ConfigError("optimizer needs at least one step");
}

double AdamW::lr_at(int64_t step) const {
    if (step < cfg_.warmup) return cfg_.lr * double(step + 1) / double(cfg_.warmup);
    int64_t span = std::max<int64_t>(1, total_ - cfg_.warmup);
    double prog = std::min(1.0, double(step - cfg_.warmup) / double(span));
    return cfg_.lr * 0.5 * (1.0 + std::cos(kPi * prog));
}

void AdamW::step(std::vector<Parameter*> params) {
    double lr = lr_at(t_);
    double n = double(t_ + 1);
    double bc1 = 1.0 - std::pow(cfg_.beta1, n);
    double bc2 = 1.0 - std::pow(cfg_.beta2, n);
    for (Parameter* p : params) {
        auto it = moments_.find(p);
        if (it == moments_.end())
            it = moments_
                     .emplace(p, std::make_pair(Tensor::zeros(p->value.dims(), Precision::b64),
                                                Tensor::zeros(p->value.dims(), Precision::b64)))
                     .first;
        Tensor& m = it->second.first;
        Tensor& v = it->second.second;
        // Decay is decoupled and applies to matrices only, never to biases,
        // gains, or other vector-shaped state.
        bool decay = p->value.dim(0) > 1;
        for (int64_t i = 0; i < p->value.numel(); ++i) {
            double g = p->grad.get(i);
            double mi = cfg_.beta1 * m.get(i) + (1.0 - cfg_.beta1) * g;
            double vi = cfg_.beta2 * v.get(i) + (1.0 - cfg_.beta2) * g * g;
            m.set(i, mi);
            v.set(i, vi);
            double upd = (mi / bc1) / (std::sqrt(vi / bc2) + kAdamEps);
            double val = p->value.get(i);
            if (decay) val -= lr * cfg_.weight_decay * val;
            p->value.set(i, val - lr * upd);
        }
    }
    ++t_;
}

TrainResult train(Model& model, int64_t steps, const std::vector<Tensor>& images,
                  int64_t rank_every, std::ostream* metrics_csv, const std::string& csv_comment) {
    if (steps < 1) throw ConfigError("train: steps must be >= 1");
    if (images.empty()) throw ConfigError("train: need at least one image");
    AdamW opt(model.config().optim, steps);
    std::vector<Parameter*> params = model.params().all();
    size_t ns = model.config().stages.size();

    if (metrics_csv) {
        if (!csv_comment.empty()) *metrics_csv << "# " << csv_comment << "\n";
        *metrics_csv << "step,loss,main,aux,lr";
        for (size_t s = 0; s < ns; ++s) *metrics_csv << ",r_hat_s" << s;
        *metrics_csv << "\n";
    }

    TrainResult out;
    for (int64_t step = 0; step < steps; ++step) {
        const Tensor& img = images[size_t(step % int64_t(images.size()))];
        MaskSpec mask =
            model.make_mask(mix64(model.config().seed * 0x9E3779B97F4A7C15ull + uint64_t(step)));
        Tape t(model.precision());
        EncodeResult enc = model.encode(t, img, mask);
        int recon = model.decode(t, enc, mask);
        std::vector<int> aux;
        if (model.config().lambda_aux > 0.0) aux = model.deep_sup(t, enc, mask);
        Model::LossNodes ln = model.loss_parts(t, recon, aux, img, mask);

        StepMetrics sm;
        sm.step = step;
        sm.loss = t.value(ln.total).get(0);
        sm.main = ln.main >= 0 ? t.value(ln.main).get(0) : 0.0;
        sm.aux = ln.aux >= 0 ? t.value(ln.aux).get(0) : 0.0;
        sm.lr = opt.lr_at(opt.steps_taken());
        if (!std::isfinite(sm.loss))
            throw NumericError("train: non-finite loss at step " + std::to_string(step));

        bool rank_now = rank_every > 0 && (step % rank_every == 0 || step + 1 == steps);
        if (rank_now)
            for (size_t s = 0; s < ns; ++s)
                sm.r_hat.push_back(effective_rank(t.value(enc.stages[s].feats)));

        if (mask.masked_count() > 0) {
            model.params().zero_grads();
            t.backward(ln.total);
            opt.step(params);
        }

        if (step == 0) out.first_loss = sm.loss;
        out.last_loss = sm.loss;
        if (rank_now) out.final_r_hat = sm.r_hat;

        if (metrics_csv) {
            std::ostream& os = *metrics_csv;
            os << step << ',' << std::setprecision(12) << sm.loss << ',' << sm.main << ','
               << sm.aux << ',' << sm.lr;
            for (size_t s = 0; s < ns; ++s) {
                os << ',';
                if (rank_now) os << sm.r_hat[s];
            }
            os << '\n';
        }
        out.log.push_back(std::move(sm));
    }
    return out;
}

double masked_mse(Model& model, const Tensor& image, const MaskSpec& mask) {
    Tape t(model.precision());
    EncodeResult enc = model.encode(t, image, mask);
    int recon = model.decode(t, enc, mask);
    if (recon < 0) return 0.0;
    Model::LossNodes ln = model.loss_parts(t, recon, {}, image, mask);
    return t.value(ln.main).get(0);
}

void save_checkpoint(const std::string& dir, ParamStore& store) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream index(fs::path(dir) / "manifest.tsv");
    if (!index) throw ConfigError("cannot write checkpoint index in " + dir);
    for (Parameter* p : store.all()) {
        std::string file = p->name + ".aft";
        write_aft((fs::path(dir) / file).string(), p->value);
        index << p->name << '\t';
        for (size_t d = 0; d < p->value.dims().size(); ++d)
            index << (d ? "x" : "") << p->value.dim(int64_t(d));
        index << '\t' << prec_name(p->value.precision()) << '\t' << file << '\n';
    }
}

void load_checkpoint(const std::string& dir, ParamStore& store) {
    namespace fs = std::filesystem;
    std::ifstream index(fs::path(dir) / "manifest.tsv");
    if (!index) throw ConfigError("no checkpoint index in " + dir);
    std::set<std::string> seen;
    std::string line;
    while (std::getline(index, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string name, dims, prec, file;
        if (!std::getline(ls, name, '\t') || !std::getline(ls, dims, '\t') ||
            !std::getline(ls, prec, '\t') || !std::getline(ls, file, '\t'))
            throw ConfigError("malformed checkpoint index line: " + line);
        Parameter* p = store.find(name);
        if (!p) throw ConfigError("checkpoint has unknown parameter: " + name);
        Tensor v = read_aft((fs::path(dir) / file).string());
        if (v.numel() != p->value.numel())
            throw ConfigError("checkpoint size mismatch for " + name + ": " + v.dims_str() +
                              " vs " + p->value.dims_str());
        for (int64_t i = 0; i < v.numel(); ++i) p->value.set(i, v.get(i));
        seen.insert(name);
    }
    for (Parameter* p : store.all())
        if (!seen.count(p->name))
            throw ConfigError("checkpoint is missing parameter: " + p->name);
}

} // namespace affmae
