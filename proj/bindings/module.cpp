// Python surface: numpy-backed wrappers over the main library operations.
// Arrays cross the boundary by copy; the library's own precision semantics
// (including binary16 round-through) stay inside the Tensor type.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "affmae/config.hpp"
#include "affmae/diagnostics.hpp"
#include "affmae/errors.hpp"
#include "affmae/geometry.hpp"
#include "affmae/interpolation.hpp"
#include "affmae/masking.hpp"
#include "affmae/merging.hpp"
#include "affmae/pipeline.hpp"
#include "affmae/tape.hpp"
#include "affmae/tensor.hpp"

namespace py = pybind11;
using namespace affmae;

namespace {

using DArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor tensor_2d(const DArray& a, Precision prec, const char* what) {
    if (a.ndim() != 2) throw ConfigError(std::string(what) + ": expected a 2-d array");
    Tensor t = Tensor::zeros({int64_t(a.shape(0)), int64_t(a.shape(1))}, prec);
    const double* p = a.data();
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, p[i]);
    return t;
}

py::array_t<double> array_2d(const Tensor& t) {
    py::array_t<double> a({t.rows(), t.cols()});
    double* p = a.mutable_data();
    for (int64_t i = 0; i < t.numel(); ++i) p[i] = t.get(i);
    return a;
}

Precision prec_of(const std::string& name) { return precision_from_name(name); }

py::array_t<bool> mask_array(const MaskSpec& m) {
    py::array_t<bool> a({m.hp, m.wp});
    bool* p = a.mutable_data();
    for (size_t i = 0; i < m.masked.size(); ++i) p[i] = m.masked[i] != 0;
    return a;
}

MaskSpec mask_build(const std::string& strategy, int64_t grid, double ratio, uint64_t seed,
                    int64_t patch) {
    MaskSpec m;
    if (strategy == "perlin")
        m = mask_from_field(
            perlin_field(grid, grid, kPerlinOctaves, kPerlinBaseFreq, kPerlinPersistence, seed),
            ratio);
    else if (strategy == "random")
        m = random_mask(grid, grid, ratio, seed);
    else
        throw ConfigError("unknown strategy: " + strategy);
    m.patch = patch;
    m.seed = seed;
    return m;
}

PipelineConfig toy_config(int64_t image, double lambda_aux, double lr, int64_t warmup,
                          double mask_ratio, const std::string& strategy, uint64_t seed) {
    PipelineConfig cfg = PipelineConfig::toy();
    cfg.image = image;
    cfg.lambda_aux = lambda_aux;
    cfg.optim.lr = lr;
    cfg.optim.warmup = warmup;
    cfg.mask_ratio = mask_ratio;
    cfg.mask_strategy = strategy;
    cfg.seed = seed;
    cfg.validate();
    return cfg;
}

} // namespace

PYBIND11_MODULE(_affmae, m) {
    m.doc() = "sparse hierarchical masked-autoencoder core";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

    // ---------------------------------------------------------- numerics
    m.def(
        "round_b16",
        [](const DArray& a) {
            py::array_t<double> out(std::vector<py::ssize_t>(a.shape(), a.shape() + a.ndim()));
            const double* src = a.data();
            double* dst = out.mutable_data();
            Tensor t = Tensor::zeros({1, 1}, Precision::b16emu);
            for (py::ssize_t i = 0; i < a.size(); ++i) {
                t.set(0, src[i]);
                dst[i] = t.get(0);
            }
            return out;
        },
        py::arg("values"), "round each value to the nearest IEEE binary16");

    // ---------------------------------------------------------- geometry
    m.def("hilbert_index", &hilbert_index, py::arg("n"), py::arg("x"), py::arg("y"));
    m.def(
        "sfc_order",
        [](const DArray& coords) {
            PointSet ps;
            ps.coords = tensor_2d(coords, Precision::b32, "sfc_order");
            return sfc_order(ps);
        },
        py::arg("coords"), "space-filling-curve token order for N x 2 coordinates");
    m.def(
        "knn",
        [](const DArray& queries, const DArray& keys, int64_t k) {
            PointSet ps;
            ps.coords = tensor_2d(keys, Precision::b32, "knn keys");
            Tensor q = tensor_2d(queries, Precision::b32, "knn queries");
            NeighborIndex nbr = knn(q, ps, k);
            py::array_t<int64_t> idx({nbr.queries(), nbr.width});
            py::array_t<bool> valid({nbr.queries(), nbr.width});
            for (size_t i = 0; i < nbr.idx.size(); ++i) {
                idx.mutable_data()[i] = nbr.idx[i];
                valid.mutable_data()[i] = nbr.valid[i] != 0;
            }
            return py::make_tuple(idx, valid);
        },
        py::arg("queries"), py::arg("keys"), py::arg("k"),
        "exact brute-force KNN; returns (indices, valid) of shape Q x k");

    // ---------------------------------------------------------- masking
    py::class_<MaskSpec>(m, "Mask")
        .def_readonly("hp", &MaskSpec::hp)
        .def_readonly("wp", &MaskSpec::wp)
        .def_readonly("patch", &MaskSpec::patch)
        .def_readonly("ratio", &MaskSpec::ratio)
        .def_readonly("seed", &MaskSpec::seed)
        .def_property_readonly("masked", &mask_array)
        .def("masked_count", &MaskSpec::masked_count)
        .def("__repr__", [](const MaskSpec& s) {
            return "Mask(" + std::to_string(s.hp) + "x" + std::to_string(s.wp) + ", masked " +
                   std::to_string(s.masked_count()) + ")";
        });

    m.def(
        "perlin_field",
        [](int64_t h, int64_t w, int octaves, double base_freq, double persistence,
           uint64_t seed) { return array_2d(perlin_field(h, w, octaves, base_freq, persistence, seed)); },
        py::arg("h"), py::arg("w"), py::arg("octaves") = kPerlinOctaves,
        py::arg("base_freq") = kPerlinBaseFreq, py::arg("persistence") = kPerlinPersistence,
        py::arg("seed") = 1);
    m.def("make_mask", &mask_build, py::arg("strategy"), py::arg("grid"), py::arg("ratio"),
          py::arg("seed") = 1, py::arg("patch") = 8,
          "perlin or random mask with an exact masked-cell count");
    m.def(
        "upsample_nearest",
        [](const DArray& grid, int64_t factor) {
            return array_2d(upsample_nearest(tensor_2d(grid, Precision::b64, "upsample"), factor));
        },
        py::arg("grid"), py::arg("factor"));
    m.def(
        "radial_psd",
        [](const DArray& grid) {
            PsdProfile p = radial_psd(tensor_2d(grid, Precision::b64, "radial_psd"));
            return py::make_tuple(py::array_t<double>(py::ssize_t(p.freq.size()), p.freq.data()),
                                  py::array_t<double>(py::ssize_t(p.power.size()), p.power.data()),
                                  py::array_t<int64_t>(py::ssize_t(p.count.size()), p.count.data()));
        },
        py::arg("grid"), "radially averaged power spectrum; returns (freq, power, count)");
    m.def(
        "psd_slope",
        [](const DArray& grid, double f_lo, double f_hi) {
            return psd_slope(radial_psd(tensor_2d(grid, Precision::b64, "psd_slope")), f_lo, f_hi);
        },
        py::arg("grid"), py::arg("f_lo"), py::arg("f_hi"),
        "alpha with PSD(f) ~ f^-alpha over the band");

    // ---------------------------------------------------------- interpolation
    m.def(
        "interp_softmax",
        [](std::pair<double, double> q, const DArray& coords, const DArray& feats,
           std::vector<int64_t> nbrs, double p, const std::string& precision) {
            double qq[2] = {q.first, q.second};
            InterpResult r =
                interp_softmax(qq, tensor_2d(coords, Precision::b32, "interp coords"),
                               tensor_2d(feats, Precision::b64, "interp feats"), nbrs, p,
                               kInterpEps, prec_of(precision));
            return py::make_tuple(py::array_t<double>(py::ssize_t(r.out.size()), r.out.data()),
                                  py::array_t<double>(py::ssize_t(r.weights.size()),
                                                      r.weights.data()),
                                  r.failed());
        },
        py::arg("query"), py::arg("coords"), py::arg("feats"), py::arg("neighbors"), py::arg("p"),
        py::arg("precision") = "b64",
        "temperature-softmax interpolation; returns (out, weights, failed)");
    m.def(
        "interp_invpow",
        [](std::pair<double, double> q, const DArray& coords, const DArray& feats,
           std::vector<int64_t> nbrs, double p, const std::string& precision) {
            double qq[2] = {q.first, q.second};
            InterpResult r =
                interp_invpow(qq, tensor_2d(coords, Precision::b32, "interp coords"),
                              tensor_2d(feats, Precision::b64, "interp feats"), nbrs, p,
                              kInterpEps, prec_of(precision));
            return py::make_tuple(py::array_t<double>(py::ssize_t(r.out.size()), r.out.data()),
                                  py::array_t<double>(py::ssize_t(r.weights.size()),
                                                      r.weights.data()),
                                  r.failed());
        },
        py::arg("query"), py::arg("coords"), py::arg("feats"), py::arg("neighbors"), py::arg("p"),
        py::arg("precision") = "b64");

    // ---------------------------------------------------------- merging
    m.def("retained_count", &retained_count, py::arg("n"), py::arg("d_s"));
    m.def(
        "select_retained",
        [](const DArray& scores, double d_s) {
            return select_retained(tensor_2d(scores, Precision::b64, "select_retained"), d_s);
        },
        py::arg("scores"), py::arg("d_s"), "indices of the top round(d_s * N) scores");

    // ---------------------------------------------------------- diagnostics
    m.def(
        "singular_values",
        [](const DArray& feats) {
            return singular_values(tensor_2d(feats, Precision::b64, "singular_values"));
        },
        py::arg("feats"));
    m.def(
        "effective_rank",
        [](const DArray& feats) {
            return effective_rank(tensor_2d(feats, Precision::b64, "effective_rank"));
        },
        py::arg("feats"), "normalized effective rank in (0, 1]");
    m.def(
        "pca_project",
        [](const DArray& feats, int64_t k) {
            PcaResult r = pca_project(tensor_2d(feats, Precision::b64, "pca_project"), k);
            return py::make_tuple(array_2d(r.projections),
                                  py::array_t<double>(py::ssize_t(r.variance.size()),
                                                      r.variance.data()));
        },
        py::arg("feats"), py::arg("k"));
    m.def(
        "flop_scaling",
        [](std::vector<int64_t> resolutions, int64_t image) {
            PipelineConfig cfg = PipelineConfig::toy();
            cfg.image = image;
            std::vector<FlopRow> rows = flop_report(cfg, resolutions);
            return py::make_tuple(scaling_exponent(rows, false), scaling_exponent(rows, true));
        },
        py::arg("resolutions"), py::arg("image") = 64,
        "(neighborhood, dense) fitted FLOP exponents vs pixel count");

    // ---------------------------------------------------------- pipeline
    m.def(
        "synth_image",
        [](int64_t size, uint64_t seed) { return array_2d(synth_image(size, seed)); },
        py::arg("size"), py::arg("seed") = 1, "procedural grayscale test image in [0, 1]");

    py::class_<Model>(m, "Model")
        .def(py::init([](int64_t image, double lambda_aux, double lr, int64_t warmup,
                         double mask_ratio, const std::string& strategy, uint64_t seed,
                         const std::string& precision) {
                 return std::make_unique<Model>(
                     toy_config(image, lambda_aux, lr, warmup, mask_ratio, strategy, seed),
                     prec_of(precision));
             }),
             py::arg("image") = 64, py::arg("lambda_aux") = 0.5, py::arg("lr") = 1e-3,
             py::arg("warmup") = 100, py::arg("mask_ratio") = 0.5,
             py::arg("strategy") = "perlin", py::arg("seed") = 1, py::arg("precision") = "b32")
        .def("make_mask", &Model::make_mask, py::arg("seed"))
        .def(
            "train",
            [](Model& model, int64_t steps, const std::vector<DArray>& images,
               int64_t rank_every) {
                std::vector<Tensor> imgs;
                for (const DArray& a : images)
                    imgs.push_back(tensor_2d(a, Precision::b64, "train image"));
                TrainResult r = train(model, steps, imgs, rank_every);
                py::dict out;
                out["first_loss"] = r.first_loss;
                out["last_loss"] = r.last_loss;
                out["final_r_hat"] = r.final_r_hat;
                return out;
            },
            py::arg("steps"), py::arg("images"), py::arg("rank_every") = 0,
            "train on a pool of images; returns summary losses and final per-stage rank")
        .def(
            "masked_mse",
            [](Model& model, const DArray& image, const MaskSpec& mask) {
                Tensor img = tensor_2d(image, Precision::b64, "masked_mse image");
                return masked_mse(model, img, mask);
            },
            py::arg("image"), py::arg("mask"))
        .def(
            "stage_ranks",
            [](Model& model, const DArray& image, const MaskSpec& mask) {
                Tensor img = tensor_2d(image, Precision::b64, "stage_ranks image");
                Tape t(model.precision());
                EncodeResult enc = model.encode(t, img, mask);
                std::vector<double> out;
                for (const EncodeStage& st : enc.stages)
                    out.push_back(effective_rank(t.value(st.feats)));
                return out;
            },
            py::arg("image"), py::arg("mask"),
            "per-stage normalized effective rank of the encoder features")
        .def(
            "stage_tokens",
            [](Model& model, const DArray& image, const MaskSpec& mask) {
                Tensor img = tensor_2d(image, Precision::b64, "stage_tokens image");
                Tape t(model.precision());
                EncodeResult enc = model.encode(t, img, mask);
                std::vector<py::array_t<double>> out;
                for (const EncodeStage& st : enc.stages) out.push_back(array_2d(st.coords));
                return out;
            },
            py::arg("image"), py::arg("mask"), "token coordinates entering each stage")
        .def("save", [](Model& model, const std::string& dir) { save_checkpoint(dir, model.params()); },
             py::arg("dir"))
        .def("load", [](Model& model, const std::string& dir) { load_checkpoint(dir, model.params()); },
             py::arg("dir"))
        .def_property_readonly("n_params", [](Model& model) {
            int64_t n = 0;
            for (Parameter* p : model.params().all()) n += p->value.numel();
            return n;
        });
}
