// Subcommand front end: every run resolves its config, executes one module
// pipeline, and leaves a manifest next to its outputs so the run can be
// reproduced bit for bit.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "affmae/attention.hpp"
#include "affmae/config.hpp"
#include "affmae/diagnostics.hpp"
#include "affmae/errors.hpp"
#include "affmae/geometry.hpp"
#include "affmae/gradcheck.hpp"
#include "affmae/interpolation.hpp"
#include "affmae/masking.hpp"
#include "affmae/merging.hpp"
#include "affmae/pipeline.hpp"
#include "affmae/rng.hpp"
#include "affmae/tape.hpp"
#include "affmae/tensor.hpp"
#include "affmae/tensor_io.hpp"

#ifndef AFFMAE_GIT_REV
#define AFFMAE_GIT_REV "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace affmae;

namespace {

// ------------------------------------------------------------ run plumbing

// Hash of the reproducible part of a run (subcommand, resolved config, seed);
// wall time and output paths stay out so reruns agree.
std::string manifest_hash(const std::string& sub, const json& config, uint64_t seed) {
    std::string canon = sub + "|" + config.dump() + "|" + std::to_string(seed);
    uint64_t h = 0x9e3779b97f4a7c15ull;
    for (unsigned char c : canon) h = mix64(h ^ uint64_t(c));
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", (unsigned long long)h);
    return buf;
}

struct RunContext {
    std::string sub;
    json config;
    uint64_t seed = 0;
    fs::path out;
    std::string hash;
    std::vector<std::string> outputs;
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();

    void open(const std::string& subcommand, const json& resolved, uint64_t run_seed,
              const std::string& out_dir) {
        sub = subcommand;
        config = resolved;
        seed = run_seed;
        out = out_dir.empty() ? fs::path("runs") / sub : fs::path(out_dir);
        hash = manifest_hash(sub, config, seed);
        fs::create_directories(out);
    }

    fs::path track(const std::string& name) {
        outputs.push_back(name);
        return out / name;
    }

    // every CSV starts with the manifest hash comment, then its header row
    std::ofstream csv(const std::string& name) {
        std::ofstream f(track(name));
        if (!f) throw ConfigError("cannot open for writing: " + (out / name).string());
        f << "# manifest " << hash << "\n";
        return f;
    }

    void finish() {
        double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        json m = {{"subcommand", sub}, {"config", config},       {"seed", seed},
                  {"build", AFFMAE_GIT_REV}, {"outputs", outputs}, {"wall_s", wall},
                  {"hash", hash}};
        std::ofstream f(out / "manifest.json");
        f << m.dump(2) << "\n";
        std::printf("manifest %s -> %s (%.2fs)\n", hash.c_str(), (out / "manifest.json").c_str(),
                    wall);
    }
};

// Fixed-order parallel map: worker threads race over indices but results land
// in index order, so accumulation downstream is schedule-independent.
void parallel_for(int64_t n, int threads, const std::function<void(int64_t)>& fn) {
    int tc = threads > 0 ? threads : int(std::thread::hardware_concurrency());
    tc = std::max(1, std::min<int>(tc, int(std::min<int64_t>(n, 64))));
    if (tc <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int64_t> next{0};
    std::vector<std::thread> pool;
    for (int t = 0; t < tc; ++t)
        pool.emplace_back([&] {
            for (int64_t i; (i = next.fetch_add(1)) < n;) fn(i);
        });
    for (std::thread& t : pool) t.join();
}

double ms_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
        .count();
}

// ------------------------------------------------- config <-> json

json config_to_json(const PipelineConfig& c, const std::string& precision) {
    json stages = json::array();
    for (const StageConfig& s : c.stages)
        stages.push_back({{"dim", s.dim},
                          {"heads", s.heads},
                          {"blocks", s.blocks},
                          {"cluster", s.cluster},
                          {"groups", s.groups},
                          {"d_s", s.d_s},
                          {"interp_k", s.interp_k}});
    return {{"image", c.image},
            {"patch", c.patch},
            {"stages", stages},
            {"decoder",
             {{"dim", c.decoder.dim},
              {"depth", c.decoder.depth},
              {"heads", c.decoder.heads},
              {"gather_k", c.decoder.gather_k},
              {"self_k", c.decoder.self_k}}},
            {"lambda_aux", c.lambda_aux},
            {"mask_strategy", c.mask_strategy},
            {"mask_ratio", c.mask_ratio},
            {"optim",
             {{"lr", c.optim.lr},
              {"warmup", c.optim.warmup},
              {"weight_decay", c.optim.weight_decay},
              {"beta1", c.optim.beta1},
              {"beta2", c.optim.beta2}}},
            {"seed", c.seed},
            {"bias_hidden", c.bias_hidden},
            {"scorer_hidden", c.scorer_hidden},
            {"merge_k", c.merge_k},
            {"precision", precision}};
}

PipelineConfig config_from_json(const json& j, Precision& prec) {
    PipelineConfig c;
    c.image = j.at("image");
    c.patch = j.at("patch");
    c.stages.clear();
    for (const json& js : j.at("stages")) {
        StageConfig s;
        s.dim = js.at("dim");
        s.heads = js.at("heads");
        s.blocks = js.at("blocks");
        s.cluster = js.at("cluster");
        s.groups = js.at("groups");
        s.d_s = js.at("d_s");
        s.interp_k = js.at("interp_k");
        c.stages.push_back(s);
    }
    const json& jd = j.at("decoder");
    c.decoder.dim = jd.at("dim");
    c.decoder.depth = jd.at("depth");
    c.decoder.heads = jd.at("heads");
    c.decoder.gather_k = jd.at("gather_k");
    c.decoder.self_k = jd.at("self_k");
    c.lambda_aux = j.at("lambda_aux");
    c.mask_strategy = j.at("mask_strategy");
    c.mask_ratio = j.at("mask_ratio");
    const json& jo = j.at("optim");
    c.optim.lr = jo.at("lr");
    c.optim.warmup = jo.at("warmup");
    c.optim.weight_decay = jo.at("weight_decay");
    c.optim.beta1 = jo.at("beta1");
    c.optim.beta2 = jo.at("beta2");
    c.seed = j.at("seed");
    c.bias_hidden = j.at("bias_hidden");
    c.scorer_hidden = j.at("scorer_hidden");
    c.merge_k = j.at("merge_k");
    std::string p = j.value("precision", "b32");
    if (p == "b32")
        prec = Precision::b32;
    else if (p == "b64")
        prec = Precision::b64;
    else if (p == "b16emu")
        prec = Precision::b16emu;
    else
        throw ConfigError("unknown precision: " + p);
    return c;
}

Precision parse_precision(const std::string& p) {
    if (p == "b32") return Precision::b32;
    if (p == "b64") return Precision::b64;
    if (p == "b16emu") return Precision::b16emu;
    throw ConfigError("unknown precision: " + p);
}

// Rebuild a trained model from a previous run directory: config comes from
// the manifest, weights from its checkpoint.
std::unique_ptr<Model> model_from_run(const fs::path& run) {
    fs::path mp = run / "manifest.json";
    std::ifstream f(mp);
    if (!f) throw ConfigError("missing manifest: " + mp.string());
    json m = json::parse(f, nullptr, false);
    if (m.is_discarded() || !m.contains("config"))
        throw ConfigError("unreadable manifest: " + mp.string());
    Precision prec = Precision::b32;
    PipelineConfig cfg = config_from_json(m.at("config"), prec);
    cfg.validate();
    auto model = std::make_unique<Model>(cfg, prec);
    load_checkpoint((run / "ckpt").string(), model->params());
    return model;
}

// ------------------------------------------------- shared mask construction

MaskSpec build_mask(const std::string& strategy, int64_t grid, double ratio, int64_t patch,
                    uint64_t seed) {
    MaskSpec m;
    if (strategy == "perlin")
        m = mask_from_field(
            perlin_field(grid, grid, kPerlinOctaves, kPerlinBaseFreq, kPerlinPersistence, seed),
            ratio);
    else if (strategy == "random")
        m = random_mask(grid, grid, ratio, seed);
    else
        throw ConfigError("unknown strategy: " + strategy + " (want perlin or random)");
    m.patch = patch;
    m.seed = seed;
    return m;
}

std::vector<double> tensor_gray(const Tensor& t) {
    std::vector<double> g(size_t(t.numel()));
    for (int64_t i = 0; i < t.numel(); ++i) g[size_t(i)] = t.get(i);
    return g;
}

// ---------------------------------------------------------- bench-attn

struct BenchAttnArgs {
    int64_t n = 256, m = 32;
    int heads = 4, head_dim = 16;
    int reps = 20;
    bool half_io = false;
    uint64_t seed = 1;
    std::string out;
};

int cmd_bench_attn(const BenchAttnArgs& a, int threads) {
    RunContext ctx;
    ctx.open("bench-attn",
             {{"n", a.n},
              {"m", a.m},
              {"heads", a.heads},
              {"head_dim", a.head_dim},
              {"reps", a.reps},
              {"half_io", a.half_io},
              {"threads", threads}},
             a.seed, a.out);

    Rng rng(a.seed);
    double side = 4.0 * std::sqrt(double(a.n));
    PointSet ps;
    ps.coords = Tensor::zeros({a.n, 2}, Precision::b32);
    for (int64_t i = 0; i < 2 * a.n; ++i) ps.coords.set(i, rng.uniform(0.0, side));
    NeighborIndex nbr = knn(ps.coords, ps, a.m);

    int64_t cols = int64_t(a.heads) * a.head_dim;
    Tensor q = Tensor::zeros({a.n, cols}, Precision::b32);
    Tensor k = q, v = q;
    for (Tensor* t : {&q, &k, &v})
        for (int64_t i = 0; i < t->numel(); ++i) t->set(i, 0.5 * rng.normal());
    Tensor blank_k = Tensor::zeros({a.heads, a.head_dim}, Precision::b32);
    Tensor blank_v = blank_k;
    for (Tensor* t : {&blank_k, &blank_v})
        for (int64_t i = 0; i < t->numel(); ++i) t->set(i, 0.5 * rng.normal());
    BiasNet bias = BiasNet::init(a.heads, 8, 8.0, a.seed + 17);

    AttnCtx ctxa;
    ctxa.q = &q;
    ctxa.k = &k;
    ctxa.v = &v;
    ctxa.blank_k = &blank_k;
    ctxa.blank_v = &blank_v;
    ctxa.coords = &ps.coords;
    ctxa.nbr = &nbr;
    ctxa.bias = &bias;
    ctxa.heads = a.heads;
    ctxa.head_dim = a.head_dim;
    ctxa.validate();

    Tensor ref = nbhd_attn_naive(ctxa);
    uint64_t flops = flop_count_attn(a.n, a.m, a.heads, a.head_dim);

    struct Row {
        std::string impl;
        double total_ms = 0.0, err = 0.0;
    };
    std::vector<Row> rows;

    auto bench = [&](const std::string& impl, auto&& call) {
        Tensor last = call();
        auto t0 = std::chrono::steady_clock::now();
        for (int r = 0; r < a.reps; ++r) last = call();
        double total = ms_since(t0);
        double err = 0.0;
        for (int64_t i = 0; i < last.numel(); ++i)
            err = std::max(err, std::abs(last.get(i) - ref.get(i)));
        if (!std::isfinite(err))
            throw NumericError("bench-attn: non-finite output in " + impl);
        rows.push_back({impl, total, err});
    };

    bench("naive", [&] { return nbhd_attn_naive(ctxa); });
    bench("streaming", [&] { return nbhd_attn_streaming(ctxa); });
    if (a.half_io) bench("streaming_half_io", [&] { return nbhd_attn_streaming(ctxa, true); });

    std::ofstream f = ctx.csv("bench.csv");
    f << "impl,n,m,heads,head_dim,reps,total_ms,per_call_ms,max_abs_err_vs_naive,flops_per_call\n";
    for (const Row& r : rows)
        f << r.impl << ',' << a.n << ',' << a.m << ',' << a.heads << ',' << a.head_dim << ','
          << a.reps << ',' << r.total_ms << ',' << r.total_ms / a.reps << ',' << r.err << ','
          << flops << '\n';

    for (const Row& r : rows)
        std::printf("%-18s %7.2f ms/call  max abs err %.3e\n", r.impl.c_str(),
                    r.total_ms / a.reps, r.err);
    ctx.finish();
    return 0;
}

// ---------------------------------------------------------- mask-gen

struct MaskGenArgs {
    std::string strategy = "perlin";
    double ratio = 0.5;
    int64_t grid = 64, patch = 8;
    int count = 16, previews = 4;
    uint64_t seed = 1;
    std::string out;
};

int cmd_mask_gen(const MaskGenArgs& a) {
    if (a.ratio < 0.0 || a.ratio > 1.0) throw ConfigError("mask-gen: ratio must be in [0, 1]");
    if (a.grid < 2) throw ConfigError("mask-gen: grid must be >= 2");
    RunContext ctx;
    ctx.open("mask-gen",
             {{"strategy", a.strategy},
              {"ratio", a.ratio},
              {"grid", a.grid},
              {"patch", a.patch},
              {"count", a.count},
              {"previews", a.previews}},
             a.seed, a.out);

    std::ofstream f = ctx.csv("masks.csv");
    f << "index,seed,cells,masked,ratio_requested,ratio_actual\n";
    for (int i = 0; i < a.count; ++i) {
        uint64_t si = mix64(a.seed * 0x9e3779b97f4a7c15ull + uint64_t(i));
        MaskSpec m = build_mask(a.strategy, a.grid, a.ratio, a.patch, si);
        f << i << ',' << si << ',' << m.cells() << ',' << m.masked_count() << ',' << a.ratio
          << ',' << double(m.masked_count()) / double(m.cells()) << '\n';
        if (i < a.previews) {
            Tensor up = upsample_nearest(mask_tensor(m), a.patch);
            char name[64];
            std::snprintf(name, sizeof name, "mask_%03d.pgm", i);
            write_pgm(ctx.track(name).string(), up.rows(), up.cols(), tensor_gray(up));
        }
    }
    std::printf("%d %s masks on %lldx%lld, %lld masked cells each\n", a.count,
                a.strategy.c_str(), (long long)a.grid, (long long)a.grid,
                (long long)llround(a.ratio * double(a.grid * a.grid)));
    ctx.finish();
    return 0;
}

// ---------------------------------------------------------- psd

struct PsdArgs {
    std::string strategy = "both";
    double ratio = 0.5;
    int64_t grid = 64;
    int samples = 640;
    double mid_lo = 2.0, mid_hi = 8.0, high_lo = 8.0, high_hi = 24.0;
    uint64_t seed = 1;
    std::string out;
};

// mean radial profile over `samples` masks; generation fans out over threads,
// accumulation runs in index order
PsdProfile mean_psd(const std::string& strategy, const PsdArgs& a, int threads) {
    std::vector<PsdProfile> per(size_t(a.samples));
    parallel_for(a.samples, threads, [&](int64_t i) {
        uint64_t si = mix64(a.seed * 0x9e3779b97f4a7c15ull + uint64_t(i));
        MaskSpec m = build_mask(strategy, a.grid, a.ratio, 8, si);
        per[size_t(i)] = radial_psd(mask_tensor(m));
    });
    PsdProfile acc = per[0];
    std::fill(acc.power.begin(), acc.power.end(), 0.0);
    for (const PsdProfile& p : per)
        for (size_t b = 0; b < acc.power.size(); ++b) acc.power[b] += p.power[b] / a.samples;
    return acc;
}

// raw log-log slope over a band, or nan when the band has no usable power
double band_slope(const PsdProfile& p, double lo, double hi) {
    int64_t usable = 0;
    for (size_t i = 0; i < p.freq.size(); ++i)
        if (p.freq[i] >= lo && p.freq[i] <= hi && p.freq[i] > 0.0 && p.power[i] > 0.0) ++usable;
    if (usable < 2) return std::nan("");
    return -psd_slope(p, lo, hi);
}

int cmd_psd(const PsdArgs& a, int threads) {
    if (a.ratio < 0.0 || a.ratio > 1.0) throw ConfigError("psd: ratio must be in [0, 1]");
    if (a.samples < 1) throw ConfigError("psd: samples must be >= 1");
    if ((a.grid & (a.grid - 1)) != 0 || a.grid < 8)
        throw ConfigError("psd: grid must be a power of two >= 8");
    RunContext ctx;
    ctx.open("psd",
             {{"strategy", a.strategy},
              {"ratio", a.ratio},
              {"grid", a.grid},
              {"samples", a.samples},
              {"mid_band", {a.mid_lo, a.mid_hi}},
              {"high_band", {a.high_lo, a.high_hi}},
              {"threads", threads}},
             a.seed, a.out);

    std::vector<std::string> kinds;
    if (a.strategy == "both")
        kinds = {"perlin", "random"};
    else
        kinds = {a.strategy};

    std::ofstream sf = ctx.csv("slopes.csv");
    sf << "strategy,band,f_lo,f_hi,slope\n";
    std::map<std::string, std::pair<double, double>> fit;
    for (const std::string& kind : kinds) {
        PsdProfile acc = mean_psd(kind, a, threads);
        std::ofstream f = ctx.csv("psd_" + kind + ".csv");
        f << "freq,power,count\n";
        for (size_t i = 0; i < acc.freq.size(); ++i)
            f << acc.freq[i] << ',' << acc.power[i] << ',' << acc.count[i] << '\n';

        double mid = band_slope(acc, a.mid_lo, a.mid_hi);
        double high = band_slope(acc, a.high_lo, a.high_hi);
        fit[kind] = {mid, high};
        sf << kind << ",mid," << a.mid_lo << ',' << a.mid_hi << ',' << mid << '\n';
        sf << kind << ",high," << a.high_lo << ',' << a.high_hi << ',' << high << '\n';
        std::printf("%-7s mid [%g,%g] slope %s%.4f  high [%g,%g] slope %s%.4f\n", kind.c_str(),
                    a.mid_lo, a.mid_hi, std::isnan(mid) ? "undefined " : "", mid, a.high_lo,
                    a.high_hi, std::isnan(high) ? "undefined " : "", high);

        uint64_t s0 = mix64(a.seed * 0x9e3779b97f4a7c15ull);
        Tensor up = upsample_nearest(mask_tensor(build_mask(kind, a.grid, a.ratio, 8, s0)), 8);
        write_pgm(ctx.track("preview_" + kind + ".pgm").string(), up.rows(), up.cols(),
                  tensor_gray(up));
    }
    if (kinds.size() == 2) {
        double pm = fit["perlin"].first, rm = fit["random"].first;
        if (!std::isnan(pm) && !std::isnan(rm))
            std::printf("perlin mid-band slope more negative than random: %s (%.4f vs %.4f)\n",
                        pm < rm ? "yes" : "NO", pm, rm);
    }
    ctx.finish();
    return 0;
}

// ---------------------------------------------------------- train-toy

struct TrainToyArgs {
    int64_t image = 64;
    int64_t steps = 800;
    int pool = 8;
    double lambda = 0.5, lr = 1e-3, mask_ratio = 0.5;
    int64_t warmup = 100;
    std::string strategy = "perlin";
    int64_t rank_every = 100;
    std::string precision = "b32";
    uint64_t seed = 1;
    std::string out;
};

int cmd_train_toy(const TrainToyArgs& a) {
    PipelineConfig cfg = PipelineConfig::toy();
    cfg.image = a.image;
    cfg.lambda_aux = a.lambda;
    cfg.optim.lr = a.lr;
    cfg.optim.warmup = a.warmup;
    cfg.mask_ratio = a.mask_ratio;
    cfg.mask_strategy = a.strategy;
    cfg.seed = a.seed;
    cfg.validate();
    if (a.steps < 1) throw ConfigError("train-toy: steps must be >= 1");
    if (a.pool < 1) throw ConfigError("train-toy: pool must be >= 1");
    Precision prec = parse_precision(a.precision);

    RunContext ctx;
    json jc = config_to_json(cfg, a.precision);
    jc["steps"] = a.steps;
    jc["pool"] = a.pool;
    jc["rank_every"] = a.rank_every;
    ctx.open("train-toy", jc, a.seed, a.out);

    std::vector<Tensor> images;
    for (int i = 0; i < a.pool; ++i) images.push_back(synth_image(a.image, uint64_t(400 + i)));

    Model model(cfg, prec);
    std::ofstream csv = ctx.csv("metrics.csv");
    TrainResult res = train(model, a.steps, images, a.rank_every, &csv, "");
    save_checkpoint((ctx.out / "ckpt").string(), model.params());
    ctx.outputs.push_back("ckpt");

    std::printf("loss %.4f -> %.4f over %lld steps\n", res.first_loss, res.last_loss,
                (long long)a.steps);
    if (!res.final_r_hat.empty()) {
        std::printf("final r_hat per stage:");
        for (double r : res.final_r_hat) std::printf(" %.4f", r);
        std::printf("\n");
    }
    ctx.finish();
    return 0;
}

// ---------------------------------------------------------- diag-rank

struct DiagRankArgs {
    std::string run, baseline;
    int samples = 4;
    double min_gap = std::nan("");
    uint64_t seed = 900;
    std::string out;
};

std::vector<double> mean_stage_rank(Model& model, const DiagRankArgs& a, std::ofstream& f) {
    const PipelineConfig& cfg = model.config();
    std::vector<double> mean(cfg.stages.size(), 0.0);
    for (int s = 0; s < a.samples; ++s) {
        Tensor img = synth_image(cfg.image, a.seed + uint64_t(s));
        MaskSpec mask = model.make_mask(mix64(a.seed) + uint64_t(s));
        Tape t(model.precision());
        EncodeResult enc = model.encode(t, img, mask);
        for (size_t st = 0; st < enc.stages.size(); ++st) {
            RankReport rr = rank_report(t.value(enc.stages[st].feats), int(st));
            f << s << ',' << st << ',' << rr.tokens << ',' << rr.dim << ',' << rr.r_hat << '\n';
            mean[st] += rr.r_hat / a.samples;
        }
    }
    return mean;
}

int cmd_diag_rank(const DiagRankArgs& a) {
    RunContext ctx;
    ctx.open("diag-rank",
             {{"run", a.run}, {"baseline", a.baseline}, {"samples", a.samples},
              {"min_gap", std::isnan(a.min_gap) ? json() : json(a.min_gap)}},
             a.seed, a.out);

    std::unique_ptr<Model> model = model_from_run(a.run);
    std::ofstream f = ctx.csv("rank.csv");
    f << "sample,stage,tokens,dim,r_hat\n";
    std::vector<double> mean = mean_stage_rank(*model, a, f);
    std::printf("run %s mean r_hat per stage:", a.run.c_str());
    for (double r : mean) std::printf(" %.4f", r);
    std::printf("\n");

    int rc = 0;
    if (!a.baseline.empty()) {
        std::unique_ptr<Model> base = model_from_run(a.baseline);
        std::ofstream bf = ctx.csv("rank_baseline.csv");
        bf << "sample,stage,tokens,dim,r_hat\n";
        std::vector<double> bmean = mean_stage_rank(*base, a, bf);
        double gap = mean.back() - bmean.back();
        std::printf("final-stage gap vs baseline: %.4f\n", gap);
        if (!std::isnan(a.min_gap) && !(gap >= a.min_gap)) {
            std::printf("FAIL: gap %.4f below required %.4f\n", gap, a.min_gap);
            rc = 4;
        }
    }
    ctx.finish();
    return rc;
}

// ---------------------------------------------------------- viz-tokens

struct VizArgs {
    std::string run;
    uint64_t image_seed = 5;
    std::string out;
};

int cmd_viz_tokens(const VizArgs& a) {
    RunContext ctx;
    ctx.open("viz-tokens", {{"run", a.run}, {"image_seed", a.image_seed}}, a.image_seed, a.out);

    std::unique_ptr<Model> model = model_from_run(a.run);
    const PipelineConfig& cfg = model->config();
    Tensor img = synth_image(cfg.image, a.image_seed);

    // unmasked pass: the token maps describe the encoder's own downsampling
    MaskSpec none;
    none.hp = none.wp = cfg.image / cfg.patch;
    none.patch = cfg.patch;
    none.ratio = 0.0;
    none.masked.assign(size_t(none.cells()), 0);

    Tape t(model->precision());
    EncodeResult enc = model->encode(t, img, none);

    int64_t side = cfg.image;
    for (size_t s = 0; s < enc.stages.size(); ++s) {
        const Tensor& coords = enc.stages[s].coords;
        std::vector<double> rgb(size_t(side * side * 3));
        for (int64_t i = 0; i < side * side; ++i) {
            double g = 0.6 * img.get(i);
            rgb[size_t(3 * i)] = rgb[size_t(3 * i + 1)] = rgb[size_t(3 * i + 2)] = g;
        }
        for (int64_t i = 0; i < coords.rows(); ++i) {
            int64_t cx = llround(coords.get(i * 2)), cy = llround(coords.get(i * 2 + 1));
            for (int64_t dy = -1; dy <= 1; ++dy)
                for (int64_t dx = -1; dx <= 1; ++dx) {
                    int64_t x = cx + dx, y = cy + dy;
                    if (x < 0 || y < 0 || x >= side || y >= side) continue;
                    size_t p = size_t(3 * (y * side + x));
                    rgb[p] = 1.0;
                    rgb[p + 1] = 0.25;
                    rgb[p + 2] = 0.1;
                }
        }
        char name[64];
        std::snprintf(name, sizeof name, "tokens_s%zu.ppm", s);
        write_ppm(ctx.track(name).string(), side, side, rgb);
        std::printf("stage %zu: %lld tokens -> %s\n", s, (long long)coords.rows(), name);
    }
    ctx.finish();
    return 0;
}

// ---------------------------------------------------------- gradcheck

struct GradcheckArgs {
    int seeds = 5;
    uint64_t seed = 1;
    std::string out;
};

Tensor gc_randn(Rng& rng, std::initializer_list<int64_t> dims, double scale = 1.0) {
    Tensor t = Tensor::zeros(dims, Precision::b64);
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, scale * rng.normal());
    return t;
}

struct GcRow {
    std::string suite;
    int64_t checked = 0;
    double max_err = 0.0;
    bool ok = true;

    void fold(const GradCheckResult& r) {
        checked += r.checked;
        max_err = std::max(max_err, r.max_rel_err);
        ok = ok && r.pass(1e-6);
    }
};

// weighted reduction so every output element carries a distinct cotangent
int gc_root(Tape& t, int node) {
    const Tensor& v = t.value(node);
    Tensor w = Tensor::zeros(v.dims(), Precision::b64);
    for (int64_t i = 0; i < w.numel(); ++i) w.set(i, 0.3 + 0.1 * double(i % 7));
    return t.reduce_sum(t.mul(node, t.input(w)));
}

void gc_builtins(std::vector<GcRow>& rows, int seeds) {
    struct Case {
        const char* name;
        std::vector<Tensor> (*inputs)(Rng&);
        int (*build)(Tape&, const std::vector<int>&);
    };
    auto two34 = [](Rng& r) { return std::vector<Tensor>{gc_randn(r, {3, 4}), gc_randn(r, {3, 4})}; };
    const Case cases[] = {
        {"matmul", [](Rng& r) { return std::vector<Tensor>{gc_randn(r, {3, 4}), gc_randn(r, {4, 2})}; },
         [](Tape& t, const std::vector<int>& in) { return gc_root(t, t.matmul(in[0], in[1])); }},
        {"add", two34,
         [](Tape& t, const std::vector<int>& in) { return gc_root(t, t.add(in[0], in[1])); }},
        {"mul", two34,
         [](Tape& t, const std::vector<int>& in) { return gc_root(t, t.mul(in[0], in[1])); }},
        {"mul_col", [](Rng& r) { return std::vector<Tensor>{gc_randn(r, {3, 4}), gc_randn(r, {3, 1})}; },
         [](Tape& t, const std::vector<int>& in) { return gc_root(t, t.mul_col(in[0], in[1])); }},
        {"scale", [](Rng& r) { return std::vector<Tensor>{gc_randn(r, {3, 4})}; },
         [](Tape& t, const std::vector<int>& in) { return gc_root(t, t.scale(in[0], -1.7)); }},
        {"add_row", [](Rng& r) { return std::vector<Tensor>{gc_randn(r, {3, 4}), gc_randn(r, {1, 4})}; },
         [](Tape& t, const std::vector<int>& in) { return gc_root(t, t.add_row(in[0], in[1])); }},
        {"softmax_rows", [](Rng& r) { return std::vector<Tensor>{gc_randn(r, {3, 5})}; },
         [](Tape& t, const std::vector<int>& in) { return gc_root(t, t.softmax_rows(in[0])); }},
        {"layer_norm",
         [](Rng& r) {
             return std::vector<Tensor>{gc_randn(r, {3, 6}), gc_randn(r, {1, 6}, 0.5),
                                        gc_randn(r, {1, 6}, 0.5)};
         },
         [](Tape& t, const std::vector<int>& in) {
             return gc_root(t, t.layer_norm(in[0], in[1], in[2]));
         }},
        {"gelu", [](Rng& r) { return std::vector<Tensor>{gc_randn(r, {3, 4})}; },
         [](Tape& t, const std::vector<int>& in) { return gc_root(t, t.gelu(in[0])); }},
        {"sigmoid", [](Rng& r) { return std::vector<Tensor>{gc_randn(r, {3, 4})}; },
         [](Tape& t, const std::vector<int>& in) { return gc_root(t, t.sigmoid(in[0])); }},
        {"gather_rows", [](Rng& r) { return std::vector<Tensor>{gc_randn(r, {5, 3})}; },
         [](Tape& t, const std::vector<int>& in) {
             return gc_root(t, t.gather_rows(in[0], {4, 0, 2, 2}));
         }},
        {"scatter_add_rows", [](Rng& r) { return std::vector<Tensor>{gc_randn(r, {4, 3})}; },
         [](Tape& t, const std::vector<int>& in) {
             return gc_root(t, t.scatter_add_rows(in[0], {2, 0, 2, 1}, 3));
         }},
        {"concat_cols", [](Rng& r) { return std::vector<Tensor>{gc_randn(r, {3, 2}), gc_randn(r, {3, 4})}; },
         [](Tape& t, const std::vector<int>& in) { return gc_root(t, t.concat_cols(in[0], in[1])); }},
        {"repeat_row", [](Rng& r) { return std::vector<Tensor>{gc_randn(r, {1, 4})}; },
         [](Tape& t, const std::vector<int>& in) { return gc_root(t, t.repeat_row(in[0], 5)); }},
        {"reduce_sum", [](Rng& r) { return std::vector<Tensor>{gc_randn(r, {3, 4})}; },
         [](Tape& t, const std::vector<int>& in) { return t.reduce_sum(in[0]); }},
        {"reduce_mean", [](Rng& r) { return std::vector<Tensor>{gc_randn(r, {3, 4})}; },
         [](Tape& t, const std::vector<int>& in) { return t.reduce_mean(in[0]); }},
        {"mse", two34,
         [](Tape& t, const std::vector<int>& in) { return t.mse(in[0], in[1]); }},
    };
    for (const Case& c : cases) {
        GcRow row{c.name};
        for (int s = 1; s <= seeds; ++s) {
            Rng rng(uint64_t(s) * 733);
            row.fold(grad_check(c.inputs(rng), c.build));
        }
        rows.push_back(row);
    }
}

void gc_attention(std::vector<GcRow>& rows, int seeds) {
    GcRow row{"attn_op"};
    for (int s = 1; s <= seeds; ++s) {
        Rng rng(5000 + uint64_t(s));
        int64_t n = 6;
        int heads = 2, hd = 3;
        PointSet ps;
        ps.coords = Tensor::zeros({n, 2}, Precision::b32);
        for (int64_t i = 0; i < 2 * n; ++i) ps.coords.set(i, rng.uniform(0.0, 20.0));
        NeighborIndex nbr = knn(ps.coords, ps, 3);
        auto op = make_attn_op(ps.coords, nbr, heads, hd, 2, 8.0);
        std::vector<Tensor> in = {gc_randn(rng, {n, heads * hd}, 0.5),
                                  gc_randn(rng, {n, heads * hd}, 0.5),
                                  gc_randn(rng, {n, heads * hd}, 0.5),
                                  gc_randn(rng, {heads, hd}, 0.5),
                                  gc_randn(rng, {heads, hd}, 0.5),
                                  gc_randn(rng, {heads, 4}, 0.4),
                                  gc_randn(rng, {heads, 2}, 0.4),
                                  gc_randn(rng, {heads, 2}, 0.4),
                                  gc_randn(rng, {heads, 1}, 0.4),
                                  gc_randn(rng, {heads, 1}, 0.4)};
        row.fold(grad_check(in, [&](Tape& t, const std::vector<int>& ids) {
            return gc_root(t, t.custom(op, ids));
        }));
    }
    rows.push_back(row);
}

void gc_interp(std::vector<GcRow>& rows, int seeds) {
    GcRow soft{"interp_op"};
    for (int s = 1; s <= seeds; ++s) {
        Rng rng(6000 + uint64_t(s));
        int64_t n = 7, qn = 3;
        Tensor coords = Tensor::zeros({n, 2}, Precision::b32);
        for (int64_t i = 0; i < 2 * n; ++i) coords.set(i, rng.uniform(0.0, 16.0));
        Tensor queries = Tensor::zeros({qn, 2}, Precision::b64);
        for (int64_t i = 0; i < 2 * qn; ++i) queries.set(i, rng.uniform(1.0, 15.0));
        PointSet ps;
        ps.coords = coords;
        Tensor q32 = Tensor::zeros({qn, 2}, Precision::b32);
        for (int64_t i = 0; i < 2 * qn; ++i) q32.set(i, queries.get(i));
        NeighborIndex nbr = knn(q32, ps, 4);
        auto op = make_interp_op(coords, nbr);
        std::vector<Tensor> in = {gc_randn(rng, {n, 3}), Tensor::full({1, 1}, 1.3, Precision::b64),
                                  queries};
        soft.fold(grad_check(in, [&](Tape& t, const std::vector<int>& ids) {
            return gc_root(t, t.custom(op, ids));
        }));
    }
    rows.push_back(soft);

    // the inverse-power kernel has no tape op; check its hand backward by FD
    GcRow inv{"invpow_backward"};
    for (int s = 1; s <= seeds; ++s) {
        Rng rng(7000 + uint64_t(s));
        int64_t n = 5, dim = 3;
        Tensor coords = Tensor::zeros({n, 2}, Precision::b32);
        for (int64_t i = 0; i < 2 * n; ++i) coords.set(i, rng.uniform(0.0, 10.0));
        Tensor feats = gc_randn(rng, {n, dim});
        double q[2] = {rng.uniform(2.0, 8.0), rng.uniform(2.0, 8.0)};
        std::vector<int64_t> nbrs = {0, 1, 2, 3, 4};
        double p = rng.uniform(1.2, 2.2);
        std::vector<double> cot(static_cast<size_t>(dim));
        for (double& c : cot) c = rng.uniform(0.2, 1.0);
        InterpGrads g = interp_invpow_backward(q, coords, feats, nbrs, p, kInterpEps, cot);

        const double h = 1e-5;
        auto value = [&](double pp, const Tensor& ff) {
            InterpResult r = interp_invpow(q, coords, ff, nbrs, pp, kInterpEps, Precision::b64);
            double acc = 0.0;
            for (int64_t d = 0; d < dim; ++d) acc += cot[size_t(d)] * r.out[size_t(d)];
            return acc;
        };
        GradCheckResult res;
        auto fold_one = [&](double analytic, double fplus, double fminus) {
            double fd = (fplus - fminus) / (2 * h);
            double err = std::abs(analytic - fd) /
                         std::max({std::abs(analytic), std::abs(fd), 1e-3});
            res.max_rel_err = std::max(res.max_rel_err, err);
            ++res.checked;
        };
        fold_one(g.dp, value(p + h, feats), value(p - h, feats));
        for (int64_t i = 0; i < n * dim; ++i) {
            Tensor fp = feats, fm = feats;
            fp.set(i, fp.get(i) + h);
            fm.set(i, fm.get(i) - h);
            fold_one(g.df[size_t(i)], value(p, fp), value(p, fm));
        }
        inv.fold(res);
    }
    rows.push_back(inv);
}

void gc_merge(std::vector<GcRow>& rows, int seeds) {
    GcRow row{"merge_pool_op"};
    for (int s = 1; s <= seeds; ++s) {
        Rng rng(8000 + uint64_t(s));
        int64_t n = 9, dim = 4;
        PointSet ps;
        ps.coords = Tensor::zeros({n, 2}, Precision::b32);
        for (int64_t i = 0; i < 2 * n; ++i) ps.coords.set(i, rng.uniform(0.0, 24.0));
        Tensor scores = Tensor::zeros({n, 1}, Precision::b64);
        for (int64_t i = 0; i < n; ++i) scores.set(i, rng.uniform(0.1, 1.0));
        std::vector<int64_t> retained = select_retained(scores, 0.4);
        MergePlan plan = merge_plan(ps, retained, 4);
        auto op = make_merge_pool_op(plan);
        std::vector<Tensor> in = {gc_randn(rng, {n, dim}), scores,
                                  Tensor::full({1, 1}, 1.4, Precision::b64)};
        row.fold(grad_check(in, [&](Tape& t, const std::vector<int>& ids) {
            return gc_root(t, t.custom(op, ids));
        }));
    }
    rows.push_back(row);
}

void gc_pipeline(std::vector<GcRow>& rows, int seeds) {
    // end to end: leaf tensors feeding loss assembly through the real model
    GcRow row{"loss_assembly"};
    PipelineConfig cfg = PipelineConfig::toy();
    cfg.image = 32;
    Model model(cfg, Precision::b64);
    Tensor img = synth_image(32, 7);
    MaskSpec mask = model.make_mask(3);
    int64_t qn = mask.masked_count(), p2 = cfg.patch * cfg.patch;
    for (int s = 1; s <= seeds; ++s) {
        Rng rng(9000 + uint64_t(s));
        std::vector<Tensor> in = {gc_randn(rng, {qn, p2}), gc_randn(rng, {qn, p2})};
        row.fold(grad_check(in, [&](Tape& t, const std::vector<int>& ids) {
            return model.loss_parts(t, ids[0], {ids[1]}, img, mask).total;
        }));
    }
    rows.push_back(row);
}

int cmd_gradcheck(const GradcheckArgs& a) {
    if (a.seeds < 1) throw ConfigError("gradcheck: seeds must be >= 1");
    RunContext ctx;
    ctx.open("gradcheck", {{"seeds", a.seeds}}, a.seed, a.out);

    std::vector<GcRow> rows;
    gc_builtins(rows, a.seeds);
    gc_attention(rows, a.seeds);
    gc_interp(rows, a.seeds);
    gc_merge(rows, a.seeds);
    gc_pipeline(rows, a.seeds);

    std::ofstream f = ctx.csv("gradcheck.csv");
    f << "suite,checked,max_rel_err,pass\n";
    bool all_ok = true;
    for (const GcRow& r : rows) {
        f << r.suite << ',' << r.checked << ',' << r.max_err << ',' << (r.ok ? 1 : 0) << '\n';
        std::printf("[%s] %-18s %6lld checks  max rel err %.3e\n", r.ok ? "PASS" : "FAIL",
                    r.suite.c_str(), (long long)r.checked, r.max_err);
        all_ok = all_ok && r.ok;
    }
    ctx.finish();
    return all_ok ? 0 : 4;
}

} // namespace

// ---------------------------------------------------------------- main

int main(int argc, char** argv) {
    CLI::App app{"sparse hierarchical masked-autoencoder toolkit"};
    app.require_subcommand(1);
    app.set_config("--config", "", "ini file with long-option values; flags override");

    int threads = 0;
    app.add_option("--threads", threads, "worker cap for parallel sections (0 = hardware)")
        ->check(CLI::NonNegativeNumber);

    BenchAttnArgs ba;
    CLI::App* bench = app.add_subcommand("bench-attn", "time naive vs streaming attention");
    bench->add_option("--n", ba.n, "query/key tokens")->check(CLI::PositiveNumber);
    bench->add_option("--m", ba.m, "neighbors per query")->check(CLI::PositiveNumber);
    bench->add_option("--heads", ba.heads)->check(CLI::PositiveNumber);
    bench->add_option("--head-dim", ba.head_dim)->check(CLI::PositiveNumber);
    bench->add_option("--reps", ba.reps)->check(CLI::PositiveNumber);
    bench->add_flag("--half-io", ba.half_io, "also time the binary16-rounded I/O path");
    bench->add_option("--seed", ba.seed);
    bench->add_option("--out", ba.out, "output directory")->envname("AFFMAE_OUT");

    MaskGenArgs mg;
    CLI::App* mgen = app.add_subcommand("mask-gen", "generate a batch of masks with previews");
    mgen->add_option("--strategy", mg.strategy)->check(CLI::IsMember({"perlin", "random"}));
    mgen->add_option("--ratio", mg.ratio);
    mgen->add_option("--grid", mg.grid, "mask side in patch cells");
    mgen->add_option("--patch", mg.patch)->check(CLI::PositiveNumber);
    mgen->add_option("--count", mg.count)->check(CLI::PositiveNumber);
    mgen->add_option("--previews", mg.previews)->check(CLI::NonNegativeNumber);
    mgen->add_option("--seed", mg.seed);
    mgen->add_option("--out", mg.out, "output directory")->envname("AFFMAE_OUT");

    PsdArgs pa;
    CLI::App* psd = app.add_subcommand("psd", "averaged radial mask spectra and slope fits");
    psd->add_option("--strategy", pa.strategy)->check(CLI::IsMember({"perlin", "random", "both"}));
    psd->add_option("--ratio", pa.ratio);
    psd->add_option("--grid", pa.grid);
    psd->add_option("--samples", pa.samples)->check(CLI::PositiveNumber);
    psd->add_option("--mid-lo", pa.mid_lo);
    psd->add_option("--mid-hi", pa.mid_hi);
    psd->add_option("--high-lo", pa.high_lo);
    psd->add_option("--high-hi", pa.high_hi);
    psd->add_option("--seed", pa.seed);
    psd->add_option("--out", pa.out, "output directory")->envname("AFFMAE_OUT");

    TrainToyArgs ta;
    CLI::App* tt = app.add_subcommand("train-toy", "train on synthetic images, checkpoint + metrics");
    tt->add_option("--image", ta.image, "image side in pixels");
    tt->add_option("--steps", ta.steps);
    tt->add_option("--pool", ta.pool, "synthetic image pool size");
    tt->add_option("--lambda", ta.lambda, "deep-supervision weight");
    tt->add_option("--lr", ta.lr);
    tt->add_option("--warmup", ta.warmup);
    tt->add_option("--mask-ratio", ta.mask_ratio);
    tt->add_option("--strategy", ta.strategy)->check(CLI::IsMember({"perlin", "random"}));
    tt->add_option("--rank-every", ta.rank_every)->check(CLI::NonNegativeNumber);
    tt->add_option("--precision", ta.precision)->check(CLI::IsMember({"b32", "b64", "b16emu"}));
    tt->add_option("--seed", ta.seed);
    tt->add_option("--out", ta.out, "output directory")->envname("AFFMAE_OUT");

    DiagRankArgs da;
    CLI::App* dr = app.add_subcommand("diag-rank", "effective-rank report for a trained run");
    dr->add_option("--run", da.run, "train-toy run directory")->required();
    dr->add_option("--baseline", da.baseline, "second run to diff against");
    dr->add_option("--samples", da.samples)->check(CLI::PositiveNumber);
    dr->add_option("--min-gap", da.min_gap, "fail (exit 4) when final-stage gap is below this");
    dr->add_option("--seed", da.seed);
    dr->add_option("--out", da.out, "output directory")->envname("AFFMAE_OUT");

    VizArgs va;
    CLI::App* vt = app.add_subcommand("viz-tokens", "per-stage retained-token pixmaps");
    vt->add_option("--run", va.run, "train-toy run directory")->required();
    vt->add_option("--image-seed", va.image_seed);
    vt->add_option("--out", va.out, "output directory")->envname("AFFMAE_OUT");

    GradcheckArgs ga;
    CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference audit of every op");
    gc->add_option("--seeds", ga.seeds, "seeds per suite");
    gc->add_option("--out", ga.out, "output directory")->envname("AFFMAE_OUT");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2; // bad flags are config errors
    }

    try {
        if (*bench) return cmd_bench_attn(ba, threads);
        if (*mgen) return cmd_mask_gen(mg);
        if (*psd) return cmd_psd(pa, threads);
        if (*tt) return cmd_train_toy(ta);
        if (*dr) return cmd_diag_rank(da);
        if (*vt) return cmd_viz_tokens(va);
        if (*gc) return cmd_gradcheck(ga);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 3;
    }
    return 0;
}
