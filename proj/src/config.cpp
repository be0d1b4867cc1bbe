#include "affmae/config.hpp"

#include "affmae/errors.hpp"

namespace affmae {

PipelineConfig PipelineConfig::toy() {
    PipelineConfig cfg;
    cfg.image = 64;
    cfg.patch = 8;
    StageConfig s0;
    s0.dim = 48;
    s0.heads = 4;
    s0.blocks = 2;
    s0.cluster = 16;
    s0.groups = 3;
    s0.d_s = 0.4;
    s0.interp_k = 8;
    StageConfig s1 = s0;
    s1.dim = 64;
    s1.cluster = 8;
    cfg.stages = {s0, s1};
    cfg.decoder.dim = 48;
    cfg.decoder.depth = 1;
    cfg.decoder.heads = 4;
    cfg.decoder.gather_k = 8;
    cfg.decoder.self_k = 8;
    cfg.lambda_aux = 0.5;
    cfg.mask_strategy = "perlin";
    cfg.mask_ratio = 0.5;
    cfg.optim.lr = 1e-3;
    cfg.optim.warmup = 100;
    cfg.seed = 1;
    return cfg;
}

void PipelineConfig::validate() const {
    if (image < 1 || patch < 1 || image % patch != 0)
        throw ConfigError("config: image size " + std::to_string(image) +
                          " must be a positive multiple of patch " + std::to_string(patch));
    if (stages.empty()) throw ConfigError("config: need at least one stage");
    for (size_t s = 0; s < stages.size(); ++s) {
        const StageConfig& st = stages[s];
        std::string tag = "config: stage " + std::to_string(s);
        if (st.dim < 1 || st.heads < 1 || st.dim % st.heads != 0)
            throw ConfigError(tag + ": dim must be a positive multiple of heads");
        if (st.blocks < 1) throw ConfigError(tag + ": blocks must be >= 1");
        if (st.cluster < 1) throw ConfigError(tag + ": cluster size must be >= 1");
        if (st.groups < 1) throw ConfigError(tag + ": groups must be >= 1");
        if (!(st.d_s > 0.0 && st.d_s <= 1.0)) throw ConfigError(tag + ": d_s must be in (0, 1]");
        if (st.interp_k < 1) throw ConfigError(tag + ": interp_k must be >= 1");
    }
    if (decoder.dim < 1 || decoder.heads < 1 || decoder.dim % decoder.heads != 0)
        throw ConfigError("config: decoder dim must be a positive multiple of decoder heads");
    if (decoder.depth < 1 || decoder.gather_k < 1 || decoder.self_k < 1)
        throw ConfigError("config: decoder depth and fan-ins must be >= 1");
    if (!(mask_ratio >= 0.0 && mask_ratio < 1.0))
        throw ConfigError("config: mask ratio must be in [0, 1)");
    if (mask_strategy != "perlin" && mask_strategy != "random")
        throw ConfigError("config: mask strategy must be perlin or random, got " + mask_strategy);
    if (lambda_aux < 0.0) throw ConfigError("config: lambda must be >= 0");
    if (optim.warmup < 1) throw ConfigError("config: warmup must be >= 1 step");
    if (!(optim.lr >= 0.0)) throw ConfigError("config: lr must be >= 0");
    if (bias_hidden < 1 || scorer_hidden < 1 || merge_k < 1)
        throw ConfigError("config: hidden widths and merge fan-in must be >= 1");
}

} // namespace affmae
