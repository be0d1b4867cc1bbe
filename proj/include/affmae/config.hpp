#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace affmae {

struct StageConfig {
    int64_t dim = 64;
    int heads = 4;
    int blocks = 2;
    int64_t cluster = 16; // balanced-cluster target size
    int groups = 3;       // clusters per attention neighborhood
    double d_s = 0.4;     // retention rate applied after the stage (last stage keeps all)
    int interp_k = 8;     // decoder gather fan-in at this stage
};

struct DecoderConfig {
    int64_t dim = 64;
    int depth = 1; // attention rounds per stage level
    int heads = 4;
    int gather_k = 8; // KNN fan-in for virtual tokens
    int self_k = 8;   // KNN fan-in for query self-attention
};

struct OptimConfig {
    double lr = 1e-3;
    int64_t warmup = 100;
    double weight_decay = 0.05;
    double beta1 = 0.883;
    double beta2 = 0.935;
};

struct PipelineConfig {
    int64_t image = 64;
    int64_t patch = 8;
    std::vector<StageConfig> stages;
    DecoderConfig decoder;
    double lambda_aux = 0.5; // deep-supervision weight
    std::string mask_strategy = "perlin";
    double mask_ratio = 0.5;
    OptimConfig optim;
    uint64_t seed = 1;
    int bias_hidden = 8;   // relative-position bias MLP width
    int scorer_hidden = 16;
    int merge_k = 8;

    static PipelineConfig toy();
    void validate() const;
    int64_t grid_tokens() const { return (image / patch) * (image / patch); }
};

} // namespace affmae
