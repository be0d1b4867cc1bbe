#pragma once

#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "affmae/config.hpp"
#include "affmae/geometry.hpp"
#include "affmae/masking.hpp"
#include "affmae/merging.hpp"
#include "affmae/tape.hpp"
#include "affmae/tensor.hpp"

namespace affmae {

struct Patches {
    Tensor vectors; // T x patch^2, row-major patches
    Tensor centers; // T x 2 pixel centers
    int64_t grid_h = 0, grid_w = 0, patch = 0;
};

Patches patchify(const Tensor& image, int64_t patch);
Tensor unpatchify(const Tensor& vectors, int64_t grid_h, int64_t grid_w, int64_t patch);

// Procedural 64x64-style grayscale in [0,1]: low-frequency background plus
// curve strokes and gaussian blobs, fully seed-determined.
Tensor synth_image(int64_t size, uint64_t seed);

// Named parameters with stable addresses, iterable for the optimizer and the
// checkpoint writer.
class ParamStore {
public:
    Parameter& add(const std::string& name, Tensor init);
    Parameter* find(const std::string& name);
    const Parameter* find(const std::string& name) const;
    std::vector<Parameter*> all();
    size_t size() const { return order_.size(); }
    void zero_grads();

private:
    std::map<std::string, std::unique_ptr<Parameter>> by_name_;
    std::vector<Parameter*> order_;
};

// Sequence of structural steps taken by the last encode() on this thread;
// used to verify that masked and unmasked runs share one code path.
const std::vector<std::string>& encode_trace();

struct EncodeStage {
    Tensor coords;   // tokens entering the stage (N_l x 2)
    int feats = -1;  // tape node: post-blocks features, pre-merge
    Tensor coords_post;
    int feats_post = -1; // tape node after merging (== feats on the last stage)
};

struct EncodeResult {
    std::vector<EncodeStage> stages;
    std::vector<int64_t> visible; // patch indices fed to the encoder
};

class Model {
public:
    Model(PipelineConfig cfg, Precision prec = Precision::b32);

    const PipelineConfig& config() const { return cfg_; }
    Precision precision() const { return prec_; }
    ParamStore& params() { return store_; }

    // Visible tokens only; masked patches are never read. Stage structure:
    // cluster -> neighborhoods -> attention blocks -> merge (except last).
    EncodeResult encode(Tape& t, const Tensor& image, const MaskSpec& mask);

    // Deformable cross-attention from deepest stage to shallowest, then query
    // self-attention; returns the reconstruction node (Q x patch^2) or -1
    // when nothing is masked.
    int decode(Tape& t, const EncodeResult& enc, const MaskSpec& mask);

    // Interp + linear heads at masked centers, one per intermediate stage
    // (the last stage is covered by the main loss).
    std::vector<int> deep_sup(Tape& t, const EncodeResult& enc, const MaskSpec& mask);

    // MSE over masked patches; total = main + lambda * mean(aux). The struct
    // exposes the components so the trainer can log them.
    struct LossNodes {
        int total = -1, main = -1, aux = -1;
    };
    LossNodes loss_parts(Tape& t, int recon, const std::vector<int>& aux, const Tensor& image,
                         const MaskSpec& mask);
    int loss(Tape& t, int recon, const std::vector<int>& aux, const Tensor& image,
             const MaskSpec& mask);

    // Convenience: full forward to the total loss (no backward).
    int forward_loss(Tape& t, const Tensor& image, const MaskSpec& mask);

    MaskSpec make_mask(uint64_t seed) const;

private:
    int pos_encode(Tape& t, const std::string& prefix, int coords_node);
    int encoder_block(Tape& t, const std::string& prefix, int f, const Tensor& coords,
                      const NeighborIndex& nbr, const StageConfig& sc);
    int attn_layer(Tape& t, const std::string& prefix, int q, int k, int v, const Tensor& coords,
                   const NeighborIndex& nbr, int heads, int64_t dim);

    PipelineConfig cfg_;
    Precision prec_;
    ParamStore store_;
};

// Decoupled weight decay + adaptive moments; decay touches only matrices
// (dim(0) > 1). Linear warmup to base lr, then cosine decay to zero.
class AdamW {
public:
    AdamW(OptimConfig cfg, int64_t total_steps);
    double lr_at(int64_t step) const;
    void step(std::vector<Parameter*> params);
    int64_t steps_taken() const { return t_; }

private:
    OptimConfig cfg_;
    int64_t total_ = 0;
    int64_t t_ = 0;
    std::map<Parameter*, std::pair<Tensor, Tensor>> moments_;
};

struct StepMetrics {
    int64_t step = 0;
    double loss = 0.0, main = 0.0, aux = 0.0, lr = 0.0;
    std::vector<double> r_hat; // per stage, only on rank-report steps
};

struct TrainResult {
    std::vector<StepMetrics> log;
    double first_loss = 0.0, last_loss = 0.0;
    std::vector<double> final_r_hat;
};

// Deterministic toy trainer: cycles the image list, fresh mask per step,
// aborts with a step-indexed diagnostic on non-finite loss.
TrainResult train(Model& model, int64_t steps, const std::vector<Tensor>& images,
                  int64_t rank_every = 0, std::ostream* metrics_csv = nullptr,
                  const std::string& csv_comment = "");

// Masked-patch MSE of the current parameters on one image (no training).
double masked_mse(Model& model, const Tensor& image, const MaskSpec& mask);

// Checkpoint: directory of AFT1 tensors plus an index manifest
// (name, dims, dtype, file per line).
void save_checkpoint(const std::string& dir, ParamStore& store);
void load_checkpoint(const std::string& dir, ParamStore& store);

} // namespace affmae
