#ifndef DUBFLOW_GENERATOR_HPP
#define DUBFLOW_GENERATOR_HPP

// Mask-inpainting generator stage: channel-concat conditioning assembly,
// self-reconstruction training, and segmented inference with motion frames.

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dubflow/dit.hpp"
#include "dubflow/flow.hpp"
#include "dubflow/tensor.hpp"
#include "dubflow/world.hpp"

namespace dubflow::dubgen {

using numgrad::Tensor;

struct ConditioningBundle {
    std::string mode;  // "generator" | "editor"
    Tensor z_in;       // assembled frame-slot stack
    Tensor z_mask;     // masked-video latent (generator mode)
    Tensor z_ref;      // [1,c,h,w] single frame or [f,c,h,w] companion clip
    Tensor z_noised;   // target latent actually placed in the stack
    int motion_count{2};
    bool motion_dropout_applied{false};  // motion slots noised like the rest
    std::optional<Tensor> audio_windows;
    ditcore::DiT::Layout layout;
};

struct GenAssembleOptions {
    int motion_count{2};
    double motion_dropout{0.5};  // P(drop motion guidance) during training
    bool training{true};
    bool ref_in_segment{false};  // rejected when training
};

// z_mask = V ⊙ M_inp (inpaint regions are 0 and get zeroed); target slots are
// [z_mask, z] channel pairs; the zero-padded reference is prepended on the
// frame axis. With motion guidance kept, the first m target slots carry the
// clean latent instead of the noised one.
ConditioningBundle assemble_generator_input(const Tensor& V, const toyworld::MaskSet& masks,
                                            const Tensor& I_ref, const Tensor& z_noised,
                                            const GenAssembleOptions& opt,
                                            std::mt19937_64& rng);

// per-element loss weight zeroing unnoised motion slots; all-ones when the
// guidance was dropped
Tensor motion_loss_weight(const numgrad::Shape& target_shape, int motion_count,
                          bool dropout_applied);

// toy audio features per audio frame: [x, |x|, x^2, 1]
Tensor audio_feature_matrix(const toyworld::AudioTrack& audio);

struct GenTrainConfig {
    ditcore::DiTConfig model;  // in_channels 2 (mask+content), out_channels c
    int steps{1500};
    int batch{4};  // segment samples averaged per optimizer step
    double lr{3e-4};
    double lr_final{-1.0};  // >= 0 enables cosine decay from lr to this value
    int seg_len{9};
    double alpha{1.0};  // timestep-shift strength of the single phase
    GenAssembleOptions assemble;
    flowmatch::LossWeights weights;
    uint64_t seed{0};
    std::string loss_csv;  // per-step loss log, empty to skip
};

// Self-reconstruction flow-matching training. Segments are random windows of
// each clip; reference frames are drawn outside the window. Deterministic for
// a fixed seed. Aborts when the loss exceeds 10x its initial value for 200
// consecutive steps.
ditcore::DiT train_generator(const std::vector<toyworld::Clip>& corpus,
                             const GenTrainConfig& cfg);

struct CompanionOptions {
    int seg_len{9};
    int overlap{2};  // motion frames chained between segments
    int euler_steps{50};
    double blend_sigma{1.2};
    uint64_t seed{0};
};

// Segmented inference: per-segment Euler sampling with an intra-segment
// reference frame, chained through motion latents, stitched, then composited
// over the original with the feathered face mask.
Tensor generate_companion(const Tensor& V, const toyworld::MaskSet& masks,
                          const toyworld::AudioTrack& a_alt, const ditcore::DiT& model,
                          const CompanionOptions& opt);

}  // namespace dubflow::dubgen

#endif
