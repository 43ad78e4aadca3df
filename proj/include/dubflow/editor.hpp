#ifndef DUBFLOW_EDITOR_HPP
#define DUBFLOW_EDITOR_HPP

// Context-conditioned editor stage: frame-concat conditioning with spatially
// shifted reference positions, three-phase training (full-parameter high-noise,
// lip adapter mid-noise with a sync loss, texture adapter low-noise with an
// identity loss), and timestep-gated mask-free inference.

#include <map>
#include <random>
#include <string>
#include <vector>

#include "dubflow/dit.hpp"
#include "dubflow/flow.hpp"
#include "dubflow/generator.hpp"
#include "dubflow/tensor.hpp"
#include "dubflow/world.hpp"

namespace dubflow::dubedit {

using numgrad::Tensor;

struct EditorAssembleOptions {
    int motion_count{2};
    double motion_dropout{0.5};  // P(drop motion guidance) during training
    bool training{true};
    bool channel_concat{false};  // ablation-only layout: [z_ref, z_noised]_ch
};

// z_in = [z_ref, z_noised]_fr with 2f frame slots: the clean companion clip
// occupies the first f slots as references (shifted rotary positions, no
// output), the noised target the last f. Both halves share temporal indices;
// audio attaches to the target half only. Motion frames behave as in the
// generator: first m target slots stay clean with probability 1-dropout.
// clean_tgt supplies the unnoised target latent for the motion slots during
// training; without it motion guidance is never applied
dubgen::ConditioningBundle assemble_editor_input(const Tensor& v_ref, const Tensor& z_noised,
                                                 const EditorAssembleOptions& opt,
                                                 std::mt19937_64& rng,
                                                 const Tensor* clean_tgt = nullptr);

struct SyncProxySpec {
    int window{8};  // supervision span in frames
};

// mean squared error between the extracted aperture of the denoised clip and
// the audio-implied aperture track over [span_start, span_start+window);
// differentiable through the extraction
Tensor sync_loss(const Tensor& x0_hat, const toyworld::AudioTrack& audio,
                 const toyworld::MaskSet& masks, size_t span_start,
                 const SyncProxySpec& spec = {});

// 1 - cosine(identity_embed(x0_hat), identity_embed(v_ref)); evaluated only
// on samples whose audio conditioning was dropped
Tensor identity_loss(const Tensor& x0_hat, const Tensor& v_ref,
                     const toyworld::MaskSet& masks);

struct PhasePlan {
    std::vector<flowmatch::PhaseSpec> phases;
};

// high (alpha 5.0, full) -> mid (alpha 1.5, adapter "lip", +sync) ->
// low (alpha 0.2, adapter "texture", +identity, audio dropout 0.5);
// step budget split 4:1:1
PhasePlan default_phase_plan(int base_steps = 600, double lr_full = 5e-3,
                             double lr_adapter = 5e-3);

struct EditorTrainConfig {
    ditcore::DiTConfig model;  // in_channels c, out_channels c
    PhasePlan plan;
    int batch{4};
    int seg_len{9};
    int lora_rank{4};
    // inference gate window per adapter name
    std::map<std::string, std::pair<double, double>> gates{{"lip", {0.4, 0.8}},
                                                           {"texture", {0.0, 0.3}}};
    EditorAssembleOptions assemble;
    flowmatch::DenoiseSpec denoise;
    uint64_t seed{0};
    std::string loss_csv_prefix;  // per-phase logs "<prefix><phase>.csv"
};

// Trains on accepted pairs: the companion clip conditions, the original is the
// target, driven by its own audio. Base weights train only in "full"-scope
// phases and are bit-frozen while adapters train. Deterministic per seed.
ditcore::DiT train_multiphase(const std::vector<toyworld::PairedSample>& pairs,
                              const EditorTrainConfig& cfg);

struct DubOptions {
    int steps{50};
    int window{21};
    int motion{2};  // frames chained between windows
    bool channel_concat{false};  // must match the training-time layout
    uint64_t seed{0};
};

// Mask-free editing: the full clip is provided as context, adapters are gated
// by the current timestep at every sampler step, long clips run in windows
// chained through motion frames. Consumes no mask input by construction.
Tensor dub_infer(const Tensor& v_ref, const toyworld::AudioTrack& audio,
                 const ditcore::DiT& model, const DubOptions& opt);

}  // namespace dubflow::dubedit

#endif
