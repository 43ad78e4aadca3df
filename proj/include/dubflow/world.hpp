#ifndef DUBFLOW_WORLD_HPP
#define DUBFLOW_WORLD_HPP

// Procedural audiovisual toy world. Scenes render analytically: a patterned
// elliptical head on a static background, a mouth box whose dark opening
// height is an exact linear function of the audio-driven aperture, optional
// occluder sprite, multiplicative lighting. Masks and the aperture track come
// from the same geometry, so rendered clips carry exact ground truth.

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dubflow/tensor.hpp"

namespace dubflow::toyworld {

using numgrad::Tensor;

// world constants
inline constexpr double kLipBase = 0.85;       // closed-mouth intensity
inline constexpr double kMouthDark = 0.05;     // opening intensity
inline constexpr double kFaceMean = 0.6;       // face pattern mean
inline constexpr double kMouthBoxU0 = -5.0, kMouthBoxU1 = 5.0;   // head-local
inline constexpr double kMouthBoxV0 = 3.0, kMouthBoxV1 = 10.0;
// top of the opening band; at 3.5 the topmost lip pixel row covers it for any
// subpixel head offset, keeping the box mean exactly linear in the aperture
inline constexpr double kOpeningTop = 3.5;
inline constexpr double kOpeningMaxPx = 6.0;
inline constexpr double kHeadRx = 10.0, kHeadRy = 12.0;
inline constexpr int kAudioPerFrame = 8;      // audio frames per video frame
inline constexpr double kApertureGain = 2.8;  // scales smoothed |audio| to [0,1]
inline constexpr int kEmbedCrop = 16;         // identity crop resolution
inline constexpr int kEmbedDim = 64;

struct Occluder {
    double width{6.0}, height{6.0};
    double intensity{0.3};
    std::vector<std::array<double, 2>> path;  // per-frame top-left corner
};

struct ToyScene {
    uint64_t identity_seed{0};
    size_t frames{0};
    size_t height{32}, width{32}, channels{1};
    std::vector<std::array<double, 3>> head_path;  // cx, cy, rotation
    std::optional<Occluder> occluder;
    std::vector<double> light_gain;  // per frame, in [0.25, 2]
    std::vector<double> light_tint;

    struct Options {
        size_t frames{21};
        double motion_amp{1.5};
        double rotation_amp{0.0};
        bool with_occluder{false};
        bool occluder_over_lips{false};  // default: crosses the upper face
        double light_lo{1.0}, light_hi{1.0};
    };
    static ToyScene random(std::mt19937_64& rng, const Options& opt);

    std::string to_json() const;
    static ToyScene from_json(const std::string& text);
};

struct AudioTrack {
    std::vector<double> samples;  // length 8 * frames, in [-1, 1]
    int64_t speaker_id{0};
    size_t frames() const { return samples.size() / kAudioPerFrame; }
};

AudioTrack synth_audio(int64_t speaker_id, size_t frames, std::mt19937_64& rng);
AudioTrack silent_audio(size_t frames);

// the world's audio -> aperture map g: per-frame mean |amplitude| over the
// 8-sample window, moving-averaged over 3 frames, scaled and clamped to [0,1]
std::vector<double> aperture_from_audio(const AudioTrack& audio);

struct MaskSet {
    Tensor face;    // [f,c,h,w] binary
    Tensor lip;     // subset of face
    Tensor occ;
    Tensor inpaint; // 0 marks regions to inpaint: !(face && !occ) == !face || occ
    Tensor smooth;  // gaussian-blurred face mask in [0,1]
};

struct RenderResult {
    Tensor video;  // [f,c,h,w]
    MaskSet masks;
    std::vector<double> aperture;  // ground-truth per-frame opening
};

RenderResult render_scene(const ToyScene& scene, const AudioTrack& audio);

Tensor gaussian_blur_mask(const Tensor& mask, double sigma);
Tensor relight(const Tensor& video, const std::vector<double>& gain);
std::vector<double> random_light_track(std::mt19937_64& rng, size_t frames, double lo, double hi);

struct PairedSample {
    Tensor v_ref;  // companion video V'
    Tensor v_tgt;  // target video V
    AudioTrack audio;  // drives V
    MaskSet masks;     // of V
    std::string origin;  // "analytic" | "generated"
    std::vector<double> aperture_ref, aperture_tgt;
};

// two renders of the same scene: V = render(scene, a), V' = render(scene, a_alt)
PairedSample analytic_pair(const ToyScene& scene, const AudioTrack& a, const AudioTrack& a_alt);

// Fixed seeded random projection of the lighting-normalized, lip- and
// occluder-excluded face crop, average-pooled over frames, L2-normalized.
// Differentiable in the video pixels.
Tensor identity_embed(const Tensor& video, const MaskSet& masks);

// Lighting-invariant mouth-interior statistic, affinely calibrated so that it
// reproduces the true aperture on analytic renders. Differentiable.
Tensor aperture_extract(const Tensor& video, const MaskSet& masks);
std::vector<double> aperture_extract_values(const Tensor& video, const MaskSet& masks);

struct Codec {
    enum class Mode { identity, patch_linear };
    Mode mode{Mode::identity};
    int patch_size{4};
    Tensor encode(const Tensor& video) const;
    Tensor decode(const Tensor& latent) const;
};

// clip container helpers (named-tensor files)
void save_clip(const std::string& path, const Tensor& video, const MaskSet& masks,
               const AudioTrack& audio, const std::vector<double>& aperture);
struct Clip {
    Tensor video;
    MaskSet masks;
    AudioTrack audio;
    std::vector<double> aperture;
};
Clip load_clip(const std::string& path);

void save_pair(const std::string& path, const PairedSample& pair);
PairedSample load_pair(const std::string& path);

}  // namespace dubflow::toyworld

#endif
