#ifndef DUBFLOW_DIT_HPP
#define DUBFLOW_DIT_HPP

// Miniature diffusion transformer: patch embedding, per-axis 3D rotary
// positions (references spatially shifted), interleaved [2D spatial, 3D full,
// audio cross-attention, FFN] sublayers with adaptive layer-norm timestep
// modulation, and attachable low-rank adapters gated by timestep windows.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dubflow/tensor.hpp"

namespace dubflow::ditcore {

using numgrad::Tensor;

inline constexpr int kAudioWindow = 16;    // audio frames attended per video frame
inline constexpr int kAudioPerVideo = 8;   // audio frames per video frame

struct PatchGrid {
    size_t h_patches{0}, w_patches{0}, f_frames{0};
    int patch_size{0};
    size_t tokens_per_frame() const { return h_patches * w_patches; }
    size_t tokens() const { return f_frames * tokens_per_frame(); }
};

struct DiTConfig {
    int depth{2};
    int model_dim{48};
    int head_count{4};
    int ffn_dim{128};
    int patch_size{8};
    int audio_dim{4};
    double rope_base{10000.0};
    int in_channels{1};   // channels of each input frame slot
    int out_channels{1};  // channels of each predicted frame

    void validate() const;
};

struct LoraAdapter {
    std::string name;
    int rank{4};
    double scale{1.0};
    double t_lo{0.0}, t_hi{1.0};
    // keyed by "<unit>.<sublayer>.<proj>" e.g. "u0.s3d.q"
    std::map<std::string, Tensor> down;  // [dim_in, rank], random init
    std::map<std::string, Tensor> up;    // [rank, dim_out], zero init
};

// active iff t_lo <= t <= t_hi (inclusive); overlapping active windows are
// permitted but reported once to `warn`
std::vector<const LoraAdapter*> gate_adapters(const std::vector<LoraAdapter>& adapters, double t,
                                              std::ostream* warn = nullptr);

// [f,c,h,w] or [b,f,c,h,w] -> [(b·)f·h'·w', c·p·p]; frame-major, then
// row-major patches; bijective with unpatchify
Tensor patchify(const Tensor& video, int patch_size, PatchGrid* grid = nullptr);
Tensor unpatchify(const Tensor& tokens, const PatchGrid& grid, size_t channels);

// per-token integer rotary positions; reference role shifts (i,j) by the grid
// extents and leaves the temporal index untouched
std::vector<std::array<long, 3>> rope_positions(const PatchGrid& grid, bool reference);

// per-token rotary cos/sin tables [N, model_dim]; head segments identical,
// pairs split into equal thirds over the (i,j,k) axes, remainder unrotated
std::pair<Tensor, Tensor> rope_tables(const std::vector<std::array<long, 3>>& positions,
                                      const DiTConfig& cfg);

// audio features [a_frames, audio_dim] -> per-video-frame windows
// [frames, 16, audio_dim]; window indices clamp (repeat) at clip edges
Tensor build_audio_windows(const Tensor& features, size_t frames);

class DiT {
public:
    DiT() = default;
    DiT(const DiTConfig& cfg, uint64_t seed);

    DiTConfig config;
    std::map<std::string, Tensor> params;
    std::vector<LoraAdapter> adapters;

    // describes the frame slots of the assembled input stack
    struct Layout {
        size_t height{0}, width{0};
        std::vector<int> role;         // per slot: 0 target, 1 reference
        std::vector<long> time_index;  // per slot: temporal rotary index
        std::vector<int> audio_frame;  // per slot: window row, or -1
    };

    // z_in: [F, in_channels, h, w] frame-slot stack; audio_windows:
    // [frames, 16, audio_dim] or null (cross-attention contributes zero).
    // Returns the velocity for the target slots only: [F_tgt, out_channels, h, w].
    Tensor forward(const Tensor& z_in, double t, const Tensor* audio_windows,
                   const Layout& layout,
                   const std::vector<const LoraAdapter*>& active_adapters = {}) const;

    // maps over the leading batch axis of [b,F,c,h,w]
    Tensor forward_batch(const Tensor& z_in, double t, const Tensor* audio_windows,
                         const Layout& layout,
                         const std::vector<const LoraAdapter*>& active_adapters = {}) const;

    LoraAdapter& add_adapter(const std::string& name, int rank, double t_lo, double t_hi,
                             uint64_t seed, double scale = 1.0);
    const LoraAdapter* find_adapter(const std::string& name) const;

    // "full" -> backbone parameters; otherwise the named adapter's matrices
    std::vector<Tensor> trainable(const std::string& scope);

    void save(const std::string& path) const;
    static DiT load(const std::string& path);
};

}  // namespace dubflow::ditcore

#endif
