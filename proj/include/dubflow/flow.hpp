#ifndef DUBFLOW_FLOW_HPP
#define DUBFLOW_FLOW_HPP

// Flow-matching forward process, timestep-shift sampling, mask-weighted
// v-prediction loss, timestep-constrained single-step denoising, Euler sampler.

#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dubflow/tensor.hpp"

namespace dubflow::flowmatch {

using numgrad::Tensor;

struct FlowSample {
    Tensor z0;      // clean latent
    Tensor eps;     // unit-normal noise, same shape
    double t{0.0};  // in [0,1]
    Tensor z_t;     // (1-t) z0 + t eps
    Tensor v;       // true velocity eps - z0
    Tensor v_hat;   // model prediction (optional until forward ran)
};

struct LossWeights {
    double w_face{0.3};
    double w_lip{0.3};
    double w_sync{0.05};
    double w_id{0.05};
};

struct PhaseSpec {
    std::string name;      // high | mid | low
    double alpha{1.0};     // shift strength
    double mu{0.0};        // logit-normal parameters of t_orig
    double sigma{1.0};
    bool uniform{false};   // ablation: t ~ U(0,1], bypassing the shift
    std::string scope{"full"};  // "full" or adapter name
    bool use_sync{false};
    bool use_identity{false};
    double audio_dropout{0.0};
    LossWeights weights;
    int steps{0};
    double lr{1e-3};
    double lr_final{-1.0};  // >= 0 enables per-phase cosine decay
};

struct DenoiseSpec {
    double t_thres{0.6};
};

// t_shift = alpha t / (1 + (alpha-1) t)
double timestep_shift(double alpha, double t_orig);
double sample_shifted_timestep(const PhaseSpec& phase, std::mt19937_64& rng);

// exact change-of-variables density of the shifted logit-normal at t
double shifted_density(double alpha, double mu, double sigma, double t);
// argmax of shifted_density on a 1e-5 grid
double shifted_density_mode(double alpha, double mu, double sigma);
// empirical mode from an n-sample histogram (bin width 2e-3)
double shifted_histogram_mode(double alpha, double mu, double sigma, size_t n,
                              std::mt19937_64& rng);

FlowSample diffuse_forward(const Tensor& z0, const Tensor& eps, double t);

// mean over all elements of (1 + w_face M + w_lip M_lip) (v_hat - v)^2.
// Optional per-element extra weight (e.g. zeroing unnoised motion frames)
// multiplies the residual term.
Tensor weighted_fm_loss(const Tensor& v_hat, const Tensor& v, const Tensor& m_face,
                        const Tensor& m_lip, const LossWeights& w,
                        const Tensor* element_weight = nullptr);

using DecodeFn = std::function<Tensor(const Tensor&)>;
// x0_hat = decode(z0 + (v - v_hat) * min(t, t_thres))
Tensor single_step_denoise(const FlowSample& s, const DenoiseSpec& spec, const DecodeFn& decode);

// velocity field callback: (z_t, t) -> v_hat. Gating of adapters happens
// inside the callback, once per step.
using VelocityFn = std::function<Tensor(const Tensor&, double)>;

struct EulerTrace {
    std::vector<Tensor> states;  // z after each step (post motion overwrite)
    std::vector<double> times;
};

struct MotionGuidance {
    Tensor clean_frames;  // [m, c, h, w] latent values to pin
    size_t frame_count{0};
};

// Uniform descending grid from 1 to 0; z_{k+1} = z_k - v_hat dt; motion frame
// slots (frame axis 0) are overwritten with their clean values every step.
Tensor euler_sample(const VelocityFn& velocity, const Tensor& z_T, int steps,
                    const std::optional<MotionGuidance>& motion = std::nullopt,
                    EulerTrace* trace = nullptr);

}  // namespace dubflow::flowmatch

#endif
