#include "dubflow/flow.hpp"

#include <algorithm>
#include <cmath>

namespace dubflow::flowmatch {

using namespace numgrad;

double timestep_shift(double alpha, double t_orig) {
    return alpha * t_orig / (1.0 + (alpha - 1.0) * t_orig);
}

double sample_shifted_timestep(const PhaseSpec& phase, std::mt19937_64& rng) {
    if (phase.uniform) {
        std::uniform_real_distribution<double> ud(0.0, 1.0);
        return std::max(1e-6, ud(rng));
    }
    std::normal_distribution<double> nd(phase.mu, phase.sigma);
    double x = nd(rng);
    double t_orig = 1.0 / (1.0 + std::exp(-x));  // logit-normal draw
    return timestep_shift(phase.alpha, t_orig);
}

double shifted_density(double alpha, double mu, double sigma, double t) {
    if (t <= 0.0 || t >= 1.0) return 0.0;
    // invert the shift: t_orig = t / (alpha - (alpha-1) t)
    double denom = alpha - (alpha - 1.0) * t;
    double t_orig = t / denom;
    // |dt_orig/dt| for t = f(t_orig): f'(u) = alpha / (1+(alpha-1)u)^2
    double fprime = alpha / std::pow(1.0 + (alpha - 1.0) * t_orig, 2.0);
    double jac = 1.0 / fprime;
    double l = std::log(t_orig / (1.0 - t_orig));
    double z = (l - mu) / sigma;
    double p_orig = std::exp(-0.5 * z * z) /
                    (sigma * std::sqrt(2.0 * M_PI) * t_orig * (1.0 - t_orig));
    return p_orig * jac;
}

double shifted_density_mode(double alpha, double mu, double sigma) {
    const double h = 1e-5;
    double best_t = 0.5, best_p = -1.0;
    for (double t = h; t < 1.0; t += h) {
        double p = shifted_density(alpha, mu, sigma, t);
        if (p > best_p) {
            best_p = p;
            best_t = t;
        }
    }
    return best_t;
}

double shifted_histogram_mode(double alpha, double mu, double sigma, size_t n,
                              std::mt19937_64& rng) {
    const double bin = 2e-3;
    std::vector<double> hist((size_t)(1.0 / bin) + 1, 0.0);
    PhaseSpec ph;
    ph.alpha = alpha;
    ph.mu = mu;
    ph.sigma = sigma;
    for (size_t i = 0; i < n; ++i) {
        double t = sample_shifted_timestep(ph, rng);
        size_t b = std::min(hist.size() - 1, (size_t)(t / bin));
        ++hist[b];
    }
    // Flat-topped densities make the raw argmax noisy: smooth with a small
    // Gaussian kernel, then fit a cubic over the near-peak region and take
    // its maximizer.
    const double kernel_sigma = 0.01;
    const int half = (int)std::ceil(4.0 * kernel_sigma / bin);
    std::vector<double> smooth(hist.size(), 0.0);
    for (int b = 0; b < (int)hist.size(); ++b) {
        double acc = 0.0, wsum = 0.0;
        for (int k = -half; k <= half; ++k) {
            int j = b + k;
            if (j < 0 || j >= (int)hist.size()) continue;
            double w = std::exp(-0.5 * std::pow(k * bin / kernel_sigma, 2.0));
            acc += w * hist[j];
            wsum += w;
        }
        smooth[b] = acc / wsum;
    }
    int peak = 0;
    for (int b = 1; b < (int)smooth.size(); ++b)
        if (smooth[b] > smooth[peak]) peak = b;
    double mx = smooth[peak];
    int lo = peak, hi = peak;
    while (lo > 0 && smooth[lo - 1] >= 0.85 * mx) --lo;
    while (hi + 1 < (int)smooth.size() && smooth[hi + 1] >= 0.85 * mx) ++hi;
    if (hi - lo < 8) return (peak + 0.5) * bin;
    // cubic least squares on the raw histogram over [lo, hi]
    double x0 = (peak + 0.5) * bin;
    double A[4][5] = {};
    for (int b = lo; b <= hi; ++b) {
        double x = ((b + 0.5) * bin - x0) / 0.1;  // centered/scaled for conditioning
        double pw[4] = {1.0, x, x * x, x * x * x};
        for (int r = 0; r < 4; ++r) {
            for (int c = 0; c < 4; ++c) A[r][c] += pw[r] * pw[c];
            A[r][4] += pw[r] * hist[b];
        }
    }
    for (int col = 0; col < 4; ++col) {  // gaussian elimination with pivoting
        int piv = col;
        for (int r = col + 1; r < 4; ++r)
            if (std::abs(A[r][col]) > std::abs(A[piv][col])) piv = r;
        for (int c = 0; c < 5; ++c) std::swap(A[col][c], A[piv][c]);
        for (int r = 0; r < 4; ++r) {
            if (r == col) continue;
            double f = A[r][col] / A[col][col];
            for (int c = col; c < 5; ++c) A[r][c] -= f * A[col][c];
        }
    }
    double coef[4];
    for (int r = 0; r < 4; ++r) coef[r] = A[r][4] / A[r][r];
    double best_x = x0, best_v = -1e300;
    double xl = (lo + 0.5) * bin, xh = (hi + 0.5) * bin;
    for (int g = 0; g <= 2000; ++g) {
        double x = xl + (xh - xl) * g / 2000.0;
        double u = (x - x0) / 0.1;
        double v = coef[0] + u * (coef[1] + u * (coef[2] + u * coef[3]));
        if (v > best_v) {
            best_v = v;
            best_x = x;
        }
    }
    return best_x;
}

FlowSample diffuse_forward(const Tensor& z0, const Tensor& eps, double t) {
    if (z0.shape() != eps.shape())
        throw std::invalid_argument("diffuse_forward: shape mismatch " +
                                    shape_str(z0.shape()) + " vs " + shape_str(eps.shape()));
    if (t < 0.0 || t > 1.0) throw std::invalid_argument("diffuse_forward: t out of [0,1]");
    FlowSample s;
    s.z0 = z0;
    s.eps = eps;
    s.t = t;
    s.z_t = add(scale(z0, 1.0 - t), scale(eps, t));
    s.v = sub(eps, z0);
    return s;
}

Tensor weighted_fm_loss(const Tensor& v_hat, const Tensor& v, const Tensor& m_face,
                        const Tensor& m_lip, const LossWeights& w,
                        const Tensor* element_weight) {
    if (v_hat.shape() != v.shape())
        throw std::invalid_argument("weighted_fm_loss: v shapes differ");
    if (m_face.shape() != v.shape() || m_lip.shape() != v.shape())
        throw std::invalid_argument("weighted_fm_loss: mask shape mismatch " +
                                    shape_str(m_face.shape()) + " vs " + shape_str(v.shape()));
    Tensor resid = sub(v_hat, v);
    Tensor sq = mul(resid, resid);
    Tensor weight = add_scalar(add(scale(m_face, w.w_face), scale(m_lip, w.w_lip)), 1.0);
    Tensor weighted = mul(weight, sq);
    if (element_weight) weighted = mul(weighted, *element_weight);
    return reduce_mean(weighted);
}

Tensor single_step_denoise(const FlowSample& s, const DenoiseSpec& spec, const DecodeFn& decode) {
    double factor = std::min(s.t, spec.t_thres);
    Tensor err = sub(s.v, s.v_hat);
    Tensor z0_hat = add(s.z0, scale(err, factor));
    return decode ? decode(z0_hat) : z0_hat;
}

Tensor euler_sample(const VelocityFn& velocity, const Tensor& z_T, int steps,
                    const std::optional<MotionGuidance>& motion, EulerTrace* trace) {
    if (steps < 1) throw std::invalid_argument("euler_sample: steps must be >= 1");
    auto pin_motion = [&](Tensor z) {
        if (!motion || motion->frame_count == 0) return z;
        size_t m = motion->frame_count;
        Tensor rest = slice(z, 0, m, z.shape()[0] - m);
        return concat({motion->clean_frames, rest}, 0);
    };
    Tensor z = pin_motion(z_T);
    double dt = 1.0 / steps;
    for (int k = 0; k < steps; ++k) {
        double t = 1.0 - k * dt;
        Tensor v_hat = velocity(z, t);
        z = pin_motion(sub(z, scale(v_hat, dt)));
        if (trace) {
            trace->states.push_back(z);
            trace->times.push_back(t - dt);
        }
    }
    return z;
}

}  // namespace dubflow::flowmatch
