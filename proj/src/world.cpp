#include "dubflow/world.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>

namespace dubflow::toyworld {

using namespace numgrad;
using json = nlohmann::json;

namespace {

constexpr uint64_t kPatternSalt = 0x9e3779b97f4a7c15ull;
constexpr uint64_t kBackgroundSalt = 0xb492b66fbe98f273ull;
constexpr uint64_t kProjectionSeed = 0x5dbf7c339e21ull;

struct PatternSpec {
    std::array<double, 4> amp, fu, fv, pu, pv;
    double offset{0.0}, gain{1.0};
    double mean_target, contrast;

    double raw(double u, double v) const {
        double s = 0.0;
        for (int k = 0; k < 4; ++k)
            s += amp[k] * std::sin(fu[k] * u + pu[k]) * std::sin(fv[k] * v + pv[k]);
        return s;
    }
    double operator()(double u, double v) const {
        return mean_target + contrast * (raw(u, v) - offset) * gain;
    }
};

bool in_ellipse(double u, double v) {
    return (u / kHeadRx) * (u / kHeadRx) + (v / kHeadRy) * (v / kHeadRy) <= 1.0;
}

bool in_mouth_box(double u, double v) {
    return u >= kMouthBoxU0 && u < kMouthBoxU1 && v >= kMouthBoxV0 && v < kMouthBoxV1;
}

// Face pattern, normalized to mean kFaceMean and std `contrast` over the
// off-lip face region at the canonical pose; that pins the statistic the
// aperture extractor divides by.
PatternSpec face_pattern(uint64_t identity_seed) {
    std::mt19937_64 rng(identity_seed ^ kPatternSalt);
    std::uniform_real_distribution<double> uf(0.25, 0.7), up(0.0, 2.0 * M_PI);
    std::normal_distribution<double> na;
    PatternSpec p;
    for (int k = 0; k < 4; ++k) {
        p.amp[k] = na(rng);
        p.fu[k] = uf(rng);
        p.fv[k] = uf(rng);
        p.pu[k] = up(rng);
        p.pv[k] = up(rng);
    }
    p.mean_target = kFaceMean;
    p.contrast = 0.07;
    double sum = 0.0, sum2 = 0.0;
    size_t n = 0;
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            double u = x + 0.5 - 16.0, v = y + 0.5 - 16.0;
            if (!in_ellipse(u, v) || in_mouth_box(u, v)) continue;
            double r = p.raw(u, v);
            sum += r;
            sum2 += r * r;
            ++n;
        }
    p.offset = sum / (double)n;
    double var = sum2 / (double)n - p.offset * p.offset;
    p.gain = 1.0 / std::sqrt(std::max(var, 1e-9));
    return p;
}

PatternSpec background_pattern(uint64_t identity_seed) {
    std::mt19937_64 rng(identity_seed ^ kBackgroundSalt);
    std::uniform_real_distribution<double> uf(0.1, 0.4), up(0.0, 2.0 * M_PI);
    std::normal_distribution<double> na;
    PatternSpec p;
    double norm = 0.0;
    for (int k = 0; k < 4; ++k) {
        p.amp[k] = na(rng);
        norm += p.amp[k] * p.amp[k];
        p.fu[k] = uf(rng);
        p.fv[k] = uf(rng);
        p.pu[k] = up(rng);
        p.pv[k] = up(rng);
    }
    p.mean_target = 0.35;
    p.contrast = 0.08;
    p.offset = 0.0;
    p.gain = 1.0 / std::sqrt(std::max(norm / 2.0, 1e-9));
    return p;
}

uint64_t speaker_key(int64_t id) {
    uint64_t x = (uint64_t)id * 0xbf58476d1ce4e5b9ull + 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
}

}  // namespace

ToyScene ToyScene::random(std::mt19937_64& rng, const Options& opt) {
    ToyScene s;
    s.frames = opt.frames;
    std::uniform_real_distribution<double> up(0.0, 2.0 * M_PI);
    std::uniform_real_distribution<double> uamp(0.3, 1.0), uper(10.0, 24.0);
    s.identity_seed = rng();
    double ax = opt.motion_amp * uamp(rng), ay = opt.motion_amp * uamp(rng);
    double px = uper(rng), py = uper(rng), fx = up(rng), fy = up(rng);
    double ar = opt.rotation_amp, pr = uper(rng), fr = up(rng);
    for (size_t k = 0; k < s.frames; ++k) {
        double cx = 16.0 + ax * std::sin(2.0 * M_PI * k / px + fx);
        double cy = 16.0 + ay * std::sin(2.0 * M_PI * k / py + fy);
        double th = ar * std::sin(2.0 * M_PI * k / pr + fr);
        s.head_path.push_back({cx, cy, th});
    }
    s.light_gain.assign(s.frames, 1.0);
    s.light_tint.assign(s.frames, 1.0);
    if (opt.light_hi > opt.light_lo) {
        s.light_gain = random_light_track(rng, s.frames, opt.light_lo, opt.light_hi);
    }
    if (opt.with_occluder) {
        Occluder oc;
        std::uniform_real_distribution<double> ui(0.25, 0.4);
        oc.intensity = ui(rng);
        double x0 = 3.0, x1 = 23.0;
        for (size_t k = 0; k < s.frames; ++k) {
            double prog = s.frames > 1 ? (double)k / (double)(s.frames - 1) : 0.0;
            double ox = x0 + (x1 - x0) * prog;
            double oy = opt.occluder_over_lips ? s.head_path[k][1] + 4.0
                                               : s.head_path[k][1] - 11.0;
            oc.path.push_back({ox, oy});
        }
        s.occluder = oc;
    }
    return s;
}

std::string ToyScene::to_json() const {
    json j;
    j["identity_seed"] = identity_seed;
    j["frames"] = frames;
    j["height"] = height;
    j["width"] = width;
    j["channels"] = channels;
    j["head_path"] = head_path;
    j["light_gain"] = light_gain;
    j["light_tint"] = light_tint;
    if (occluder) {
        j["occluder"] = {{"width", occluder->width},
                         {"height", occluder->height},
                         {"intensity", occluder->intensity},
                         {"path", occluder->path}};
    }
    return j.dump();
}

ToyScene ToyScene::from_json(const std::string& text) {
    json j = json::parse(text);
    ToyScene s;
    s.identity_seed = j.at("identity_seed").get<uint64_t>();
    s.frames = j.at("frames").get<size_t>();
    s.height = j.at("height").get<size_t>();
    s.width = j.at("width").get<size_t>();
    s.channels = j.at("channels").get<size_t>();
    s.head_path = j.at("head_path").get<std::vector<std::array<double, 3>>>();
    s.light_gain = j.at("light_gain").get<std::vector<double>>();
    s.light_tint = j.at("light_tint").get<std::vector<double>>();
    if (j.count("occluder")) {
        Occluder oc;
        oc.width = j["occluder"]["width"].get<double>();
        oc.height = j["occluder"]["height"].get<double>();
        oc.intensity = j["occluder"]["intensity"].get<double>();
        oc.path = j["occluder"]["path"].get<std::vector<std::array<double, 2>>>();
        s.occluder = oc;
    }
    return s;
}

AudioTrack synth_audio(int64_t speaker_id, size_t frames, std::mt19937_64& rng) {
    std::mt19937_64 srng(speaker_key(speaker_id));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    double f1 = 0.04 + 0.10 * u01(srng);
    double f2 = 0.18 + 0.12 * u01(srng);
    double w1 = 0.45 + 0.25 * u01(srng);
    double w2 = 1.0 - w1;
    std::uniform_real_distribution<double> up(0.0, 2.0 * M_PI);
    std::uniform_real_distribution<double> uP1(5.0, 9.0), uP2(2.5, 4.5);
    double P1 = uP1(rng) * kAudioPerFrame, P2 = uP2(rng) * kAudioPerFrame;
    double pa = up(rng), pb = up(rng), th1 = up(rng), th2 = up(rng);
    AudioTrack a;
    a.speaker_id = speaker_id;
    a.samples.resize(frames * kAudioPerFrame);
    for (size_t n = 0; n < a.samples.size(); ++n) {
        double env = 0.65 * (0.5 + 0.5 * std::sin(2.0 * M_PI * n / P1 + pa)) +
                     0.55 * (0.5 + 0.5 * std::sin(2.0 * M_PI * n / P2 + pb)) - 0.25;
        env = std::clamp(env, 0.0, 1.0);
        double x = env * (w1 * std::sin(2.0 * M_PI * f1 * n + th1) +
                          w2 * std::sin(2.0 * M_PI * f2 * n + th2));
        a.samples[n] = std::clamp(x, -1.0, 1.0);
    }
    return a;
}

AudioTrack silent_audio(size_t frames) {
    AudioTrack a;
    a.speaker_id = -1;
    a.samples.assign(frames * kAudioPerFrame, 0.0);
    return a;
}

std::vector<double> aperture_from_audio(const AudioTrack& audio) {
    size_t f = audio.frames();
    std::vector<double> m(f, 0.0);
    for (size_t k = 0; k < f; ++k) {
        double acc = 0.0;
        for (int i = 0; i < kAudioPerFrame; ++i)
            acc += std::abs(audio.samples[k * kAudioPerFrame + i]);
        m[k] = acc / kAudioPerFrame;
    }
    std::vector<double> ap(f, 0.0);
    for (size_t k = 0; k < f; ++k) {
        size_t k0 = k == 0 ? 0 : k - 1;
        size_t k1 = k + 1 < f ? k + 1 : f - 1;
        double sm = (m[k0] + m[k] + m[k1]) / 3.0;
        ap[k] = std::clamp(kApertureGain * sm, 0.0, 1.0);
    }
    return ap;
}

RenderResult render_scene(const ToyScene& scene, const AudioTrack& audio) {
    if (audio.frames() != scene.frames)
        throw std::invalid_argument("render_scene: audio frames " +
                                    std::to_string(audio.frames()) + " != scene frames " +
                                    std::to_string(scene.frames));
    const size_t f = scene.frames, h = scene.height, w = scene.width, c = scene.channels;
    for (size_t k = 0; k < f; ++k) {
        double cx = scene.head_path[k][0], cy = scene.head_path[k][1];
        if (cx - kHeadRx < 0 || cx + kHeadRx > (double)w || cy - kHeadRy < 0 ||
            cy + kHeadRy > (double)h)
            throw std::invalid_argument("render_scene: head leaves the canvas at frame " +
                                        std::to_string(k));
        if (scene.occluder) {
            auto& oc = *scene.occluder;
            double ox = oc.path[k][0], oy = oc.path[k][1];
            if (ox < 0 || oy < 0 || ox + oc.width > (double)w || oy + oc.height > (double)h)
                throw std::invalid_argument("render_scene: occluder leaves the canvas at frame " +
                                            std::to_string(k));
        }
    }

    PatternSpec face = face_pattern(scene.identity_seed);
    PatternSpec bg = background_pattern(scene.identity_seed);
    std::vector<double> aperture = aperture_from_audio(audio);

    size_t frame_elems = c * h * w;
    std::vector<double> vid(f * frame_elems), mface(f * frame_elems, 0.0),
        mlip(f * frame_elems, 0.0), mocc(f * frame_elems, 0.0), minp(f * frame_elems, 0.0);

    for (size_t k = 0; k < f; ++k) {
        double cx = scene.head_path[k][0], cy = scene.head_path[k][1], th = scene.head_path[k][2];
        double ct = std::cos(th), st = std::sin(th);
        double a = aperture[k];
        double open_lo = kOpeningTop, open_hi = kOpeningTop + kOpeningMaxPx * a;
        double light = scene.light_gain[k] * scene.light_tint[k];
        for (size_t y = 0; y < h; ++y)
            for (size_t x = 0; x < w; ++x) {
                double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                double u = ct * dx + st * dy, v = -st * dx + ct * dy;
                double val;
                bool fce = in_ellipse(u, v);
                bool lip = fce && in_mouth_box(u, v);
                if (lip) {
                    double cov = std::clamp(std::min(v + 0.5, open_hi) - std::max(v - 0.5, open_lo),
                                            0.0, 1.0);
                    val = kLipBase + (kMouthDark - kLipBase) * cov;
                } else if (fce) {
                    val = face(u, v);
                } else {
                    val = bg(x + 0.5, y + 0.5);
                }
                bool occ = false;
                if (scene.occluder) {
                    auto& oc = *scene.occluder;
                    double ox = oc.path[k][0], oy = oc.path[k][1];
                    if (x + 0.5 >= ox && x + 0.5 < ox + oc.width && y + 0.5 >= oy &&
                        y + 0.5 < oy + oc.height) {
                        occ = true;
                        val = oc.intensity *
                              (1.0 + 0.3 * std::sin(0.7 * (x + 0.5)) * std::sin(0.9 * (y + 0.5)));
                    }
                }
                size_t idx = k * frame_elems + y * w + x;
                vid[idx] = val * light;
                mface[idx] = fce ? 1.0 : 0.0;
                mlip[idx] = lip ? 1.0 : 0.0;
                mocc[idx] = occ ? 1.0 : 0.0;
                minp[idx] = (fce && !occ) ? 0.0 : 1.0;
            }
    }

    RenderResult out;
    Shape vs{f, c, h, w};
    out.video = Tensor::leaf(vs, std::move(vid));
    out.masks.face = Tensor::leaf(vs, std::move(mface));
    out.masks.lip = Tensor::leaf(vs, std::move(mlip));
    out.masks.occ = Tensor::leaf(vs, std::move(mocc));
    out.masks.inpaint = Tensor::leaf(vs, std::move(minp));
    out.masks.smooth = gaussian_blur_mask(out.masks.face, 1.2);
    out.aperture = std::move(aperture);
    return out;
}

Tensor gaussian_blur_mask(const Tensor& mask, double sigma) {
    const Shape& s = mask.shape();
    if (sigma <= 0.0) return Tensor::leaf(s, mask.value());
    size_t f = s[0], c = s[1], h = s[2], w = s[3];
    int rad = (int)std::ceil(3.0 * sigma);
    std::vector<double> kern(2 * rad + 1);
    double ksum = 0.0;
    for (int i = -rad; i <= rad; ++i) {
        kern[i + rad] = std::exp(-0.5 * (i / sigma) * (i / sigma));
        ksum += kern[i + rad];
    }
    for (auto& kv : kern) kv /= ksum;
    std::vector<double> tmp(mask.value()), out(mask.size());
    // horizontal then vertical, clamped borders
    for (size_t fr = 0; fr < f * c; ++fr) {
        const double* src = mask.value().data() + fr * h * w;
        double* dst = tmp.data() + fr * h * w;
        for (size_t y = 0; y < h; ++y)
            for (size_t x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int i = -rad; i <= rad; ++i) {
                    int xx = std::clamp((int)x + i, 0, (int)w - 1);
                    acc += kern[i + rad] * src[y * w + xx];
                }
                dst[y * w + x] = acc;
            }
        const double* src2 = dst;
        double* dst2 = out.data() + fr * h * w;
        for (size_t y = 0; y < h; ++y)
            for (size_t x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int i = -rad; i <= rad; ++i) {
                    int yy = std::clamp((int)y + i, 0, (int)h - 1);
                    acc += kern[i + rad] * src2[yy * w + x];
                }
                dst2[y * w + x] = std::clamp(acc, 0.0, 1.0);
            }
    }
    return Tensor::leaf(s, std::move(out));
}

Tensor relight(const Tensor& video, const std::vector<double>& gain) {
    const Shape& s = video.shape();
    if (gain.size() != s[0]) throw std::invalid_argument("relight: gain track length mismatch");
    std::vector<double> v(video.value());
    size_t per = video.size() / s[0];
    for (size_t k = 0; k < s[0]; ++k)
        for (size_t i = 0; i < per; ++i) v[k * per + i] *= gain[k];
    return Tensor::leaf(s, std::move(v));
}

std::vector<double> random_light_track(std::mt19937_64& rng, size_t frames, double lo, double hi) {
    std::uniform_real_distribution<double> up(0.0, 2.0 * M_PI), uper(8.0, 16.0);
    double mid = 0.5 * (lo + hi), amp = 0.5 * (hi - lo);
    double P = uper(rng), ph = up(rng);
    std::vector<double> g(frames);
    for (size_t k = 0; k < frames; ++k) g[k] = mid + amp * std::sin(2.0 * M_PI * k / P + ph);
    return g;
}

PairedSample analytic_pair(const ToyScene& scene, const AudioTrack& a, const AudioTrack& a_alt) {
    if (a.frames() != a_alt.frames())
        throw std::invalid_argument("analytic_pair: audio frame counts differ");
    RenderResult tgt = render_scene(scene, a);
    RenderResult ref = render_scene(scene, a_alt);
    PairedSample p;
    p.v_ref = ref.video;
    p.v_tgt = tgt.video;
    p.audio = a;
    p.masks = tgt.masks;
    p.origin = "analytic";
    p.aperture_ref = ref.aperture;
    p.aperture_tgt = tgt.aperture;
    return p;
}

namespace {

Tensor projection_matrix() {
    static Tensor proj = [] {
        std::mt19937_64 rng(kProjectionSeed);
        std::normal_distribution<double> nd;
        size_t crop = (size_t)kEmbedCrop * kEmbedCrop;
        std::vector<double> v(kEmbedDim * crop);
        for (auto& x : v) x = nd(rng) / std::sqrt((double)crop);
        return Tensor::leaf({(size_t)kEmbedDim, crop}, std::move(v));
    }();
    return proj;
}

// bilinear crop-resample matrix [crop^2, h*w] for the face bbox of one frame
Tensor crop_matrix(const std::vector<double>& face, size_t frame, size_t h, size_t w,
                   const char* who) {
    size_t off = frame * h * w;
    int x0 = (int)w, x1 = -1, y0 = (int)h, y1 = -1;
    for (int y = 0; y < (int)h; ++y)
        for (int x = 0; x < (int)w; ++x)
            if (face[off + y * w + x] > 0.5) {
                x0 = std::min(x0, x); x1 = std::max(x1, x);
                y0 = std::min(y0, y); y1 = std::max(y1, y);
            }
    if (x1 < x0) throw std::invalid_argument(std::string(who) + ": no face region in masks");
    size_t n = (size_t)kEmbedCrop;
    std::vector<double> R(n * n * h * w, 0.0);
    for (size_t ty = 0; ty < n; ++ty)
        for (size_t tx = 0; tx < n; ++tx) {
            double sx = x0 + (tx + 0.5) / (double)n * (x1 + 1 - x0) - 0.5;
            double sy = y0 + (ty + 0.5) / (double)n * (y1 + 1 - y0) - 0.5;
            int ix = (int)std::floor(sx), iy = (int)std::floor(sy);
            double fx = sx - ix, fy = sy - iy;
            size_t row = (ty * n + tx) * h * w;
            for (int dy = 0; dy <= 1; ++dy)
                for (int dx = 0; dx <= 1; ++dx) {
                    int xx = std::clamp(ix + dx, 0, (int)w - 1);
                    int yy = std::clamp(iy + dy, 0, (int)h - 1);
                    double wgt = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy);
                    R[row + yy * w + xx] += wgt;
                }
        }
    return Tensor::leaf({n * n, h * w}, std::move(R));
}

}  // namespace

Tensor identity_embed(const Tensor& video, const MaskSet& masks) {
    const Shape& s = video.shape();
    size_t f = s[0], h = s[2], w = s[3];
    size_t crop = (size_t)kEmbedCrop * kEmbedCrop;
    Tensor num, den;  // occlusion-weighted per-cell average over frames
    for (size_t k = 0; k < f; ++k) {
        Tensor R = crop_matrix(masks.face.value(), k, h, w, "identity_embed");
        // inclusion = face && !lip && !occ resampled into the crop
        std::vector<double> incl(h * w);
        size_t off = k * h * w;
        for (size_t i = 0; i < h * w; ++i)
            incl[i] = masks.face.value()[off + i] * (1.0 - masks.lip.value()[off + i]) *
                      (1.0 - masks.occ.value()[off + i]);
        Tensor incl_crop = matmul(R, Tensor::leaf({h * w, 1}, incl));
        double incl_sum = 0.0;
        for (double x : incl_crop.value()) incl_sum += x;
        // mask before resampling so excluded pixels (lips, occluders) cannot
        // bleed into boundary cells of the bilinear crop
        Tensor frame = mul(reshape(slice(video, 0, k, 1), {h * w, 1}),
                           Tensor::leaf({h * w, 1}, incl));
        Tensor masked = matmul(R, frame);
        Tensor mean = scale(reduce_sum(masked), 1.0 / std::max(incl_sum, 1e-9));
        Tensor contrast = sub(divide(masked, mean), incl_crop);
        num = num.defined() ? add(num, contrast) : contrast;
        den = den.defined() ? add(den, incl_crop) : incl_crop;
    }
    Tensor pooled = divide(num, add_scalar(den, 1e-6));
    Tensor e = matmul(projection_matrix(), reshape(pooled, {crop, 1}));
    Tensor norm = sqrt(add_scalar(reduce_sum(mul(e, e)), 1e-12));
    return reshape(divide(e, norm), {(size_t)kEmbedDim});
}

Tensor aperture_extract(const Tensor& video, const MaskSet& masks) {
    const Shape& s = video.shape();
    size_t f = s[0], h = s[2], w = s[3];
    const double box_rows = kMouthBoxV1 - kMouthBoxV0;
    const double cal = box_rows / (kOpeningMaxPx * (kLipBase - kMouthDark));
    std::vector<Tensor> per_frame;
    for (size_t k = 0; k < f; ++k) {
        size_t off = k * h * w;
        std::vector<double> lip(h * w), offface(h * w);
        double lsum = 0.0, osum = 0.0;
        for (size_t i = 0; i < h * w; ++i) {
            lip[i] = masks.lip.value()[off + i];
            offface[i] = masks.face.value()[off + i] * (1.0 - lip[i]) *
                         (1.0 - masks.occ.value()[off + i]);
            lsum += lip[i];
            osum += offface[i];
        }
        if (lsum == 0.0) throw std::invalid_argument("aperture_extract: empty lip mask");
        if (osum == 0.0) throw std::invalid_argument("aperture_extract: empty face region");
        Tensor frame = reshape(slice(video, 0, k, 1), {h * w, 1});
        Tensor mean_lip = scale(matmul(Tensor::leaf({1, h * w}, lip), frame), 1.0 / lsum);
        Tensor mean_off = scale(matmul(Tensor::leaf({1, h * w}, offface), frame), 1.0 / osum);
        Tensor r = divide(reshape(mean_lip, {1}), reshape(mean_off, {1}));
        Tensor a = scale(add_scalar(scale(r, -kFaceMean), kLipBase), cal);
        per_frame.push_back(a);
    }
    return concat(per_frame, 0);
}

std::vector<double> aperture_extract_values(const Tensor& video, const MaskSet& masks) {
    NoGradGuard ng;
    return aperture_extract(video, masks).value();
}

// ---- codec -----------------------------------------------------------------

namespace {
std::vector<double> orthogonal_matrix(size_t n, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::vector<double> m(n * n);
    for (auto& x : m) x = nd(rng);
    // Gram-Schmidt rows
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < i; ++j) {
            double dot = 0.0;
            for (size_t k = 0; k < n; ++k) dot += m[i * n + k] * m[j * n + k];
            for (size_t k = 0; k < n; ++k) m[i * n + k] -= dot * m[j * n + k];
        }
        double nrm = 0.0;
        for (size_t k = 0; k < n; ++k) nrm += m[i * n + k] * m[i * n + k];
        nrm = std::sqrt(nrm);
        for (size_t k = 0; k < n; ++k) m[i * n + k] /= nrm;
    }
    return m;
}
}  // namespace

Tensor Codec::encode(const Tensor& video) const {
    if (mode == Mode::identity) return video;
    const Shape& s = video.shape();
    size_t f = s[0], c = s[1], h = s[2], w = s[3];
    size_t p = (size_t)patch_size, pp = p * p;
    auto M = orthogonal_matrix(pp, 0xc0dec);
    std::vector<double> out(video.size());
    std::vector<double> px(pp), py(pp);
    for (size_t fr = 0; fr < f * c; ++fr)
        for (size_t by = 0; by < h; by += p)
            for (size_t bx = 0; bx < w; bx += p) {
                for (size_t i = 0; i < p; ++i)
                    for (size_t j = 0; j < p; ++j)
                        px[i * p + j] = video.value()[fr * h * w + (by + i) * w + bx + j];
                for (size_t r = 0; r < pp; ++r) {
                    double acc = 0.0;
                    for (size_t k = 0; k < pp; ++k) acc += M[r * pp + k] * px[k];
                    py[r] = acc;
                }
                for (size_t i = 0; i < p; ++i)
                    for (size_t j = 0; j < p; ++j)
                        out[fr * h * w + (by + i) * w + bx + j] = py[i * p + j];
            }
    return Tensor::leaf(s, std::move(out));
}

Tensor Codec::decode(const Tensor& latent) const {
    if (mode == Mode::identity) return latent;
    const Shape& s = latent.shape();
    size_t f = s[0], c = s[1], h = s[2], w = s[3];
    size_t p = (size_t)patch_size, pp = p * p;
    auto M = orthogonal_matrix(pp, 0xc0dec);
    std::vector<double> out(latent.size());
    std::vector<double> px(pp), py(pp);
    for (size_t fr = 0; fr < f * c; ++fr)
        for (size_t by = 0; by < h; by += p)
            for (size_t bx = 0; bx < w; bx += p) {
                for (size_t i = 0; i < p; ++i)
                    for (size_t j = 0; j < p; ++j)
                        px[i * p + j] = latent.value()[fr * h * w + (by + i) * w + bx + j];
                for (size_t r = 0; r < pp; ++r) {
                    double acc = 0.0;
                    for (size_t k = 0; k < pp; ++k) acc += M[k * pp + r] * px[k];  // transpose
                    py[r] = acc;
                }
                for (size_t i = 0; i < p; ++i)
                    for (size_t j = 0; j < p; ++j)
                        out[fr * h * w + (by + i) * w + bx + j] = py[i * p + j];
            }
    return Tensor::leaf(s, std::move(out));
}

// ---- clip / pair files -----------------------------------------------------

namespace {
Tensor vec_tensor(const std::vector<double>& v) {
    return Tensor::leaf({v.size()}, v);
}
}  // namespace

void save_clip(const std::string& path, const Tensor& video, const MaskSet& masks,
               const AudioTrack& audio, const std::vector<double>& aperture) {
    TensorStore st;
    st.put("video", video);
    st.put("mask/face", masks.face);
    st.put("mask/lip", masks.lip);
    st.put("mask/occ", masks.occ);
    st.put("mask/inpaint", masks.inpaint);
    st.put("mask/smooth", masks.smooth);
    st.put("audio", vec_tensor(audio.samples));
    st.put("speaker", Tensor::scalar((double)audio.speaker_id));
    st.put("aperture", vec_tensor(aperture));
    st.save(path);
}

Clip load_clip(const std::string& path) {
    TensorStore st = TensorStore::load(path);
    Clip c;
    c.video = st.at("video");
    c.masks.face = st.at("mask/face");
    c.masks.lip = st.at("mask/lip");
    c.masks.occ = st.at("mask/occ");
    c.masks.inpaint = st.at("mask/inpaint");
    c.masks.smooth = st.at("mask/smooth");
    c.audio.samples = st.at("audio").value();
    c.audio.speaker_id = (int64_t)st.at("speaker").item();
    c.aperture = st.at("aperture").value();
    return c;
}

void save_pair(const std::string& path, const PairedSample& pair) {
    TensorStore st;
    st.put("v_ref", pair.v_ref);
    st.put("v_tgt", pair.v_tgt);
    st.put("audio", vec_tensor(pair.audio.samples));
    st.put("speaker", Tensor::scalar((double)pair.audio.speaker_id));
    st.put("mask/face", pair.masks.face);
    st.put("mask/lip", pair.masks.lip);
    st.put("mask/occ", pair.masks.occ);
    st.put("mask/inpaint", pair.masks.inpaint);
    st.put("mask/smooth", pair.masks.smooth);
    st.put("aperture_ref", vec_tensor(pair.aperture_ref));
    st.put("aperture_tgt", vec_tensor(pair.aperture_tgt));
    st.put("origin", Tensor::scalar(pair.origin == "analytic" ? 1.0 : 0.0));
    st.save(path);
}

PairedSample load_pair(const std::string& path) {
    TensorStore st = TensorStore::load(path);
    PairedSample p;
    p.v_ref = st.at("v_ref");
    p.v_tgt = st.at("v_tgt");
    p.audio.samples = st.at("audio").value();
    p.audio.speaker_id = (int64_t)st.at("speaker").item();
    p.masks.face = st.at("mask/face");
    p.masks.lip = st.at("mask/lip");
    p.masks.occ = st.at("mask/occ");
    p.masks.inpaint = st.at("mask/inpaint");
    p.masks.smooth = st.at("mask/smooth");
    p.aperture_ref = st.at("aperture_ref").value();
    p.aperture_tgt = st.at("aperture_tgt").value();
    p.origin = st.at("origin").item() > 0.5 ? "analytic" : "generated";
    return p;
}

}  // namespace dubflow::toyworld
