#include "dubflow/generator.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "dubflow/pairs.hpp"
#include "dubflow/runio.hpp"

namespace dubflow::dubgen {

using namespace numgrad;
using toyworld::MaskSet;

namespace {

MaskSet slice_masks(const MaskSet& m, size_t start, size_t len) {
    return MaskSet{slice(m.face, 0, start, len), slice(m.lip, 0, start, len),
                   slice(m.occ, 0, start, len), slice(m.inpaint, 0, start, len),
                   slice(m.smooth, 0, start, len)};
}

ditcore::DiT::Layout generator_layout(size_t f, size_t h, size_t w) {
    ditcore::DiT::Layout lay;
    lay.height = h;
    lay.width = w;
    lay.role.assign(f + 1, 0);
    lay.role[0] = 2;  // context slot: no rope shift, not part of the output
    lay.time_index.resize(f + 1);
    lay.audio_frame.resize(f + 1);
    lay.time_index[0] = -1;
    lay.audio_frame[0] = -1;
    for (size_t k = 0; k < f; ++k) {
        lay.time_index[k + 1] = (long)k;
        lay.audio_frame[k + 1] = (int)k;
    }
    return lay;
}

Tensor segment_audio_windows(const toyworld::AudioTrack& audio, size_t start, size_t len) {
    toyworld::AudioTrack seg;
    seg.speaker_id = audio.speaker_id;
    seg.samples.assign(audio.samples.begin() + start * toyworld::kAudioPerFrame,
                       audio.samples.begin() + (start + len) * toyworld::kAudioPerFrame);
    return ditcore::build_audio_windows(audio_feature_matrix(seg), len);
}

Tensor gaussian_noise(const Shape& s, std::mt19937_64& rng) {
    std::normal_distribution<double> nd;
    std::vector<double> v(numel(s));
    for (auto& x : v) x = nd(rng);
    return Tensor::leaf(s, std::move(v));
}

}  // namespace

Tensor audio_feature_matrix(const toyworld::AudioTrack& audio) {
    size_t a = audio.samples.size();
    std::vector<double> f(a * 4);
    for (size_t i = 0; i < a; ++i) {
        double x = audio.samples[i];
        f[4 * i] = x;
        f[4 * i + 1] = std::abs(x);
        f[4 * i + 2] = x * x;
        f[4 * i + 3] = 1.0;
    }
    return Tensor::leaf({a, 4}, std::move(f));
}

ConditioningBundle assemble_generator_input(const Tensor& V, const MaskSet& masks,
                                            const Tensor& I_ref, const Tensor& z_noised,
                                            const GenAssembleOptions& opt,
                                            std::mt19937_64& rng) {
    const Shape& vs = V.shape();
    if (vs.size() != 4 || z_noised.shape() != vs)
        throw std::invalid_argument("assemble_generator_input: V and z_noised must share [f,c,h,w]");
    if (masks.inpaint.shape() != vs)
        throw std::invalid_argument("assemble_generator_input: mask shape mismatch");
    size_t f = vs[0], c = vs[1], h = vs[2], w = vs[3];
    Tensor ref = I_ref;
    if (ref.shape().size() == 3) ref = reshape(ref, {1, c, h, w});
    if (ref.shape() != Shape{1, c, h, w})
        throw std::invalid_argument("assemble_generator_input: reference must be a single frame");
    if (opt.training && opt.ref_in_segment)
        throw std::invalid_argument(
            "assemble_generator_input: training reference must come from outside the target "
            "segment");

    ConditioningBundle b;
    b.mode = "generator";
    b.motion_count = opt.motion_count;
    b.z_mask = mul(V, masks.inpaint);  // inpaint regions are 0 and get zeroed
    b.z_ref = ref;

    bool keep_motion = opt.motion_count > 0;
    if (opt.training && keep_motion) {
        std::uniform_real_distribution<double> ud(0.0, 1.0);
        if (ud(rng) < opt.motion_dropout) keep_motion = false;
    }
    b.motion_dropout_applied = !keep_motion;
    Tensor content = z_noised;
    if (opt.training && keep_motion) {
        size_t m = (size_t)opt.motion_count;
        content = concat({slice(V, 0, 0, m), slice(z_noised, 0, m, f - m)}, 0);
    }
    b.z_noised = content;

    Tensor ref_slot = concat({Tensor::zeros({1, c, h, w}), ref}, 1);
    Tensor tgt_slots = concat({b.z_mask, content}, 1);
    b.z_in = concat({ref_slot, tgt_slots}, 0);
    b.layout = generator_layout(f, h, w);
    return b;
}

Tensor motion_loss_weight(const Shape& target_shape, int motion_count, bool dropout_applied) {
    std::vector<double> w(numel(target_shape), 1.0);
    if (!dropout_applied && motion_count > 0) {
        size_t per = numel(target_shape) / target_shape[0];
        std::fill(w.begin(), w.begin() + (size_t)motion_count * per, 0.0);
    }
    return Tensor::leaf(target_shape, std::move(w));
}

ditcore::DiT train_generator(const std::vector<toyworld::Clip>& corpus,
                             const GenTrainConfig& cfg) {
    if (corpus.empty()) throw std::invalid_argument("train_generator: empty corpus");
    size_t seg = (size_t)cfg.seg_len;
    for (const auto& c : corpus)
        if (c.video.shape()[0] <= seg)
            throw std::invalid_argument(
                "train_generator: clips must be longer than seg_len so references can come from "
                "outside the segment");

    ditcore::DiT model(cfg.model, cfg.seed);
    runio::Adam optim(model.trainable("full"), cfg.lr);
    std::mt19937_64 rng(cfg.seed + 1);
    flowmatch::PhaseSpec phase;
    phase.alpha = cfg.alpha;

    std::unique_ptr<runio::CsvLogger> log;
    if (!cfg.loss_csv.empty())
        log = std::make_unique<runio::CsvLogger>(cfg.loss_csv,
                                                 std::vector<std::string>{"step", "loss", "t"});

    if (cfg.batch < 1) throw std::invalid_argument("train_generator: batch must be >= 1");
    double init_loss = -1.0;
    int high_streak = 0;
    for (int step = 0; step < cfg.steps; ++step) {
        if (cfg.lr_final >= 0.0)
            optim.set_lr(cfg.lr_final +
                         0.5 * (cfg.lr - cfg.lr_final) *
                             (1.0 + std::cos(M_PI * (double)step / (double)cfg.steps)));
        // one optimizer step averages the loss over a small batch of segment
        // draws; a single draw is too noisy for the skip gate to settle
        std::vector<Tensor> batch_losses;
        double t_last = 0.0;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& clip = corpus[rng() % corpus.size()];
            size_t f_clip = clip.video.shape()[0];
            size_t start = rng() % (f_clip - seg + 1);
            size_t outside = f_clip - seg;
            size_t j = rng() % outside;
            size_t ref_idx = j < start ? j : j + seg;

            Tensor V_seg = slice(clip.video, 0, start, seg);
            MaskSet m_seg = slice_masks(clip.masks, start, seg);
            Tensor aud = segment_audio_windows(clip.audio, start, seg);
            Tensor I_ref = slice(clip.video, 0, ref_idx, 1);

            double t = flowmatch::sample_shifted_timestep(phase, rng);
            t_last = t;
            Tensor eps = gaussian_noise(V_seg.shape(), rng);
            auto fs = flowmatch::diffuse_forward(V_seg, eps, t);
            auto bundle =
                assemble_generator_input(V_seg, m_seg, I_ref, fs.z_t, cfg.assemble, rng);
            Tensor v_hat = model.forward(bundle.z_in, t, &aud, bundle.layout);
            Tensor wgt = motion_loss_weight(fs.v.shape(), bundle.motion_count,
                                            bundle.motion_dropout_applied);
            batch_losses.push_back(flowmatch::weighted_fm_loss(v_hat, fs.v, m_seg.face,
                                                               m_seg.lip, cfg.weights, &wgt));
        }
        Tensor loss = batch_losses.size() == 1
                          ? batch_losses[0]
                          : scale(reduce_sum(concat(batch_losses, 0)),
                                  1.0 / (double)batch_losses.size());
        double lv = loss.item();
        if (!std::isfinite(lv))
            throw std::runtime_error("train_generator: non-finite loss at step " +
                                     std::to_string(step));
        numgrad::backward(loss);
        optim.step();
        if (log) log->row({(double)step, lv, t_last});
        if (init_loss < 0.0) init_loss = lv;
        high_streak = lv > 10.0 * init_loss ? high_streak + 1 : 0;
        if (high_streak >= 200)
            throw std::runtime_error("train_generator: diverged at step " + std::to_string(step) +
                                     " (loss " + std::to_string(lv) + " vs initial " +
                                     std::to_string(init_loss) + ")");
    }
    return model;
}

Tensor generate_companion(const Tensor& V, const MaskSet& masks,
                          const toyworld::AudioTrack& a_alt, const ditcore::DiT& model,
                          const CompanionOptions& opt) {
    const Shape& vs = V.shape();
    size_t f = vs[0], c = vs[1], h = vs[2], w = vs[3];
    if (opt.seg_len <= opt.overlap)
        throw std::invalid_argument("generate_companion: seg_len must exceed overlap");
    if ((size_t)opt.seg_len > f)
        throw std::invalid_argument("generate_companion: clip shorter than seg_len");
    if (a_alt.frames() != f)
        throw std::invalid_argument("generate_companion: audio length mismatch");

    NoGradGuard ng;
    size_t seg = (size_t)opt.seg_len, ov = (size_t)opt.overlap;
    std::vector<size_t> starts{0};
    while (starts.back() + seg < f) {
        size_t nxt = starts.back() + (seg - ov);
        if (nxt + seg > f) nxt = f - seg;
        starts.push_back(nxt);
    }

    std::mt19937_64 rng(opt.seed);
    std::vector<double> gen(V.size(), 0.0);
    size_t per_frame = c * h * w;

    for (size_t si = 0; si < starts.size(); ++si) {
        size_t start = starts[si];
        Tensor V_seg = slice(V, 0, start, seg);
        MaskSet m_seg = slice_masks(masks, start, seg);
        Tensor aud = segment_audio_windows(a_alt, start, seg);
        Tensor I_ref = slice(V, 0, start + seg / 2, 1);
        Tensor z_mask = mul(V_seg, m_seg.inpaint);
        Tensor ref_slot = concat({Tensor::zeros({1, c, h, w}), I_ref}, 1);
        auto lay = generator_layout(seg, h, w);

        auto velocity = [&](const Tensor& z, double t) {
            Tensor z_in = concat({ref_slot, concat({z_mask, z}, 1)}, 0);
            return model.forward(z_in, t, &aud, lay);
        };

        std::optional<flowmatch::MotionGuidance> motion;
        if (si > 0) {
            std::vector<double> clean(gen.begin() + start * per_frame,
                                      gen.begin() + (start + ov) * per_frame);
            motion = flowmatch::MotionGuidance{Tensor::leaf({ov, c, h, w}, std::move(clean)),
                                               ov};
        }
        Tensor z_T = gaussian_noise({seg, c, h, w}, rng);
        Tensor z0 = flowmatch::euler_sample(velocity, z_T, opt.euler_steps, motion);
        std::copy(z0.value().begin(), z0.value().end(), gen.begin() + start * per_frame);
    }

    Tensor v_gen = Tensor::leaf(vs, std::move(gen));
    return pairforge::blend_postprocess(v_gen, V, masks.face, opt.blend_sigma);
}

}  // namespace dubflow::dubgen
