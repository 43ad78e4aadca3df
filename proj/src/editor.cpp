#include "dubflow/editor.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "dubflow/runio.hpp"

namespace dubflow::dubedit {

using namespace numgrad;
using toyworld::MaskSet;

namespace {

MaskSet slice_masks(const MaskSet& m, size_t start, size_t len) {
    return MaskSet{slice(m.face, 0, start, len), slice(m.lip, 0, start, len),
                   slice(m.occ, 0, start, len), slice(m.inpaint, 0, start, len),
                   slice(m.smooth, 0, start, len)};
}

ditcore::DiT::Layout editor_layout(size_t f, size_t h, size_t w) {
    ditcore::DiT::Layout lay;
    lay.height = h;
    lay.width = w;
    lay.role.resize(2 * f);
    lay.time_index.resize(2 * f);
    lay.audio_frame.resize(2 * f);
    for (size_t k = 0; k < f; ++k) {
        lay.role[k] = 1;  // reference half: shifted rotary, no output
        lay.time_index[k] = (long)k;
        lay.audio_frame[k] = -1;
        lay.role[f + k] = 0;
        lay.time_index[f + k] = (long)k;
        lay.audio_frame[f + k] = (int)k;
    }
    return lay;
}

ditcore::DiT::Layout channel_concat_layout(size_t f, size_t h, size_t w) {
    ditcore::DiT::Layout lay;
    lay.height = h;
    lay.width = w;
    lay.role.assign(f, 0);
    lay.time_index.resize(f);
    lay.audio_frame.resize(f);
    for (size_t k = 0; k < f; ++k) {
        lay.time_index[k] = (long)k;
        lay.audio_frame[k] = (int)k;
    }
    return lay;
}

Tensor segment_audio_windows(const toyworld::AudioTrack& audio, size_t start, size_t len) {
    toyworld::AudioTrack seg;
    seg.speaker_id = audio.speaker_id;
    seg.samples.assign(audio.samples.begin() + start * toyworld::kAudioPerFrame,
                       audio.samples.begin() + (start + len) * toyworld::kAudioPerFrame);
    return ditcore::build_audio_windows(dubgen::audio_feature_matrix(seg), len);
}

Tensor gaussian_noise(const Shape& s, std::mt19937_64& rng) {
    std::normal_distribution<double> nd;
    std::vector<double> v(numel(s));
    for (auto& x : v) x = nd(rng);
    return Tensor::leaf(s, std::move(v));
}

}  // namespace

dubgen::ConditioningBundle assemble_editor_input(const Tensor& v_ref, const Tensor& z_noised,
                                                 const EditorAssembleOptions& opt,
                                                 std::mt19937_64& rng,
                                                 const Tensor* clean_tgt) {
    const Shape& vs = v_ref.shape();
    if (vs.size() != 4)
        throw std::invalid_argument("assemble_editor_input: expected [f,c,h,w]");
    if (z_noised.shape() != vs)
        throw std::invalid_argument(
            "assemble_editor_input: reference and target must share frame count and shape");
    size_t f = vs[0], h = vs[2], w = vs[3];

    dubgen::ConditioningBundle b;
    b.mode = "editor";
    b.motion_count = opt.motion_count;
    b.z_ref = v_ref;

    bool keep_motion = opt.motion_count > 0;
    if (opt.training) {
        if (!clean_tgt) keep_motion = false;  // no clean latent to pin
        if (keep_motion) {
            std::uniform_real_distribution<double> ud(0.0, 1.0);
            if (ud(rng) < opt.motion_dropout) keep_motion = false;
        }
    }
    b.motion_dropout_applied = !keep_motion;
    Tensor content = z_noised;
    if (opt.training && keep_motion) {
        // motion slots carry the clean target latent, mirroring the generator
        size_t m = (size_t)opt.motion_count;
        if (clean_tgt->shape() != vs)
            throw std::invalid_argument("assemble_editor_input: clean target shape mismatch");
        content = concat({slice(*clean_tgt, 0, 0, m), slice(z_noised, 0, m, f - m)}, 0);
    }
    b.z_noised = content;

    if (opt.channel_concat) {
        b.z_in = concat({v_ref, content}, 1);
        b.layout = channel_concat_layout(f, h, w);
    } else {
        b.z_in = concat({v_ref, content}, 0);
        b.layout = editor_layout(f, h, w);
    }
    return b;
}

Tensor sync_loss(const Tensor& x0_hat, const toyworld::AudioTrack& audio,
                 const toyworld::MaskSet& masks, size_t span_start, const SyncProxySpec& spec) {
    size_t f = x0_hat.shape()[0];
    size_t win = (size_t)spec.window;
    if (span_start + win > f)
        throw std::invalid_argument("sync_loss: supervision span exceeds the clip");
    if (audio.frames() != f) throw std::invalid_argument("sync_loss: audio length mismatch");

    Tensor span = slice(x0_hat, 0, span_start, win);
    MaskSet m_span = slice_masks(masks, span_start, win);
    Tensor ap = toyworld::aperture_extract(span, m_span);

    auto track = toyworld::aperture_from_audio(audio);
    std::vector<double> tgt(track.begin() + span_start, track.begin() + span_start + win);
    Tensor target = Tensor::leaf({win}, std::move(tgt));
    Tensor d = sub(ap, target);
    return reduce_mean(mul(d, d));
}

Tensor identity_loss(const Tensor& x0_hat, const Tensor& v_ref,
                     const toyworld::MaskSet& masks) {
    Tensor cos = cosine_similarity(toyworld::identity_embed(x0_hat, masks),
                                   toyworld::identity_embed(v_ref, masks));
    return add_scalar(scale(cos, -1.0), 1.0);
}

PhasePlan default_phase_plan(int base_steps, double lr_full, double lr_adapter) {
    PhasePlan plan;
    flowmatch::PhaseSpec high;
    high.name = "high";
    high.alpha = 5.0;
    high.scope = "full";
    high.steps = 4 * base_steps;
    high.lr = lr_full;
    flowmatch::PhaseSpec mid;
    mid.name = "mid";
    mid.alpha = 1.5;
    mid.scope = "lip";
    mid.use_sync = true;
    mid.steps = base_steps;
    mid.lr = lr_adapter;
    flowmatch::PhaseSpec low;
    low.name = "low";
    low.alpha = 0.2;
    low.scope = "texture";
    low.use_identity = true;
    low.audio_dropout = 0.5;
    low.steps = base_steps;
    low.lr = lr_adapter;
    plan.phases = {high, mid, low};
    return plan;
}

ditcore::DiT train_multiphase(const std::vector<toyworld::PairedSample>& pairs,
                              const EditorTrainConfig& cfg) {
    if (pairs.empty()) throw std::invalid_argument("train_multiphase: empty pair corpus");
    if (cfg.batch < 1) throw std::invalid_argument("train_multiphase: batch must be >= 1");
    size_t seg = (size_t)cfg.seg_len;
    for (const auto& p : pairs) {
        if (p.v_ref.shape() != p.v_tgt.shape())
            throw std::invalid_argument("train_multiphase: pair halves disagree in shape");
        if (p.v_tgt.shape()[0] < seg)
            throw std::invalid_argument("train_multiphase: pair shorter than seg_len");
    }

    ditcore::DiT model(cfg.model, cfg.seed);
    SyncProxySpec sync_spec;

    for (size_t pi = 0; pi < cfg.plan.phases.size(); ++pi) {
        const auto& phase = cfg.plan.phases[pi];
        if (phase.use_sync && seg < (size_t)sync_spec.window)
            throw std::invalid_argument(
                "train_multiphase: seg_len shorter than the sync supervision span");

        const ditcore::LoraAdapter* active_adapter = nullptr;
        std::vector<Tensor> train_params;
        if (phase.scope == "full") {
            train_params = model.trainable("full");
        } else {
            if (!model.find_adapter(phase.scope)) {
                auto git = cfg.gates.find(phase.scope);
                double lo = git != cfg.gates.end() ? git->second.first : 0.0;
                double hi = git != cfg.gates.end() ? git->second.second : 1.0;
                model.add_adapter(phase.scope, cfg.lora_rank, lo, hi,
                                  cfg.seed + 7919 * (pi + 1));
            }
            train_params = model.trainable(phase.scope);
            active_adapter = model.find_adapter(phase.scope);
        }
        std::vector<const ditcore::LoraAdapter*> active;
        if (active_adapter) active.push_back(active_adapter);

        runio::Adam optim(train_params, phase.lr);
        std::mt19937_64 rng(cfg.seed + 1000 * (pi + 1));
        std::uniform_real_distribution<double> ud(0.0, 1.0);

        std::unique_ptr<runio::CsvLogger> log;
        if (!cfg.loss_csv_prefix.empty())
            log = std::make_unique<runio::CsvLogger>(
                cfg.loss_csv_prefix + phase.name + ".csv",
                std::vector<std::string>{"step", "loss", "t", "audio_drop"});

        for (int step = 0; step < phase.steps; ++step) {
            if (phase.lr_final >= 0.0)
                optim.set_lr(phase.lr_final +
                             0.5 * (phase.lr - phase.lr_final) *
                                 (1.0 + std::cos(M_PI * (double)step / (double)phase.steps)));
            std::vector<Tensor> batch_losses;
            double t_last = 0.0;
            int dropped_count = 0;
            for (int bi = 0; bi < cfg.batch; ++bi) {
                const auto& pair = pairs[rng() % pairs.size()];
                size_t f_p = pair.v_tgt.shape()[0];
                size_t start = rng() % (f_p - seg + 1);

                Tensor ref_seg = slice(pair.v_ref, 0, start, seg);
                Tensor tgt_seg = slice(pair.v_tgt, 0, start, seg);
                MaskSet m_seg = slice_masks(pair.masks, start, seg);
                toyworld::AudioTrack a_seg;
                a_seg.speaker_id = pair.audio.speaker_id;
                a_seg.samples.assign(
                    pair.audio.samples.begin() + start * toyworld::kAudioPerFrame,
                    pair.audio.samples.begin() + (start + seg) * toyworld::kAudioPerFrame);
                Tensor aud = ditcore::build_audio_windows(dubgen::audio_feature_matrix(a_seg),
                                                         seg);

                double t = flowmatch::sample_shifted_timestep(phase, rng);
                t_last = t;
                Tensor eps = gaussian_noise(tgt_seg.shape(), rng);
                auto fs = flowmatch::diffuse_forward(tgt_seg, eps, t);

                auto bundle = assemble_editor_input(ref_seg, fs.z_t, cfg.assemble, rng,
                                                    &tgt_seg);

                bool audio_dropped = phase.audio_dropout > 0.0 && ud(rng) < phase.audio_dropout;
                if (audio_dropped) ++dropped_count;
                const Tensor* audio_ptr = audio_dropped ? nullptr : &aud;

                Tensor v_hat = model.forward(bundle.z_in, t, audio_ptr, bundle.layout, active);
                Tensor wgt = dubgen::motion_loss_weight(fs.v.shape(), bundle.motion_count,
                                                        bundle.motion_dropout_applied);
                Tensor loss = flowmatch::weighted_fm_loss(v_hat, fs.v, m_seg.face, m_seg.lip,
                                                          phase.weights, &wgt);

                if (phase.use_sync || phase.use_identity) {
                    auto fs_pred = fs;
                    fs_pred.v_hat = v_hat;
                    Tensor x0 = flowmatch::single_step_denoise(
                        fs_pred, cfg.denoise, [](const Tensor& z) { return z; });
                    if (phase.use_sync) {
                        size_t span = rng() % (seg - (size_t)sync_spec.window + 1);
                        loss = add(loss, scale(sync_loss(x0, a_seg, m_seg, span, sync_spec),
                                               phase.weights.w_sync));
                    }
                    if (phase.use_identity && audio_dropped)
                        loss = add(loss, scale(identity_loss(x0, ref_seg, m_seg),
                                               phase.weights.w_id));
                }
                batch_losses.push_back(loss);
            }
            Tensor loss = batch_losses.size() == 1
                              ? batch_losses[0]
                              : scale(reduce_sum(concat(batch_losses, 0)),
                                      1.0 / (double)batch_losses.size());
            double lv = loss.item();
            if (!std::isfinite(lv))
                throw std::runtime_error("train_multiphase: non-finite loss in phase " +
                                         phase.name + " at step " + std::to_string(step));
            numgrad::backward(loss);
            optim.step();
            if (log)
                log->row({(double)step, lv, t_last,
                          (double)dropped_count / (double)cfg.batch});
        }
    }
    return model;
}

Tensor dub_infer(const Tensor& v_ref, const toyworld::AudioTrack& audio,
                 const ditcore::DiT& model, const DubOptions& opt) {
    const Shape& vs = v_ref.shape();
    if (vs.size() != 4) throw std::invalid_argument("dub_infer: expected [f,c,h,w]");
    size_t f = vs[0], c = vs[1], h = vs[2], w = vs[3];
    if (audio.frames() != f) throw std::invalid_argument("dub_infer: audio length mismatch");
    size_t win = std::min((size_t)opt.window, f);
    size_t m = (size_t)opt.motion;
    if (win <= m) throw std::invalid_argument("dub_infer: window must exceed motion overlap");

    NoGradGuard ng;
    std::vector<size_t> starts{0};
    while (starts.back() + win < f) {
        size_t nxt = starts.back() + (win - m);
        if (nxt + win > f) nxt = f - win;
        starts.push_back(nxt);
    }

    std::mt19937_64 rng(opt.seed);
    std::vector<double> out(v_ref.size(), 0.0);
    size_t per_frame = c * h * w;

    for (size_t si = 0; si < starts.size(); ++si) {
        size_t start = starts[si];
        Tensor ref_seg = slice(v_ref, 0, start, win);
        Tensor aud = segment_audio_windows(audio, start, win);
        auto lay = opt.channel_concat ? channel_concat_layout(win, h, w)
                                      : editor_layout(win, h, w);

        auto velocity = [&](const Tensor& z, double t) {
            Tensor z_in = concat({ref_seg, z}, opt.channel_concat ? 1 : 0);
            auto active = ditcore::gate_adapters(model.adapters, t);
            return model.forward(z_in, t, &aud, lay, active);
        };

        std::optional<flowmatch::MotionGuidance> motion;
        if (si > 0 && m > 0) {
            std::vector<double> clean(out.begin() + start * per_frame,
                                      out.begin() + (start + m) * per_frame);
            motion = flowmatch::MotionGuidance{Tensor::leaf({m, c, h, w}, std::move(clean)), m};
        }
        Tensor z_T = gaussian_noise({win, c, h, w}, rng);
        Tensor z0 = flowmatch::euler_sample(velocity, z_T, opt.steps, motion);
        std::copy(z0.value().begin(), z0.value().end(), out.begin() + start * per_frame);
    }
    return Tensor::leaf(vs, std::move(out));
}

}  // namespace dubflow::dubedit
