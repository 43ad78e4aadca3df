// Python bindings for the dubflow core: toy-world rendering, flow-matching
// utilities, model training and inference, pair filtering, evaluation, and the
// oracle battery. Tensors cross the boundary as float64 numpy arrays.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <random>

#include "dubflow/dit.hpp"
#include "dubflow/editor.hpp"
#include "dubflow/eval.hpp"
#include "dubflow/flow.hpp"
#include "dubflow/generator.hpp"
#include "dubflow/pairs.hpp"
#include "dubflow/world.hpp"

namespace py = pybind11;
using namespace dubflow;
using numgrad::Tensor;

namespace {

Tensor to_tensor(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    numgrad::Shape shape(a.ndim());
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[i] = (size_t)a.shape(i);
    std::vector<double> v(a.data(), a.data() + a.size());
    return Tensor::leaf(std::move(shape), std::move(v));
}

py::array_t<double> from_tensor(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    return py::array_t<double>(shape, t.value().data());
}

toyworld::ToyScene scene_random(uint64_t seed, size_t frames, double motion_amp,
                                double rotation_amp, bool with_occluder,
                                bool occluder_over_lips, double light_lo, double light_hi) {
    std::mt19937_64 rng(seed);
    toyworld::ToyScene::Options opt;
    opt.frames = frames;
    opt.motion_amp = motion_amp;
    opt.rotation_amp = rotation_amp;
    opt.with_occluder = with_occluder;
    opt.occluder_over_lips = occluder_over_lips;
    opt.light_lo = light_lo;
    opt.light_hi = light_hi;
    return toyworld::ToyScene::random(rng, opt);
}

ditcore::DiTConfig make_config(int dim, int depth, int heads, int ffn, int patch,
                               int in_channels, int out_channels, double rope_base = 10000.0) {
    ditcore::DiTConfig cfg;
    cfg.model_dim = dim;
    cfg.depth = depth;
    cfg.head_count = heads;
    cfg.ffn_dim = ffn;
    cfg.patch_size = patch;
    cfg.in_channels = in_channels;
    cfg.out_channels = out_channels;
    cfg.rope_base = rope_base;
    cfg.validate();
    return cfg;
}

py::dict row_to_dict(const evalcli::EvalRow& r) {
    py::dict d;
    d["clip_id"] = r.clip_id;
    d["sync_corr"] = r.sync_corr;
    d["sync_mae"] = r.sync_mae;
    d["id_cos"] = r.id_cos;
    d["off_lip_psnr"] = r.off_lip_psnr;
    d["success"] = r.success;
    return d;
}

}  // namespace

PYBIND11_MODULE(_dubflow, m) {
    m.doc() = "self-bootstrapping visual dubbing on a procedural toy world";

    // ---- toy world ----------------------------------------------------------
    py::class_<toyworld::ToyScene>(m, "ToyScene")
        .def_static("random", &scene_random, py::arg("seed"), py::arg("frames") = 21,
                    py::arg("motion_amp") = 1.5, py::arg("rotation_amp") = 0.0,
                    py::arg("with_occluder") = false, py::arg("occluder_over_lips") = false,
                    py::arg("light_lo") = 1.0, py::arg("light_hi") = 1.0)
        .def_static("from_json", &toyworld::ToyScene::from_json)
        .def("to_json", &toyworld::ToyScene::to_json)
        .def_readonly("frames", &toyworld::ToyScene::frames)
        .def_readonly("identity_seed", &toyworld::ToyScene::identity_seed);

    py::class_<toyworld::AudioTrack>(m, "AudioTrack")
        .def(py::init([](int64_t speaker, std::vector<double> samples) {
                 toyworld::AudioTrack a;
                 a.speaker_id = speaker;
                 a.samples = std::move(samples);
                 return a;
             }),
             py::arg("speaker"), py::arg("samples"))
        .def_readonly("speaker_id", &toyworld::AudioTrack::speaker_id)
        .def_readonly("samples", &toyworld::AudioTrack::samples)
        .def_property_readonly("frames", &toyworld::AudioTrack::frames);

    m.def(
        "synth_audio",
        [](int64_t speaker, size_t frames, uint64_t seed) {
            std::mt19937_64 rng(seed);
            return toyworld::synth_audio(speaker, frames, rng);
        },
        py::arg("speaker"), py::arg("frames"), py::arg("seed"));
    m.def("silent_audio", &toyworld::silent_audio, py::arg("frames"));
    m.def("aperture_from_audio", &toyworld::aperture_from_audio, py::arg("audio"));

    py::class_<toyworld::MaskSet>(m, "MaskSet")
        .def_property_readonly("face", [](const toyworld::MaskSet& s) { return from_tensor(s.face); })
        .def_property_readonly("lip", [](const toyworld::MaskSet& s) { return from_tensor(s.lip); })
        .def_property_readonly("occ", [](const toyworld::MaskSet& s) { return from_tensor(s.occ); })
        .def_property_readonly("inpaint",
                               [](const toyworld::MaskSet& s) { return from_tensor(s.inpaint); });

    py::class_<toyworld::RenderResult>(m, "RenderResult")
        .def_property_readonly("video",
                               [](const toyworld::RenderResult& r) { return from_tensor(r.video); })
        .def_readonly("masks", &toyworld::RenderResult::masks)
        .def_readonly("aperture", &toyworld::RenderResult::aperture);

    m.def("render_scene", &toyworld::render_scene, py::arg("scene"), py::arg("audio"));

    py::class_<toyworld::PairedSample>(m, "PairedSample")
        .def_property_readonly("v_ref",
                               [](const toyworld::PairedSample& p) { return from_tensor(p.v_ref); })
        .def_property_readonly("v_tgt",
                               [](const toyworld::PairedSample& p) { return from_tensor(p.v_tgt); })
        .def_readonly("audio", &toyworld::PairedSample::audio)
        .def_readonly("masks", &toyworld::PairedSample::masks)
        .def_readonly("origin", &toyworld::PairedSample::origin)
        .def_readonly("aperture_ref", &toyworld::PairedSample::aperture_ref)
        .def_readonly("aperture_tgt", &toyworld::PairedSample::aperture_tgt);

    m.def("analytic_pair", &toyworld::analytic_pair, py::arg("scene"), py::arg("audio"),
          py::arg("audio_alt"));
    m.def("load_pair", &toyworld::load_pair, py::arg("path"));
    m.def("save_pair", &toyworld::save_pair, py::arg("path"), py::arg("pair"));

    py::class_<toyworld::Clip>(m, "Clip")
        .def_property_readonly("video", [](const toyworld::Clip& c) { return from_tensor(c.video); })
        .def_readonly("masks", &toyworld::Clip::masks)
        .def_readonly("audio", &toyworld::Clip::audio)
        .def_readonly("aperture", &toyworld::Clip::aperture);
    m.def("load_clip", &toyworld::load_clip, py::arg("path"));

    m.def(
        "identity_embed",
        [](const py::array_t<double>& video, const toyworld::MaskSet& masks) {
            numgrad::NoGradGuard ng;
            return from_tensor(toyworld::identity_embed(to_tensor(video), masks));
        },
        py::arg("video"), py::arg("masks"));
    m.def(
        "aperture_extract",
        [](const py::array_t<double>& video, const toyworld::MaskSet& masks) {
            numgrad::NoGradGuard ng;
            return toyworld::aperture_extract_values(to_tensor(video), masks);
        },
        py::arg("video"), py::arg("masks"));

    // ---- flow matching -------------------------------------------------------
    m.def("timestep_shift", &flowmatch::timestep_shift, py::arg("alpha"), py::arg("t"));
    m.def("shifted_density", &flowmatch::shifted_density, py::arg("alpha"), py::arg("mu"),
          py::arg("sigma"), py::arg("t"));
    m.def("shifted_density_mode", &flowmatch::shifted_density_mode, py::arg("alpha"),
          py::arg("mu"), py::arg("sigma"));

    // ---- models ---------------------------------------------------------------
    py::class_<ditcore::DiT>(m, "DiT")
        .def_static("load", &ditcore::DiT::load, py::arg("path"))
        .def("save", &ditcore::DiT::save, py::arg("path"))
        .def_property_readonly("adapter_names",
                               [](const ditcore::DiT& d) {
                                   std::vector<std::string> names;
                                   for (const auto& a : d.adapters) names.push_back(a.name);
                                   return names;
                               })
        .def_property_readonly("param_count", [](const ditcore::DiT& d) {
            size_t n = 0;
            for (const auto& [name, p] : d.params) n += p.size();
            return n;
        });

    m.def(
        "train_generator",
        [](const std::vector<toyworld::Clip>& corpus, int steps, int batch, double lr, int dim,
           int depth, int heads, int ffn, int patch, int seg_len, uint64_t seed,
           const std::string& loss_csv, double rope_base, double lr_final) {
            dubgen::GenTrainConfig cfg;
            cfg.model = make_config(dim, depth, heads, ffn, patch, 2, 1, rope_base);
            cfg.steps = steps;
            cfg.batch = batch;
            cfg.lr = lr;
            cfg.lr_final = lr_final;
            cfg.seg_len = seg_len;
            cfg.seed = seed;
            cfg.loss_csv = loss_csv;
            return dubgen::train_generator(corpus, cfg);
        },
        py::arg("corpus"), py::arg("steps"), py::arg("batch") = 8, py::arg("lr") = 5e-3,
        py::arg("dim") = 64, py::arg("depth") = 4, py::arg("heads") = 4, py::arg("ffn") = 256,
        py::arg("patch") = 8, py::arg("seg_len") = 9, py::arg("seed") = 0,
        py::arg("loss_csv") = "", py::arg("rope_base") = 10000.0, py::arg("lr_final") = -1.0);

    m.def(
        "generate_companion",
        [](const py::array_t<double>& video, const toyworld::MaskSet& masks,
           const toyworld::AudioTrack& audio, const ditcore::DiT& model, int seg_len,
           int overlap, int steps, uint64_t seed) {
            dubgen::CompanionOptions opt;
            opt.seg_len = seg_len;
            opt.overlap = overlap;
            opt.euler_steps = steps;
            opt.seed = seed;
            return from_tensor(
                dubgen::generate_companion(to_tensor(video), masks, audio, model, opt));
        },
        py::arg("video"), py::arg("masks"), py::arg("audio"), py::arg("model"),
        py::arg("seg_len") = 9, py::arg("overlap") = 2, py::arg("steps") = 50,
        py::arg("seed") = 0);

    m.def(
        "train_editor",
        [](const std::vector<toyworld::PairedSample>& pairs, int base_steps, int batch,
           double lr, int dim, int depth, int heads, int ffn, int patch, uint64_t seed,
           const std::string& loss_csv_prefix, double rope_base, double lr_final,
           int lora_rank) {
            dubedit::EditorTrainConfig cfg;
            cfg.model = make_config(dim, depth, heads, ffn, patch, 1, 1, rope_base);
            cfg.plan = dubedit::default_phase_plan(base_steps, lr, lr);
            if (lr_final >= 0.0)
                for (auto& ph : cfg.plan.phases) ph.lr_final = lr_final;
            cfg.batch = batch;
            cfg.lora_rank = lora_rank;
            cfg.seed = seed;
            cfg.loss_csv_prefix = loss_csv_prefix;
            return dubedit::train_multiphase(pairs, cfg);
        },
        py::arg("pairs"), py::arg("base_steps"), py::arg("batch") = 4, py::arg("lr") = 5e-3,
        py::arg("dim") = 64, py::arg("depth") = 4, py::arg("heads") = 4, py::arg("ffn") = 256,
        py::arg("patch") = 8, py::arg("seed") = 0, py::arg("loss_csv_prefix") = "",
        py::arg("rope_base") = 10000.0, py::arg("lr_final") = -1.0, py::arg("lora_rank") = 4);

    m.def(
        "dub",
        [](const py::array_t<double>& v_ref, const toyworld::AudioTrack& audio,
           const ditcore::DiT& model, int steps, int window, uint64_t seed) {
            dubedit::DubOptions opt;
            opt.steps = steps;
            opt.window = window;
            opt.seed = seed;
            return from_tensor(dubedit::dub_infer(to_tensor(v_ref), audio, model, opt));
        },
        py::arg("v_ref"), py::arg("audio"), py::arg("model"), py::arg("steps") = 50,
        py::arg("window") = 21, py::arg("seed") = 0);

    // ---- pair filtering --------------------------------------------------------
    m.def(
        "compose_inpaint_mask",
        [](const py::array_t<double>& face, const py::array_t<double>& occ) {
            numgrad::NoGradGuard ng;
            return from_tensor(pairforge::compose_inpaint_mask(to_tensor(face), to_tensor(occ)));
        },
        py::arg("face"), py::arg("occ"));
    m.def(
        "filter_pair",
        [](const toyworld::PairedSample& pair, double id_min, double lip_min,
           double quality_max_residual) {
            pairforge::FilterThresholds th{id_min, lip_min, quality_max_residual};
            auto r = pairforge::filter_pair(pair, th);
            py::dict d;
            d["accepted"] = r.accepted;
            d["id_cos"] = r.scores.id_cos;
            d["lip_div"] = r.scores.lip_div;
            d["residual"] = r.scores.residual;
            d["reasons"] = r.reasons;
            return d;
        },
        py::arg("pair"), py::arg("id_min") = 0.85, py::arg("lip_min") = 0.05,
        py::arg("quality_max_residual") = 0.04);

    // ---- evaluation --------------------------------------------------------------
    m.def(
        "evaluate",
        [](const py::array_t<double>& v_hat, const toyworld::PairedSample& truth,
           const std::string& clip_id) {
            return row_to_dict(evalcli::evaluate(to_tensor(v_hat), truth, clip_id));
        },
        py::arg("v_hat"), py::arg("truth"), py::arg("clip_id") = "");

    // diagnostic: editor velocity-prediction MSE at a fixed timestep, with
    // adapters gated exactly as at inference
    m.def(
        "editor_velocity_mse",
        [](const ditcore::DiT& model, const py::array_t<double>& v_ref,
           const py::array_t<double>& v_tgt, const toyworld::AudioTrack& audio, double t,
           uint64_t seed) {
            numgrad::NoGradGuard ng;
            Tensor ref = to_tensor(v_ref), tgt = to_tensor(v_tgt);
            std::mt19937_64 rng(seed);
            dubedit::EditorAssembleOptions aopt;
            aopt.training = false;
            auto s = flowmatch::diffuse_forward(
                tgt, Tensor::leaf(tgt.shape(), [&] {
                    std::normal_distribution<double> nd;
                    std::vector<double> v(numgrad::numel(tgt.shape()));
                    for (auto& x : v) x = nd(rng);
                    return v;
                }()), t);
            auto bundle = dubedit::assemble_editor_input(ref, s.z_t, aopt, rng);
            Tensor feats = dubgen::audio_feature_matrix(audio);
            Tensor aud = ditcore::build_audio_windows(feats, tgt.shape()[0]);
            auto active = ditcore::gate_adapters(model.adapters, t);
            Tensor v_hat = model.forward(bundle.z_in, t, &aud, bundle.layout, active);
            double mse = 0.0;
            for (size_t i = 0; i < v_hat.size(); ++i) {
                double d = v_hat.value()[i] - s.v.value()[i];
                mse += d * d;
            }
            return mse / (double)v_hat.size();
        },
        py::arg("model"), py::arg("v_ref"), py::arg("v_tgt"), py::arg("audio"), py::arg("t"),
        py::arg("seed") = 0);

    m.def(
        "verify_oracles",
        [](uint64_t seed, bool sabotage_density) {
            evalcli::VerifyOptions opt;
            opt.seed = seed;
            opt.sabotage_density = sabotage_density;
            auto rep = evalcli::verify_oracles(opt);
            py::list out;
            for (const auto& c : rep.checks) {
                py::dict d;
                d["name"] = c.name;
                d["pass"] = c.pass;
                d["detail"] = c.detail;
                out.append(d);
            }
            return out;
        },
        py::arg("seed") = 0, py::arg("sabotage_density") = false);
}
