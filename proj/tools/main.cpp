// dubflow command-line front end: toy-world data generation, generator and
// editor training, pair-corpus construction, dubbing, evaluation, the oracle
// battery, and manifest reporting. Every run writes a JSON manifest with the
// resolved seed, the config hash, and the input/output paths so artifacts are
// reproducible from the manifest alone.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dubflow/dit.hpp"
#include "dubflow/editor.hpp"
#include "dubflow/eval.hpp"
#include "dubflow/generator.hpp"
#include "dubflow/pairs.hpp"
#include "dubflow/runio.hpp"
#include "dubflow/world.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace dubflow;
using numgrad::Tensor;

namespace {

struct Globals {
    uint64_t seed{0};
    std::string config_path;
    int threads{1};
    std::string out_dir{"runs"};
    json config = json::object();
};

// nlohmann keeps object keys sorted, so dump() of a reparsed document is a
// canonical form independent of the file's whitespace and key order
std::string config_hash(const json& cfg) { return runio::sha256_hex(cfg.dump()); }

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot read config file " + path);
    json cfg;
    try {
        in >> cfg;
    } catch (const json::parse_error& e) {
        throw std::invalid_argument("config " + path + " is not valid JSON: " + e.what());
    }
    return cfg;
}

// config values fill in options the command line left at their default
template <typename T>
void config_default(const Globals& g, const std::string& sub, const CLI::Option* opt,
                    const char* key, T& dst) {
    if (opt && opt->count() > 0) return;
    if (!g.config.contains(sub)) return;
    const json& s = g.config.at(sub);
    if (s.contains(key)) dst = s.at(key).template get<T>();
}

void write_run_manifest(const Globals& g, const std::string& command, const json& inputs,
                        const json& outputs) {
    fs::create_directories(g.out_dir);
    json m;
    m["schema"] = 1;
    m["command"] = command;
    m["seed"] = g.seed;
    m["threads"] = g.threads;
    m["config_hash"] = config_hash(g.config);
    m["inputs"] = inputs;
    m["outputs"] = outputs;
    runio::write_file(g.out_dir + "/manifest_" + command + ".json", m.dump(2) + "\n");
}

void require_file(const std::string& path, const std::string& what) {
    if (!fs::exists(path)) throw std::invalid_argument("missing " + what + ": " + path);
}

// audio files: {"speaker": id, "samples": [...]} with 8 samples per frame
void save_audio(const std::string& path, const toyworld::AudioTrack& a) {
    json j;
    j["speaker"] = a.speaker_id;
    j["samples"] = a.samples;
    runio::write_file(path, j.dump() + "\n");
}

toyworld::AudioTrack load_audio(const std::string& path) {
    require_file(path, "audio file");
    json j = json::parse(runio::read_file(path));
    toyworld::AudioTrack a;
    a.speaker_id = j.at("speaker").get<int64_t>();
    a.samples = j.at("samples").get<std::vector<double>>();
    if (a.samples.size() % toyworld::kAudioPerFrame != 0)
        throw std::invalid_argument("audio " + path + ": sample count is not a whole number of frames");
    return a;
}

// scene manifests: one {"id", "clip", "audio_alt", "speaker", "scene"} per line
struct SceneEntry {
    std::string id, clip_path, audio_alt_path;
    int64_t speaker{0};
    toyworld::ToyScene scene;
};

std::vector<SceneEntry> load_scene_manifest(std::string path) {
    if (fs::is_directory(path)) path += "/scenes.jsonl";
    require_file(path, "scene manifest");
    std::vector<SceneEntry> out;
    std::istringstream in(runio::read_file(path));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        SceneEntry e;
        e.id = j.at("id").get<std::string>();
        e.clip_path = j.at("clip").get<std::string>();
        e.audio_alt_path = j.value("audio_alt", std::string{});
        e.speaker = j.at("speaker").get<int64_t>();
        e.scene = toyworld::ToyScene::from_json(j.at("scene").dump());
        out.push_back(std::move(e));
    }
    if (out.empty()) throw std::invalid_argument("scene manifest " + path + " has no entries");
    return out;
}

std::vector<toyworld::Clip> load_clip_corpus(const std::string& manifest) {
    std::vector<toyworld::Clip> corpus;
    for (const auto& e : load_scene_manifest(manifest)) {
        require_file(e.clip_path, "clip file");
        corpus.push_back(toyworld::load_clip(e.clip_path));
    }
    return corpus;
}

ditcore::DiT load_checkpoint(const std::string& path) {
    require_file(path, "checkpoint");
    return ditcore::DiT::load(path);
}

// shared model-shape flags for the two training commands
struct ModelFlags {
    int dim{64}, depth{4}, heads{4}, ffn{256}, patch{8};
    double rope_base{10000.0};

    void attach(CLI::App* sub) {
        sub->add_option("--dim", dim, "model width");
        sub->add_option("--depth", depth, "transformer depth units");
        sub->add_option("--heads", heads, "attention heads");
        sub->add_option("--ffn", ffn, "feed-forward width");
        sub->add_option("--patch", patch, "spatial patch size");
        sub->add_option("--rope-base", rope_base, "rotary frequency base");
    }

    ditcore::DiTConfig to_config(int in_channels, int out_channels) const {
        ditcore::DiTConfig cfg;
        cfg.model_dim = dim;
        cfg.depth = depth;
        cfg.head_count = heads;
        cfg.ffn_dim = ffn;
        cfg.patch_size = patch;
        cfg.rope_base = rope_base;
        cfg.in_channels = in_channels;
        cfg.out_channels = out_channels;
        return cfg;
    }
};

int cmd_gen_data(Globals& g, int count, size_t frames, int speakers, double occluder_frac,
                 double light_lo, double light_hi, double motion_amp) {
    if (count < 1) throw std::invalid_argument("--count must be positive");
    if (speakers < 1) speakers = count;
    fs::create_directories(g.out_dir);
    std::mt19937_64 rng(g.seed);
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    std::ostringstream manifest;
    for (int i = 0; i < count; ++i) {
        toyworld::ToyScene::Options opt;
        opt.frames = frames;
        opt.motion_amp = motion_amp;
        opt.with_occluder = ud(rng) < occluder_frac;
        opt.light_lo = light_lo;
        opt.light_hi = light_hi;
        auto scene = toyworld::ToyScene::random(rng, opt);
        int64_t speaker = (int64_t)(i % speakers);
        scene.identity_seed = g.seed ^ (0x9e3779b97f4a7c15ull * (uint64_t)(speaker + 1));
        auto audio = toyworld::synth_audio(speaker, frames, rng);
        auto audio_alt = toyworld::synth_audio(speaker, frames, rng);
        auto r = toyworld::render_scene(scene, audio);

        char id[32];
        std::snprintf(id, sizeof(id), "clip_%04d", i);
        std::string clip_path = g.out_dir + "/" + id + ".bin";
        std::string audio_path = g.out_dir + "/" + id + "_audio_alt.json";
        toyworld::save_clip(clip_path, r.video, r.masks, audio, r.aperture);
        save_audio(audio_path, audio_alt);

        json line;
        line["id"] = id;
        line["clip"] = clip_path;
        line["audio_alt"] = audio_path;
        line["speaker"] = speaker;
        line["scene"] = json::parse(scene.to_json());
        manifest << line.dump() << "\n";
    }
    std::string manifest_path = g.out_dir + "/scenes.jsonl";
    runio::write_file(manifest_path, manifest.str());
    write_run_manifest(g, "gen-data", {{"count", count}, {"frames", frames}},
                       {{"manifest", manifest_path}});
    std::cout << "wrote " << count << " clips and " << manifest_path << "\n";
    return 0;
}

int cmd_train_generator(Globals& g, const std::string& corpus_path, const ModelFlags& mf,
                        int steps, int batch, double lr, double lr_final, int seg,
                        const std::string& out) {
    auto corpus = load_clip_corpus(corpus_path);
    dubgen::GenTrainConfig cfg;
    cfg.model = mf.to_config(2, 1);
    cfg.steps = steps;
    cfg.batch = batch;
    cfg.lr = lr;
    cfg.lr_final = lr_final;
    cfg.seg_len = seg;
    cfg.seed = g.seed;
    fs::create_directories(g.out_dir);
    cfg.loss_csv = g.out_dir + "/train_generator_loss.csv";
    auto model = dubgen::train_generator(corpus, cfg);
    model.save(out);
    write_run_manifest(g, "train-generator",
                       {{"corpus", corpus_path}, {"steps", steps}, {"batch", batch}},
                       {{"checkpoint", out}, {"loss_csv", cfg.loss_csv}});
    std::cout << "saved generator checkpoint to " << out << "\n";
    return 0;
}

int cmd_gen_companion(Globals& g, const std::string& ckpt, const std::string& clip_path,
                      const std::string& audio_path, int seg, int overlap, int steps,
                      const std::string& out) {
    auto model = load_checkpoint(ckpt);
    require_file(clip_path, "clip file");
    auto clip = toyworld::load_clip(clip_path);
    auto audio = load_audio(audio_path);
    dubgen::CompanionOptions opt;
    opt.seg_len = seg;
    opt.overlap = overlap;
    opt.euler_steps = steps;
    opt.seed = g.seed;
    Tensor v = dubgen::generate_companion(clip.video, clip.masks, audio, model, opt);
    numgrad::save_tensor(out, v);
    write_run_manifest(g, "gen-companion",
                       {{"checkpoint", ckpt}, {"clip", clip_path}, {"audio", audio_path}},
                       {{"video", out}});
    std::cout << "wrote companion video to " << out << "\n";
    return 0;
}

int cmd_build_pairs(Globals& g, const std::string& scenes_path, const std::string& ckpt,
                    double relight_frac, double analytic_frac, int calibrate_n,
                    int euler_steps, const std::string& out) {
    auto model = load_checkpoint(ckpt);
    auto entries = load_scene_manifest(scenes_path);
    std::vector<pairforge::SceneRecord> scenes;
    for (const auto& e : entries) {
        require_file(e.clip_path, "clip file");
        auto clip = toyworld::load_clip(e.clip_path);
        scenes.push_back({e.scene, clip.audio});
    }
    pairforge::BuildOptions opt;
    opt.relight_frac = relight_frac;
    opt.analytic_frac = analytic_frac;
    opt.companion.euler_steps = euler_steps;
    opt.out_dir = g.out_dir + "/pairs";
    opt.seed = g.seed;
    opt.threads = g.threads;
    fs::create_directories(opt.out_dir);
    std::mt19937_64 cal_rng(g.seed ^ 0xc0ffee);
    opt.thresholds.lip_min = pairforge::calibrate_lip_min(cal_rng, (size_t)calibrate_n);
    auto manifest = pairforge::build_pair_corpus(scenes, model, opt);
    manifest.save(out);
    write_run_manifest(g, "build-pairs",
                       {{"scenes", scenes_path},
                        {"checkpoint", ckpt},
                        {"relight_frac", relight_frac},
                        {"analytic_frac", analytic_frac},
                        {"lip_min", opt.thresholds.lip_min}},
                       {{"manifest", out}, {"pair_dir", opt.out_dir}});
    std::cout << "accepted " << manifest.accepted_count() << "/" << manifest.records.size()
              << " pairs; manifest at " << out << "\n";
    return 0;
}

std::vector<toyworld::PairedSample> load_accepted_pairs(const std::string& manifest_path) {
    require_file(manifest_path, "pair manifest");
    auto manifest = pairforge::CorpusManifest::load(manifest_path);
    std::vector<toyworld::PairedSample> pairs;
    for (const auto& r : manifest.records) {
        if (!r.accepted) continue;
        require_file(r.pair_path, "pair file");
        pairs.push_back(toyworld::load_pair(r.pair_path));
    }
    if (pairs.empty()) throw std::invalid_argument("no accepted pairs in " + manifest_path);
    return pairs;
}

int cmd_train_editor(Globals& g, const std::string& pairs_path, const std::string& plan,
                     const ModelFlags& mf, int base_steps, double lr, double lr_final,
                     int lora_rank, int batch, const std::string& out) {
    if (plan != "default")
        throw std::invalid_argument("unknown phase plan '" + plan + "' (available: default)");
    auto pairs = load_accepted_pairs(pairs_path);
    dubedit::EditorTrainConfig cfg;
    cfg.model = mf.to_config(1, 1);
    cfg.plan = dubedit::default_phase_plan(base_steps, lr, lr);
    if (lr_final >= 0.0)
        for (auto& ph : cfg.plan.phases) ph.lr_final = lr_final;
    cfg.batch = batch;
    cfg.lora_rank = lora_rank;
    cfg.seed = g.seed;
    fs::create_directories(g.out_dir);
    cfg.loss_csv_prefix = g.out_dir + "/train_editor_loss_";
    auto model = dubedit::train_multiphase(pairs, cfg);
    model.save(out);
    write_run_manifest(g, "train-editor",
                       {{"pairs", pairs_path}, {"plan", plan}, {"base_steps", base_steps}},
                       {{"checkpoint", out}});
    std::cout << "saved editor checkpoint to " << out << "\n";
    return 0;
}

int cmd_dub(Globals& g, const std::string& ckpt, const std::string& clip_path,
            const std::string& audio_path, int steps, const std::string& out) {
    auto model = load_checkpoint(ckpt);
    require_file(clip_path, "clip file");
    auto clip = toyworld::load_clip(clip_path);
    auto audio = load_audio(audio_path);
    dubedit::DubOptions opt;
    opt.steps = steps;
    opt.seed = g.seed;
    opt.window = std::min<int>(opt.window, (int)clip.video.shape()[0]);
    Tensor v = dubedit::dub_infer(clip.video, audio, model, opt);
    numgrad::save_tensor(out, v);
    write_run_manifest(g, "dub",
                       {{"checkpoint", ckpt}, {"clip", clip_path}, {"audio", audio_path},
                        {"steps", steps}},
                       {{"video", out}});
    std::cout << "wrote dubbed video to " << out << "\n";
    return 0;
}

int cmd_eval(Globals& g, const std::string& scenes_path, const std::string& ckpt, int steps,
             const std::string& out) {
    auto model = load_checkpoint(ckpt);
    auto entries = load_scene_manifest(scenes_path);
    evalcli::EvalReport report;
    report.rows.resize(entries.size());
    runio::parallel_for(entries.size(), g.threads, [&](size_t i) {
        const auto& e = entries[i];
        require_file(e.clip_path, "clip file");
        auto clip = toyworld::load_clip(e.clip_path);
        toyworld::AudioTrack a_new;
        if (e.audio_alt_path.empty()) {
            std::mt19937_64 rng(g.seed + i);
            a_new = toyworld::synth_audio(e.speaker, e.scene.frames, rng);
        } else {
            a_new = load_audio(e.audio_alt_path);
        }
        auto truth = toyworld::analytic_pair(e.scene, a_new, clip.audio);
        dubedit::DubOptions opt;
        opt.steps = steps;
        opt.seed = g.seed;
        opt.window = std::min<int>(opt.window, (int)clip.video.shape()[0]);
        Tensor v_hat = dubedit::dub_infer(clip.video, a_new, model, opt);
        report.rows[i] = evalcli::evaluate(v_hat, truth, e.id);
    });
    report.save_csv(out);
    write_run_manifest(g, "eval", {{"scenes", scenes_path}, {"checkpoint", ckpt}},
                       {{"metrics_csv", out}});
    std::cout << "clips " << report.rows.size() << "  sync_corr " << report.mean_sync_corr()
              << "  id_cos " << report.mean_id_cos() << "  off_lip_psnr "
              << report.mean_off_lip_psnr() << "  success_rate " << report.success_rate()
              << "\n";
    return 0;
}

int cmd_verify(Globals& g) {
    evalcli::VerifyOptions opt;
    opt.seed = g.seed;
    auto rep = evalcli::verify_oracles(opt);
    for (const auto& c : rep.checks)
        std::cout << (c.pass ? "PASS " : "FAIL ") << c.name
                  << (c.detail.empty() ? "" : "  (" + c.detail + ")") << "\n";
    write_run_manifest(g, "verify", json::object(), {{"all_pass", rep.all_pass()}});
    if (!rep.all_pass()) {
        std::cerr << "oracle battery failed\n";
        return 2;
    }
    return 0;
}

int cmd_report(Globals& g, const std::string& manifest_path, const std::string& out) {
    require_file(manifest_path, "corpus manifest");
    auto manifest = pairforge::CorpusManifest::load(manifest_path);
    std::ostringstream csv;
    csv.precision(17);
    csv << "id,origin,speaker,id_cos,lip_div,residual,accepted,reasons\n";
    double id_sum = 0, lip_sum = 0, res_sum = 0;
    for (const auto& r : manifest.records) {
        std::string reasons;
        for (const auto& s : r.reasons) reasons += (reasons.empty() ? "" : ";") + s;
        csv << r.id << "," << r.origin << "," << r.speaker << "," << r.scores.id_cos << ","
            << r.scores.lip_div << "," << r.scores.residual << "," << (r.accepted ? 1 : 0)
            << "," << reasons << "\n";
        id_sum += r.scores.id_cos;
        lip_sum += r.scores.lip_div;
        res_sum += r.scores.residual;
    }
    size_t n = manifest.records.size();
    double rate = n ? (double)manifest.accepted_count() / (double)n : 0.0;
    csv << "aggregate,,," << (n ? id_sum / n : 0.0) << "," << (n ? lip_sum / n : 0.0) << ","
        << (n ? res_sum / n : 0.0) << "," << rate << ",\n";
    std::cout << csv.str();
    if (!out.empty()) {
        runio::write_file(out, csv.str());
        write_run_manifest(g, "report", {{"manifest", manifest_path}}, {{"csv", out}});
    } else {
        write_run_manifest(g, "report", {{"manifest", manifest_path}}, json::object());
    }
    return 0;
}

int run(int argc, char** argv) {
    CLI::App app{"dubflow: self-bootstrapping visual dubbing on a procedural toy world"};
    app.require_subcommand(1);

    Globals g;
    auto* seed_opt = app.add_option("--seed", g.seed, "rng seed (DUBFLOW_SEED overrides)");
    app.add_option("--config", g.config_path, "JSON run-config file");
    auto* threads_opt = app.add_option("--threads", g.threads, "worker threads")
                            ->check(CLI::PositiveNumber);
    app.add_option("--out-dir", g.out_dir, "directory for artifacts and run manifests");

    // gen-data
    auto* gen_data = app.add_subcommand("gen-data", "render a corpus of toy-world clips");
    int gd_count = 20, gd_speakers = 0;
    size_t gd_frames = 21;
    double gd_occ = 0.0, gd_light_lo = 1.0, gd_light_hi = 1.0, gd_motion = 1.5;
    auto* gd_count_opt = gen_data->add_option("--count", gd_count, "number of clips");
    auto* gd_frames_opt = gen_data->add_option("--frames", gd_frames, "frames per clip");
    gen_data->add_option("--speakers", gd_speakers, "distinct speakers (default: one per clip)");
    gen_data->add_option("--occluder-frac", gd_occ, "fraction of scenes with an occluder");
    gen_data->add_option("--light-lo", gd_light_lo, "lighting gain lower bound");
    gen_data->add_option("--light-hi", gd_light_hi, "lighting gain upper bound");
    gen_data->add_option("--motion-amp", gd_motion, "head motion amplitude");

    // train-generator
    auto* train_gen = app.add_subcommand("train-generator", "train the inpainting generator");
    std::string tg_corpus, tg_out = "generator.ckpt";
    int tg_steps = 2000, tg_batch = 8, tg_seg = 9;
    double tg_lr = 5e-3, tg_lr_final = -1.0;
    ModelFlags tg_model;
    train_gen->add_option("--corpus", tg_corpus, "scene manifest from gen-data")->required();
    auto* tg_steps_opt = train_gen->add_option("--steps", tg_steps, "optimizer steps");
    train_gen->add_option("--batch", tg_batch, "segments per optimizer step");
    train_gen->add_option("--lr", tg_lr, "learning rate");
    train_gen->add_option("--lr-final", tg_lr_final,
                          "cosine-decay lr target (negative keeps lr constant)");
    train_gen->add_option("--seg", tg_seg, "training segment length");
    train_gen->add_option("--out", tg_out, "checkpoint path");
    tg_model.attach(train_gen);

    // gen-companion
    auto* gen_comp = app.add_subcommand("gen-companion", "inpaint one clip under new audio");
    std::string gc_ckpt, gc_clip, gc_audio, gc_out = "companion.bin";
    int gc_seg = 9, gc_overlap = 2, gc_steps = 50;
    gen_comp->add_option("--ckpt", gc_ckpt, "generator checkpoint")->required();
    gen_comp->add_option("--clip", gc_clip, "input clip file")->required();
    gen_comp->add_option("--audio", gc_audio, "replacement audio file")->required();
    gen_comp->add_option("--seg", gc_seg, "segment length");
    gen_comp->add_option("--overlap", gc_overlap, "motion frames chained between segments");
    gen_comp->add_option("--steps", gc_steps, "sampler steps per segment");
    gen_comp->add_option("--out", gc_out, "output video tensor");

    // build-pairs
    auto* build = app.add_subcommand("build-pairs", "construct and filter the pair corpus");
    std::string bp_scenes, bp_ckpt, bp_out = "pairs.jsonl";
    double bp_relight = 0.05, bp_analytic = 0.1;
    int bp_cal = 200, bp_steps = 50;
    build->add_option("--scenes", bp_scenes, "scene manifest or its directory")->required();
    build->add_option("--ckpt", bp_ckpt, "generator checkpoint")->required();
    auto* bp_relight_opt = build->add_option("--relight-frac", bp_relight,
                                             "fraction of pairs relit identically");
    auto* bp_analytic_opt = build->add_option("--analytic-frac", bp_analytic,
                                              "fraction of analytic pairs mixed in");
    build->add_option("--calibrate-n", bp_cal, "analytic pairs for lip threshold calibration");
    build->add_option("--steps", bp_steps, "sampler steps per companion segment");
    build->add_option("--out", bp_out, "corpus manifest path");

    // train-editor
    auto* train_ed = app.add_subcommand("train-editor", "multi-phase editor training");
    std::string te_pairs, te_plan = "default", te_out = "editor.ckpt";
    int te_base = 1000, te_batch = 4, te_rank = 4;
    double te_lr = 5e-3, te_lr_final = -1.0;
    ModelFlags te_model;
    train_ed->add_option("--pairs", te_pairs, "pair corpus manifest")->required();
    train_ed->add_option("--plan", te_plan, "phase plan name");
    auto* te_base_opt = train_ed->add_option("--base-steps", te_base,
                                             "low/mid phase steps (high phase runs 4x)");
    train_ed->add_option("--batch", te_batch, "pairs per optimizer step");
    train_ed->add_option("--lr", te_lr, "learning rate");
    train_ed->add_option("--lr-final", te_lr_final,
                         "per-phase cosine-decay lr target (negative keeps lr constant)");
    train_ed->add_option("--lora-rank", te_rank, "adapter rank for the lip/texture phases");
    train_ed->add_option("--out", te_out, "checkpoint path");
    te_model.attach(train_ed);

    // dub
    auto* dub = app.add_subcommand("dub", "mask-free editing of one clip under new audio");
    std::string du_ckpt, du_clip, du_audio, du_out = "dubbed.bin";
    int du_steps = 50;
    dub->add_option("--ckpt", du_ckpt, "editor checkpoint")->required();
    dub->add_option("--clip", du_clip, "input clip file")->required();
    dub->add_option("--audio", du_audio, "replacement audio file")->required();
    dub->add_option("--steps", du_steps, "sampler steps");
    dub->add_option("--out", du_out, "output video tensor");

    // eval
    auto* ev = app.add_subcommand("eval", "dub held-out scenes and score against ground truth");
    std::string ev_scenes, ev_ckpt, ev_out = "metrics.csv";
    int ev_steps = 50;
    ev->add_option("--scenes", ev_scenes, "held-out scene manifest")->required();
    ev->add_option("--ckpt", ev_ckpt, "editor checkpoint")->required();
    ev->add_option("--steps", ev_steps, "sampler steps");
    ev->add_option("--out", ev_out, "metrics CSV path");

    // verify
    app.add_subcommand("verify", "run the oracle invariant battery");

    // report
    auto* rep = app.add_subcommand("report", "corpus CSV plus an aggregate row");
    std::string rp_manifest, rp_out;
    rep->add_option("--manifest", rp_manifest, "pair corpus manifest")->required();
    rep->add_option("--out", rp_out, "also write the CSV here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        // help requests exit 0; anything else is a validation error
        return app.exit(e) == 0 ? 0 : 1;
    }

    g.config = load_config(g.config_path);
    if (const char* env = std::getenv("DUBFLOW_SEED")) {
        try {
            g.seed = std::stoull(env);
        } catch (const std::exception&) {
            throw std::invalid_argument("DUBFLOW_SEED is not an unsigned integer: " +
                                        std::string(env));
        }
    } else {
        config_default(g, "global", seed_opt, "seed", g.seed);
    }
    config_default(g, "global", threads_opt, "threads", g.threads);
    config_default(g, "gen-data", gd_count_opt, "count", gd_count);
    config_default(g, "gen-data", gd_frames_opt, "frames", gd_frames);
    config_default(g, "train-generator", tg_steps_opt, "steps", tg_steps);
    config_default(g, "build-pairs", bp_relight_opt, "relight_frac", bp_relight);
    config_default(g, "build-pairs", bp_analytic_opt, "analytic_frac", bp_analytic);
    config_default(g, "train-editor", te_base_opt, "base_steps", te_base);

    if (gen_data->parsed())
        return cmd_gen_data(g, gd_count, gd_frames, gd_speakers, gd_occ, gd_light_lo,
                            gd_light_hi, gd_motion);
    if (train_gen->parsed())
        return cmd_train_generator(g, tg_corpus, tg_model, tg_steps, tg_batch, tg_lr,
                                   tg_lr_final, tg_seg, tg_out);
    if (gen_comp->parsed())
        return cmd_gen_companion(g, gc_ckpt, gc_clip, gc_audio, gc_seg, gc_overlap, gc_steps,
                                 gc_out);
    if (build->parsed())
        return cmd_build_pairs(g, bp_scenes, bp_ckpt, bp_relight, bp_analytic, bp_cal, bp_steps,
                               bp_out);
    if (train_ed->parsed())
        return cmd_train_editor(g, te_pairs, te_plan, te_model, te_base, te_lr, te_lr_final,
                                te_rank, te_batch, te_out);
    if (dub->parsed()) return cmd_dub(g, du_ckpt, du_clip, du_audio, du_steps, du_out);
    if (ev->parsed()) return cmd_eval(g, ev_scenes, ev_ckpt, ev_steps, ev_out);
    if (app.get_subcommand("verify")->parsed()) return cmd_verify(g);
    if (rep->parsed()) return cmd_report(g, rp_manifest, rp_out);
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "runtime failure: " << e.what() << "\n";
        return 2;
    }
}
