#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "dubflow/editor.hpp"

using namespace dubflow;
using namespace dubflow::dubedit;
using numgrad::Tensor;

namespace {

toyworld::PairedSample make_pair(uint64_t seed, size_t frames = 15, int64_t speaker = 4) {
    std::mt19937_64 rng(seed);
    toyworld::ToyScene::Options opt;
    opt.frames = frames;
    auto scene = toyworld::ToyScene::random(rng, opt);
    auto a = toyworld::synth_audio(speaker, frames, rng);
    auto a_alt = toyworld::synth_audio(speaker, frames, rng);
    return toyworld::analytic_pair(scene, a, a_alt);
}

ditcore::DiTConfig tiny_editor_config(int in_channels = 1) {
    ditcore::DiTConfig cfg;
    cfg.depth = 1;
    cfg.model_dim = 24;
    cfg.head_count = 2;
    cfg.ffn_dim = 48;
    cfg.patch_size = 16;
    cfg.audio_dim = 4;
    cfg.in_channels = in_channels;
    cfg.out_channels = 1;
    return cfg;
}

std::vector<std::vector<double>> read_csv(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::string line;
    std::getline(in, line);  // header
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        rows.push_back(row);
    }
    return rows;
}

}  // namespace

TEST_CASE("assembly: frame-concat doubles the frame axis and round-trips") {
    auto pair = make_pair(60, 9);
    std::mt19937_64 rng(61);
    std::normal_distribution<double> nd;
    std::vector<double> noise(pair.v_tgt.size());
    for (auto& x : noise) x = nd(rng);
    Tensor z = Tensor::leaf(pair.v_tgt.shape(), noise);

    EditorAssembleOptions opt;
    opt.motion_dropout = 0.0;
    auto b = assemble_editor_input(pair.v_ref, z, opt, rng, &pair.v_tgt);
    CHECK(b.mode == "editor");
    CHECK(b.z_in.shape() == numgrad::Shape{18, 1, 32, 32});

    // both halves recoverable bit-exactly
    CHECK(numgrad::slice(b.z_in, 0, 0, 9).value() == pair.v_ref.value());
    CHECK(numgrad::slice(b.z_in, 0, 9, 9).value() == b.z_noised.value());

    // motion slots carry the clean target; the rest stays noised
    CHECK_FALSE(b.motion_dropout_applied);
    CHECK(numgrad::slice(b.z_noised, 0, 0, 2).value() ==
          numgrad::slice(pair.v_tgt, 0, 0, 2).value());
    CHECK(numgrad::slice(b.z_noised, 0, 2, 7).value() == numgrad::slice(z, 0, 2, 7).value());

    // reference half: shifted-rope role, no audio; target half: audio row k
    for (size_t k = 0; k < 9; ++k) {
        CHECK(b.layout.role[k] == 1);
        CHECK(b.layout.audio_frame[k] == -1);
        CHECK(b.layout.role[9 + k] == 0);
        CHECK(b.layout.audio_frame[9 + k] == (int)k);
        // halves share temporal indices
        CHECK(b.layout.time_index[k] == b.layout.time_index[9 + k]);
    }

    // without a clean target there is nothing to pin
    auto b2 = assemble_editor_input(pair.v_ref, z, opt, rng);
    CHECK(b2.motion_dropout_applied);
    CHECK(b2.z_noised.value() == z.value());

    CHECK_THROWS_AS(
        assemble_editor_input(numgrad::slice(pair.v_ref, 0, 0, 8), z, opt, rng),
        std::invalid_argument);
}

TEST_CASE("assembly: channel-concat ablation keeps f slots with doubled channels") {
    auto pair = make_pair(62, 9);
    std::mt19937_64 rng(63);
    Tensor z = Tensor::zeros(pair.v_tgt.shape());
    EditorAssembleOptions opt;
    opt.channel_concat = true;
    auto b = assemble_editor_input(pair.v_ref, z, opt, rng);
    CHECK(b.z_in.shape() == numgrad::Shape{9, 2, 32, 32});
    for (size_t k = 0; k < 9; ++k) {
        CHECK(b.layout.role[k] == 0);
        CHECK(b.layout.audio_frame[k] == (int)k);
    }
}

TEST_CASE("sync loss vanishes on analytic renders of the same audio") {
    std::mt19937_64 rng(64);
    toyworld::ToyScene::Options sopt;
    sopt.frames = 12;
    auto scene = toyworld::ToyScene::random(rng, sopt);
    auto audio = toyworld::synth_audio(6, sopt.frames, rng);
    auto r = toyworld::render_scene(scene, audio);

    CHECK(sync_loss(r.video, audio, r.masks, 0).item() <= 1e-3);
    CHECK(sync_loss(r.video, audio, r.masks, 4).item() <= 1e-3);

    // silent audio against a closed-mouth render: both tracks are ~zero
    auto silent = toyworld::silent_audio(sopt.frames);
    auto rs = toyworld::render_scene(scene, silent);
    CHECK(sync_loss(rs.video, silent, rs.masks, 2).item() <= 1e-3);

    // mismatched audio must not vanish
    auto other = toyworld::synth_audio(6, sopt.frames, rng);
    CHECK(sync_loss(r.video, other, r.masks, 0).item() > 1e-3);

    CHECK_THROWS_AS(sync_loss(r.video, audio, r.masks, 5), std::invalid_argument);
    CHECK_THROWS_AS(sync_loss(r.video, toyworld::silent_audio(11), r.masks, 0),
                    std::invalid_argument);
}

TEST_CASE("identity loss separates identities and ignores the lips") {
    auto pair = make_pair(65);
    CHECK(identity_loss(pair.v_tgt, pair.v_tgt, pair.masks).item() <= 1e-9);
    // the analytic halves share their identity
    CHECK(identity_loss(pair.v_ref, pair.v_tgt, pair.masks).item() < 0.05);

    // different identities are far apart on average
    double acc = 0.0;
    const int n = 30;
    for (int i = 0; i < n; ++i) {
        auto a = make_pair(700 + 2 * i);
        auto b = make_pair(701 + 2 * i);
        // embed b's video under its own masks, compare crops via the loss
        Tensor ea = toyworld::identity_embed(a.v_tgt, a.masks);
        Tensor eb = toyworld::identity_embed(b.v_tgt, b.masks);
        acc += 1.0 - numgrad::cosine_similarity(ea, eb).item();
    }
    CHECK(acc / n > 0.5);

    // perturbing lip pixels leaves the loss untouched (embed excludes M_lip)
    std::vector<double> v = pair.v_tgt.value();
    for (size_t i = 0; i < v.size(); ++i)
        if (pair.masks.lip.value()[i] > 0.5) v[i] = 1.0 - v[i];
    Tensor lips_flipped = Tensor::leaf(pair.v_tgt.shape(), std::move(v));
    CHECK(identity_loss(lips_flipped, pair.v_tgt, pair.masks).item() <= 1e-9);
}

TEST_CASE("default phase plan follows the 4:1:1 high/mid/low shape") {
    auto plan = default_phase_plan(100);
    REQUIRE(plan.phases.size() == 3);
    CHECK(plan.phases[0].name == "high");
    CHECK(plan.phases[0].alpha == 5.0);
    CHECK(plan.phases[0].scope == "full");
    CHECK(plan.phases[0].steps == 400);
    CHECK(plan.phases[1].name == "mid");
    CHECK(plan.phases[1].alpha == 1.5);
    CHECK(plan.phases[1].scope == "lip");
    CHECK(plan.phases[1].use_sync);
    CHECK(plan.phases[1].steps == 100);
    CHECK(plan.phases[2].name == "low");
    CHECK(plan.phases[2].alpha == 0.2);
    CHECK(plan.phases[2].scope == "texture");
    CHECK(plan.phases[2].use_identity);
    CHECK(plan.phases[2].audio_dropout == 0.5);
}

TEST_CASE("multiphase training freezes the base during adapter phases") {
    std::vector<toyworld::PairedSample> pairs{make_pair(66), make_pair(67)};

    EditorTrainConfig cfg;
    cfg.model = tiny_editor_config();
    cfg.batch = 1;
    cfg.seed = 68;
    cfg.seg_len = 9;
    cfg.loss_csv_prefix = "dubedit_test_";

    // full phase only
    auto full_only = cfg;
    full_only.plan = default_phase_plan(6);
    full_only.plan.phases = {full_only.plan.phases[0]};
    full_only.plan.phases[0].steps = 8;
    auto base = train_multiphase(pairs, full_only);
    CHECK(base.adapters.empty());

    // all three phases, same seed
    auto all = cfg;
    all.plan = default_phase_plan(6);
    all.plan.phases[0].steps = 8;
    all.plan.phases[1].steps = 5;
    all.plan.phases[2].steps = 5;
    auto model = train_multiphase(pairs, all);

    // adapter phases must not have moved any backbone weight
    for (const auto& [k, v] : base.params) CHECK(model.params.at(k).value() == v.value());

    // adapters exist with their inference gate windows
    REQUIRE(model.adapters.size() == 2);
    auto* lip = model.find_adapter("lip");
    auto* tex = model.find_adapter("texture");
    REQUIRE(lip != nullptr);
    REQUIRE(tex != nullptr);
    CHECK(lip->t_lo == 0.4);
    CHECK(lip->t_hi == 0.8);
    CHECK(tex->t_lo == 0.0);
    CHECK(tex->t_hi == 0.3);
    // the gate windows never overlap: at most one adapter is active
    for (double t : {0.05, 0.2, 0.3, 0.35, 0.45, 0.6, 0.8, 0.95})
        CHECK(ditcore::gate_adapters(model.adapters, t).size() <= 1);
    CHECK(ditcore::gate_adapters(model.adapters, 0.2).size() == 1);
    CHECK(ditcore::gate_adapters(model.adapters, 0.2)[0]->name == "texture");
    CHECK(ditcore::gate_adapters(model.adapters, 0.6)[0]->name == "lip");
    CHECK(ditcore::gate_adapters(model.adapters, 0.35).empty());

    // per-phase logs with one row per step
    CHECK(read_csv("dubedit_test_high.csv").size() == 8);
    CHECK(read_csv("dubedit_test_mid.csv").size() == 5);
    auto low_rows = read_csv("dubedit_test_low.csv");
    CHECK(low_rows.size() == 5);
    for (const auto& name : {"high", "mid", "low"})
        std::remove(("dubedit_test_" + std::string(name) + ".csv").c_str());
}

TEST_CASE("mid-phase timesteps cluster near the shifted mode; audio drops at 0.5") {
    std::vector<toyworld::PairedSample> pairs{make_pair(69)};
    EditorTrainConfig cfg;
    cfg.model = tiny_editor_config();
    cfg.batch = 1;
    cfg.seed = 70;
    cfg.loss_csv_prefix = "dubedit_stat_";
    cfg.plan = default_phase_plan(6);
    cfg.plan.phases.erase(cfg.plan.phases.begin());  // skip the slow full phase
    cfg.plan.phases[0].steps = 160;
    cfg.plan.phases[1].steps = 160;
    train_multiphase(pairs, cfg);

    auto mid = read_csv("dubedit_stat_mid.csv");
    REQUIRE(mid.size() == 160);
    std::vector<double> ts;
    for (const auto& row : mid) ts.push_back(row[2]);
    std::sort(ts.begin(), ts.end());
    double median = ts[ts.size() / 2];
    double mode = flowmatch::shifted_density_mode(1.5, 0.0, 1.0);
    CHECK(std::abs(median - mode) < 0.12);

    auto low = read_csv("dubedit_stat_low.csv");
    double drop = 0.0;
    for (const auto& row : low) drop += row[3];
    drop /= (double)low.size();
    CHECK(std::abs(drop - 0.5) < 0.1);
    // low-phase timesteps sit far below the mid-phase ones
    std::vector<double> tl;
    for (const auto& row : low) tl.push_back(row[2]);
    std::sort(tl.begin(), tl.end());
    CHECK(tl[tl.size() / 2] < 0.35);

    for (const auto& name : {"mid", "low"})
        std::remove(("dubedit_stat_" + std::string(name) + ".csv").c_str());
}

TEST_CASE("training aborts on a non-finite loss with phase diagnostics") {
    auto p = make_pair(71);
    std::vector<double> v = p.v_tgt.value();
    size_t per = p.v_tgt.size() / p.v_tgt.shape()[0];
    for (size_t k = 0; k < p.v_tgt.shape()[0]; ++k)  // hit every sampled window
        v[k * per] = std::numeric_limits<double>::quiet_NaN();
    p.v_tgt = Tensor::leaf(p.v_tgt.shape(), std::move(v));

    EditorTrainConfig cfg;
    cfg.model = tiny_editor_config();
    cfg.batch = 1;
    cfg.seed = 72;
    cfg.plan = default_phase_plan(1);
    cfg.plan.phases = {cfg.plan.phases[0]};
    try {
        train_multiphase({p}, cfg);
        FAIL("expected a runtime_error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("high") != std::string::npos);
    }
}

TEST_CASE("dub inference is deterministic, mask-free, and adapter-neutral at zero init") {
    auto pair = make_pair(73, 21);
    ditcore::DiT model(tiny_editor_config(), 74);
    DubOptions opt;
    opt.steps = 3;
    opt.seed = 75;

    Tensor out = dub_infer(pair.v_ref, pair.audio, model, opt);
    CHECK(out.shape() == pair.v_ref.shape());
    Tensor again = dub_infer(pair.v_ref, pair.audio, model, opt);
    CHECK(out.value() == again.value());

    // zero-initialized adapters leave the output bit-identical
    model.add_adapter("lip", 4, 0.4, 0.8, 76);
    model.add_adapter("texture", 4, 0.0, 0.3, 77);
    Tensor with_adapters = dub_infer(pair.v_ref, pair.audio, model, opt);
    CHECK(with_adapters.value() == out.value());

    // windowed processing covers clips longer than one window
    auto long_pair = make_pair(78, 33);
    Tensor long_out = dub_infer(long_pair.v_ref, long_pair.audio, model, opt);
    CHECK(long_out.shape() == long_pair.v_ref.shape());

    CHECK_THROWS_AS(dub_infer(pair.v_ref, toyworld::silent_audio(20), model, opt),
                    std::invalid_argument);
    DubOptions bad = opt;
    bad.window = 2;
    bad.motion = 2;
    CHECK_THROWS_AS(dub_infer(pair.v_ref, pair.audio, model, bad), std::invalid_argument);
}
