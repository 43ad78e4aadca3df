#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "dubflow/dit.hpp"

using namespace dubflow;
using namespace dubflow::ditcore;
using numgrad::Tensor;

namespace {

DiTConfig tiny_config() {
    DiTConfig cfg;
    cfg.depth = 1;
    cfg.model_dim = 8;
    cfg.head_count = 1;
    cfg.ffn_dim = 16;
    cfg.patch_size = 2;
    cfg.audio_dim = 4;
    cfg.in_channels = 1;
    cfg.out_channels = 1;
    return cfg;
}

DiT::Layout tiny_layout() {
    DiT::Layout lay;
    lay.height = 4;
    lay.width = 4;
    lay.role = {1, 0, 0};          // one reference slot, two target slots
    lay.time_index = {0, 0, 1};
    lay.audio_frame = {-1, 0, 1};
    return lay;
}

Tensor random_tensor(numgrad::Shape s, std::mt19937_64& rng, double sd = 1.0,
                     bool req = false) {
    std::normal_distribution<double> nd(0.0, sd);
    std::vector<double> v(numgrad::numel(s));
    for (auto& x : v) x = nd(rng);
    return Tensor::leaf(std::move(s), std::move(v), req);
}

// the zero-initialized projections make the forward identically zero at init;
// randomize them so tests exercise a non-degenerate network
void unfreeze(DiT& m, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 0.2);
    for (auto* key : {"temb.W2", "out.W", "skip.W"})
        for (auto& x : m.params.at(key).raw_value()) x = nd(rng);
}

}  // namespace

TEST_CASE("patchify: counts, grid, frame-major order, round trip") {
    std::mt19937_64 rng(1);
    Tensor v = random_tensor({1, 2, 1, 4, 4}, rng);
    PatchGrid g;
    Tensor tok = patchify(v, 4, &g);
    CHECK(tok.shape() == numgrad::Shape{1, 2, 16});
    CHECK(g.h_patches == 1);
    CHECK(g.w_patches == 1);
    CHECK(g.f_frames == 2);
    CHECK(unpatchify(tok, g, 1).value() == v.value());

    Tensor v2 = random_tensor({1, 3, 1, 8, 8}, rng);
    PatchGrid g2;
    Tensor tok2 = patchify(v2, 4, &g2);
    CHECK(tok2.shape()[1] == 12);
    CHECK(g2.h_patches == 2);
    CHECK(g2.w_patches == 2);
    CHECK(g2.f_frames == 3);
    CHECK(unpatchify(tok2, g2, 1).value() == v2.value());

    // frame-major then row-major: token 4 of the 8x8 clip is frame 1, patch (0,0)
    CHECK(tok2.value()[4 * 16] == v2.value()[1 * 64]);
    // second token of frame 0 starts at column 4 of row 0
    CHECK(tok2.value()[1 * 16] == v2.value()[4]);

    CHECK_THROWS_AS(patchify(random_tensor({2, 1, 6, 6}, rng), 4), std::invalid_argument);

    // unbatched rank-4 path
    Tensor v3 = random_tensor({2, 3, 8, 4}, rng);
    PatchGrid g3;
    Tensor tok3 = patchify(v3, 2, &g3);
    CHECK(tok3.shape() == numgrad::Shape{2 * 4 * 2, 3 * 4});
    CHECK(unpatchify(tok3, g3, 3).value() == v3.value());
}

TEST_CASE("rope positions: identity for targets, shifted for references") {
    PatchGrid g{2, 2, 3, 4};
    auto tgt = rope_positions(g, false);
    auto ref = rope_positions(g, true);
    REQUIRE(tgt.size() == 12);
    // token (i=0,j=0,k=1) sits at index 4
    CHECK(ref[4] == std::array<long, 3>{2, 2, 1});
    for (size_t k = 0; k < 3; ++k)
        for (size_t i = 0; i < 2; ++i)
            for (size_t j = 0; j < 2; ++j) {
                size_t idx = k * 4 + i * 2 + j;
                CHECK(tgt[idx] == std::array<long, 3>{(long)i, (long)j, (long)k});
                CHECK(ref[idx][2] == (long)k);  // temporal index untouched
            }
}

TEST_CASE("rotary logits are invariant under joint integer translation") {
    DiTConfig cfg;
    cfg.model_dim = 24;
    cfg.head_count = 2;  // head_dim 12: 2 rotary pairs per axis
    std::mt19937_64 rng(3);
    Tensor q = random_tensor({1, 24}, rng), k = random_tensor({1, 24}, rng);
    auto logit = [&](std::array<long, 3> p1, std::array<long, 3> p2) {
        auto [c, s] = rope_tables({p1, p2}, cfg);
        auto rot = [&](const Tensor& x, size_t row) {
            Tensor cr = numgrad::slice(c, 0, row, 1), sr = numgrad::slice(s, 0, row, 1);
            return numgrad::add(numgrad::mul(x, cr),
                                numgrad::mul(numgrad::rotate_half_pairs(x), sr));
        };
        Tensor qr = rot(q, 0), kr = rot(k, 1);
        return numgrad::reduce_sum(numgrad::mul(qr, kr)).item();
    };
    std::uniform_int_distribution<long> ui(-6, 6);
    for (int trial = 0; trial < 20; ++trial) {
        std::array<long, 3> p1{ui(rng), ui(rng), ui(rng)}, p2{ui(rng), ui(rng), ui(rng)};
        std::array<long, 3> d{ui(rng), ui(rng), ui(rng)};
        std::array<long, 3> p1d{p1[0] + d[0], p1[1] + d[1], p1[2] + d[2]};
        std::array<long, 3> p2d{p2[0] + d[0], p2[1] + d[1], p2[2] + d[2]};
        CHECK(std::abs(logit(p1, p2) - logit(p1d, p2d)) < 1e-9);
    }
    // the reference shift (h', w', 0) is such a translation
    CHECK(std::abs(logit({0, 0, 1}, {1, 2, 1}) - logit({4, 4, 1}, {5, 6, 1})) < 1e-9);
    // sanity: rotary is not trivial — moving one token alone changes the logit
    CHECK(std::abs(logit({0, 0, 0}, {1, 2, 0}) - logit({0, 0, 0}, {2, 2, 0})) > 1e-6);
}

TEST_CASE("audio windows clamp at the clip edges") {
    std::vector<double> feats(24 * 2);
    for (size_t i = 0; i < 24; ++i) {
        feats[2 * i] = (double)i;
        feats[2 * i + 1] = -(double)i;
    }
    Tensor w = build_audio_windows(Tensor::leaf({24, 2}, feats), 3);
    CHECK(w.shape() == numgrad::Shape{3, 16, 2});
    // frame 0: start index -4 clamps to 0 for the first four entries
    for (int i = 0; i < 4; ++i) CHECK(w.value()[i * 2] == 0.0);
    CHECK(w.value()[4 * 2] == 0.0);
    CHECK(w.value()[5 * 2] == 1.0);
    // frame 1 is fully interior: indices 4..19
    for (int i = 0; i < 16; ++i) CHECK(w.value()[(16 + i) * 2] == (double)(4 + i));
    // frame 2: indices 12..27 clamp at 23
    CHECK(w.value()[(32 + 15) * 2] == 23.0);
    CHECK(w.value()[(32 + 11) * 2] == 23.0);
}

TEST_CASE("adapter gating: inclusive windows, overlap warning") {
    std::vector<LoraAdapter> ads(2);
    ads[0].name = "texture";
    ads[0].t_lo = 0.0;
    ads[0].t_hi = 0.3;
    ads[1].name = "lip";
    ads[1].t_lo = 0.4;
    ads[1].t_hi = 0.8;
    auto names = [&](double t) {
        std::string out;
        for (auto* a : gate_adapters(ads, t)) out += a->name + ",";
        return out;
    };
    CHECK(names(0.5) == "lip,");
    CHECK(names(0.35) == "");
    CHECK(names(0.0) == "texture,");
    CHECK(names(0.3) == "texture,");
    CHECK(names(0.4) == "lip,");
    CHECK(names(0.8) == "lip,");
    CHECK(names(0.81) == "");

    ads[1].t_lo = 0.2;  // overlap
    std::ostringstream warn;
    auto act = gate_adapters(ads, 0.25, &warn);
    CHECK(act.size() == 2);
    CHECK(warn.str().find("overlap") != std::string::npos);
}

TEST_CASE("zero-initialized adapters leave the forward pass bit-identical") {
    DiT model(tiny_config(), 11);
    unfreeze(model, 12);
    std::mt19937_64 rng(13);
    Tensor z = random_tensor({3, 1, 4, 4}, rng);
    Tensor aud = build_audio_windows(random_tensor({16, 4}, rng), 2);
    auto lay = tiny_layout();
    numgrad::NoGradGuard ng;
    Tensor base = model.forward(z, 0.5, &aud, lay, {});
    model.add_adapter("lip", 2, 0.4, 0.8, 99);
    auto active = gate_adapters(model.adapters, 0.5);
    REQUIRE(active.size() == 1);
    Tensor with = model.forward(z, 0.5, &aud, lay, active);
    CHECK(with.value() == base.value());
    // perturbing the up-matrix breaks the identity (adapter really is wired in)
    model.adapters[0].up.begin()->second.raw_value()[0] = 0.5;
    Tensor moved = model.forward(z, 0.5, &aud, lay, gate_adapters(model.adapters, 0.5));
    CHECK(moved.value() != base.value());
}

TEST_CASE("audio absent equals zeroed value-projection") {
    DiT model(tiny_config(), 21);
    unfreeze(model, 22);
    std::mt19937_64 rng(23);
    Tensor z = random_tensor({3, 1, 4, 4}, rng);
    auto lay = tiny_layout();
    numgrad::NoGradGuard ng;
    Tensor without = model.forward(z, 0.3, nullptr, lay, {});
    for (auto& x : model.params.at("u0.xa.Wv").raw_value()) x = 0.0;
    Tensor aud = build_audio_windows(random_tensor({16, 4}, rng), 2);
    Tensor with = model.forward(z, 0.3, &aud, lay, {});
    CHECK(with.value() == without.value());
}

TEST_CASE("output covers only target slots and shape matches the noised stack") {
    DiT model(tiny_config(), 31);
    std::mt19937_64 rng(32);
    Tensor z = random_tensor({3, 1, 4, 4}, rng);
    numgrad::NoGradGuard ng;
    Tensor out = model.forward(z, 0.7, nullptr, tiny_layout(), {});
    CHECK(out.shape() == numgrad::Shape{2, 1, 4, 4});

    DiT::Layout bad = tiny_layout();
    bad.role = {1, 1, 1};
    CHECK_THROWS_AS(model.forward(z, 0.7, nullptr, bad, {}), std::invalid_argument);
    CHECK_THROWS_AS(model.forward(z, 1.5, nullptr, tiny_layout(), {}), std::invalid_argument);
    CHECK_THROWS_AS(model.forward(random_tensor({3, 2, 4, 4}, rng), 0.5, nullptr, tiny_layout(), {}),
                    std::invalid_argument);
    Tensor short_aud = build_audio_windows(random_tensor({8, 4}, rng), 1);
    CHECK_THROWS_AS(model.forward(z, 0.5, &short_aud, tiny_layout(), {}),
                    std::invalid_argument);
}

TEST_CASE("batched forward maps over the batch axis") {
    DiT model(tiny_config(), 41);
    unfreeze(model, 42);
    std::mt19937_64 rng(43);
    Tensor a = random_tensor({3, 1, 4, 4}, rng), b = random_tensor({3, 1, 4, 4}, rng);
    Tensor ab = numgrad::concat({numgrad::reshape(a, {1, 3, 1, 4, 4}),
                                 numgrad::reshape(b, {1, 3, 1, 4, 4})},
                                0);
    Tensor ba = numgrad::concat({numgrad::reshape(b, {1, 3, 1, 4, 4}),
                                 numgrad::reshape(a, {1, 3, 1, 4, 4})},
                                0);
    auto lay = tiny_layout();
    numgrad::NoGradGuard ng;
    Tensor oab = model.forward_batch(ab, 0.4, nullptr, lay);
    Tensor oba = model.forward_batch(ba, 0.4, nullptr, lay);
    size_t half = oab.size() / 2;
    for (size_t i = 0; i < half; ++i) {
        CHECK(oab.value()[i] == oba.value()[half + i]);
        CHECK(oab.value()[half + i] == oba.value()[i]);
    }
}

TEST_CASE("forward gradients pass finite differences on the tiny config") {
    DiT model(tiny_config(), 51);
    unfreeze(model, 52);
    model.add_adapter("lip", 2, 0.4, 0.8, 53);
    // give the adapter a live up-matrix so its gradient is non-trivial
    std::mt19937_64 arng(54);
    std::normal_distribution<double> nd(0.0, 0.1);
    for (auto& [k, v] : model.adapters[0].up)
        for (auto& x : v.raw_value()) x = nd(arng);

    std::mt19937_64 rng(55);
    Tensor z = random_tensor({3, 1, 4, 4}, rng, 1.0, true);
    Tensor aud = build_audio_windows(random_tensor({16, 4}, rng), 2);
    Tensor probe = random_tensor({2, 1, 4, 4}, rng);
    auto lay = tiny_layout();
    auto fn = [&](const std::vector<Tensor>&) {
        auto active = gate_adapters(model.adapters, 0.55);
        Tensor out = model.forward(z, 0.55, &aud, lay, active);
        return numgrad::reduce_mean(numgrad::mul(out, probe));
    };
    std::vector<std::pair<std::string, Tensor>> inputs = {
        {"z", z},
        {"in.W", model.params.at("in.W")},
        {"temb.W2", model.params.at("temb.W2")},
        {"u0.s2d.Wq", model.params.at("u0.s2d.Wq")},
        {"u0.s3d.Wv", model.params.at("u0.s3d.Wv")},
        {"u0.xa.Wk", model.params.at("u0.xa.Wk")},
        {"u0.ffn.W1", model.params.at("u0.ffn.W1")},
        {"out.W", model.params.at("out.W")},
        {"skip.W", model.params.at("skip.W")},
        {"lora.down", model.adapters[0].down.at("u0.s3d.q")},
        {"lora.up", model.adapters[0].up.at("u0.s3d.q")},
    };
    auto rep = numgrad::grad_check(fn, inputs, 1e-3);
    INFO(rep.summary());
    CHECK(rep.pass);
}

TEST_CASE("checkpoint round trip preserves weights, adapters, and outputs") {
    DiT model(tiny_config(), 61);
    unfreeze(model, 62);
    model.add_adapter("texture", 3, 0.0, 0.3, 63, 0.9);
    std::mt19937_64 arng(64);
    std::normal_distribution<double> nd(0.0, 0.1);
    for (auto& [k, v] : model.adapters[0].up)
        for (auto& x : v.raw_value()) x = nd(arng);

    std::string path = "ditcore_ckpt_test.bin";
    model.save(path);
    DiT back = DiT::load(path);
    CHECK(back.config.model_dim == 8);
    REQUIRE(back.adapters.size() == 1);
    CHECK(back.adapters[0].name == "texture");
    CHECK(back.adapters[0].rank == 3);
    CHECK(back.adapters[0].scale == 0.9);
    CHECK(back.adapters[0].t_hi == 0.3);

    std::mt19937_64 rng(65);
    Tensor z = random_tensor({3, 1, 4, 4}, rng);
    Tensor aud = build_audio_windows(random_tensor({16, 4}, rng), 2);
    auto lay = tiny_layout();
    numgrad::NoGradGuard ng;
    Tensor o1 = model.forward(z, 0.1, &aud, lay, gate_adapters(model.adapters, 0.1));
    Tensor o2 = back.forward(z, 0.1, &aud, lay, gate_adapters(back.adapters, 0.1));
    CHECK(o1.value() == o2.value());
    std::remove(path.c_str());
    std::remove((path + ".idx").c_str());
}

TEST_CASE("config validation rejects bad shapes") {
    DiTConfig cfg = tiny_config();
    cfg.model_dim = 9;  // not divisible by 2*heads
    CHECK_THROWS_AS(DiT(cfg, 1), std::invalid_argument);
    cfg = tiny_config();
    cfg.depth = 0;
    CHECK_THROWS_AS(DiT(cfg, 1), std::invalid_argument);
    CHECK_THROWS_AS(DiT(tiny_config(), 1).add_adapter("x", 0, 0.0, 0.5, 1),
                    std::invalid_argument);
    CHECK_THROWS_AS(DiT(tiny_config(), 1).add_adapter("x", 2, 0.5, 0.5, 1),
                    std::invalid_argument);
}
