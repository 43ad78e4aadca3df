#include "dubflow/pairs.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>

#include "dubflow/runio.hpp"

namespace dubflow::pairforge {

using namespace numgrad;
using json = nlohmann::json;

Tensor compose_inpaint_mask(const Tensor& m_face, const Tensor& m_occ) {
    if (m_face.shape() != m_occ.shape())
        throw std::invalid_argument("compose_inpaint_mask: shape mismatch");
    std::vector<double> out(m_face.size());
    for (size_t i = 0; i < out.size(); ++i) {
        bool vis = m_face.value()[i] > 0.5 && !(m_occ.value()[i] > 0.5);
        out[i] = vis ? 0.0 : 1.0;
    }
    return Tensor::leaf(m_face.shape(), std::move(out));
}

Tensor blend_postprocess(const Tensor& v_gen, const Tensor& v_orig, const Tensor& m_face,
                         double sigma) {
    if (v_gen.shape() != v_orig.shape() || m_face.shape() != v_gen.shape())
        throw std::invalid_argument("blend_postprocess: shape mismatch");
    if (sigma < 0.0) throw std::invalid_argument("blend_postprocess: sigma must be >= 0");
    Tensor smooth = toyworld::gaussian_blur_mask(m_face, sigma);
    std::vector<double> out(v_gen.size());
    for (size_t i = 0; i < out.size(); ++i) {
        double m = smooth.value()[i];
        out[i] = m * v_gen.value()[i] + (1.0 - m) * v_orig.value()[i];
    }
    return Tensor::leaf(v_gen.shape(), std::move(out));
}

FilterResult filter_pair(const toyworld::PairedSample& pair, const FilterThresholds& th) {
    NoGradGuard ng;
    FilterResult r;
    r.scores.id_cos = cosine_similarity(toyworld::identity_embed(pair.v_ref, pair.masks),
                                        toyworld::identity_embed(pair.v_tgt, pair.masks))
                          .item();
    auto ap_ref = toyworld::aperture_extract_values(pair.v_ref, pair.masks);
    auto ap_tgt = toyworld::aperture_extract_values(pair.v_tgt, pair.masks);
    double div = 0.0;
    for (size_t k = 0; k < ap_ref.size(); ++k) div += std::abs(ap_ref[k] - ap_tgt[k]);
    r.scores.lip_div = div / (double)ap_ref.size();

    // worst per-frame mean abs residual over the off-lip face region
    const Shape& s = pair.v_tgt.shape();
    size_t f = s[0], per = pair.v_tgt.size() / f;
    double worst = 0.0;
    for (size_t k = 0; k < f; ++k) {
        double acc = 0.0, cnt = 0.0;
        for (size_t i = k * per; i < (k + 1) * per; ++i) {
            double keep = pair.masks.face.value()[i] * (1.0 - pair.masks.lip.value()[i]) *
                          (1.0 - pair.masks.occ.value()[i]);
            if (keep > 0.5) {
                acc += std::abs(pair.v_ref.value()[i] - pair.v_tgt.value()[i]);
                cnt += 1.0;
            }
        }
        if (cnt > 0.0) worst = std::max(worst, acc / cnt);
    }
    r.scores.residual = worst;

    if (r.scores.id_cos < th.id_min) r.reasons.push_back("identity");
    if (r.scores.lip_div < th.lip_min) r.reasons.push_back("lip-distinction");
    if (r.scores.residual > th.quality_max_residual) r.reasons.push_back("quality");
    r.accepted = r.reasons.empty();
    return r;
}

bool accept_from_scores(const FilterScores& s, const FilterThresholds& th) {
    return s.id_cos >= th.id_min && s.lip_div >= th.lip_min &&
           s.residual <= th.quality_max_residual;
}

double calibrate_lip_min(std::mt19937_64& rng, size_t n_pairs, size_t frames) {
    std::vector<double> divs;
    toyworld::ToyScene::Options opt;
    opt.frames = frames;
    for (size_t i = 0; i < n_pairs; ++i) {
        auto scene = toyworld::ToyScene::random(rng, opt);
        int64_t speaker = (int64_t)(rng() % 1000);
        auto a = toyworld::synth_audio(speaker, frames, rng);
        auto b = toyworld::synth_audio(speaker, frames, rng);
        auto ta = toyworld::aperture_from_audio(a), tb = toyworld::aperture_from_audio(b);
        double d = 0.0;
        for (size_t k = 0; k < frames; ++k) d += std::abs(ta[k] - tb[k]);
        divs.push_back(d / (double)frames);
    }
    std::sort(divs.begin(), divs.end());
    return divs[divs.size() / 10];
}

std::string ManifestRecord::to_json() const {
    json j;
    j["id"] = id;
    j["pair_path"] = pair_path;
    j["origin"] = origin;
    j["speaker"] = speaker;
    j["scores"] = {{"id_cos", scores.id_cos},
                   {"lip_div", scores.lip_div},
                   {"residual", scores.residual}};
    j["accepted"] = accepted;
    j["reasons"] = reasons;
    return j.dump();
}

ManifestRecord ManifestRecord::from_json(const std::string& line) {
    json j = json::parse(line);
    ManifestRecord r;
    r.id = j.at("id").get<std::string>();
    r.pair_path = j.at("pair_path").get<std::string>();
    r.origin = j.at("origin").get<std::string>();
    r.speaker = j.at("speaker").get<int64_t>();
    r.scores.id_cos = j.at("scores").at("id_cos").get<double>();
    r.scores.lip_div = j.at("scores").at("lip_div").get<double>();
    r.scores.residual = j.at("scores").at("residual").get<double>();
    r.accepted = j.at("accepted").get<bool>();
    r.reasons = j.at("reasons").get<std::vector<std::string>>();
    return r;
}

size_t CorpusManifest::accepted_count() const {
    size_t n = 0;
    for (const auto& r : records) n += r.accepted ? 1 : 0;
    return n;
}

void CorpusManifest::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest " + path);
    for (const auto& r : records) out << r.to_json() << "\n";
}

CorpusManifest CorpusManifest::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read manifest " + path);
    CorpusManifest m;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) m.records.push_back(ManifestRecord::from_json(line));
    return m;
}

CorpusManifest build_pair_corpus(const std::vector<SceneRecord>& scenes,
                                 const ditcore::DiT& generator, const BuildOptions& opt) {
    CorpusManifest manifest;
    manifest.records.resize(scenes.size());

    runio::parallel_for(scenes.size(), opt.threads, [&](size_t i) {
        std::mt19937_64 rng(opt.seed ^ (0x9e3779b97f4a7c15ull * (i + 1)));
        std::uniform_real_distribution<double> ud(0.0, 1.0);
        const auto& scene = scenes[i].scene;
        const auto& audio = scenes[i].audio;
        size_t f = scene.frames;

        toyworld::PairedSample pair;
        auto a_alt = toyworld::synth_audio(audio.speaker_id, f, rng);
        bool analytic = ud(rng) < opt.analytic_frac;
        if (analytic) {
            pair = toyworld::analytic_pair(scene, audio, a_alt);
        } else {
            auto r = toyworld::render_scene(scene, audio);
            auto copt = opt.companion;
            copt.seed = rng();
            Tensor v_ref = dubgen::generate_companion(r.video, r.masks, a_alt, generator, copt);
            pair.v_ref = v_ref;
            pair.v_tgt = r.video;
            pair.audio = audio;
            pair.masks = r.masks;
            pair.origin = "generated";
            pair.aperture_tgt = r.aperture;
            pair.aperture_ref = toyworld::aperture_extract_values(v_ref, r.masks);
        }
        if (ud(rng) < opt.relight_frac) {
            // identical lighting applied to both halves of the pair
            auto track = toyworld::random_light_track(rng, f, 0.5, 1.6);
            pair.v_ref = toyworld::relight(pair.v_ref, track);
            pair.v_tgt = toyworld::relight(pair.v_tgt, track);
        }

        auto fr = filter_pair(pair, opt.thresholds);
        ManifestRecord rec;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "pair_%05zu", i);
        rec.id = buf;
        rec.origin = pair.origin;
        rec.speaker = audio.speaker_id;
        rec.scores = fr.scores;
        rec.accepted = fr.accepted;
        rec.reasons = fr.reasons;
        if (fr.accepted) {
            rec.pair_path = opt.out_dir + "/" + rec.id + ".bin";
            toyworld::save_pair(rec.pair_path, pair);
        }
        manifest.records[i] = std::move(rec);
    });
    return manifest;
}

}  // namespace dubflow::pairforge
