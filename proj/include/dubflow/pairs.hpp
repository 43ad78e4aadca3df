#ifndef DUBFLOW_PAIRS_HPP
#define DUBFLOW_PAIRS_HPP

// Pair-construction pipeline: inpaint mask composition, feathered
// compositing, same-speaker audio swaps through the generator, lighting
// augmentation, quality filtering, and the corpus manifest.

#include <random>
#include <string>
#include <vector>

#include "dubflow/generator.hpp"
#include "dubflow/tensor.hpp"
#include "dubflow/world.hpp"

namespace dubflow::pairforge {

using numgrad::Tensor;

// M_inp = ¬(M_face ∧ ¬M_occ) = ¬M_face ∨ M_occ; inpaint regions are 0
Tensor compose_inpaint_mask(const Tensor& m_face, const Tensor& m_occ);

// V_post = M̃ ⊙ V_gen + (1-M̃) ⊙ V_orig with M̃ = blur(M_face, sigma) in [0,1]
Tensor blend_postprocess(const Tensor& v_gen, const Tensor& v_orig, const Tensor& m_face,
                         double sigma);

struct FilterThresholds {
    double id_min{0.85};
    double lip_min{0.05};              // calibrated, see calibrate_lip_min
    double quality_max_residual{0.04}; // off-lip mean abs residual bound
};

struct FilterScores {
    double id_cos{0.0};
    double lip_div{0.0};
    double residual{0.0};
};

struct FilterResult {
    bool accepted{false};
    FilterScores scores;
    std::vector<std::string> reasons;  // "identity" | "lip-distinction" | "quality"
};

// accept iff id_cos >= id_min AND lip_div >= lip_min AND residual <= bound;
// all three scores are computed and recorded either way
FilterResult filter_pair(const toyworld::PairedSample& pair, const FilterThresholds& th);
bool accept_from_scores(const FilterScores& s, const FilterThresholds& th);

// 10th percentile of aperture divergence over n analytic same-speaker pairs
double calibrate_lip_min(std::mt19937_64& rng, size_t n_pairs, size_t frames = 21);

struct ManifestRecord {
    std::string id;
    std::string pair_path;
    std::string origin;  // analytic | generated
    int64_t speaker{0};
    FilterScores scores;
    bool accepted{false};
    std::vector<std::string> reasons;

    std::string to_json() const;
    static ManifestRecord from_json(const std::string& line);
};

struct CorpusManifest {
    std::vector<ManifestRecord> records;
    size_t accepted_count() const;
    void save(const std::string& path) const;  // one JSON object per line
    static CorpusManifest load(const std::string& path);
};

struct SceneRecord {
    toyworld::ToyScene scene;
    toyworld::AudioTrack audio;
};

struct BuildOptions {
    double relight_frac{0.05};   // identical lighting applied to both videos
    double analytic_frac{0.1};   // analytic pairs mixed into the corpus
    FilterThresholds thresholds;
    dubgen::CompanionOptions companion;
    std::string out_dir;  // pair files land here as pair_<id>.bin
    uint64_t seed{0};
    int threads{1};
};

CorpusManifest build_pair_corpus(const std::vector<SceneRecord>& scenes,
                                 const ditcore::DiT& generator, const BuildOptions& opt);

}  // namespace dubflow::pairforge

#endif
