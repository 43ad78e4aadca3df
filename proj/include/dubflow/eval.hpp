#ifndef DUBFLOW_EVAL_HPP
#define DUBFLOW_EVAL_HPP

// Evaluation metrics against analytic ground truth, the oracle verification
// battery, and report aggregation.

#include <string>
#include <vector>

#include "dubflow/tensor.hpp"
#include "dubflow/world.hpp"

namespace dubflow::evalcli {

using numgrad::Tensor;

struct SuccessThresholds {
    double sync_corr{0.8};
    double id_cos{0.95};
    double off_lip_psnr{30.0};
};

struct EvalRow {
    std::string clip_id;
    double sync_corr{0.0};
    double sync_mae{0.0};
    double id_cos{0.0};
    double off_lip_psnr{0.0};
    bool success{false};
};

struct EvalReport {
    std::vector<EvalRow> rows;

    double mean_sync_corr() const;
    double mean_sync_mae() const;
    double mean_id_cos() const;
    double mean_off_lip_psnr() const;
    double success_rate() const;

    void save_csv(const std::string& path) const;
    static EvalReport load_csv(const std::string& path);
};

// Scores a dubbed clip against the analytic render of the same scene under
// the new audio. truth.v_tgt is that render, truth.v_ref the source clip the
// identity must be preserved from; sync compares the extracted aperture with
// the analytic track, PSNR is measured outside the (already max-dilated) lip
// mask and capped at 99 dB.
EvalRow evaluate(const Tensor& v_hat, const toyworld::PairedSample& truth,
                 const std::string& clip_id = "", const SuccessThresholds& th = {});

struct OracleCheck {
    std::string name;
    bool pass{false};
    std::string detail;
};

struct VerifyReport {
    std::vector<OracleCheck> checks;
    bool all_pass() const;
};

struct VerifyOptions {
    uint64_t seed{0};
    // negative-control hook: corrupts the change-of-variables factor in the
    // density oracle so the density-vs-histogram check must fail
    bool sabotage_density{false};
};

// The invariant battery: finite-difference gradient checks (primitives and a
// full transformer block), timestep-shift algebra, single-step denoising
// algebra, mask composition truth table, rotary translation invariance,
// shifted-density modes vs. their pinned peaks, adapter gate disjointness.
VerifyReport verify_oracles(const VerifyOptions& opt = {});

}  // namespace dubflow::evalcli

#endif
