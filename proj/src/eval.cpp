#include "dubflow/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "dubflow/dit.hpp"
#include "dubflow/flow.hpp"
#include "dubflow/pairs.hpp"

namespace dubflow::evalcli {

using namespace numgrad;

namespace {

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    size_t n = a.size();
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= (double)n;
    mb /= (double)n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (size_t i = 0; i < n; ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    double den = std::sqrt(saa * sbb);
    return den > 1e-12 ? sab / den : 0.0;
}

double mean_of(const std::vector<EvalRow>& rows, double EvalRow::* field) {
    if (rows.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& r : rows) acc += r.*field;
    return acc / (double)rows.size();
}

}  // namespace

double EvalReport::mean_sync_corr() const { return mean_of(rows, &EvalRow::sync_corr); }
double EvalReport::mean_sync_mae() const { return mean_of(rows, &EvalRow::sync_mae); }
double EvalReport::mean_id_cos() const { return mean_of(rows, &EvalRow::id_cos); }
double EvalReport::mean_off_lip_psnr() const { return mean_of(rows, &EvalRow::off_lip_psnr); }

double EvalReport::success_rate() const {
    if (rows.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& r : rows) acc += r.success ? 1.0 : 0.0;
    return acc / (double)rows.size();
}

void EvalReport::save_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write report " + path);
    out << "clip_id,sync_corr,sync_mae,id_cos,off_lip_psnr,success\n";
    out.precision(17);
    for (const auto& r : rows)
        out << r.clip_id << ',' << r.sync_corr << ',' << r.sync_mae << ',' << r.id_cos << ','
            << r.off_lip_psnr << ',' << (r.success ? 1 : 0) << "\n";
}

EvalReport EvalReport::load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read report " + path);
    EvalReport rep;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        EvalRow r;
        std::getline(ss, r.clip_id, ',');
        std::getline(ss, cell, ',');
        r.sync_corr = std::stod(cell);
        std::getline(ss, cell, ',');
        r.sync_mae = std::stod(cell);
        std::getline(ss, cell, ',');
        r.id_cos = std::stod(cell);
        std::getline(ss, cell, ',');
        r.off_lip_psnr = std::stod(cell);
        std::getline(ss, cell, ',');
        r.success = cell == "1";
        rep.rows.push_back(std::move(r));
    }
    return rep;
}

EvalRow evaluate(const Tensor& v_hat, const toyworld::PairedSample& truth,
                 const std::string& clip_id, const SuccessThresholds& th) {
    if (v_hat.shape() != truth.v_tgt.shape())
        throw std::invalid_argument("evaluate: clip and analytic target differ in shape");

    NoGradGuard ng;
    EvalRow row;
    row.clip_id = clip_id;

    auto ap_hat = toyworld::aperture_extract_values(v_hat, truth.masks);
    const auto& ap_true = truth.aperture_tgt;
    if (ap_hat.size() != ap_true.size())
        throw std::invalid_argument("evaluate: aperture track length mismatch");
    row.sync_corr = pearson(ap_hat, ap_true);
    double mae = 0.0;
    for (size_t k = 0; k < ap_hat.size(); ++k) mae += std::abs(ap_hat[k] - ap_true[k]);
    row.sync_mae = mae / (double)ap_hat.size();

    row.id_cos = cosine_similarity(toyworld::identity_embed(v_hat, truth.masks),
                                   toyworld::identity_embed(truth.v_ref, truth.masks))
                     .item();

    // PSNR outside the (max-dilated, scene-constant) lip mask
    double se = 0.0, cnt = 0.0;
    for (size_t i = 0; i < v_hat.size(); ++i) {
        if (truth.masks.lip.value()[i] > 0.5) continue;
        double d = v_hat.value()[i] - truth.v_tgt.value()[i];
        se += d * d;
        cnt += 1.0;
    }
    double mse = cnt > 0.0 ? se / cnt : 0.0;
    row.off_lip_psnr = mse > 0.0 ? std::min(99.0, 10.0 * std::log10(1.0 / mse)) : 99.0;

    row.success = row.sync_corr >= th.sync_corr && row.id_cos >= th.id_cos &&
                  row.off_lip_psnr >= th.off_lip_psnr;
    return row;
}

// ---- oracle battery --------------------------------------------------------

namespace {

void add_check(VerifyReport& rep, const std::string& name, bool pass,
               const std::string& detail = "") {
    rep.checks.push_back({name, pass, detail});
}

Tensor rand_leaf(Shape s, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> nd(0.0, scale);
    std::vector<double> v(numel(s));
    for (auto& x : v) x = nd(rng);
    return Tensor::leaf(std::move(s), std::move(v));
}

void check_primitive_grads(VerifyReport& rep, std::mt19937_64& rng) {
    auto fn = [](const std::vector<Tensor>& in) {
        Tensor a = in[0], b = in[1], w = in[2];
        Tensor h = matmul(softmax_lastdim(a), w);
        Tensor g = gelu(layer_norm_lastdim(add(h, b)));
        Tensor e = mul(exp(scale(g, 0.3)), sqrt(add_scalar(mul(g, g), 1.0)));
        return reduce_mean(divide(e, add_scalar(exp(b), 1.0)));
    };
    auto report = grad_check(fn,
                             {{"a", rand_leaf({3, 4}, rng)},
                              {"b", rand_leaf({3, 4}, rng)},
                              {"w", rand_leaf({4, 4}, rng)}},
                             1e-4);
    add_check(rep, "gradients: primitive composition vs central differences", report.pass,
              report.summary());
}

void check_block_grads(VerifyReport& rep, std::mt19937_64& rng) {
    ditcore::DiTConfig cfg;
    cfg.depth = 1;
    cfg.model_dim = 8;
    cfg.head_count = 1;
    cfg.ffn_dim = 16;
    cfg.patch_size = 2;
    cfg.audio_dim = 4;
    cfg.in_channels = 1;
    cfg.out_channels = 1;
    ditcore::DiT model(cfg, rng());
    // the zero-initialized projections would hide most of the graph
    for (const auto& name : {"temb.W2", "out.W", "skip.W"}) {
        Tensor& p = model.params.at(name);
        Tensor r = rand_leaf(p.shape(), rng, 0.3);
        p.raw_value() = r.value();
    }
    ditcore::DiT::Layout lay;
    lay.height = lay.width = 4;
    lay.role = {1, 0};
    lay.time_index = {0, 0};
    lay.audio_frame = {-1, 0};
    Tensor aud = rand_leaf({1, (size_t)ditcore::kAudioWindow, 4}, rng);

    auto fn = [&](const std::vector<Tensor>& in) {
        model.params.at("out.W") = in[1];
        return reduce_mean(model.forward(in[0], 0.37, &aud, lay));
    };
    auto report = grad_check(
        fn, {{"z_in", rand_leaf({2, 1, 4, 4}, rng)}, {"out.W", model.params.at("out.W")}},
        1e-3);
    add_check(rep, "gradients: full transformer block vs central differences", report.pass,
              report.summary());
}

void check_shift_algebra(VerifyReport& rep) {
    bool fixes = true, mono = true, inv = true;
    for (double alpha : {0.2, 0.4, 0.8, 1.5, 2.0, 3.0, 4.0, 5.0}) {
        fixes = fixes && flowmatch::timestep_shift(alpha, 0.0) == 0.0 &&
                std::abs(flowmatch::timestep_shift(alpha, 1.0) - 1.0) <= 1e-12;
        double prev = 0.0;
        for (int i = 1; i <= 200; ++i) {
            double t = i / 200.0;
            double s = flowmatch::timestep_shift(alpha, t);
            mono = mono && s > prev;
            prev = s;
            double back = flowmatch::timestep_shift(1.0 / alpha, s);
            inv = inv && std::abs(back - t) <= 1e-12;
        }
    }
    add_check(rep, "timestep shift: fixes {0,1}", fixes);
    add_check(rep, "timestep shift: strictly monotone", mono);
    add_check(rep, "timestep shift: inverse composition to 1e-12", inv);
}

void check_denoise_algebra(VerifyReport& rep, std::mt19937_64& rng) {
    auto identity = [](const Tensor& z) { return z; };
    flowmatch::DenoiseSpec spec;
    bool exact = true, scaled = true;
    for (double t : {0.1, 0.4, 0.6, 0.9}) {
        Tensor z0 = rand_leaf({2, 1, 4, 4}, rng);
        Tensor eps = rand_leaf({2, 1, 4, 4}, rng);
        auto fs = flowmatch::diffuse_forward(z0, eps, t);
        fs.v_hat = fs.v;
        Tensor x0 = flowmatch::single_step_denoise(fs, spec, identity);
        for (size_t i = 0; i < x0.size(); ++i)
            exact = exact && std::abs(x0.value()[i] - z0.value()[i]) <= 1e-12;

        Tensor d = rand_leaf({2, 1, 4, 4}, rng, 0.5);
        fs.v_hat = sub(fs.v, d);
        Tensor x0e = flowmatch::single_step_denoise(fs, spec, identity);
        double want = std::min(t, spec.t_thres);
        for (size_t i = 0; i < x0e.size(); ++i)
            scaled = scaled &&
                     std::abs(x0e.value()[i] - z0.value()[i] - d.value()[i] * want) <= 1e-12;
    }
    add_check(rep, "single-step denoising: exact prediction recovers z0", exact);
    add_check(rep, "single-step denoising: error scale clipped at t_thres", scaled);
}

void check_mask_algebra(VerifyReport& rep) {
    Tensor face = Tensor::leaf({1, 1, 2, 2}, {0, 0, 1, 1});
    Tensor occ = Tensor::leaf({1, 1, 2, 2}, {0, 1, 0, 1});
    Tensor inp = pairforge::compose_inpaint_mask(face, occ);
    bool ok = true;
    for (size_t i = 0; i < 4; ++i) {
        double f = face.value()[i], o = occ.value()[i];
        ok = ok && inp.value()[i] == 1.0 - f * (1.0 - o);
        ok = ok && inp.value()[i] == std::min(1.0, (1.0 - f) + o);
    }
    add_check(rep, "mask composition: definition and De Morgan form agree exhaustively", ok);
}

void check_rope_invariance(VerifyReport& rep, std::mt19937_64& rng) {
    ditcore::DiTConfig cfg;
    cfg.model_dim = 24;
    cfg.head_count = 2;
    auto rotate = [&](const Tensor& x, const std::array<long, 3>& pos) {
        auto [c, s] = ditcore::rope_tables({pos}, cfg);
        return add(mul(x, c), mul(rotate_half_pairs(x), s));
    };
    auto dot = [](const Tensor& a, const Tensor& b) {
        double acc = 0.0;
        for (size_t i = 0; i < a.size(); ++i) acc += a.value()[i] * b.value()[i];
        return acc;
    };
    bool ok = true;
    for (int rep_i = 0; rep_i < 5; ++rep_i) {
        Tensor q = rand_leaf({1, 24}, rng), k = rand_leaf({1, 24}, rng);
        std::array<long, 3> p1{(long)(rng() % 7), (long)(rng() % 7), (long)(rng() % 7)};
        std::array<long, 3> p2{(long)(rng() % 7), (long)(rng() % 7), (long)(rng() % 7)};
        std::array<long, 3> d{(long)(rng() % 5), (long)(rng() % 5), (long)(rng() % 5)};
        double base = dot(rotate(q, p1), rotate(k, p2));
        std::array<long, 3> p1s{p1[0] + d[0], p1[1] + d[1], p1[2] + d[2]};
        std::array<long, 3> p2s{p2[0] + d[0], p2[1] + d[1], p2[2] + d[2]};
        double moved = dot(rotate(q, p1s), rotate(k, p2s));
        ok = ok && std::abs(base - moved) <= 1e-9;
    }
    add_check(rep, "rotary positions: attention scores invariant to translation", ok);
}

void check_density_modes(VerifyReport& rep, std::mt19937_64& rng, bool sabotage) {
    const double pinned[3][2] = {{5.0, 0.921}, {1.5, 0.684}, {0.2, 0.079}};
    bool analytic_ok = true, hist_ok = true;
    std::string detail;
    for (auto [alpha, peak] : pinned) {
        double mode;
        if (!sabotage) {
            mode = flowmatch::shifted_density_mode(alpha, 0.0, 1.0);
        } else {
            // wrong Jacobian: evaluates the base density at the pulled-back
            // point without the change-of-variables factor
            mode = 0.0;
            double best = -1.0;
            for (double t = 1e-5; t < 1.0; t += 1e-5) {
                double t0 = flowmatch::timestep_shift(1.0 / alpha, t);
                double x = std::log(t0 / (1.0 - t0));
                double p = std::exp(-0.5 * x * x) / (t0 * (1.0 - t0));
                if (p > best) {
                    best = p;
                    mode = t;
                }
            }
        }
        double hist = flowmatch::shifted_histogram_mode(alpha, 0.0, 1.0, 200000, rng);
        analytic_ok = analytic_ok && std::abs(mode - peak) <= 0.03;
        hist_ok = hist_ok && std::abs(hist - mode) <= 0.03;
        std::ostringstream os;
        os << detail << "alpha " << alpha << ": mode " << mode << " hist " << hist << "; ";
        detail = os.str();
    }
    add_check(rep, "shifted density: analytic modes match pinned peaks within 0.03",
              analytic_ok, detail);
    add_check(rep, "shifted density: histogram mode matches analytic mode", hist_ok, detail);

    bool mono = true;
    double prev = -1.0;
    for (double alpha : {0.2, 0.4, 0.8, 1.5, 2.0, 3.0, 4.0, 5.0}) {
        double m = flowmatch::shifted_density_mode(alpha, 0.0, 1.0);
        mono = mono && m > prev;
        prev = m;
    }
    add_check(rep, "shifted density: modes strictly increasing in alpha", mono);
}

void check_gate_disjointness(VerifyReport& rep) {
    ditcore::DiTConfig cfg;
    ditcore::DiT model(cfg, 0);
    model.add_adapter("lip", 4, 0.4, 0.8, 1);
    model.add_adapter("texture", 4, 0.0, 0.3, 2);
    bool ok = true;
    for (int i = 0; i <= 1000; ++i) {
        double t = i / 1000.0;
        ok = ok && ditcore::gate_adapters(model.adapters, t).size() <= 1;
    }
    add_check(rep, "adapter gates: lip and texture windows never both active", ok);
}

}  // namespace

bool VerifyReport::all_pass() const {
    for (const auto& c : checks)
        if (!c.pass) return false;
    return true;
}

VerifyReport verify_oracles(const VerifyOptions& opt) {
    VerifyReport rep;
    std::mt19937_64 rng(opt.seed + 0x5eedULL);
    check_primitive_grads(rep, rng);
    check_block_grads(rep, rng);
    check_shift_algebra(rep);
    check_denoise_algebra(rep, rng);
    check_mask_algebra(rep);
    check_rope_invariance(rep, rng);
    check_density_modes(rep, rng, opt.sabotage_density);
    check_gate_disjointness(rep);
    return rep;
}

}  // namespace dubflow::evalcli
