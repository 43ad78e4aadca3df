#include "dubflow/dit.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <random>

namespace dubflow::ditcore {

using namespace numgrad;

void DiTConfig::validate() const {
    if (depth < 1) throw std::invalid_argument("DiTConfig: depth must be >= 1");
    if (model_dim % (2 * head_count) != 0)
        throw std::invalid_argument("DiTConfig: model_dim must be divisible by 2*head_count");
    if (patch_size < 1 || head_count < 1 || ffn_dim < 1 || audio_dim < 1 || in_channels < 1 ||
        out_channels < 1)
        throw std::invalid_argument("DiTConfig: sizes must be positive");
}

std::vector<const LoraAdapter*> gate_adapters(const std::vector<LoraAdapter>& adapters, double t,
                                              std::ostream* warn) {
    std::vector<const LoraAdapter*> active;
    for (const auto& a : adapters)
        if (a.t_lo <= t && t <= a.t_hi) active.push_back(&a);
    if (active.size() > 1 && warn) {
        *warn << "adapter windows overlap at t=" << t << ":";
        for (auto* a : active) *warn << " " << a->name;
        *warn << "\n";
    }
    return active;
}

Tensor patchify(const Tensor& video, int patch_size, PatchGrid* grid) {
    const Shape& s = video.shape();
    if (s.size() != 4 && s.size() != 5)
        throw std::invalid_argument("patchify: expected [f,c,h,w] or [b,f,c,h,w], got " +
                                    shape_str(s));
    size_t off = s.size() - 4;
    size_t f = s[off], c = s[off + 1], h = s[off + 2], w = s[off + 3];
    size_t p = (size_t)patch_size;
    if (h % p != 0 || w % p != 0)
        throw std::invalid_argument("patchify: extents " + shape_str(s) +
                                    " not divisible by patch size " + std::to_string(p));
    size_t gh = h / p, gw = w / p;
    if (grid) *grid = PatchGrid{gh, gw, f, patch_size};
    if (s.size() == 4) {
        Tensor x = reshape(video, {f, c, gh, p, gw, p});
        x = permute(x, {0, 2, 4, 1, 3, 5});
        return reshape(x, {f * gh * gw, c * p * p});
    }
    Tensor x = reshape(video, {s[0], f, c, gh, p, gw, p});
    x = permute(x, {0, 1, 3, 5, 2, 4, 6});
    return reshape(x, {s[0], f * gh * gw, c * p * p});
}

Tensor unpatchify(const Tensor& tokens, const PatchGrid& grid, size_t channels) {
    size_t p = (size_t)grid.patch_size;
    size_t f = grid.f_frames, gh = grid.h_patches, gw = grid.w_patches;
    const Shape& s = tokens.shape();
    if (s.back() != channels * p * p || numel(s) != f * gh * gw * channels * p * p * (s.size() == 3 ? s[0] : 1))
        throw std::invalid_argument("unpatchify: token shape " + shape_str(s) +
                                    " does not match grid");
    if (s.size() == 2) {
        Tensor x = reshape(tokens, {f, gh, gw, channels, p, p});
        x = permute(x, {0, 3, 1, 4, 2, 5});
        return reshape(x, {f, channels, gh * p, gw * p});
    }
    Tensor x = reshape(tokens, {s[0], f, gh, gw, channels, p, p});
    x = permute(x, {0, 1, 4, 2, 5, 3, 6});
    return reshape(x, {s[0], f, channels, gh * p, gw * p});
}

std::vector<std::array<long, 3>> rope_positions(const PatchGrid& grid, bool reference) {
    std::vector<std::array<long, 3>> pos;
    pos.reserve(grid.tokens());
    for (size_t k = 0; k < grid.f_frames; ++k)
        for (size_t i = 0; i < grid.h_patches; ++i)
            for (size_t j = 0; j < grid.w_patches; ++j) {
                long pi = (long)i + (reference ? (long)grid.h_patches : 0);
                long pj = (long)j + (reference ? (long)grid.w_patches : 0);
                pos.push_back({pi, pj, (long)k});
            }
    return pos;
}

Tensor build_audio_windows(const Tensor& features, size_t frames) {
    const Shape& s = features.shape();
    if (s.size() != 2) throw std::invalid_argument("build_audio_windows: expected [a, dim]");
    long a = (long)s[0];
    size_t dim = s[1];
    std::vector<double> out(frames * kAudioWindow * dim);
    for (size_t k = 0; k < frames; ++k) {
        long start = (long)k * kAudioPerVideo + kAudioPerVideo / 2 - kAudioWindow / 2;
        for (int i = 0; i < kAudioWindow; ++i) {
            long idx = std::clamp(start + i, 0l, a - 1);
            for (size_t d = 0; d < dim; ++d)
                out[(k * kAudioWindow + i) * dim + d] = features.value()[idx * dim + d];
        }
    }
    return Tensor::leaf({frames, (size_t)kAudioWindow, dim}, std::move(out));
}

// ---- model -------------------------------------------------------------------

namespace {

const char* kAttnNames[] = {"s2d", "s3d", "xa"};
const char* kProjNames[] = {"q", "k", "v", "o"};

Tensor init_mat(std::mt19937_64& rng, size_t in, size_t out, bool zero) {
    std::vector<double> v(in * out, 0.0);
    if (!zero) {
        std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt((double)in));
        for (auto& x : v) x = nd(rng);
    }
    return Tensor::leaf({in, out}, std::move(v), true);
}

Tensor zeros_vec(size_t n) { return Tensor::leaf({n}, std::vector<double>(n, 0.0), true); }

}  // namespace

DiT::DiT(const DiTConfig& cfg, uint64_t seed) : config(cfg) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    size_t dim = (size_t)cfg.model_dim;
    size_t in_dim = (size_t)cfg.in_channels * cfg.patch_size * cfg.patch_size;
    size_t out_dim = (size_t)cfg.out_channels * cfg.patch_size * cfg.patch_size;
    size_t mod_dim = (size_t)cfg.depth * 4 * 3 * dim + 2 * dim + out_dim;

    params["in.W"] = init_mat(rng, in_dim, dim, false);
    params["in.b"] = zeros_vec(dim);
    params["temb.W1"] = init_mat(rng, dim, dim, false);
    params["temb.b1"] = zeros_vec(dim);
    params["temb.W2"] = init_mat(rng, dim, mod_dim, true);  // zero: identity start
    params["temb.b2"] = zeros_vec(mod_dim);
    for (int u = 0; u < cfg.depth; ++u) {
        std::string pre = "u" + std::to_string(u) + ".";
        for (const char* s : kAttnNames) {
            bool cross = std::string(s) == "xa";
            size_t kv_in = cross ? (size_t)cfg.audio_dim : dim;
            params[pre + s + ".Wq"] = init_mat(rng, dim, dim, false);
            params[pre + s + ".Wk"] = init_mat(rng, kv_in, dim, false);
            params[pre + s + ".Wv"] = init_mat(rng, kv_in, dim, false);
            params[pre + s + ".Wo"] = init_mat(rng, dim, dim, false);
            if (!cross) {  // cross-attention is bias-free so zero features mean zero output
                params[pre + s + ".bq"] = zeros_vec(dim);
                params[pre + s + ".bk"] = zeros_vec(dim);
                params[pre + s + ".bv"] = zeros_vec(dim);
                params[pre + s + ".bo"] = zeros_vec(dim);
            }
        }
        params[pre + "ffn.W1"] = init_mat(rng, dim, (size_t)cfg.ffn_dim, false);
        params[pre + "ffn.b1"] = zeros_vec((size_t)cfg.ffn_dim);
        params[pre + "ffn.W2"] = init_mat(rng, (size_t)cfg.ffn_dim, dim, false);
        params[pre + "ffn.b2"] = zeros_vec(dim);
    }
    params["out.W"] = init_mat(rng, dim, out_dim, true);  // zero: v_hat = 0 at init
    params["out.b"] = zeros_vec(out_dim);
    // full-width token skip: lets the velocity read the input patch directly
    // instead of squeezing per-pixel noise through model_dim
    params["skip.W"] = init_mat(rng, in_dim, out_dim, true);
}

LoraAdapter& DiT::add_adapter(const std::string& name, int rank, double t_lo, double t_hi,
                              uint64_t seed, double scale) {
    if (!(0.0 <= t_lo && t_lo < t_hi && t_hi <= 1.0))
        throw std::invalid_argument("add_adapter: window must satisfy 0 <= lo < hi <= 1");
    if (rank < 1 || rank > config.model_dim)
        throw std::invalid_argument("add_adapter: rank out of range");
    std::mt19937_64 rng(seed);
    LoraAdapter ad;
    ad.name = name;
    ad.rank = rank;
    ad.scale = scale;
    ad.t_lo = t_lo;
    ad.t_hi = t_hi;
    size_t dim = (size_t)config.model_dim;
    for (int u = 0; u < config.depth; ++u)
        for (const char* s : kAttnNames)
            for (const char* p : kProjNames) {
                std::string key = "u" + std::to_string(u) + "." + s + "." + p;
                bool cross_kv = std::string(s) == "xa" &&
                                (std::string(p) == "k" || std::string(p) == "v");
                size_t in = cross_kv ? (size_t)config.audio_dim : dim;
                ad.down[key] = init_mat(rng, in, (size_t)rank, false);
                ad.up[key] = init_mat(rng, (size_t)rank, dim, true);
            }
    adapters.push_back(std::move(ad));
    return adapters.back();
}

const LoraAdapter* DiT::find_adapter(const std::string& name) const {
    for (const auto& a : adapters)
        if (a.name == name) return &a;
    return nullptr;
}

std::vector<Tensor> DiT::trainable(const std::string& scope) {
    std::vector<Tensor> out;
    if (scope == "full") {
        for (auto& [k, v] : params) out.push_back(v);
        return out;
    }
    for (auto& a : adapters)
        if (a.name == scope) {
            for (auto& [k, v] : a.down) out.push_back(v);
            for (auto& [k, v] : a.up) out.push_back(v);
            return out;
        }
    throw std::invalid_argument("trainable: unknown scope '" + scope + "'");
}

namespace {

void rope_tables_raw(const std::vector<std::array<long, 3>>& pos, const DiTConfig& cfg,
                     std::vector<double>& cos_t, std::vector<double>& sin_t) {
    size_t dim = (size_t)cfg.model_dim, H = (size_t)cfg.head_count;
    size_t hd = dim / H, pairs = hd / 2, per_axis = pairs / 3;
    size_t n = pos.size();
    cos_t.assign(n * dim, 1.0);
    sin_t.assign(n * dim, 0.0);
    for (size_t t = 0; t < n; ++t)
        for (size_t p = 0; p < pairs; ++p) {
            if (per_axis == 0 || p >= 3 * per_axis) continue;
            size_t axis = p / per_axis, q = p % per_axis;
            double theta = std::pow(cfg.rope_base, -(double)q / (double)per_axis);
            double ang = (double)pos[t][axis] * theta;
            double c = std::cos(ang), s = std::sin(ang);
            for (size_t h = 0; h < H; ++h) {
                size_t base = t * dim + h * hd + 2 * p;
                cos_t[base] = c;
                cos_t[base + 1] = c;
                sin_t[base] = s;
                sin_t[base + 1] = s;
            }
        }
}

Tensor sinusoid_embed(double t, size_t dim) {
    std::vector<double> e(dim);
    size_t half = dim / 2;
    for (size_t i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * (double)i / (double)half);
        e[2 * i] = std::sin(1000.0 * t * freq);
        e[2 * i + 1] = std::cos(1000.0 * t * freq);
    }
    // explicit t and 1/t features: the velocity's dependence on the noised
    // input carries a 1/t factor, and the modulation MLP picks it up much
    // faster as a linear readout than synthesized from sinusoids
    if (dim >= 2) {
        e[dim - 2] = t;
        e[dim - 1] = 1.0 / t;
    }
    return Tensor::leaf({1, dim}, std::move(e));
}

}  // namespace

std::pair<Tensor, Tensor> rope_tables(const std::vector<std::array<long, 3>>& positions,
                                      const DiTConfig& cfg) {
    std::vector<double> c, s;
    rope_tables_raw(positions, cfg, c, s);
    size_t n = positions.size(), dim = (size_t)cfg.model_dim;
    return {Tensor::leaf({n, dim}, std::move(c)), Tensor::leaf({n, dim}, std::move(s))};
}

Tensor DiT::forward(const Tensor& z_in, double t, const Tensor* audio_windows,
                    const Layout& layout,
                    const std::vector<const LoraAdapter*>& active) const {
    const Shape& zs = z_in.shape();
    if (zs.size() != 4)
        throw std::invalid_argument("dit_forward: expected [F,c,h,w], got " + shape_str(zs));
    size_t F = zs[0];
    if (F != layout.role.size() || zs[2] != layout.height || zs[3] != layout.width ||
        zs[1] != (size_t)config.in_channels)
        throw std::invalid_argument("dit_forward: input stack does not match layout");
    if (t <= 0.0 || t > 1.0) throw std::invalid_argument("dit_forward: t out of (0,1]");

    PatchGrid grid;
    Tensor tok = patchify(z_in, config.patch_size, &grid);
    size_t dim = (size_t)config.model_dim, H = (size_t)config.head_count, hd = dim / H;
    size_t T = grid.tokens_per_frame(), N = grid.tokens();

    if (audio_windows) {
        const Shape& as = audio_windows->shape();
        if (as.size() != 3 || as[1] != (size_t)kAudioWindow || as[2] != (size_t)config.audio_dim)
            throw std::invalid_argument("dit_forward: bad audio window shape " + shape_str(as));
        for (int af : layout.audio_frame)
            if (af >= (long)as[0])
                throw std::invalid_argument("dit_forward: audio window index out of range");
    }

    auto P = [&](const std::string& k) -> const Tensor& {
        auto it = params.find(k);
        if (it == params.end()) throw std::logic_error("missing parameter " + k);
        return it->second;
    };

    // rotary tables for the whole stack
    std::vector<std::array<long, 3>> pos;
    pos.reserve(N);
    for (size_t s = 0; s < F; ++s) {
        PatchGrid g1{grid.h_patches, grid.w_patches, 1, config.patch_size};
        auto fp = rope_positions(g1, layout.role[s] == 1);
        for (auto& p : fp) pos.push_back({p[0], p[1], layout.time_index[s]});
    }
    std::vector<double> cos_v, sin_v;
    rope_tables_raw(pos, config, cos_v, sin_v);
    Tensor cos_t = Tensor::leaf({N, dim}, std::move(cos_v));
    Tensor sin_t = Tensor::leaf({N, dim}, std::move(sin_v));
    auto apply_rope = [&](const Tensor& x) {
        return add(mul(x, cos_t), mul(rotate_half_pairs(x), sin_t));
    };

    Tensor x = bias_add(matmul(tok, P("in.W")), P("in.b"));

    // timestep modulation vector
    Tensor mod = bias_add(matmul(gelu(bias_add(matmul(sinusoid_embed(t, dim), P("temb.W1")),
                                               P("temb.b1"))),
                                 P("temb.W2")),
                          P("temb.b2"));
    size_t mod_at = 0;
    auto next_mod = [&]() {
        Tensor v = reshape(slice(mod, 1, mod_at, dim), {dim});
        mod_at += dim;
        return v;
    };

    auto proj = [&](const Tensor& h, const std::string& wkey, const std::string& bkey,
                    const std::string& lkey) {
        Tensor y = matmul(h, P(wkey));
        if (!bkey.empty()) y = bias_add(y, P(bkey));
        for (auto* ad : active) {
            auto it = ad->down.find(lkey);
            if (it == ad->down.end()) continue;
            y = add(y, scale(matmul(matmul(h, it->second), ad->up.at(lkey)), ad->scale));
        }
        return y;
    };

    auto heads_split = [&](const Tensor& m, size_t G, size_t Tg) {
        return reshape(permute(reshape(m, {G, Tg, H, hd}), {0, 2, 1, 3}), {G * H, Tg, hd});
    };
    auto heads_merge = [&](const Tensor& m, size_t G, size_t Tg) {
        return reshape(permute(reshape(m, {G, H, Tg, hd}), {0, 2, 1, 3}), {G * Tg, dim});
    };

    for (int u = 0; u < config.depth; ++u) {
        std::string pre = "u" + std::to_string(u) + ".";

        // self-attention: groups = frame slots (2D) then the whole stack (3D)
        for (const char* sname : {"s2d", "s3d"}) {
            Tensor shift = next_mod(), scl = next_mod(), gate = next_mod();
            Tensor h = bias_add(mul_lastdim(layer_norm_lastdim(x), add_scalar(scl, 1.0)), shift);
            std::string sp = pre + sname;
            Tensor q = apply_rope(proj(h, sp + ".Wq", sp + ".bq", sp + ".q"));
            Tensor k = apply_rope(proj(h, sp + ".Wk", sp + ".bk", sp + ".k"));
            Tensor v = proj(h, sp + ".Wv", sp + ".bv", sp + ".v");
            size_t G = std::string(sname) == "s2d" ? F : 1;
            size_t Tg = N / G;
            Tensor qh = heads_split(q, G, Tg), kh = heads_split(k, G, Tg),
                   vh = heads_split(v, G, Tg);
            Tensor att = softmax_lastdim(
                scale(matmul(qh, transpose_last2(kh)), 1.0 / std::sqrt((double)hd)));
            Tensor o = heads_merge(matmul(att, vh), G, Tg);
            o = proj(o, sp + ".Wo", sp + ".bo", sp + ".o");
            x = add(x, mul_lastdim(o, gate));
        }

        // audio cross-attention on slots that carry an audio window
        {
            Tensor shift = next_mod(), scl = next_mod(), gate = next_mod();
            if (audio_windows) {
                Tensor h =
                    bias_add(mul_lastdim(layer_norm_lastdim(x), add_scalar(scl, 1.0)), shift);
                std::string sp = pre + "xa";
                Tensor q = proj(h, sp + ".Wq", "", sp + ".q");
                size_t n = (size_t)kAudioWindow, ad = (size_t)config.audio_dim;
                size_t aframes = audio_windows->shape()[0];
                Tensor flat = reshape(*audio_windows, {aframes * n, ad});
                Tensor kw = reshape(proj(flat, sp + ".Wk", "", sp + ".k"), {aframes, n, dim});
                Tensor vw = reshape(proj(flat, sp + ".Wv", "", sp + ".v"), {aframes, n, dim});
                std::vector<Tensor> outs;
                for (size_t s = 0; s < F; ++s) {
                    if (layout.audio_frame[s] < 0) {
                        outs.push_back(Tensor::zeros({T, dim}));
                        continue;
                    }
                    size_t af = (size_t)layout.audio_frame[s];
                    Tensor qs = permute(reshape(slice(q, 0, s * T, T), {T, H, hd}), {1, 0, 2});
                    Tensor ks =
                        permute(reshape(slice(kw, 0, af, 1), {n, H, hd}), {1, 0, 2});
                    Tensor vs =
                        permute(reshape(slice(vw, 0, af, 1), {n, H, hd}), {1, 0, 2});
                    Tensor att = softmax_lastdim(
                        scale(matmul(qs, transpose_last2(ks)), 1.0 / std::sqrt((double)hd)));
                    Tensor os = reshape(permute(matmul(att, vs), {1, 0, 2}), {T, dim});
                    outs.push_back(os);
                }
                Tensor o = proj(concat(outs, 0), sp + ".Wo", "", sp + ".o");
                x = add(x, mul_lastdim(o, gate));
            }
        }

        // feed-forward
        {
            Tensor shift = next_mod(), scl = next_mod(), gate = next_mod();
            Tensor h = bias_add(mul_lastdim(layer_norm_lastdim(x), add_scalar(scl, 1.0)), shift);
            Tensor o = bias_add(
                matmul(gelu(bias_add(matmul(h, P(pre + "ffn.W1")), P(pre + "ffn.b1"))),
                       P(pre + "ffn.W2")),
                P(pre + "ffn.b2"));
            x = add(x, mul_lastdim(o, gate));
        }
    }

    Tensor fshift = next_mod(), fscl = next_mod();
    x = bias_add(mul_lastdim(layer_norm_lastdim(x), add_scalar(fscl, 1.0)), fshift);
    // skip gate is timestep-conditioned: the velocity's direct dependence on
    // the input patch scales with 1/t, which the gate reads off the explicit
    // timestep features
    size_t out_dim = (size_t)config.out_channels * config.patch_size * config.patch_size;
    Tensor sgate = reshape(slice(mod, 1, mod_at, out_dim), {out_dim});
    Tensor out_tok = add(bias_add(matmul(x, P("out.W")), P("out.b")),
                         mul_lastdim(matmul(tok, P("skip.W")), add_scalar(sgate, 1.0)));

    // keep target slots only
    std::vector<Tensor> kept;
    size_t n_tgt = 0;
    for (size_t s = 0; s < F; ++s)
        if (layout.role[s] == 0) {
            kept.push_back(slice(out_tok, 0, s * T, T));
            ++n_tgt;
        }
    if (kept.empty()) throw std::invalid_argument("dit_forward: layout has no target slots");
    Tensor tgt = kept.size() == 1 ? kept[0] : concat(kept, 0);
    PatchGrid out_grid{grid.h_patches, grid.w_patches, n_tgt, config.patch_size};
    return unpatchify(tgt, out_grid, (size_t)config.out_channels);
}

Tensor DiT::forward_batch(const Tensor& z_in, double t, const Tensor* audio_windows,
                          const Layout& layout,
                          const std::vector<const LoraAdapter*>& active) const {
    const Shape& s = z_in.shape();
    if (s.size() != 5)
        throw std::invalid_argument("forward_batch: expected [b,F,c,h,w], got " + shape_str(s));
    std::vector<Tensor> outs;
    for (size_t b = 0; b < s[0]; ++b) {
        Tensor zb = reshape(slice(z_in, 0, b, 1), {s[1], s[2], s[3], s[4]});
        Tensor o = forward(zb, t, audio_windows, layout, active);
        Shape os = o.shape();
        outs.push_back(reshape(o, {(size_t)1, os[0], os[1], os[2], os[3]}));
    }
    return outs.size() == 1 ? outs[0] : concat(outs, 0);
}

void DiT::save(const std::string& path) const {
    TensorStore st;
    std::vector<double> cfg = {(double)config.depth,      (double)config.model_dim,
                               (double)config.head_count, (double)config.ffn_dim,
                               (double)config.patch_size, (double)config.audio_dim,
                               config.rope_base,          (double)config.in_channels,
                               (double)config.out_channels};
    st.put("config", Tensor::leaf({cfg.size()}, cfg));
    for (const auto& [k, v] : params) st.put("param/" + k, v);
    for (const auto& a : adapters) {
        std::string pre = "lora/" + a.name + "/";
        st.put(pre + "meta",
               Tensor::leaf({4}, {(double)a.rank, a.scale, a.t_lo, a.t_hi}));
        for (const auto& [k, v] : a.down) st.put(pre + k + "/down", v);
        for (const auto& [k, v] : a.up) st.put(pre + k + "/up", v);
    }
    st.save(path);
}

DiT DiT::load(const std::string& path) {
    TensorStore st = TensorStore::load(path);
    const auto& c = st.at("config").value();
    DiTConfig cfg;
    cfg.depth = (int)c[0];
    cfg.model_dim = (int)c[1];
    cfg.head_count = (int)c[2];
    cfg.ffn_dim = (int)c[3];
    cfg.patch_size = (int)c[4];
    cfg.audio_dim = (int)c[5];
    cfg.rope_base = c[6];
    cfg.in_channels = (int)c[7];
    cfg.out_channels = (int)c[8];
    DiT model(cfg, 0);
    for (auto& [k, v] : model.params) {
        Tensor loaded = st.at("param/" + k);
        if (loaded.shape() != v.shape())
            throw std::invalid_argument("checkpoint parameter shape mismatch at " + k);
        v.raw_value() = loaded.value();
    }
    // adapters: discover names from the index
    std::map<std::string, bool> names;
    for (const auto& [key, t] : st.items)
        if (key.rfind("lora/", 0) == 0) {
            size_t end = key.find('/', 5);
            names[key.substr(5, end - 5)] = true;
        }
    for (const auto& [name, _] : names) {
        const auto& meta = st.at("lora/" + name + "/meta").value();
        LoraAdapter& ad =
            model.add_adapter(name, (int)meta[0], meta[2], meta[3], 0, meta[1]);
        for (auto& [k, v] : ad.down) v.raw_value() = st.at("lora/" + name + "/" + k + "/down").value();
        for (auto& [k, v] : ad.up) v.raw_value() = st.at("lora/" + name + "/" + k + "/up").value();
    }
    return model;
}

}  // namespace dubflow::ditcore
