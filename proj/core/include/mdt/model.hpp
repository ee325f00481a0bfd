#pragma once

// The policy network: per-view patch-MLP observation encoders, image/language
// goal embedders, an optional perceiver resampler, a transformer encoder that
// emits latent state tokens, and a causal diffusion-transformer decoder whose
// blocks are adaLN-modulated by the noise embedding. The decoder is wrapped
// in EDM preconditioning.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mdt/diffusion.hpp"
#include "mdt/rng.hpp"
#include "mdt/tensor.hpp"

namespace mdt {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct MgfConfig {
    size_t layers = 2;
    size_t hidden = 64;
    double mask_ratio = 0.75;
    size_t foresight = 3;  // v
    bool norm_pixel = true;
};

struct ClaConfig {
    enum class Pool { SingleToken, Map };
    Pool pool = Pool::SingleToken;
    double temperature = 0.1;
};

struct ModelConfig {
    size_t embed_dim = 64;
    size_t encoder_layers = 2;
    size_t decoder_layers = 2;
    size_t heads = 4;
    size_t action_dim = 3;
    size_t chunk_len = 10;
    size_t n_latent_tokens = 3;
    size_t vocab_size = 32;
    size_t image_size = 32;
    size_t patch_size = 8;
    size_t views = 2;
    size_t mlp_ratio = 4;
    size_t proprio_dim = 11;
    bool use_proprio = true;
    bool use_resampler = false;
    size_t resampler_layers = 1;
    bool use_adaln = true;    // false: noise embedding joins the encoder tokens instead
    bool use_encoder = true;  // false: identity encoder (decoder-only ablation)
    double dropout = 0.0;
    MgfConfig mgf;
    ClaConfig cla;

    size_t patches_per_view() const {
        const size_t n = image_size / patch_size;
        return n * n;
    }
    size_t patch_dim() const { return patch_size * patch_size; }
    size_t obs_token_count() const { return use_resampler ? n_latent_tokens : views; }
    // Tokens entering the encoder: observation tokens, optional proprio, goal,
    // plus the noise token slot in the no-adaLN ablation.
    size_t encoder_token_count() const {
        return obs_token_count() + (use_proprio ? 1 : 0) + 1 + (use_adaln ? 0 : 1);
    }

    void validate() const {
        if (embed_dim == 0 || embed_dim % heads != 0) throw ContractError("ModelConfig: embed_dim % heads != 0");
        if (chunk_len < 1) throw ContractError("ModelConfig: chunk_len must be >= 1");
        if (image_size % patch_size != 0) throw ContractError("ModelConfig: image_size % patch_size != 0");
        if (mgf.hidden == 0 || vocab_size == 0) throw ContractError("ModelConfig: zero-sized component");
    }
};

// ---------------------------------------------------------------------------
// Parameter registry and primitive modules
// ---------------------------------------------------------------------------

template <typename T>
struct ParamSet {
    std::vector<std::pair<std::string, TensorT<T>>> items;

    TensorT<T> add(const std::string& name, TensorT<T> t) {
        t.set_requires_grad(true);
        items.emplace_back(name, t);
        return t;
    }
    TensorT<T>* find(const std::string& name) {
        for (auto& [n, t] : items)
            if (n == name) return &t;
        return nullptr;
    }
    size_t total_params() const {
        size_t n = 0;
        for (const auto& [_, t] : items) n += t.numel();
        return n;
    }
    void zero_grad() {
        for (auto& [_, t] : items) t.zero_grad();
    }
};

template <typename T>
struct Linear {
    TensorT<T> w;  // [in, out]
    TensorT<T> b;  // [out]
    TensorT<T> forward(const TensorT<T>& x) const { return add(matmul(x, w), b); }
};

template <typename T>
Linear<T> make_linear(ParamSet<T>& ps, const std::string& name, size_t in, size_t out, Rng& rng,
                      bool zero_init = false) {
    Linear<T> l;
    const T std = zero_init ? T(0) : static_cast<T>(1.0 / std::sqrt(static_cast<double>(in)));
    l.w = ps.add(name + ".w", TensorT<T>::randn(rng, {in, out}, std));
    l.b = ps.add(name + ".b", TensorT<T>::zeros({out}));
    return l;
}

template <typename T>
struct LayerNormW {
    TensorT<T> gain, bias;
    TensorT<T> forward(const TensorT<T>& x) const { return layer_norm(x, gain, bias, T(1e-5)); }
};

template <typename T>
LayerNormW<T> make_layer_norm(ParamSet<T>& ps, const std::string& name, size_t d) {
    LayerNormW<T> ln;
    ln.gain = ps.add(name + ".gain", TensorT<T>::full({d}, T(1)));
    ln.bias = ps.add(name + ".bias", TensorT<T>::zeros({d}));
    return ln;
}

// Plain (non-affine) layer norm used inside adaLN blocks.
template <typename T>
TensorT<T> plain_layer_norm(const TensorT<T>& x) {
    const size_t d = x.dim(x.rank() - 1);
    return layer_norm(x, TensorT<T>::full({d}, T(1)), TensorT<T>::zeros({d}), T(1e-5));
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

template <typename T>
struct Mha {
    Linear<T> q, k, v, o;
    size_t heads = 1;

    // xq [B,Nq,D], xkv [B,Nk,D]; mask (optional) additive [Nq,Nk].
    TensorT<T> forward(const TensorT<T>& xq, const TensorT<T>& xkv, const TensorT<T>* mask) const {
        const size_t B = xq.dim(0), nq = xq.dim(1), d = xq.dim(2);
        const size_t nk = xkv.dim(1);
        const size_t hd = d / heads;
        auto split = [&](const TensorT<T>& x, size_t n) {
            return reshape(permute(reshape(x, {B, n, heads, hd}), {0, 2, 1, 3}), {B * heads, n, hd});
        };
        TensorT<T> qh = split(q.forward(xq), nq);
        TensorT<T> kh = split(k.forward(xkv), nk);
        TensorT<T> vh = split(v.forward(xkv), nk);
        TensorT<T> scores = scale(bmm_nt(qh, kh), static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
        if (mask) scores = add(scores, *mask);
        TensorT<T> ctx = bmm(softmax(scores), vh);
        TensorT<T> merged = reshape(permute(reshape(ctx, {B, heads, nq, hd}), {0, 2, 1, 3}), {B, nq, d});
        return o.forward(merged);
    }
};

template <typename T>
Mha<T> make_mha(ParamSet<T>& ps, const std::string& name, size_t d, size_t heads, Rng& rng) {
    Mha<T> m;
    m.q = make_linear(ps, name + ".q", d, d, rng);
    m.k = make_linear(ps, name + ".k", d, d, rng);
    m.v = make_linear(ps, name + ".v", d, d, rng);
    m.o = make_linear(ps, name + ".o", d, d, rng);
    m.heads = heads;
    return m;
}

// Additive causal mask: position i may attend to positions <= i.
template <typename T>
TensorT<T> causal_mask(size_t n) {
    TensorT<T> m({n, n});
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) m.data()[i * n + j] = T(-1e30);
    return m;
}

// ---------------------------------------------------------------------------
// Transformer blocks
// ---------------------------------------------------------------------------

template <typename T>
struct EncoderBlock {
    LayerNormW<T> ln1, ln2;
    Mha<T> attn;
    Linear<T> fc1, fc2;

    TensorT<T> forward(const TensorT<T>& x, const TensorT<T>* mask = nullptr) const {
        TensorT<T> h = add(x, attn.forward(ln1.forward(x), ln1.forward(x), mask));
        return add(h, fc2.forward(gelu(fc1.forward(ln2.forward(h)))));
    }
};

template <typename T>
EncoderBlock<T> make_encoder_block(ParamSet<T>& ps, const std::string& name, size_t d, size_t heads, size_t ratio,
                                   Rng& rng) {
    EncoderBlock<T> b;
    b.ln1 = make_layer_norm(ps, name + ".ln1", d);
    b.ln2 = make_layer_norm(ps, name + ".ln2", d);
    b.attn = make_mha(ps, name + ".attn", d, heads, rng);
    b.fc1 = make_linear(ps, name + ".fc1", d, d * ratio, rng);
    b.fc2 = make_linear(ps, name + ".fc2", d * ratio, d, rng);
    return b;
}

// Decoder block: causal self-attention, cross-attention onto the latent
// tokens, and an MLP. With adaLN each sublayer computes
//   x + g . Sub(LN(x) (1 + gamma) + beta)
// from a zero-initialized per-block head over the noise embedding; without
// adaLN the block is a plain pre-norm stack.
template <typename T>
struct DecoderBlock {
    Mha<T> self_attn, cross_attn;
    Linear<T> fc1, fc2;
    Linear<T> cond;  // [D, 9D], zero-initialized; used only with adaLN
    bool adaln = true;

    TensorT<T> forward(const TensorT<T>& x_in, const TensorT<T>& mem, const TensorT<T>* cond_vec,
                       const TensorT<T>& mask) const {
        const size_t B = x_in.dim(0), k = x_in.dim(1), d = x_in.dim(2);
        TensorT<T> x = x_in;
        if (!adaln || !cond_vec) {
            x = add(x, self_attn.forward(plain_layer_norm(x), plain_layer_norm(x), &mask));
            x = add(x, cross_attn.forward(plain_layer_norm(x), mem, nullptr));
            return add(x, fc2.forward(gelu(fc1.forward(plain_layer_norm(x)))));
        }
        TensorT<T> c9 = cond.forward(*cond_vec);  // [B, 9D]
        auto piece = [&](size_t i) {
            return repeat_axis(reshape(slice(c9, 1, i * d, d), {B, 1, d}), 1, k);
        };
        auto modulated = [&](const TensorT<T>& h, size_t base) {
            return add(mul(plain_layer_norm(h), add_scalar(piece(base), T(1))), piece(base + 1));
        };
        x = add(x, mul(piece(2), self_attn.forward(modulated(x, 0), modulated(x, 0), &mask)));
        x = add(x, mul(piece(5), cross_attn.forward(modulated(x, 3), mem, nullptr)));
        return add(x, mul(piece(8), fc2.forward(gelu(fc1.forward(modulated(x, 6))))));
    }
};

template <typename T>
DecoderBlock<T> make_decoder_block(ParamSet<T>& ps, const std::string& name, size_t d, size_t heads, size_t ratio,
                                   bool adaln, Rng& rng) {
    DecoderBlock<T> b;
    b.self_attn = make_mha(ps, name + ".self", d, heads, rng);
    b.cross_attn = make_mha(ps, name + ".cross", d, heads, rng);
    b.fc1 = make_linear(ps, name + ".fc1", d, d * ratio, rng);
    b.fc2 = make_linear(ps, name + ".fc2", d * ratio, d, rng);
    b.adaln = adaln;
    if (adaln) b.cond = make_linear(ps, name + ".cond", d, 9 * d, rng, /*zero_init=*/true);
    return b;
}

// ---------------------------------------------------------------------------
// Perceiver resampler
// ---------------------------------------------------------------------------

template <typename T>
struct ResamplerBlock {
    LayerNormW<T> lnq, lnkv, ln2;
    Mha<T> cross;
    Linear<T> fc1, fc2;

    TensorT<T> forward(const TensorT<T>& lat, const TensorT<T>& inputs) const {
        TensorT<T> h = add(lat, cross.forward(lnq.forward(lat), lnkv.forward(inputs), nullptr));
        return add(h, fc2.forward(gelu(fc1.forward(ln2.forward(h)))));
    }
};

template <typename T>
struct Resampler {
    TensorT<T> latents;  // [n_latents, D]
    std::vector<ResamplerBlock<T>> blocks;

    // inputs [B, N, D] -> [B, n_latents, D]; no positional encoding is added
    // to the inputs, so the output is permutation invariant over them.
    TensorT<T> forward(const TensorT<T>& inputs) const {
        const size_t B = inputs.dim(0);
        TensorT<T> lat = repeat_axis(reshape(latents, {1, latents.dim(0), latents.dim(1)}), 0, B);
        for (const auto& blk : blocks) lat = blk.forward(lat, inputs);
        return lat;
    }
};

// ---------------------------------------------------------------------------
// Sub-modules
// ---------------------------------------------------------------------------

template <typename T>
struct ObsEncoderView {
    Linear<T> patch_embed;
    TensorT<T> pos;  // [P, D]
    LayerNormW<T> ln1, ln_out;
    Linear<T> fc1, fc2;

    // patches [B, P, pdim] -> per-patch tokens [B, P, D]
    TensorT<T> tokens(const TensorT<T>& patches) const {
        TensorT<T> x = add(patch_embed.forward(patches), pos);
        x = add(x, fc2.forward(gelu(fc1.forward(ln1.forward(x)))));
        return ln_out.forward(x);
    }
    // pooled single observation token [B, D]
    TensorT<T> pooled(const TensorT<T>& patches) const { return mean_axis(tokens(patches), 1); }
};

template <typename T>
struct GoalEncoders {
    Linear<T> img_patch_embed;  // [pdim, D]
    Linear<T> img_proj;         // [D, D]
    TensorT<T> lang_table;      // [V, D]
    Linear<T> lang_proj;        // [D, D]
};

template <typename T>
struct NoiseEmbed {
    Linear<T> fc1, fc2;
};

template <typename T>
struct MgfDecoder {
    Linear<T> ctx_proj;     // [D, hidden]
    Linear<T> patch_embed;  // [pdim, hidden]
    TensorT<T> mask_token;  // [hidden]
    TensorT<T> pos;         // [P, hidden]
    std::vector<EncoderBlock<T>> blocks;
    LayerNormW<T> ln_out;
    Linear<T> head;  // [hidden, pdim]
};

template <typename T>
struct MapPool {
    TensorT<T> query;  // [D]
    Linear<T> k, v;    // value projection is the output space; no out-proj
    size_t heads = 1;
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

template <typename T>
struct Model {
    ModelConfig cfg;
    ParamSet<T> params;

    std::vector<ObsEncoderView<T>> obs_views;
    Linear<T> proprio_embed;
    GoalEncoders<T> goal;
    Resampler<T> resampler;
    TensorT<T> token_type;  // [encoder_token_count, D]
    std::vector<EncoderBlock<T>> encoder;
    LayerNormW<T> encoder_ln;
    NoiseEmbed<T> noise_embed_mlp;
    Linear<T> action_in;
    TensorT<T> action_pos;  // [k, D]
    std::vector<DecoderBlock<T>> decoder;
    LayerNormW<T> decoder_ln;
    Linear<T> action_out;
    MgfDecoder<T> mgf;
    MapPool<T> map_pool_w;

    mutable size_t encoder_calls = 0;
    mutable size_t decoder_calls = 0;
};

template <typename T>
Model<T> build_model(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    Model<T> m;
    m.cfg = cfg;
    ParamSet<T>& ps = m.params;
    const size_t d = cfg.embed_dim;
    const size_t pd = cfg.patch_dim();
    const size_t P = cfg.patches_per_view();

    for (size_t v = 0; v < cfg.views; ++v) {
        ObsEncoderView<T> ov;
        const std::string base = "obs.view" + std::to_string(v);
        ov.patch_embed = make_linear(ps, base + ".patch_embed", pd, d, rng);
        ov.pos = ps.add(base + ".pos", TensorT<T>::randn(rng, {P, d}, T(0.02)));
        ov.ln1 = make_layer_norm(ps, base + ".ln1", d);
        ov.fc1 = make_linear(ps, base + ".fc1", d, d * cfg.mlp_ratio, rng);
        ov.fc2 = make_linear(ps, base + ".fc2", d * cfg.mlp_ratio, d, rng);
        ov.ln_out = make_layer_norm(ps, base + ".ln_out", d);
        m.obs_views.push_back(std::move(ov));
    }
    if (cfg.use_proprio) m.proprio_embed = make_linear(ps, "proprio", cfg.proprio_dim, d, rng);

    m.goal.img_patch_embed = make_linear(ps, "goal.img_patch_embed", pd, d, rng);
    m.goal.img_proj = make_linear(ps, "goal.img_proj", d, d, rng);
    m.goal.lang_table = ps.add("goal.lang_table", TensorT<T>::randn(rng, {cfg.vocab_size, d}, T(0.02)));
    m.goal.lang_proj = make_linear(ps, "goal.lang_proj", d, d, rng);

    if (cfg.use_resampler) {
        m.resampler.latents = ps.add("resampler.latents", TensorT<T>::randn(rng, {cfg.n_latent_tokens, d}, T(0.02)));
        for (size_t l = 0; l < cfg.resampler_layers; ++l) {
            ResamplerBlock<T> rb;
            const std::string base = "resampler.block" + std::to_string(l);
            rb.lnq = make_layer_norm(ps, base + ".lnq", d);
            rb.lnkv = make_layer_norm(ps, base + ".lnkv", d);
            rb.ln2 = make_layer_norm(ps, base + ".ln2", d);
            rb.cross = make_mha(ps, base + ".cross", d, cfg.heads, rng);
            rb.fc1 = make_linear(ps, base + ".fc1", d, d * cfg.mlp_ratio, rng);
            rb.fc2 = make_linear(ps, base + ".fc2", d * cfg.mlp_ratio, d, rng);
            m.resampler.blocks.push_back(std::move(rb));
        }
    }

    m.token_type = ps.add("encoder.token_type", TensorT<T>::randn(rng, {cfg.encoder_token_count(), d}, T(0.02)));
    for (size_t l = 0; l < cfg.encoder_layers; ++l)
        m.encoder.push_back(make_encoder_block(ps, "encoder.block" + std::to_string(l), d, cfg.heads,
                                               cfg.mlp_ratio, rng));
    if (cfg.encoder_layers > 0) m.encoder_ln = make_layer_norm(ps, "encoder.ln", d);

    m.noise_embed_mlp.fc1 = make_linear(ps, "noise.fc1", d, d, rng);
    m.noise_embed_mlp.fc2 = make_linear(ps, "noise.fc2", d, d, rng);

    m.action_in = make_linear(ps, "decoder.action_in", cfg.action_dim, d, rng);
    m.action_pos = ps.add("decoder.action_pos", TensorT<T>::randn(rng, {cfg.chunk_len, d}, T(0.02)));
    for (size_t l = 0; l < cfg.decoder_layers; ++l)
        m.decoder.push_back(make_decoder_block(ps, "decoder.block" + std::to_string(l), d, cfg.heads,
                                               cfg.mlp_ratio, cfg.use_adaln, rng));
    m.decoder_ln = make_layer_norm(ps, "decoder.ln", d);
    m.action_out = make_linear(ps, "decoder.action_out", d, cfg.action_dim, rng, /*zero_init=*/true);

    const size_t h = cfg.mgf.hidden;
    m.mgf.ctx_proj = make_linear(ps, "mgf.ctx_proj", d, h, rng);
    m.mgf.patch_embed = make_linear(ps, "mgf.patch_embed", pd, h, rng);
    m.mgf.mask_token = ps.add("mgf.mask_token", TensorT<T>::randn(rng, {h}, T(0.02)));
    m.mgf.pos = ps.add("mgf.pos", TensorT<T>::randn(rng, {P, h}, T(0.02)));
    for (size_t l = 0; l < cfg.mgf.layers; ++l)
        m.mgf.blocks.push_back(make_encoder_block(ps, "mgf.block" + std::to_string(l), h, cfg.heads,
                                                  cfg.mlp_ratio, rng));
    m.mgf.ln_out = make_layer_norm(ps, "mgf.ln", h);
    m.mgf.head = make_linear(ps, "mgf.head", h, pd, rng);

    if (cfg.cla.pool == ClaConfig::Pool::Map) {
        m.map_pool_w.query = ps.add("cla.map.query", TensorT<T>::randn(rng, {d}, T(0.02)));
        m.map_pool_w.k = make_linear(ps, "cla.map.k", d, d, rng);
        m.map_pool_w.v = make_linear(ps, "cla.map.v", d, d, rng);
        m.map_pool_w.heads = cfg.heads;
    }
    return m;
}

// Closed-form parameter count; regression-tested against the registry.
inline size_t expected_param_count(const ModelConfig& cfg) {
    const size_t d = cfg.embed_dim;
    const size_t pd = cfg.patch_dim();
    const size_t P = cfg.patches_per_view();
    const size_t r = cfg.mlp_ratio;
    auto linear = [](size_t in, size_t out) { return in * out + out; };
    const size_t ln = 2 * d;
    const size_t mha = 4 * linear(d, d);
    const size_t mlp = linear(d, d * r) + linear(d * r, d);
    const size_t enc_block = 2 * ln + mha + mlp;

    size_t n = 0;
    n += cfg.views * (linear(pd, d) + P * d + ln + mlp + ln);            // obs views
    if (cfg.use_proprio) n += linear(cfg.proprio_dim, d);
    n += linear(pd, d) + linear(d, d) + cfg.vocab_size * d + linear(d, d);  // goal encoders
    if (cfg.use_resampler)
        n += cfg.n_latent_tokens * d + cfg.resampler_layers * (3 * ln + mha + mlp);
    n += cfg.encoder_token_count() * d;
    n += cfg.encoder_layers * enc_block;
    if (cfg.encoder_layers > 0) n += ln;
    n += 2 * linear(d, d);  // noise MLP
    n += linear(cfg.action_dim, d) + cfg.chunk_len * d;
    n += cfg.decoder_layers * (2 * mha + mlp + (cfg.use_adaln ? linear(d, 9 * d) : 0));
    n += ln + linear(d, cfg.action_dim);
    const size_t h = cfg.mgf.hidden;
    const size_t ln_h = 2 * h;
    const size_t mha_h = 4 * (h * h + h);
    const size_t mlp_h = (h * (h * r) + h * r) + ((h * r) * h + h);
    n += linear(d, h) + (pd * h + h) + h + P * h;
    n += cfg.mgf.layers * (2 * ln_h + mha_h + mlp_h) + ln_h + (h * pd + pd);
    if (cfg.cla.pool == ClaConfig::Pool::Map) n += d + 2 * linear(d, d);
    return n;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

// images [B, H, W] -> non-overlapping raster-order patches [B, P, p*p].
template <typename T>
TensorT<T> extract_patches(const TensorT<T>& images, size_t patch) {
    if (images.rank() != 3) throw DimensionError("extract_patches: expected [B,H,W]");
    const size_t B = images.dim(0), H = images.dim(1), W = images.dim(2);
    if (H % patch != 0 || W % patch != 0) throw DimensionError("extract_patches: extent not divisible by patch");
    const size_t gh = H / patch, gw = W / patch;
    TensorT<T> x = reshape(images, {B, gh, patch, gw, patch});
    x = permute(x, {0, 1, 3, 2, 4});
    return reshape(x, {B, gh * gw, patch * patch});
}

// Per-view observation tokens. images [B, V, H, W] -> [B, V, D], or
// [B, n_latents, D] when the perceiver resampler is enabled.
template <typename T>
TensorT<T> encode_observation(const Model<T>& m, const TensorT<T>& images) {
    const ModelConfig& cfg = m.cfg;
    if (images.rank() != 4 || images.dim(1) != cfg.views || images.dim(2) != cfg.image_size ||
        images.dim(3) != cfg.image_size)
        throw DimensionError("encode_observation: image extents do not match the config");
    const size_t B = images.dim(0);
    std::vector<TensorT<T>> view_tokens;
    for (size_t v = 0; v < cfg.views; ++v) {
        TensorT<T> img = reshape(slice(images, 1, v, 1), {B, cfg.image_size, cfg.image_size});
        TensorT<T> patches = extract_patches(img, cfg.patch_size);
        if (cfg.use_resampler) {
            view_tokens.push_back(m.obs_views[v].tokens(patches));  // [B, P, D]
        } else {
            view_tokens.push_back(reshape(m.obs_views[v].pooled(patches), {B, 1, cfg.embed_dim}));
        }
    }
    TensorT<T> cat = concat(view_tokens, 1);
    if (cfg.use_resampler) return m.resampler.forward(cat);
    return cat;  // [B, V, D]
}

// One goal token per sample from an image goal batch [B, H, W].
template <typename T>
TensorT<T> encode_image_goal(const Model<T>& m, const TensorT<T>& goal_images) {
    TensorT<T> patches = extract_patches(goal_images, m.cfg.patch_size);
    return m.goal.img_proj.forward(mean_axis(m.goal.img_patch_embed.forward(patches), 1));
}

// One goal token per sample from padded token ids. ids are pad-right with id
// 0; mean pooling runs over the real tokens only.
template <typename T>
TensorT<T> encode_language_goal(const Model<T>& m, const std::vector<std::vector<uint16_t>>& ids) {
    const size_t B = ids.size();
    if (B == 0) throw ContractError("encode_language_goal: empty batch");
    size_t L = 0;
    for (const auto& s : ids) {
        if (s.empty()) throw ContractError("encode_language_goal: empty token sequence");
        L = std::max(L, s.size());
    }
    std::vector<size_t> flat(B * L, 0);
    TensorT<T> weight({B, L, 1});
    for (size_t b = 0; b < B; ++b) {
        const double inv = 1.0 / static_cast<double>(ids[b].size());
        for (size_t l = 0; l < L; ++l) {
            flat[b * L + l] = l < ids[b].size() ? ids[b][l] : 0;
            weight.data()[b * L + l] = l < ids[b].size() ? static_cast<T>(inv) : T(0);
        }
    }
    TensorT<T> emb = reshape(index_select(m.goal.lang_table, flat), {B, L, m.cfg.embed_dim});
    TensorT<T> pooled = sum_axis(mul(emb, repeat_axis(weight, 2, m.cfg.embed_dim)), 1);
    return m.goal.lang_proj.forward(pooled);
}

// Sinusoidal features of c_noise(sigma) followed by a 2-layer MLP. sigmas are
// per-sample and must be positive.
template <typename T>
TensorT<T> noise_embedding(const Model<T>& m, const std::vector<T>& sigmas) {
    const size_t B = sigmas.size();
    const size_t d = m.cfg.embed_dim;
    const size_t half = d / 2;
    TensorT<T> feats({B, d});
    for (size_t b = 0; b < B; ++b) {
        if (!(sigmas[b] > T(0))) throw ContractError("noise_embedding: sigma must be positive");
        const double t = 0.25 * std::log(static_cast<double>(sigmas[b]));
        for (size_t i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
            feats.data()[b * d + i] = static_cast<T>(std::sin(t * freq));
            feats.data()[b * d + half + i] = static_cast<T>(std::cos(t * freq));
        }
    }
    return m.noise_embed_mlp.fc2.forward(gelu(m.noise_embed_mlp.fc1.forward(feats)));
}

// Assembles the encoder token sequence and runs the self-attention stack.
// Sequence: [obs tokens..., proprio?, goal, noise?] + per-slot type
// embeddings. A zero-layer stack leaves the tokens untouched.
template <typename T>
TensorT<T> encode_state(const Model<T>& m, const TensorT<T>& images, const TensorT<T>* proprio,
                        const TensorT<T>& goal_token, const TensorT<T>* noise_token = nullptr) {
    const ModelConfig& cfg = m.cfg;
    m.encoder_calls++;
    const size_t B = images.dim(0);
    std::vector<TensorT<T>> toks;
    toks.push_back(encode_observation(m, images));
    if (cfg.use_proprio) {
        if (!proprio) throw ContractError("encode_state: proprio expected by the config");
        toks.push_back(reshape(m.proprio_embed.forward(*proprio), {B, 1, cfg.embed_dim}));
    }
    toks.push_back(reshape(goal_token, {B, 1, cfg.embed_dim}));
    if (!cfg.use_adaln) {
        if (!noise_token) throw ContractError("encode_state: noise token required without adaLN");
        toks.push_back(reshape(*noise_token, {B, 1, cfg.embed_dim}));
    }
    TensorT<T> x = add(concat(toks, 1), m.token_type);
    const size_t layers = cfg.use_encoder ? cfg.encoder_layers : 0;
    for (size_t l = 0; l < layers; ++l) x = m.encoder[l].forward(x);
    if (layers > 0) x = m.encoder_ln.forward(x);
    return x;
}

// Raw decoder stack (the inner network F): embeds the noisy chunk, runs the
// causally masked adaLN blocks with cross-attention onto the latents, and
// maps back to action space.
template <typename T>
TensorT<T> decoder_inner(const Model<T>& m, const TensorT<T>& scaled_noisy, const TensorT<T>& latents,
                         const TensorT<T>* cond_vec) {
    const ModelConfig& cfg = m.cfg;
    if (scaled_noisy.rank() != 3 || scaled_noisy.dim(1) != cfg.chunk_len || scaled_noisy.dim(2) != cfg.action_dim)
        throw DimensionError("decoder: chunk shape mismatch, got " + shape_str(scaled_noisy.shape()));
    TensorT<T> x = add(m.action_in.forward(scaled_noisy), m.action_pos);
    TensorT<T> mask = causal_mask<T>(cfg.chunk_len);
    for (const auto& blk : m.decoder) x = blk.forward(x, latents, cond_vec, mask);
    return m.action_out.forward(m.decoder_ln.forward(x));
}

namespace detail {

template <typename T>
TensorT<T> per_sample_const(const std::vector<T>& vals, const Shape& shape) {
    TensorT<T> t(shape);
    const size_t per = t.numel() / vals.size();
    for (size_t b = 0; b < vals.size(); ++b)
        for (size_t i = 0; i < per; ++i) t.data()[b * per + i] = vals[b];
    return t;
}

}  // namespace detail

// Preconditioned denoiser D(a, sigma) with per-sample noise levels. All
// sigmas must be positive, or all zero (identity per the wrapper contract).
template <typename T>
TensorT<T> decoder_denoise(const Model<T>& m, const TensorT<T>& noisy, const TensorT<T>& latents,
                           const std::vector<T>& sigmas, const Preconditioner<T>& pc) {
    m.decoder_calls++;
    const size_t B = noisy.dim(0);
    if (sigmas.size() != B) throw ContractError("decoder_denoise: one sigma per sample expected");
    bool all_zero = true, all_pos = true;
    for (T s : sigmas) {
        if (s < T(0)) throw ContractError("decoder_denoise: negative sigma");
        all_zero &= s == T(0);
        all_pos &= s > T(0);
    }
    if (all_zero) return noisy;
    if (!all_pos) throw ContractError("decoder_denoise: mixed zero and positive sigmas");

    std::vector<T> cin(B), cout(B), cskip(B);
    for (size_t b = 0; b < B; ++b) {
        cin[b] = pc.c_in(sigmas[b]);
        cout[b] = pc.c_out(sigmas[b]);
        cskip[b] = pc.c_skip(sigmas[b]);
    }
    TensorT<T> scaled = mul(noisy, detail::per_sample_const(cin, noisy.shape()));
    TensorT<T> cond = noise_embedding(m, sigmas);
    TensorT<T> f_out = decoder_inner(m, scaled, latents, m.cfg.use_adaln ? &cond : nullptr);
    return add(mul(f_out, detail::per_sample_const(cout, noisy.shape())),
               mul(noisy, detail::per_sample_const(cskip, noisy.shape())));
}

// Multi-head attention pooling (or static-token selection) followed by L2
// normalization; the CLA projection.
template <typename T>
TensorT<T> map_pool(const Model<T>& m, const TensorT<T>& latents) {
    const ModelConfig& cfg = m.cfg;
    const size_t B = latents.dim(0), S = latents.dim(1), d = latents.dim(2);
    if (S < 1) throw ContractError("map_pool: need at least one token");
    if (cfg.cla.pool == ClaConfig::Pool::SingleToken)
        return l2_normalize(reshape(slice(latents, 1, 0, 1), {B, d}));
    const size_t heads = m.map_pool_w.heads;
    const size_t hd = d / heads;
    auto split = [&](const TensorT<T>& x) {
        return reshape(permute(reshape(x, {B, S, heads, hd}), {0, 2, 1, 3}), {B * heads, S, hd});
    };
    TensorT<T> kh = split(m.map_pool_w.k.forward(latents));
    TensorT<T> vh = split(m.map_pool_w.v.forward(latents));
    TensorT<T> q = repeat_axis(reshape(m.map_pool_w.query, {1, heads, 1, hd}), 0, B);
    q = reshape(q, {B * heads, 1, hd});
    TensorT<T> scores = scale(bmm_nt(q, kh), static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
    TensorT<T> ctx = bmm(softmax(scores), vh);  // [BH, 1, hd]
    TensorT<T> merged = reshape(permute(reshape(ctx, {B, heads, 1, hd}), {0, 2, 1, 3}), {B, d});
    return l2_normalize(merged);
}

// ---------------------------------------------------------------------------
// Policy-side sampling
// ---------------------------------------------------------------------------

// Encodes the state once, then walks the schedule with the DDIM integrator
// (one decoder pass per transition). In the no-adaLN ablation the encoder
// must re-run at every noise level instead.
template <typename T>
TensorT<T> policy_sample_chunk(const Model<T>& m, const TensorT<T>& images, const TensorT<T>* proprio,
                               const TensorT<T>& goal_token, const SigmaSchedule<T>& schedule, Rng& rng,
                               const Preconditioner<T>& pc) {
    const size_t B = images.dim(0);
    const Shape chunk_shape{B, m.cfg.chunk_len, m.cfg.action_dim};
    if (m.cfg.use_adaln) {
        TensorT<T> latents = encode_state(m, images, proprio, goal_token);
        return sample_action_chunk(
            [&](const TensorT<T>& a, T sigma) {
                return decoder_denoise(m, a, latents, std::vector<T>(B, sigma), pc);
            },
            chunk_shape, schedule, rng);
    }
    return sample_action_chunk(
        [&](const TensorT<T>& a, T sigma) {
            const std::vector<T> sig(B, sigma);
            TensorT<T> noise_tok = noise_embedding(m, sig);
            TensorT<T> latents = encode_state(m, images, proprio, goal_token, &noise_tok);
            return decoder_denoise(m, a, latents, sig, pc);
        },
        chunk_shape, schedule, rng);
}

}  // namespace mdt
