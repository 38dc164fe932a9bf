#pragma once

// Compact transformer stack: 3D ViT encoder/decoder for patches, text
// encoder shared between the masked report and the per-sentence inputs,
// text decoder over the fused features, projection heads into the shared
// alignment space, and the word-patch cross attention.
//
// Parameters live in a flat name -> tensor map. Names follow
// "module.block.index.tensor" and are part of the checkpoint contract.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "simcrop/config.hpp"
#include "simcrop/error.hpp"
#include "simcrop/rng.hpp"
#include "simcrop/serialize.hpp"
#include "simcrop/tensor.hpp"
#include "simcrop/text.hpp"
#include "simcrop/volume.hpp"

namespace simcrop {

enum class MimScope { masked, full };
enum class SentencePooling { cls, mean };

struct ModelConfig {
    Dims3 volume_dims{32, 32, 16};
    Dims3 patch_dims{8, 8, 4};
    std::size_t embed_dim = 64;
    std::size_t proj_dim = 32;
    std::size_t enc_layers_v = 2, dec_layers_v = 1;
    std::size_t enc_layers_t = 2, dec_layers_t = 1;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    std::size_t vocab_size = 0;
    bool enable_sa = true;
    bool enable_il = true;
    bool enable_wl = true;
    bool enable_mlm = true;
    bool freeze_text_encoder = false;
    MimScope mim_scope = MimScope::masked;
    SentencePooling pooling = SentencePooling::cls;

    Dims3 grid_dims() const { return grid_dims_for(volume_dims, patch_dims); }
    std::size_t n_patches() const {
        auto g = grid_dims();
        return g[0] * g[1] * g[2];
    }
    std::size_t patch_voxels() const { return patch_dims[0] * patch_dims[1] * patch_dims[2]; }
    std::size_t head_dim() const { return embed_dim / heads; }

    static ModelConfig from(const Config& c, std::size_t vocab_size) {
        c.validate();
        ModelConfig m;
        m.volume_dims = {c.volume_h, c.volume_w, c.volume_d};
        m.patch_dims = {c.patch_h, c.patch_w, c.patch_d};
        m.embed_dim = c.embed_dim;
        m.proj_dim = c.shared_proj_dim;
        m.enc_layers_v = c.enc_layers_v;
        m.dec_layers_v = c.dec_layers_v;
        m.enc_layers_t = c.enc_layers_t;
        m.dec_layers_t = c.dec_layers_t;
        m.heads = c.heads;
        m.mlp_ratio = c.mlp_ratio;
        m.vocab_size = vocab_size;
        m.enable_sa = c.enable_sa;
        m.enable_il = c.enable_il;
        m.enable_wl = c.enable_wl;
        m.enable_mlm = c.enable_mlm;
        m.freeze_text_encoder = c.freeze_text_encoder;
        m.mim_scope = c.mim_loss_scope == "full" ? MimScope::full : MimScope::masked;
        m.pooling = c.sentence_pooling == "mean" ? SentencePooling::mean : SentencePooling::cls;
        m.validate();
        return m;
    }

    void validate() const {
        if (heads == 0 || embed_dim % heads != 0)
            throw ConfigError("model: embed_dim " + std::to_string(embed_dim) +
                              " not divisible by heads " + std::to_string(heads));
        if (embed_dim < 6) throw ConfigError("model: embed_dim must be >= 6");
        if (proj_dim == 0 || mlp_ratio == 0) throw ConfigError("model: zero projection or mlp width");
        if (vocab_size <= kNumSpecial) throw ConfigError("model: vocabulary has no regular tokens");
        (void)grid_dims();
    }

    /// Canonical text; its hash is the checkpoint fingerprint.
    std::string canonical() const {
        std::ostringstream os;
        os << "volume=" << volume_dims[0] << 'x' << volume_dims[1] << 'x' << volume_dims[2]
           << ";patch=" << patch_dims[0] << 'x' << patch_dims[1] << 'x' << patch_dims[2]
           << ";d=" << embed_dim << ";ds=" << proj_dim << ";ev=" << enc_layers_v
           << ";dv=" << dec_layers_v << ";et=" << enc_layers_t << ";dt=" << dec_layers_t
           << ";heads=" << heads << ";mlp=" << mlp_ratio << ";vocab=" << vocab_size
           << ";sa=" << enable_sa << ";il=" << enable_il << ";wl=" << enable_wl
           << ";mlm=" << enable_mlm << ";freeze_t=" << freeze_text_encoder
           << ";mim=" << (mim_scope == MimScope::full ? "full" : "masked")
           << ";pool=" << (pooling == SentencePooling::mean ? "mean" : "cls");
        return os.str();
    }

    std::uint64_t fingerprint() const { return io::fnv1a(canonical()); }

    static ModelConfig parse_canonical(const std::string& text) {
        std::map<std::string, std::string> kv;
        std::istringstream is(text);
        for (std::string item; std::getline(is, item, ';');) {
            auto eq = item.find('=');
            if (eq == std::string::npos) throw FormatError(FormatErrc::corrupt, "model config '" + text + "'");
            kv[item.substr(0, eq)] = item.substr(eq + 1);
        }
        auto need = [&](const std::string& k) -> const std::string& {
            auto it = kv.find(k);
            if (it == kv.end()) throw FormatError(FormatErrc::corrupt, "model config lacks " + k);
            return it->second;
        };
        auto dims = [&](const std::string& k) {
            Dims3 d{};
            std::istringstream ds(need(k));
            std::string part;
            for (auto& e : d) {
                if (!std::getline(ds, part, 'x')) throw FormatError(FormatErrc::corrupt, "model config " + k);
                e = std::stoul(part);
            }
            return d;
        };
        auto num = [&](const std::string& k) { return static_cast<std::size_t>(std::stoul(need(k))); };
        ModelConfig m;
        m.volume_dims = dims("volume");
        m.patch_dims = dims("patch");
        m.embed_dim = num("d");
        m.proj_dim = num("ds");
        m.enc_layers_v = num("ev");
        m.dec_layers_v = num("dv");
        m.enc_layers_t = num("et");
        m.dec_layers_t = num("dt");
        m.heads = num("heads");
        m.mlp_ratio = num("mlp");
        m.vocab_size = num("vocab");
        m.enable_sa = num("sa") != 0;
        m.enable_il = num("il") != 0;
        m.enable_wl = num("wl") != 0;
        m.enable_mlm = num("mlm") != 0;
        m.freeze_text_encoder = num("freeze_t") != 0;
        m.mim_scope = need("mim") == "full" ? MimScope::full : MimScope::masked;
        m.pooling = need("pool") == "mean" ? SentencePooling::mean : SentencePooling::cls;
        m.validate();
        if (m.canonical() != text) throw FormatError(FormatErrc::corrupt, "model config not canonical");
        return m;
    }
};

template <class T>
struct ModelParams {
    std::map<std::string, Tensor<T>> tensors;

    const Tensor<T>& operator[](const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw ValueError("model: no parameter named " + name);
        return it->second;
    }
    Tensor<T>& operator[](const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw ValueError("model: no parameter named " + name);
        return it->second;
    }
    bool contains(const std::string& name) const { return tensors.count(name) != 0; }

    std::size_t count() const {
        std::size_t n = 0;
        for (auto& [_, t] : tensors) n += t.size();
        return n;
    }
    void zero_grad() {
        for (auto& [_, t] : tensors) t.zero_grad();
    }
    /// Deep copy with fresh leaf tensors.
    ModelParams clone() const {
        ModelParams out;
        for (auto& [k, t] : tensors) {
            Tensor<T> c(t.shape(), std::vector<T>(t.data().begin(), t.data().end()), t.requires_grad());
            out.tensors.emplace(k, std::move(c));
        }
        return out;
    }
};

/// Text-encoder parameters are the ones frozen by freeze_text_encoder.
inline bool is_text_encoder_param(const std::string& name) {
    return name.rfind("text_encoder.", 0) == 0;
}

namespace detail {

template <class T>
void add_param(ModelParams<T>& p, const std::string& name, Shape shape, Rng& rng, double std_dev,
               double constant = 0.0) {
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = std_dev > 0.0 ? static_cast<T>(std_dev * rng.normal()) : static_cast<T>(constant);
    p.tensors.emplace(name, Tensor<T>(std::move(shape), std::move(v), true));
}

template <class T>
void add_linear(ModelParams<T>& p, const std::string& prefix, std::size_t in, std::size_t out,
                Rng& rng, double std_dev) {
    add_param(p, prefix + ".weight", {in, out}, rng, std_dev);
    add_param(p, prefix + ".bias", {1, out}, rng, 0.0);
}

template <class T>
void add_norm(ModelParams<T>& p, const std::string& prefix, std::size_t d, Rng& rng) {
    add_param(p, prefix + ".gamma", {1, d}, rng, 0.0, 1.0);
    add_param(p, prefix + ".beta", {1, d}, rng, 0.0, 0.0);
}

template <class T>
void add_attention(ModelParams<T>& p, const std::string& prefix, std::size_t d, Rng& rng, double s) {
    for (const char* w : {"wq", "wk", "wv", "wo"}) add_param(p, prefix + "." + w, {d, d}, rng, s);
}

template <class T>
void add_block(ModelParams<T>& p, const std::string& prefix, std::size_t d, std::size_t hidden,
               Rng& rng, double s) {
    add_norm(p, prefix + ".ln1", d, rng);
    add_attention(p, prefix + ".attn", d, rng, s);
    add_norm(p, prefix + ".ln2", d, rng);
    add_linear(p, prefix + ".fc1", d, hidden, rng, s);
    add_linear(p, prefix + ".fc2", hidden, d, rng, s);
}

} // namespace detail

/// Fresh parameters drawn from N(0, init_std²); biases zero, norms identity.
template <class T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed, double init_std = 0.02) {
    cfg.validate();
    ModelParams<T> p;
    Rng rng(seed, 0x1417ULL);
    const std::size_t d = cfg.embed_dim;
    const std::size_t hidden = d * cfg.mlp_ratio;
    const double s = init_std;
    auto blocks = [&](const std::string& module, std::size_t layers) {
        for (std::size_t i = 0; i < layers; ++i)
            detail::add_block(p, module + ".layer." + std::to_string(i), d, hidden, rng, s);
        if (layers > 0) detail::add_norm(p, module + ".final_norm.0", d, rng);
    };

    detail::add_linear(p, "vision_encoder.patch_proj.0", cfg.patch_voxels(), d, rng, s);
    blocks("vision_encoder", cfg.enc_layers_v);

    detail::add_linear(p, "vision_decoder.embed.0", d, d, rng, s);
    detail::add_param(p, "vision_decoder.mask_token.0.value", {1, d}, rng, s);
    blocks("vision_decoder", cfg.dec_layers_v);
    detail::add_linear(p, "vision_decoder.head.0", d, cfg.patch_voxels(), rng, s);

    detail::add_param(p, "text_encoder.token_embed.0.weight", {cfg.vocab_size, d}, rng, s);
    blocks("text_encoder", cfg.enc_layers_t);

    blocks("text_decoder", cfg.dec_layers_t);
    detail::add_linear(p, "text_decoder.head.0", d, cfg.vocab_size, rng, s);

    detail::add_attention(p, "fusion.cross_attn.0", d, rng, s);

    detail::add_linear(p, "align.text_proj.0", d, cfg.proj_dim, rng, s);
    detail::add_linear(p, "align.vision_proj.0", d, cfg.proj_dim, rng, s);
    return p;
}

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> linear(const Tensor<T>& x, const ModelParams<T>& p, const std::string& prefix) {
    return add_rowwise(matmul(x, p[prefix + ".weight"]), p[prefix + ".bias"]);
}

template <class T>
Tensor<T> norm(const Tensor<T>& x, const ModelParams<T>& p, const std::string& prefix) {
    return layer_norm(x, p[prefix + ".gamma"], p[prefix + ".beta"]);
}

template <class T>
struct AttentionResult {
    Tensor<T> out;                 ///< after output projection
    Tensor<T> context;             ///< concatenated heads, before output projection
    std::vector<Tensor<T>> probs;  ///< per head, queries × keys
};

/// Multi-head scaled dot-product attention of `queries` over `keys_values`.
template <class T>
AttentionResult<T> attention(const Tensor<T>& queries, const Tensor<T>& keys_values,
                             const ModelParams<T>& p, const std::string& prefix, std::size_t heads) {
    if (queries.cols() != keys_values.cols())
        shape_fail("attention", queries.shape(), keys_values.shape());
    const std::size_t d = queries.cols();
    const std::size_t dk = d / heads;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dk));
    Tensor<T> q = matmul(queries, p[prefix + ".wq"]);
    Tensor<T> k = matmul(keys_values, p[prefix + ".wk"]);
    Tensor<T> v = matmul(keys_values, p[prefix + ".wv"]);
    AttentionResult<T> r;
    std::vector<Tensor<T>> ctx;
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor<T> qh = heads == 1 ? q : slice_cols(q, h * dk, dk);
        Tensor<T> kh = heads == 1 ? k : slice_cols(k, h * dk, dk);
        Tensor<T> vh = heads == 1 ? v : slice_cols(v, h * dk, dk);
        Tensor<T> probs = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt));
        ctx.push_back(matmul(probs, vh));
        r.probs.push_back(std::move(probs));
    }
    r.context = heads == 1 ? ctx[0] : concat_cols(ctx);
    r.out = matmul(r.context, p[prefix + ".wo"]);
    return r;
}

/// Pre-norm block: x + attn(ln1(x)), then + mlp(ln2(·)).
template <class T>
Tensor<T> transformer_block(const Tensor<T>& x, const ModelParams<T>& p, const std::string& prefix,
                            std::size_t heads) {
    Tensor<T> h = norm(x, p, prefix + ".ln1");
    Tensor<T> y = add(x, attention(h, h, p, prefix + ".attn", heads).out);
    Tensor<T> m = linear(gelu(linear(norm(y, p, prefix + ".ln2"), p, prefix + ".fc1")), p, prefix + ".fc2");
    return add(y, m);
}

template <class T>
Tensor<T> run_blocks(Tensor<T> x, const ModelParams<T>& p, const std::string& module,
                     std::size_t layers, std::size_t heads) {
    for (std::size_t i = 0; i < layers; ++i)
        x = transformer_block(x, p, module + ".layer." + std::to_string(i), heads);
    if (layers > 0) x = norm(x, p, module + ".final_norm.0");
    return x;
}

// ---------------------------------------------------------------------------
// Vision
// ---------------------------------------------------------------------------

/// f_v for the visible patches (N × patch_voxels) with their position rows (N × d).
template <class T>
Tensor<T> encode_vision(const Tensor<T>& patches, const Tensor<T>& pos_emb, const ModelParams<T>& p,
                        const ModelConfig& cfg) {
    if (patches.rows() != pos_emb.rows())
        throw ShapeError("encode_vision: " + std::to_string(patches.rows()) + " patches but " +
                         std::to_string(pos_emb.rows()) + " position rows");
    if (patches.cols() != cfg.patch_voxels())
        shape_fail("encode_vision", patches.shape(), Shape{patches.rows(), cfg.patch_voxels()});
    Tensor<T> x = add(linear(patches, p, "vision_encoder.patch_proj.0"), pos_emb);
    return run_blocks(x, p, "vision_encoder", cfg.enc_layers_v, cfg.heads);
}

/// Reconstruct every patch (n_total × patch_voxels, original order) from the
/// visible features, inserting the learned mask token at masked positions.
template <class T>
Tensor<T> decode_vision(const Tensor<T>& f_v, const MaskPlan& plan, const Tensor<T>& full_pos_emb,
                        const ModelParams<T>& p, const ModelConfig& cfg) {
    if (plan.n_total != cfg.n_patches() || full_pos_emb.rows() != plan.n_total)
        throw ShapeError("decode_vision: mask plan covers " + std::to_string(plan.n_total) +
                         " patches, grid has " + std::to_string(cfg.n_patches()));
    if (plan.unmasked_idx.size() != f_v.rows())
        throw ShapeError("decode_vision: plan keeps " + std::to_string(plan.unmasked_idx.size()) +
                         " patches, features have " + std::to_string(f_v.rows()) + " rows");
    Tensor<T> x = linear(f_v, p, "vision_decoder.embed.0");
    Tensor<T> full = scatter_rows_with_fill(x, p["vision_decoder.mask_token.0.value"], plan.unmasked_idx,
                                            plan.n_total);
    full = add(full, full_pos_emb);
    full = run_blocks(full, p, "vision_decoder", cfg.dec_layers_v, cfg.heads);
    return linear(full, p, "vision_decoder.head.0");
}

/// Row-normalized patch embeddings in the shared alignment space.
template <class T>
Tensor<T> project_patches(const Tensor<T>& f_v, const ModelParams<T>& p) {
    return l2_normalize_rows(linear(f_v, p, "align.vision_proj.0"));
}

/// Global average pooling over patches: f^I (1 × d).
template <class T>
Tensor<T> instance_feature(const Tensor<T>& f_v) {
    if (f_v.dim() != 2 || f_v.rows() == 0) throw ShapeError("instance_feature: no patches");
    return mean_rows(f_v);
}

// ---------------------------------------------------------------------------
// Text
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> encode_text(const std::vector<TokenId>& ids, const ModelParams<T>& p, const ModelConfig& cfg) {
    if (ids.empty()) throw ShapeError("encode_text: empty token sequence");
    std::vector<std::size_t> rows;
    rows.reserve(ids.size());
    for (TokenId id : ids) {
        if (id >= cfg.vocab_size)
            throw ValueError("encode_text: token id " + std::to_string(id) + " >= vocab size " +
                             std::to_string(cfg.vocab_size));
        rows.push_back(id);
    }
    Tensor<T> x = gather_rows(p["text_encoder.token_embed.0.weight"], std::move(rows));
    x = add(x, positional_embedding_1d<T>(ids.size(), cfg.embed_dim));
    return run_blocks(x, p, "text_encoder", cfg.enc_layers_t, cfg.heads);
}

/// f_sent: pooled ([CLS] or mean) text feature, projected and L2-normalized (1 × d_s).
template <class T>
Tensor<T> pool_sentence(const Tensor<T>& f, const ModelParams<T>& p,
                        SentencePooling pooling = SentencePooling::cls) {
    Tensor<T> pooled = pooling == SentencePooling::cls ? gather_rows(f, {0}) : mean_rows(f);
    return l2_normalize_rows(linear(pooled, p, "align.text_proj.0"));
}

/// f^W = softmax(f_t W_q (f_v W_k)ᵀ / √d_k) f_v W_v, per head, then output-projected.
template <class T>
AttentionResult<T> cross_attention(const Tensor<T>& f_t, const Tensor<T>& f_v, const ModelParams<T>& p,
                                   const ModelConfig& cfg) {
    return attention(f_t, f_v, p, "fusion.cross_attn.0", cfg.heads);
}

/// Decoder input is f_t + f^W (if enabled) + f^I broadcast to every row (if enabled).
template <class T>
Tensor<T> decode_text(const Tensor<T>& f_t, const std::optional<Tensor<T>>& f_instance,
                      const std::optional<Tensor<T>>& f_word, const ModelParams<T>& p,
                      const ModelConfig& cfg) {
    Tensor<T> x = f_t;
    if (cfg.enable_wl && f_word) {
        if (f_word->shape() != f_t.shape()) shape_fail("decode_text", f_t.shape(), f_word->shape());
        x = add(x, *f_word);
    }
    if (cfg.enable_il && f_instance) x = add_rowwise(x, *f_instance);
    x = run_blocks(x, p, "text_decoder", cfg.dec_layers_t, cfg.heads);
    return linear(x, p, "text_decoder.head.0");
}

} // namespace simcrop
