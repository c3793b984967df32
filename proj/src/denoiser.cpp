#include "medlsdm/denoiser.hpp"

#include <algorithm>
#include <cmath>

#include "medlsdm/errors.hpp"

namespace medlsdm {

std::vector<int64_t> DenoiserConfig::effective_attention_levels() const {
    if (!attention_levels.empty())
        return attention_levels;
    const int64_t n = num_levels();
    if (n >= 2)
        return {n - 2, n - 1};
    return {0};
}

void DenoiserConfig::validate() const {
    if (widths.empty())
        throw ConfigError("denoiser.widths must be non-empty");
    for (int64_t w : widths)
        if (w < 1 || w % num_groups != 0)
            throw ConfigError("denoiser widths must be positive multiples of num_groups");
    if (time_dim < 2 || time_dim % 2 != 0)
        throw ConfigError("denoiser.time_dim must be even and >= 2");
    if (sem_width < 1 || num_classes < 1 || latent_channels < 1)
        throw ConfigError("denoiser: sem_width, num_classes, latent_channels must be positive");
    if (compression_t < 1)
        throw ConfigError("denoiser.compression_t must be >= 1");
    for (int64_t lvl : attention_levels)
        if (lvl < 0 || lvl >= num_levels())
            throw ConfigError("denoiser.attention_levels entry out of range");
}

Tensor time_embed(int64_t t, int64_t dim) {
    if (t < 0)
        throw DomainError("time_embed: t must be >= 0");
    if (dim < 2 || dim % 2 != 0)
        throw ConfigError("time_embed: dim must be even and >= 2");
    const int64_t half = dim / 2;
    Tensor out({dim});
    for (int64_t i = 0; i < half; ++i) {
        const double freq =
            half > 1 ? std::exp(-std::log(10000.0) * static_cast<double>(i) /
                                static_cast<double>(half - 1))
                     : 1.0;
        out[i]        = std::sin(static_cast<double>(t) * freq);
        out[half + i] = std::cos(static_cast<double>(t) * freq);
    }
    return out;
}

namespace {

std::vector<int64_t> stride_factors(int64_t t) {
    std::vector<int64_t> f;
    int64_t rem = t;
    while (rem % 2 == 0 && rem > 1) {
        f.push_back(2);
        rem /= 2;
    }
    if (rem > 1)
        f.push_back(rem);
    return f;
}

}  // namespace

Denoiser::Denoiser(DenoiserConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    using A3 = std::array<int64_t, 3>;
    const A3 k3{3, 3, 3};
    const A3 k1{1, 1, 1};
    const int64_t n = cfg_.num_levels();
    const auto attn = cfg_.effective_attention_levels();

    const auto add_resblock = [&](const std::string& p, int64_t c) {
        add_conv(p + ".conv", c, c, k3);
        add_linear(p + ".t0", cfg_.time_dim, cfg_.time_dim);
        add_linear(p + ".t1w", cfg_.time_dim, c, nn::Init::Zero);
        add_linear(p + ".t1b", cfg_.time_dim, c, nn::Init::Zero);
    };
    const auto add_attention = [&](const std::string& p, int64_t c) {
        for (const char* mode : {"sp", "cs"}) {
            const std::string q = p + ".attn_" + mode;
            add_conv(q + ".q", c, c, k1);
            add_conv(q + ".k", c, c, k1);
            add_conv(q + ".v", c, c, k1);
            add_conv(q + ".o", c, c, k1, {1, 1, 1}, nn::Init::Zero);
        }
    };
    const auto add_spade = [&](const std::string& p, int64_t c) {
        add_conv(p + ".gamma0", cfg_.sem_width, cfg_.sem_width, k3);
        add_conv(p + ".gamma1", cfg_.sem_width, c, k3, {1, 1, 1}, nn::Init::Zero);
        add_conv(p + ".beta0", cfg_.sem_width, cfg_.sem_width, k3);
        add_conv(p + ".beta1", cfg_.sem_width, c, k3, {1, 1, 1}, nn::Init::Zero);
        add_conv(p + ".conv", c, c, k3);
    };

    add_conv("unet.stem", cfg_.latent_channels, cfg_.widths[0], k3);
    for (int64_t i = 0; i < n; ++i) {
        const int64_t c = cfg_.widths[static_cast<size_t>(i)];
        add_resblock("unet.enc" + std::to_string(i) + ".res", c);
        if (std::find(attn.begin(), attn.end(), i) != attn.end())
            add_attention("unet.enc" + std::to_string(i), c);
        if (i + 1 < n)
            add_conv("unet.down" + std::to_string(i), c, cfg_.widths[static_cast<size_t>(i + 1)],
                     k3, {2, 2, 2});
    }
    const int64_t deep = cfg_.widths.back();
    add_resblock("unet.mid.res0", deep);
    add_attention("unet.mid", deep);
    add_resblock("unet.mid.res1", deep);

    for (int64_t i = n; i-- > 0;) {
        const int64_t c = cfg_.widths[static_cast<size_t>(i)];
        add_conv("unet.dec" + std::to_string(i) + ".fuse", 2 * c, c, k1);
        add_spade("unet.dec" + std::to_string(i) + ".spade", c);
        if (std::find(attn.begin(), attn.end(), i) != attn.end())
            add_attention("unet.dec" + std::to_string(i), c);
        if (i > 0)
            add_conv("unet.up" + std::to_string(i), c, cfg_.widths[static_cast<size_t>(i - 1)],
                     k3);
    }
    add_conv("unet.head", cfg_.widths[0], cfg_.latent_channels, k3, {1, 1, 1}, nn::Init::Zero);

    // Semantic map encoder: strided stem down to latent resolution, then one
    // stride-2 stage per deeper level.
    const auto stem_strides = stride_factors(cfg_.compression_t);
    if (stem_strides.empty()) {
        add_conv("sem.stem0", cfg_.num_classes, cfg_.sem_width, k3);
    } else {
        int64_t cin = cfg_.num_classes;
        for (size_t i = 0; i < stem_strides.size(); ++i) {
            const int64_t s = stem_strides[i];
            add_conv("sem.stem" + std::to_string(i), cin, cfg_.sem_width, k3, {s, s, s});
            cin = cfg_.sem_width;
        }
    }
    for (int64_t i = 1; i < n; ++i)
        add_conv("sem.down" + std::to_string(i), cfg_.sem_width, cfg_.sem_width, k3, {2, 2, 2});

    Rng rng(seed ^ Rng::fnv1a64("denoiser"));
    for (const auto& [name, layer] : convs_)
        layer.init(params_, rng);
    for (const auto& [name, layer] : linears_)
        layer.init(params_, rng);
}

void Denoiser::add_conv(const std::string& name, int64_t cin, int64_t cout,
                        std::array<int64_t, 3> k, std::array<int64_t, 3> s, nn::Init init) {
    convs_.emplace(name, nn::Conv3d(name, cin, cout, k, s, init));
}

void Denoiser::add_linear(const std::string& name, int64_t din, int64_t dout, nn::Init init) {
    linears_.emplace(name, nn::Linear(name, din, dout, init));
}

const nn::Conv3d& Denoiser::conv(const std::string& name) const {
    auto it = convs_.find(name);
    if (it == convs_.end())
        throw ConfigError("denoiser: unknown conv " + name);
    return it->second;
}

const nn::Linear& Denoiser::lin(const std::string& name) const {
    auto it = linears_.find(name);
    if (it == linears_.end())
        throw ConfigError("denoiser: unknown linear " + name);
    return it->second;
}

bool Denoiser::has_attention(int64_t level) const {
    const auto attn = cfg_.effective_attention_levels();
    return std::find(attn.begin(), attn.end(), level) != attn.end();
}

Var Denoiser::encoder_resblock(const ParamMap& pm, const Var& f, const Var& t_emb,
                               const std::string& prefix) const {
    Var h = conv(prefix + ".conv")(pm, silu(group_norm(f, cfg_.num_groups)));
    Var e = silu(lin(prefix + ".t0")(pm, t_emb));
    // w(t) = 1 + zero-init head, b(t) = zero-init head: identity at init.
    Var w_raw = lin(prefix + ".t1w")(pm, e);
    Var b     = lin(prefix + ".t1b")(pm, e);
    Var w     = add(w_raw, make_const(Tensor::full({w_raw->value.numel()}, 1.0)));
    return add(f, scale_shift_channels(h, w, b));
}

Var Denoiser::spade_modulate(const ParamMap& pm, const Var& f, const Var& sem,
                             const std::string& prefix) const {
    const auto& fs = f->value.shape();
    const auto& ss = sem->value.shape();
    if (fs[0] != ss[0] || fs[1] != ss[1] || fs[2] != ss[2])
        throw ShapeError("spade_modulate: semantic features " + shape_str(ss) +
                         " do not match feature map " + shape_str(fs));
    Var gamma_raw = conv(prefix + ".gamma1")(pm, silu(conv(prefix + ".gamma0")(pm, sem)));
    Var beta      = conv(prefix + ".beta1")(pm, silu(conv(prefix + ".beta0")(pm, sem)));
    Var normed    = group_norm(f, cfg_.num_groups);
    // (1 + gamma_raw) * norm + beta; exact group norm when both heads are zero.
    return add(add(normed, mul(gamma_raw, normed)), beta);
}

Var Denoiser::spade_resblock(const ParamMap& pm, const Var& f, const Var& sem,
                             const std::string& prefix) const {
    return add(f, conv(prefix + ".conv")(pm, silu(spade_modulate(pm, f, sem, prefix))));
}

Var Denoiser::attention_block(const ParamMap& pm, const Var& f, const std::string& prefix,
                              AttentionMode mode, std::vector<Tensor>* weights_out) const {
    const std::string p = prefix + (mode == AttentionMode::Spatial ? ".attn_sp" : ".attn_cs");
    Var h   = group_norm(f, cfg_.num_groups);
    Var q   = conv(p + ".q")(pm, h);
    Var k   = conv(p + ".k")(pm, h);
    Var v   = conv(p + ".v")(pm, h);
    Var att = attention_core(q, k, v, mode, weights_out);
    return add(f, conv(p + ".o")(pm, att));
}

std::vector<Var> Denoiser::semantic_encode(const ParamMap& pm, const Var& m_onehot) const {
    const auto& ms = m_onehot->value.shape();
    if (ms[3] != cfg_.num_classes)
        throw ShapeError("semantic_encode: one-hot channels " + std::to_string(ms[3]) +
                         " vs configured num_classes " + std::to_string(cfg_.num_classes));

    std::vector<Var> pyramid;
    Var h                  = m_onehot;
    const auto stem_strides = stride_factors(cfg_.compression_t);
    const size_t stem_count = stem_strides.empty() ? 1 : stem_strides.size();
    for (size_t i = 0; i < stem_count; ++i)
        h = silu(conv("sem.stem" + std::to_string(i))(pm, h));
    pyramid.push_back(h);
    for (int64_t i = 1; i < cfg_.num_levels(); ++i) {
        h = silu(conv("sem.down" + std::to_string(i))(pm, h));
        pyramid.push_back(h);
    }
    return pyramid;
}

Var Denoiser::predict_noise(const ParamMap& pm, const Var& z_t, int64_t t,
                            const Var& m_onehot) const {
    const auto& zs = z_t->value.shape();
    const auto& ms = m_onehot->value.shape();
    if (zs.size() != 4 || zs[3] != cfg_.latent_channels)
        throw ShapeError("predict_noise: latent must be (H/t, W/t, L/t, " +
                         std::to_string(cfg_.latent_channels) + "), got " + shape_str(zs));
    for (int axis = 0; axis < 3; ++axis)
        if (ms[static_cast<size_t>(axis)] != zs[static_cast<size_t>(axis)] * cfg_.compression_t)
            throw ShapeError("predict_noise: map shape " + shape_str(ms) +
                             " incompatible with latent " + shape_str(zs) + " at t=" +
                             std::to_string(cfg_.compression_t));
    const int64_t n = cfg_.num_levels();
    const int64_t down_factor = int64_t{1} << (n - 1);
    for (int axis = 0; axis < 3; ++axis) {
        if (zs[static_cast<size_t>(axis)] % down_factor != 0)
            throw ShapeError("predict_noise: latent dims must be divisible by 2^(levels-1)");
        if (zs[static_cast<size_t>(axis)] / down_factor < 1)
            throw ShapeError("predict_noise: latent too small for " + std::to_string(n) +
                             " levels");
    }

    Var t_emb = make_const(time_embed(t, cfg_.time_dim));
    auto sem  = semantic_encode(pm, m_onehot);

    std::vector<Var> skips;
    Var h = conv("unet.stem")(pm, z_t);
    for (int64_t i = 0; i < n; ++i) {
        const std::string p = "unet.enc" + std::to_string(i);
        h = encoder_resblock(pm, h, t_emb, p + ".res");
        if (has_attention(i)) {
            h = attention_block(pm, h, p, AttentionMode::Spatial);
            h = attention_block(pm, h, p, AttentionMode::CrossSlice);
        }
        skips.push_back(h);
        if (i + 1 < n)
            h = conv("unet.down" + std::to_string(i))(pm, h);
    }

    h = encoder_resblock(pm, h, t_emb, "unet.mid.res0");
    h = attention_block(pm, h, "unet.mid", AttentionMode::Spatial);
    h = attention_block(pm, h, "unet.mid", AttentionMode::CrossSlice);
    h = encoder_resblock(pm, h, t_emb, "unet.mid.res1");

    for (int64_t i = n; i-- > 0;) {
        const std::string p = "unet.dec" + std::to_string(i);
        h = conv(p + ".fuse")(pm, concat_channels(skips[static_cast<size_t>(i)], h));
        h = spade_resblock(pm, h, sem[static_cast<size_t>(i)], p + ".spade");
        if (has_attention(i)) {
            h = attention_block(pm, h, p, AttentionMode::Spatial);
            h = attention_block(pm, h, p, AttentionMode::CrossSlice);
        }
        if (i > 0)
            h = conv("unet.up" + std::to_string(i))(pm, upsample_nearest(h, {2, 2, 2}));
    }

    h = silu(group_norm(h, cfg_.num_groups));
    return conv("unet.head")(pm, h);
}

Tensor Denoiser::predict_noise(const Tensor& z_t, int64_t t, const Tensor& m_onehot) const {
    ParamMap pm = wrap_params(params_, false);
    return predict_noise(pm, make_const(z_t), t, make_const(m_onehot))->value;
}

void Denoiser::force_spade_identity() {
    for (auto& [name, tensor] : params_) {
        const bool is_spade_head = name.find(".spade.gamma") != std::string::npos ||
                                   name.find(".spade.beta") != std::string::npos;
        if (is_spade_head)
            tensor.zero();
    }
}

}  // namespace medlsdm
