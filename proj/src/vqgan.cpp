#include "medlsdm/vqgan.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "medlsdm/errors.hpp"

namespace medlsdm {

std::vector<int64_t> CompressionConfig::stage_strides() const {
    std::vector<int64_t> strides;
    int64_t rem = t;
    while (rem % 2 == 0 && rem > 1) {
        strides.push_back(2);
        rem /= 2;
    }
    if (rem > 1)
        strides.push_back(rem);
    return strides;
}

void CompressionConfig::validate() const {
    if (t < 1)
        throw ConfigError("compression.t must be >= 1");
    if (K < 2)
        throw ConfigError("compression.K must be >= 2");
    if (n_z < 1)
        throw ConfigError("compression.n_z must be >= 1");
    if (base_channels < 1 || num_groups < 1 || base_channels % num_groups != 0)
        throw ConfigError("compression.base_channels must be a positive multiple of num_groups");
}

void CompressionConfig::check_divisible(std::array<int64_t, 3> spatial) const {
    for (int axis = 0; axis < 3; ++axis)
        if (spatial[static_cast<size_t>(axis)] % t != 0)
            throw ShapeError("volume shape " + shape_str({spatial[0], spatial[1], spatial[2]}) +
                             " not divisible by compression.t=" + std::to_string(t));
}

Codebook Codebook::init_random(int64_t K, int64_t n_z, Rng& rng, double stddev) {
    Codebook cb;
    cb.entries = Tensor::randn({K, n_z}, rng, stddev);
    return cb;
}

QuantizationResult quantize(const Tensor& z_hat, const Codebook& codebook) {
    const int64_t K  = codebook.size();
    const int64_t nz = codebook.dim();
    if (K < 1)
        throw ConfigError("quantize: empty codebook");
    if (z_hat.dim(3) != nz)
        throw ShapeError("quantize: latent channels " + std::to_string(z_hat.dim(3)) +
                         " vs codebook dim " + std::to_string(nz));

    QuantizationResult out;
    out.z_q = Tensor(z_hat.shape());
    const int64_t sites = z_hat.numel() / nz;
    out.indices.resize(static_cast<size_t>(sites));

    const double* zp = z_hat.data();
    const double* cp = codebook.entries.data();
    double cb_term   = 0.0;
    for (int64_t s = 0; s < sites; ++s) {
        const double* zs = zp + s * nz;
        int64_t best  = 0;
        double best_d = 1e300;
        for (int64_t k = 0; k < K; ++k) {
            const double* ck = cp + k * nz;
            double d         = 0.0;
            for (int64_t c = 0; c < nz; ++c) {
                const double diff = zs[c] - ck[c];
                d += diff * diff;
            }
            if (d < best_d) {  // strict '<' keeps the lowest index on ties
                best_d = d;
                best   = k;
            }
        }
        out.indices[static_cast<size_t>(s)] = static_cast<int32_t>(best);
        const double* ck = cp + best * nz;
        for (int64_t c = 0; c < nz; ++c)
            out.z_q[s * nz + c] = ck[c];
        cb_term += best_d;
    }
    out.codebook_term   = cb_term;
    out.commitment_term = cb_term;  // same value, different gradient routing
    return out;
}

QuantizedVars quantize_tape(const Var& z_hat, const Var& codebook_entries) {
    Codebook cb;
    cb.entries           = codebook_entries->value;
    QuantizationResult q = quantize(z_hat->value, cb);

    QuantizedVars out;
    out.indices = q.indices;
    out.z_st    = straight_through(z_hat, q.z_q);
    // ||sg[z_hat] - z_q||^2: gradient reaches only the codebook rows.
    Var zq_rows       = gather_rows(codebook_entries, q.indices, z_hat->value.shape());
    out.codebook_term = sum_sq(sub(make_const(z_hat->value), zq_rows));
    // ||sg[z_q] - z_hat||^2: gradient reaches only the encoder output.
    out.commitment_term = sum_sq(sub(make_const(q.z_q), z_hat));
    return out;
}

Var vq_loss(const Var& x, const Var& x_hat, const QuantizedVars& q) {
    check_same_shape(x->value, x_hat->value, "vq_loss");
    return add(add(sum_sq(sub(x, x_hat)), q.codebook_term), q.commitment_term);
}

double adaptive_lambda(double grad_rec_norm, double grad_gan_norm) {
    if (grad_rec_norm < 0.0 || grad_gan_norm < 0.0)
        throw DomainError("adaptive_lambda: gradient norms must be non-negative");
    const double lambda = grad_rec_norm / (grad_gan_norm + kAdaptiveLambdaDelta);
    return std::clamp(lambda, 0.0, kAdaptiveLambdaClamp);
}

// ---------------- perceptual net ----------------

PerceptualNet PerceptualNet::fixed_random(int64_t cin, int64_t width, uint64_t seed) {
    PerceptualNet net;
    Rng rng(seed);
    net.layers.emplace_back("phi.c0", cin, width, std::array<int64_t, 3>{3, 3, 1});
    net.layers.emplace_back("phi.c1", width, width, std::array<int64_t, 3>{3, 3, 1});
    for (const auto& l : net.layers)
        l.init(net.params, rng);
    return net;
}

PerceptualNet PerceptualNet::identity(int64_t cin) {
    PerceptualNet net;
    net.layers.emplace_back("phi.c0", cin, cin, std::array<int64_t, 3>{1, 1, 1});
    Tensor w({1, 1, 1, cin, cin});
    for (int64_t c = 0; c < cin; ++c)
        w[c * cin + c] = 1.0;
    net.params["phi.c0.w"] = std::move(w);
    net.params["phi.c0.b"] = Tensor({cin});
    return net;
}

std::vector<Var> PerceptualNet::features(const Var& x) const {
    ParamMap pm = wrap_params(params, false);
    std::vector<Var> feats;
    Var h = x;
    for (size_t l = 0; l < layers.size(); ++l) {
        Var a = layers[l](pm, h);
        feats.push_back(a);
        h = silu(a);
    }
    return feats;
}

Var PerceptualNet::loss(const Var& x, const Var& x_hat) const {
    check_same_shape(x->value, x_hat->value, "perceptual_loss");
    auto fx  = features(x);
    auto fxh = features(x_hat);
    Var total;
    for (size_t l = 0; l < fx.size(); ++l) {
        Var term = sum_sq(sub(fx[l], fxh[l]));
        total    = total ? add(total, term) : term;
    }
    return total;
}

// ---------------- network ----------------

VqGan::VqGan(const CompressionConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const auto strides = cfg_.stage_strides();
    const int64_t B    = cfg_.base_channels;

    enc_widths_ = {B};
    for (size_t i = 0; i < strides.size(); ++i)
        enc_widths_.push_back(std::min(enc_widths_.back() * 2, 4 * B));

    using A3 = std::array<int64_t, 3>;
    const A3 k3{3, 3, 3};

    enc_layers_.emplace_back("enc.stem", cfg_.in_channels, B, k3);
    for (size_t i = 0; i < strides.size(); ++i) {
        const int64_t s = strides[i];
        enc_layers_.emplace_back("enc.res" + std::to_string(i) + ".conv", enc_widths_[i],
                                 enc_widths_[i], k3);
        enc_layers_.emplace_back("enc.down" + std::to_string(i), enc_widths_[i],
                                 enc_widths_[i + 1], k3, A3{s, s, s});
    }
    const int64_t top = enc_widths_.back();
    enc_layers_.emplace_back("enc.res_out.conv", top, top, k3);
    enc_layers_.emplace_back("enc.out", top, cfg_.n_z, k3);

    dec_layers_.emplace_back("dec.stem", cfg_.n_z, top, k3);
    dec_layers_.emplace_back("dec.res_in.conv", top, top, k3);
    for (size_t i = strides.size(); i-- > 0;) {
        dec_layers_.emplace_back("dec.up" + std::to_string(i), enc_widths_[i + 1], enc_widths_[i],
                                 k3);
        dec_layers_.emplace_back("dec.res" + std::to_string(i) + ".conv", enc_widths_[i],
                                 enc_widths_[i], k3);
    }
    dec_layers_.emplace_back("dec.head", B, cfg_.in_channels, k3);

    const A3 s2{2, 2, 2};
    d3d_layers_.emplace_back("d3d.c0", cfg_.in_channels, 8, k3, s2);
    d3d_layers_.emplace_back("d3d.c1", 8, 16, k3, s2);
    d3d_layers_.emplace_back("d3d.c2", 16, 32, k3, s2);
    d3d_layers_.emplace_back("d3d.out", 32, 1, k3, A3{1, 1, 1}, nn::Init::Zero);

    const A3 k2{3, 3, 1};
    const A3 s2d{2, 2, 1};
    d2d_layers_.emplace_back("d2d.c0", cfg_.in_channels, 8, k2, s2d);
    d2d_layers_.emplace_back("d2d.c1", 8, 16, k2, s2d);
    d2d_layers_.emplace_back("d2d.c2", 16, 32, k2, s2d);
    d2d_layers_.emplace_back("d2d.out", 32, 1, k2, A3{1, 1, 1}, nn::Init::Zero);

    for (const auto& group : {enc_layers_, dec_layers_, d3d_layers_, d2d_layers_})
        for (const auto& layer : group)
            layer.init(params_, rng);

    Rng cb_rng  = rng.substream("codebook");
    Codebook cb = Codebook::init_random(cfg_.K, cfg_.n_z, cb_rng);
    params_["codebook"] = cb.entries;

    phi_ = PerceptualNet::fixed_random(cfg_.in_channels, 8, rng.substream("phi").next_u64());
    for (const auto& [name, tensor] : phi_.params)
        params_[name] = tensor;
}

Codebook VqGan::codebook() const {
    Codebook cb;
    cb.entries = nn::param(params_, "codebook");
    return cb;
}

void VqGan::set_codebook(const Codebook& cb) { params_["codebook"] = cb.entries; }

bool VqGan::is_generator_param(const std::string& name) {
    return name.rfind("enc.", 0) == 0 || name.rfind("dec.", 0) == 0 || name == "codebook";
}

bool VqGan::is_discriminator_param(const std::string& name) {
    return name.rfind("d2d.", 0) == 0 || name.rfind("d3d.", 0) == 0;
}

Var VqGan::resblock(const ParamMap& pm, const Var& x, const std::string& name) const {
    const nn::Conv3d* conv = nullptr;
    for (const auto& group : {&enc_layers_, &dec_layers_})
        for (const auto& layer : *group)
            if (layer.name == name)
                conv = &layer;
    if (!conv)
        throw ConfigError("unknown resblock " + name);
    return add(x, (*conv)(pm, silu(group_norm(x, cfg_.num_groups))));
}

Var VqGan::encode(const ParamMap& pm, const Var& x) const {
    const auto& xs = x->value.shape();
    if (xs.size() != 4 || xs[3] != cfg_.in_channels)
        throw ShapeError("encode: expected (H, W, L, " + std::to_string(cfg_.in_channels) +
                         "), got " + shape_str(xs));
    cfg_.check_divisible({xs[0], xs[1], xs[2]});

    const auto strides = cfg_.stage_strides();
    size_t li          = 0;
    Var h              = enc_layers_[li++](pm, x);  // stem
    for (size_t i = 0; i < strides.size(); ++i) {
        h = resblock(pm, h, "enc.res" + std::to_string(i) + ".conv");
        ++li;
        h = enc_layers_[li++](pm, h);  // down
    }
    h = resblock(pm, h, "enc.res_out.conv");
    ++li;
    h = silu(group_norm(h, cfg_.num_groups));
    return enc_layers_[li](pm, h);  // out projection to n_z
}

Var VqGan::decode(const ParamMap& pm, const Var& z_q) const {
    const auto& zs = z_q->value.shape();
    if (zs.size() != 4 || zs[3] != cfg_.n_z)
        throw ShapeError("decode: expected latent with n_z=" + std::to_string(cfg_.n_z) +
                         " channels, got " + shape_str(zs));

    const auto strides = cfg_.stage_strides();
    size_t li          = 0;
    Var h              = dec_layers_[li++](pm, z_q);  // stem
    h                  = resblock(pm, h, "dec.res_in.conv");
    ++li;
    for (size_t i = strides.size(); i-- > 0;) {
        const int64_t s = strides[i];
        h               = upsample_nearest(h, {s, s, s});
        h               = dec_layers_[li++](pm, h);  // up conv
        h               = resblock(pm, h, "dec.res" + std::to_string(i) + ".conv");
        ++li;
    }
    h = silu(group_norm(h, cfg_.num_groups));
    return dec_layers_[li](pm, h);  // head (G^L)
}

Tensor VqGan::encode(const Tensor& x) const {
    ParamMap pm = wrap_params(params_, false);
    return encode(pm, make_const(x))->value;
}

Tensor VqGan::decode(const Tensor& z_q) const {
    ParamMap pm = wrap_params(params_, false);
    return decode(pm, make_const(z_q))->value;
}

namespace {

Var disc_stack(const std::vector<nn::Conv3d>& layers, const ParamMap& pm, const Var& x) {
    Var h = x;
    for (size_t i = 0; i < layers.size(); ++i) {
        h = layers[i](pm, h);
        if (i + 1 < layers.size())
            h = silu(h);
    }
    return mean(h);  // patch logits averaged to one logit
}

}  // namespace

Var VqGan::disc3d_logit(const ParamMap& pm, const Var& x) const {
    return disc_stack(d3d_layers_, pm, x);
}

Var VqGan::disc2d_logit(const ParamMap& pm, const Var& slice) const {
    return disc_stack(d2d_layers_, pm, slice);
}

namespace {

// log D = -softplus(-logit), log(1 - D) = -softplus(logit).
AdversarialPair gan_pair_from_logits(const Var& logit_real, const Var& logit_fake) {
    AdversarialPair pair;
    pair.discriminator_term =
        neg(add(softplus(neg(logit_real)), softplus(logit_fake)));
    pair.generator_term = softplus(neg(logit_fake));
    return pair;
}

AdversarialPair mean_pairs(const std::vector<AdversarialPair>& pairs) {
    Var g, d;
    for (const auto& p : pairs) {
        g = g ? add(g, p.generator_term) : p.generator_term;
        d = d ? add(d, p.discriminator_term) : p.discriminator_term;
    }
    const double inv = 1.0 / static_cast<double>(pairs.size());
    return {scale(g, inv), scale(d, inv)};
}

}  // namespace

AdversarialLosses adversarial_losses(const VqGan& net, const ParamMap& pm, const Var& x,
                                     const Var& x_hat, int64_t num_slices, Rng& slice_rng) {
    check_same_shape(x->value, x_hat->value, "adversarial_losses");
    AdversarialLosses out;

    out.d3d = gan_pair_from_logits(net.disc3d_logit(pm, x), net.disc3d_logit(pm, x_hat));

    const int64_t L = x->value.dim(2);
    std::vector<AdversarialPair> slice_pairs;
    for (int64_t i = 0; i < num_slices; ++i) {
        const int64_t l = slice_rng.uniform_int(0, L - 1);
        out.slice_ids.push_back(l);
        slice_pairs.push_back(gan_pair_from_logits(
            net.disc2d_logit(pm, extract_slice(x, l)),
            net.disc2d_logit(pm, extract_slice(x_hat, l))));
    }
    out.d2d = mean_pairs(slice_pairs);
    return out;
}

// ---------------- trainer ----------------

std::string step_report_header() {
    return "step,L_rec,L_codebook,L_commit,L_perc,L_G,L_D2D,L_D3D,lambda";
}

std::string to_csv(const StepReport& r) {
    std::ostringstream os;
    os.precision(10);
    os << r.step << "," << r.l_rec << "," << r.l_codebook << "," << r.l_commit << "," << r.l_perc
       << "," << r.l_g << "," << r.l_d2d << "," << r.l_d3d << "," << r.lambda;
    return os.str();
}

VqGanTrainer::VqGanTrainer(VqGan net, VqGanTrainConfig cfg, uint64_t seed)
    : net_(std::move(net)),
      cfg_(cfg),
      opt_g_(cfg.lr, cfg.beta1, cfg.beta2),
      opt_d_(cfg.lr, cfg.beta1, cfg.beta2),
      slice_rng_(Rng(seed).substream("vqgan.slices")),
      usage_(static_cast<size_t>(net_.config().K), 0) {}

namespace {

ParamMap wrap_selective(const ParamStore& store, bool (*pred)(const std::string&)) {
    ParamMap pm;
    for (const auto& [name, tensor] : store)
        pm.emplace(name, make_var(tensor, pred(name)));
    return pm;
}

}  // namespace

StepReport VqGanTrainer::step(const std::vector<Tensor>& batch) {
    if (batch.empty())
        throw DataError("vqgan_train_step: empty batch");
    const double inv_batch = 1.0 / static_cast<double>(batch.size());
    StepReport report;
    report.step = step_count_;

    const bool use_gan = cfg_.adv_weight != 0.0;

    // Discriminator ascent on detached reconstructions.
    if (use_gan) {
        ParamMap pm = wrap_selective(net_.params(), &VqGan::is_discriminator_param);
        Var d_loss;
        Rng slice_rng_d = slice_rng_;  // same slice draws as the generator pass
        for (const auto& x : batch) {
            Tensor z_hat = net_.encode(x);
            QuantizationResult q = quantize(z_hat, net_.codebook());
            Tensor x_rec = net_.decode(q.z_q);
            auto adv = adversarial_losses(net_, pm, make_const(x), make_const(x_rec),
                                          cfg_.disc_slices, slice_rng_d);
            Var both = add(adv.d2d.discriminator_term, adv.d3d.discriminator_term);
            d_loss   = d_loss ? add(d_loss, both) : both;
            report.l_d2d += adv.d2d.discriminator_term->value[0] * inv_batch;
            report.l_d3d += adv.d3d.discriminator_term->value[0] * inv_batch;
        }
        // Ascend log D(x) + log(1 - D(x_hat)) == descend its negation.
        Var d_obj = scale(d_loss, -inv_batch);
        backward(d_obj);
        opt_d_.step(net_.params(), pm);
    }

    // Generator / codebook descent.
    ParamMap pm = wrap_selective(net_.params(), &VqGan::is_generator_param);
    for (const auto& [name, tensor] : net_.perceptual().params)
        pm[name] = make_var(tensor, false);

    Var l_rec, l_cb, l_commit, l_perc, l_gen;
    for (const auto& x_t : batch) {
        Var x     = make_const(x_t);
        Var z_hat = net_.encode(pm, x);
        QuantizedVars q = quantize_tape(z_hat, nn::param(pm, "codebook"));
        for (int32_t idx : q.indices)
            ++usage_[static_cast<size_t>(idx)];
        Var x_hat = net_.decode(pm, q.z_st);

        Var rec = sum_sq(sub(x, x_hat));
        l_rec    = l_rec ? add(l_rec, rec) : rec;
        l_cb     = l_cb ? add(l_cb, q.codebook_term) : q.codebook_term;
        l_commit = l_commit ? add(l_commit, q.commitment_term) : q.commitment_term;

        Var perc = net_.perceptual().loss(x, x_hat);
        l_perc   = l_perc ? add(l_perc, perc) : perc;

        if (use_gan) {
            auto adv = adversarial_losses(net_, pm, x, x_hat, cfg_.disc_slices, slice_rng_);
            Var gen  = scale(add(adv.d2d.generator_term, adv.d3d.generator_term), 0.5);
            l_gen    = l_gen ? add(l_gen, gen) : gen;
        }
    }
    l_rec    = scale(l_rec, inv_batch);
    l_cb     = scale(l_cb, inv_batch);
    l_commit = scale(l_commit, inv_batch);
    l_perc   = scale(l_perc, inv_batch);
    if (use_gan)
        l_gen = scale(l_gen, inv_batch);

    report.l_rec      = l_rec->value[0];
    report.l_codebook = l_cb->value[0];
    report.l_commit   = l_commit->value[0];
    report.l_perc     = l_perc->value[0];
    report.l_g        = use_gan ? l_gen->value[0] : 0.0;

    // lambda from gradient norms at the decoder's last layer.
    double lambda = 0.0;
    if (use_gan) {
        const std::vector<Var> head{nn::param(pm, "dec.head.w"), nn::param(pm, "dec.head.b")};
        backward_partial(l_rec, head);
        double rec_sq = 0.0;
        for (const auto& v : head)
            if (v->grad.defined())
                rec_sq += dot(v->grad, v->grad);
        zero_grads(l_rec);

        backward_partial(l_gen, head);
        double gan_sq = 0.0;
        for (const auto& v : head)
            if (v->grad.defined())
                gan_sq += dot(v->grad, v->grad);
        zero_grads(l_gen);

        lambda = adaptive_lambda(std::sqrt(rec_sq), std::sqrt(gan_sq));
    }
    report.lambda = lambda;

    Var total = add(add(l_rec, l_cb), l_commit);
    if (cfg_.perceptual_weight != 0.0)
        total = add(total, scale(l_perc, cfg_.perceptual_weight));
    if (use_gan)
        total = add(total, scale(l_gen, cfg_.adv_weight * lambda));

    if (!std::isfinite(total->value[0]))
        throw DivergenceError("vqgan training diverged at step " + std::to_string(step_count_));

    backward(total);
    opt_g_.step(net_.params(), pm);

    ++step_count_;
    return report;
}

}  // namespace medlsdm
