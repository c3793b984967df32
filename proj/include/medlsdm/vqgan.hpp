#ifndef MEDLSDM_VQGAN_HPP
#define MEDLSDM_VQGAN_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "medlsdm/nn.hpp"
#include "medlsdm/volume.hpp"

namespace medlsdm {

struct CompressionConfig {
    int64_t t             = 4;      // spatial compression factor
    int64_t n_z           = 8;      // latent channels
    int64_t K             = 16384;  // codebook entries
    int64_t base_channels = 16;
    int64_t num_groups    = 8;
    int64_t in_channels   = 1;

    // t decomposed into per-stage strides (2s first, then any odd leftover).
    std::vector<int64_t> stage_strides() const;
    void validate() const;
    void check_divisible(std::array<int64_t, 3> spatial) const;
};

struct Codebook {
    Tensor entries;  // (K, n_z)

    int64_t size() const { return entries.dim(0); }
    int64_t dim() const { return entries.dim(1); }
    static Codebook init_random(int64_t K, int64_t n_z, Rng& rng, double stddev = 0.5);
};

// Plain-value quantization: per-site nearest codebook row (L2, lowest index
// wins ties). Both stop-gradient terms of the VQ objective share the same
// numeric value; they differ only in gradient routing.
struct QuantizationResult {
    Tensor z_q;
    std::vector<int32_t> indices;
    double codebook_term   = 0.0;
    double commitment_term = 0.0;
};
QuantizationResult quantize(const Tensor& z_hat, const Codebook& codebook);

// Tape variant. z_st carries z_q on the value path and the straight-through
// identity on the gradient path; codebook_term routes gradients into the
// codebook rows, commitment_term into the encoder output.
struct QuantizedVars {
    Var z_st;
    Var codebook_term;
    Var commitment_term;
    std::vector<int32_t> indices;
};
QuantizedVars quantize_tape(const Var& z_hat, const Var& codebook_entries);

// ||x - x_hat||^2 + codebook_term + commitment_term (sums, as written).
Var vq_loss(const Var& x, const Var& x_hat, const QuantizedVars& q);

// lambda = rec_norm / (gan_norm + 1e-6), clamped to [0, 1e4].
double adaptive_lambda(double grad_rec_norm, double grad_gan_norm);
inline constexpr double kAdaptiveLambdaDelta = 1e-6;
inline constexpr double kAdaptiveLambdaClamp = 1e4;

// Fixed feature stack for the perceptual loss; (kh, kw, 1) kernels make
// every layer act independently per depth slice. Weights are never trained.
struct PerceptualNet {
    std::vector<nn::Conv3d> layers;
    ParamStore params;

    static PerceptualNet fixed_random(int64_t cin, int64_t width, uint64_t seed);
    static PerceptualNet identity(int64_t cin);

    // Per-layer feature maps (pre-activation conv outputs).
    std::vector<Var> features(const Var& x) const;
    Var loss(const Var& x, const Var& x_hat) const;  // sum over layers and slices
};

class VqGan {
public:
    VqGan(const CompressionConfig& cfg, uint64_t seed);

    const CompressionConfig& config() const { return cfg_; }

    Var encode(const ParamMap& pm, const Var& x) const;
    Var decode(const ParamMap& pm, const Var& z_q) const;
    Tensor encode(const Tensor& x) const;
    Tensor decode(const Tensor& z_q) const;

    Var disc3d_logit(const ParamMap& pm, const Var& x) const;
    Var disc2d_logit(const ParamMap& pm, const Var& slice) const;

    Codebook codebook() const;
    void set_codebook(const Codebook& cb);

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const PerceptualNet& perceptual() const { return phi_; }
    PerceptualNet& perceptual() { return phi_; }

    // Parameter-name predicates for the alternating update.
    static bool is_generator_param(const std::string& name);     // enc./dec./codebook
    static bool is_discriminator_param(const std::string& name); // d2d./d3d.

    int64_t latent_channels() const { return cfg_.n_z; }

private:
    Var resblock(const ParamMap& pm, const Var& x, const std::string& name) const;

    CompressionConfig cfg_;
    ParamStore params_;
    PerceptualNet phi_;
    std::vector<int64_t> enc_widths_;  // per stage, length = stages + 1
    std::vector<nn::Conv3d> enc_layers_, dec_layers_, d3d_layers_, d2d_layers_;
};

struct AdversarialPair {
    Var generator_term;      // -log D(x_hat), descended by the autoencoder
    Var discriminator_term;  // log D(x) + log(1 - D(x_hat)), ascended by D
};

struct AdversarialLosses {
    AdversarialPair d2d;
    AdversarialPair d3d;
    std::vector<int64_t> slice_ids;  // depth slices shown to the 2D critic
};

// x and x_hat full volumes; the 2D critic sees num_slices seeded random
// depth slices of each.
AdversarialLosses adversarial_losses(const VqGan& net, const ParamMap& pm, const Var& x,
                                     const Var& x_hat, int64_t num_slices, Rng& slice_rng);

struct VqGanTrainConfig {
    double lr                = 3e-4;
    double beta1             = 0.9;
    double beta2             = 0.999;
    double perceptual_weight = 1.0;  // alpha
    double adv_weight        = 1.0;  // multiplies lambda; 0 disables the GAN path
    int64_t disc_slices      = 2;
};

struct StepReport {
    int64_t step = 0;
    double l_rec = 0, l_codebook = 0, l_commit = 0, l_perc = 0;
    double l_g = 0, l_d2d = 0, l_d3d = 0;
    double lambda = 0;
};

std::string step_report_header();
std::string to_csv(const StepReport& r);

class VqGanTrainer {
public:
    VqGanTrainer(VqGan net, VqGanTrainConfig cfg, uint64_t seed);

    // One alternating update on a batch of preprocessed volumes.
    StepReport step(const std::vector<Tensor>& batch);

    VqGan& net() { return net_; }
    const VqGan& net() const { return net_; }
    const VqGanTrainConfig& config() const { return cfg_; }
    int64_t steps_done() const { return step_count_; }
    Adam& generator_optimizer() { return opt_g_; }
    Adam& discriminator_optimizer() { return opt_d_; }
    const std::vector<int64_t>& codebook_usage() const { return usage_; }

private:
    VqGan net_;
    VqGanTrainConfig cfg_;
    Adam opt_g_, opt_d_;
    Rng slice_rng_;
    int64_t step_count_ = 0;
    std::vector<int64_t> usage_;
};

}  // namespace medlsdm

#endif
