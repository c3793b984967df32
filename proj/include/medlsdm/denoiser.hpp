#ifndef MEDLSDM_DENOISER_HPP
#define MEDLSDM_DENOISER_HPP

#include <map>
#include <string>
#include <vector>

#include "medlsdm/nn.hpp"

namespace medlsdm {

struct DenoiserConfig {
    std::vector<int64_t> widths = {16, 32};  // channels per resolution level
    int64_t num_groups          = 8;
    int64_t time_dim            = 32;
    int64_t sem_width           = 8;   // semantic feature channels
    int64_t num_classes         = 3;
    int64_t latent_channels     = 4;   // n_z
    int64_t compression_t       = 2;   // volume -> latent downsampling of the map encoder
    // Levels carrying spatial + cross-slice attention; defaults to the two
    // lowest-resolution levels.
    std::vector<int64_t> attention_levels;

    int64_t num_levels() const { return static_cast<int64_t>(widths.size()); }
    std::vector<int64_t> effective_attention_levels() const;
    void validate() const;
};

// Deterministic sinusoidal embedding; entries in [-1, 1].
Tensor time_embed(int64_t t, int64_t dim);

// The SPADE-conditioned denoising U-Net eps_theta(z_t, t, m). The encoder
// path sees the noisy latent with time conditioning only; semantic features
// enter through SPADE at every decoder resblock.
class Denoiser {
public:
    Denoiser(DenoiserConfig cfg, uint64_t seed);

    const DenoiserConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    Var predict_noise(const ParamMap& pm, const Var& z_t, int64_t t, const Var& m_onehot) const;
    Tensor predict_noise(const Tensor& z_t, int64_t t, const Tensor& m_onehot) const;

    // Feature pyramid from the semantic map encoder, one entry per level
    // (level 0 at latent resolution).
    std::vector<Var> semantic_encode(const ParamMap& pm, const Var& m_onehot) const;

    // Building blocks, exposed with explicit parameter prefixes.
    Var encoder_resblock(const ParamMap& pm, const Var& f, const Var& t_emb,
                         const std::string& prefix) const;
    Var spade_modulate(const ParamMap& pm, const Var& f, const Var& sem,
                       const std::string& prefix) const;
    Var spade_resblock(const ParamMap& pm, const Var& f, const Var& sem,
                       const std::string& prefix) const;
    Var attention_block(const ParamMap& pm, const Var& f, const std::string& prefix,
                        AttentionMode mode, std::vector<Tensor>* weights_out = nullptr) const;

    // Zeroes the SPADE gamma/beta nets of every decoder block, reducing each
    // modulation to plain group norm (test hook for the identity property).
    void force_spade_identity();

private:
    void add_conv(const std::string& name, int64_t cin, int64_t cout, std::array<int64_t, 3> k,
                  std::array<int64_t, 3> s = {1, 1, 1}, nn::Init init = nn::Init::HeNormal);
    void add_linear(const std::string& name, int64_t din, int64_t dout,
                    nn::Init init = nn::Init::HeNormal);
    const nn::Conv3d& conv(const std::string& name) const;
    const nn::Linear& lin(const std::string& name) const;
    bool has_attention(int64_t level) const;

    DenoiserConfig cfg_;
    ParamStore params_;
    std::map<std::string, nn::Conv3d> convs_;
    std::map<std::string, nn::Linear> linears_;
};

}  // namespace medlsdm

#endif
