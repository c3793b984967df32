#ifndef MEDLSDM_LATENT_SPACE_HPP
#define MEDLSDM_LATENT_SPACE_HPP

#include "medlsdm/tensor.hpp"
#include "medlsdm/vqgan.hpp"

namespace medlsdm {

// Global scalar feature range derived from the codebook; the bridge between
// VQ-GAN latents and the diffusion model's [-1, 1] convention.
struct LatentRange {
    double lo = 0.0;
    double hi = 0.0;
};

// Global min / max over all K * n_z codebook scalars.
LatentRange codebook_range(const Codebook& codebook);

enum class MapDirection { Forward, Inverse };

// Forward: z -> 2 * (clip(z, lo, hi) - lo) / (hi - lo) - 1.
// Inverse: exact affine inverse; input expected within [-1, 1].
Tensor minmax_map(const Tensor& z, const LatentRange& range, MapDirection direction);
double minmax_map_scalar(double z, const LatentRange& range, MapDirection direction);

}  // namespace medlsdm

#endif
